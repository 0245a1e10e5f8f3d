#pragma once

#include <Eigen/Dense>
#include <string>
#include <string_view>
#include <vector>

#include "cqlearn/errors.hpp"

// In-memory representation of a K-stage clustered SMART dataset plus the
// per-stage Q-model column assignments, with CSV ingestion/round-trip and
// design-matrix construction.
//
// Conventions:
//  - covariates are cluster-level; each individual row of a cluster repeats
//    the cluster's values, so a CSV carries one row per individual;
//  - treatments are coded -1/+1, with a tri-state ABSENT for clusters not
//    randomized at a stage (restricted designs);
//  - clusters are canonically ordered by id so downstream randomness depends
//    only on seeds, never on file row order.

namespace cqlearn {

enum class AbsentReason { responder_excluded, design_excluded };

struct StageTreatment {
  bool assigned = false;
  int value = 0;  // -1 or +1 when assigned
  AbsentReason reason = AbsentReason::responder_excluded;

  static StageTreatment present(int v) {
    StageTreatment t;
    t.assigned = true;
    t.value = v;
    return t;
  }
  static StageTreatment absent(AbsentReason r = AbsentReason::responder_excluded) {
    StageTreatment t;
    t.reason = r;
    return t;
  }
};

struct ClusterRecord {
  std::string cluster_id;
  std::vector<double> covariates;           // aligned with ClusteredDataset::covariate_names
  std::vector<StageTreatment> treatments;   // one per stage
  std::vector<double> outcomes;             // one per individual, length n_i

  int size() const { return static_cast<int>(outcomes.size()); }
};

struct ClusteredDataset {
  std::vector<std::string> covariate_names;  // sorted, unique
  std::vector<std::string> treatment_names;  // length K, e.g. {"a1","a2"}
  std::string outcome_name = "y";
  std::string id_name = "cluster_id";
  std::vector<ClusterRecord> clusters;       // sorted by cluster_id

  int n_stages() const { return static_cast<int>(treatment_names.size()); }
  int n_clusters() const { return static_cast<int>(clusters.size()); }
  long n_individuals() const;
  int stage_count(int k) const;  // N_k = #clusters with treatments[k-1] assigned
  int covariate_index(std::string_view name) const;  // -1 if unknown
  // treatment stage (1-based) whose column is `name`, or 0 if none
  int treatment_stage(std::string_view name) const;

  // Throws integrity/domain errors on invariant violations.
  void validate() const;
};

// Columns entering the stage-k Q-function. The tailoring block H_{k1}
// always carries an implicit leading intercept, so the design is
//   [ H_{k0} | 1, H_{k1} | A_k * (1, H_{k1}) ]
// and the first entry of Psi_k is the main treatment effect.
struct StageModelSpec {
  int stage = 1;  // 1-based
  std::vector<std::string> main_effect_columns;  // H_{k0}
  std::vector<std::string> tailoring_columns;    // H_{k1} minus the implicit intercept
};

struct ColumnManifest {
  std::string cluster_id_column = "cluster_id";
  std::string outcome_column = "y";
  std::vector<std::string> treatment_columns;  // defaults to a1..aK
};

struct ModelSpec {
  std::vector<StageModelSpec> stages;
  ColumnManifest manifest;

  int n_stages() const { return static_cast<int>(stages.size()); }
};

ModelSpec parse_model_spec_json(const std::string& text);
ModelSpec load_model_spec(const std::string& path);

// One row per individual; required columns: cluster id, outcome, one
// treatment column per stage (empty field or "NA" encodes ABSENT). All
// remaining columns are cluster-level covariates.
ClusteredDataset load_csv(const std::string& path, const ModelSpec& spec);
ClusteredDataset parse_csv(const std::string& text, const ModelSpec& spec);
void write_csv(const ClusteredDataset& ds, const std::string& path);
std::string to_csv(const ClusteredDataset& ds);

bool datasets_equal(const ClusteredDataset& a, const ClusteredDataset& b);

// Column layout of a stage design.
struct StageLayout {
  int n_main = 0;    // |H_{k0}|
  int n_tailor = 0;  // |H_{k1}| including the intercept
  std::vector<std::string> labels;  // per design column

  int n_params() const { return n_main + 2 * n_tailor; }
  int psi_offset() const { return n_main + n_tailor; }
};

StageLayout stage_layout(const ClusteredDataset& ds, const StageModelSpec& spec);

// Value of `name` for a cluster at stage k: a covariate, or an
// earlier-stage treatment referenced by its column name.
double resolve_column(const ClusteredDataset& ds, const ClusterRecord& rec,
                      const std::string& name, int stage);

Eigen::VectorXd main_effect_values(const ClusteredDataset& ds, const ClusterRecord& rec,
                                   const StageModelSpec& spec);
// (1, tailoring columns...) of length n_tailor
Eigen::VectorXd tailoring_values(const ClusteredDataset& ds, const ClusterRecord& rec,
                                 const StageModelSpec& spec);

struct DesignBlock {
  Eigen::MatrixXd X;  // n_i x p, columns [H_{k0} | H_{k1} | A_k*H_{k1}]
  Eigen::VectorXd y;  // observed outcomes
  bool included = false;
};

// Per-cluster design blocks for stage k. Excluded clusters (ABSENT
// treatment) get included=false and an empty X. Throws
// insufficient_data_error when no cluster is included.
std::vector<DesignBlock> design_matrices(const ClusteredDataset& ds,
                                         const StageModelSpec& spec, int k);

}  // namespace cqlearn
