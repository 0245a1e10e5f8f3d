#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cqlearn/data_model.hpp"
#include "cqlearn/mn_bootstrap.hpp"

// Generative model for two-stage clustered SMART data with controllable ICC,
// effect sizes and degree of non-regularity; an exact enumeration oracle for
// the true stage-1 parameters; and a Monte Carlo experiment runner computing
// bias, SE, MSE, coverage and CI length.
//
// Generative mechanism (one draw per cluster unless noted):
//   X1 ~ +-1 equiprobable,  A1 ~ +-1 equiprobable,
//   X2 ~ +-1 with Pr(X2 = 1) = logistic(d0 + d1 X1 + d2 A1),
//   A2 ~ +-1 equiprobable,
//   Y_ij = g0 + g1 X1 + g2 A1 + g3 X1 A1 + g4 X2 + g5 A2 + g6 X2 A2
//          + g7 A1 A2 + alpha_i + eps_ij,
//   alpha_i ~ N(0, rho sigma2),  eps_ij ~ N(0, (1-rho) sigma2).
// The degree of non-regularity is p = Pr{ g5 + g6 X2 + g7 A1 = 0 }.

namespace cqlearn::sim {

struct ClusterSizeLaw {
  enum class Kind { fixed, uniform_range };
  Kind kind = Kind::fixed;
  int n = 20;
  int lo = 0, hi = 0;

  static ClusterSizeLaw fixed(int n) {
    ClusterSizeLaw law;
    law.kind = Kind::fixed;
    law.n = n;
    return law;
  }
  static ClusterSizeLaw uniform(int lo, int hi) {
    ClusterSizeLaw law;
    law.kind = Kind::uniform_range;
    law.lo = lo;
    law.hi = hi;
    return law;
  }
};

struct GenerativeConfig {
  int n_clusters = 80;
  ClusterSizeLaw size_law = ClusterSizeLaw::fixed(20);
  double rho = 0.05;
  std::array<double, 8> gamma{};  // g0..g7
  std::array<double, 3> delta{};  // d0..d2
  double sigma2_total = 1.0;
  std::uint64_t seed = 0;
};

ClusteredDataset generate(const GenerativeConfig& cfg);

// The Q-model fitted in all experiments:
//   stage 2: main effects (x1, x1a1), tailoring (x2, a1)
//   stage 1: tailoring (x1)
std::vector<StageModelSpec> analysis_model();

struct StageOneTruth {
  double psi10 = 0, psi11 = 0;  // treatment main effect, X1 interaction
  double beta10 = 0, beta11 = 0;
  double p = 0;                 // exact degree of non-regularity
  double effect_size = 0;       // 2 |psi11| / sigma
};

// Exact 8-cell enumeration over (X1, A1, X2); psi/beta are the orthogonal
// projection of the optimal-stage-2 value function onto (1, X1, A1, X1 A1)
// under the equiprobable design.
StageOneTruth true_stage1_params(const GenerativeConfig& cfg);

struct Preset {
  std::string name;  // e.g. "S1-Ex1-rho05"
  int scenario = 1;
  int example = 1;
  bool regular = true;
  double effect_size_target = 0.2;
  GenerativeConfig cfg;
};

const std::vector<Preset>& scenario_presets();
const Preset* find_preset(std::string_view name);

struct ParamMetrics {
  std::string label;
  double truth = 0;
  double bias = 0;
  double se = 0;   // Monte Carlo SD of point estimates
  double mse = 0;
  double coverage = 0;
  double ci_length_mean = 0;
  double ci_length_sd = 0;
};

struct SimMetrics {
  boot::Method method{};
  int n_runs = 0;
  int n_failed = 0;
  std::vector<ParamMetrics> params;  // stage-1 Psi block: [psi10, psi11]

  const ParamMetrics& psi11() const { return params.back(); }
};

struct ExperimentRequest {
  GenerativeConfig cfg;
  std::string preset_name;  // informational
  std::vector<boot::Method> methods;
  int n_runs = 500;
  int n_boot = 1000;
  double alpha = 0.05;
  double lambda = 0.025;
  boot::EtaPolicy eta;
  std::uint64_t seed = 0;
  int parallel = 0;
  boot::CiForm ci_form = boot::CiForm::hybrid;
  bool progress = false;
};

// One SimMetrics per requested method, in request order. Deterministic under
// (seed, n_runs, n_boot) and independent of `parallel`.
std::vector<SimMetrics> run_experiment(const ExperimentRequest& req);

// CSV with one row per (preset, method); psi11 columns match the coverage /
// length / bias / se / mse summaries of the experiment tables.
std::string metrics_csv_header();
std::string metrics_csv_row(const ExperimentRequest& req, const SimMetrics& m);

// JSON echo of the resolved configuration for provenance.
std::string request_provenance_json(const ExperimentRequest& req);

}  // namespace cqlearn::sim
