#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "cqlearn/data_model.hpp"
#include "cqlearn/gls_core.hpp"

// Backward-recursive clustered Q-learning: fit stage K on the observed
// outcome, roll pseudo-outcomes backward, fit earlier stages, and expose the
// estimated optimal decision rules.

namespace cqlearn::qlearning {

struct FitPolicy {
  enum class Kind { iterated, fixed_independence, fixed_exchangeable };
  Kind kind = Kind::iterated;
  double rho = 0.0;  // fixed_exchangeable only
  // fixed_exchangeable with per-stage values (overrides `rho` when set);
  // used to freeze the original ICC estimates inside bootstrap replicates
  std::vector<double> stage_rho;
  int max_iter = 10;
  double tol = 1e-8;

  static FitPolicy iterated() { return {}; }
  static FitPolicy independence() {
    FitPolicy p;
    p.kind = Kind::fixed_independence;
    return p;
  }
  static FitPolicy exchangeable(double rho) {
    FitPolicy p;
    p.kind = Kind::fixed_exchangeable;
    p.rho = rho;
    return p;
  }
};

struct StageFit {
  int stage = 0;
  StageModelSpec spec;
  StageLayout layout;
  Eigen::VectorXd gamma_hat;  // H_{k0} coefficients
  Eigen::VectorXd beta_hat;   // H_{k1} coefficients (intercept first)
  Eigen::VectorXd psi_hat;    // treatment-interaction coefficients
  gls::GlsFit gls;

  // Psi-block of the sandwich covariance.
  Eigen::MatrixXd psi_cov() const;
};

struct QLearningResult {
  std::vector<StageFit> stage_fits;  // stage_fits[k-1] is stage k
  // pseudo_outcomes[k-1], defined for k < K: one value per individual over
  // all clusters in dataset order.
  std::vector<std::vector<double>> pseudo_outcomes;

  const StageFit& stage(int k) const { return stage_fits.at(k - 1); }
};

// Fit stage k of the Q-model on `outcome`, which carries one value per
// individual of every *included* cluster (dataset order, n_i values each).
StageFit fit_stage(const ClusteredDataset& ds, const StageModelSpec& spec,
                   std::span<const double> outcome, const FitPolicy& policy);

// Stage-k pseudo-outcome from the stage-(k+1) fit: for clusters included at
// stage k+1,
//   Ytilde = gamma' H_{k+1,0} + beta' H_{k+1,1} + | psi' H_{k+1,1} |
// (the max over a binary +-1 treatment equals the absolute value); clusters
// not re-randomized at stage k+1 keep their observed outcomes. Returns one
// value per individual over all clusters.
std::vector<double> pseudo_outcome(const StageFit& fit_next,
                                   const ClusteredDataset& ds);

QLearningResult fit_backward(const ClusteredDataset& ds,
                             const std::vector<StageModelSpec>& specs,
                             const FitPolicy& policy = {});

struct Decision {
  int treatment = +1;
  bool tie = false;
};

// sign(psi' h1); exact ties resolve to +1 with the tie flag set. `h1` is the
// full tailoring vector including the leading 1.
Decision decision_rule(const StageFit& fit, std::span<const double> h1);

// ---------------------------------------------------------------------------
// Compiled problem: per-stage sufficient statistics and tailoring pieces,
// built once per dataset so that resampled refits never touch raw rows.
// ---------------------------------------------------------------------------

struct StageDesign {
  StageModelSpec spec;
  StageLayout layout;
  std::vector<char> included;             // per cluster
  std::vector<gls::ClusterStats> stats;   // observed-outcome moments
  std::vector<Eigen::VectorXd> h0;        // per cluster, main-effect values
  std::vector<Eigen::VectorXd> h1;        // per cluster, (1, tailoring...)
  std::vector<double> a;                  // treatment value (0 when absent)
  std::vector<std::size_t> pool;          // included cluster indices
};

struct Problem {
  int n_stages = 0;
  std::vector<double> cluster_sizes;
  std::vector<StageDesign> stages;  // stages[k-1]
  long n_rows = 0;
};

Problem compile(const ClusteredDataset& ds, const std::vector<StageModelSpec>& specs);

// Lean per-stage fits over a multiset of cluster indices; used by bootstrap
// replicates. Results are ordered stage 1..K. When `want_sandwich` is false
// only point estimates and ICC moments are computed.
struct CompiledFit {
  gls::GlsFit gls;
  // cluster-constant pseudo-outcome fed into the *previous* stage's fit
  // (empty for stage 1)
  std::vector<gls::PseudoOutcome> pseudo;
};

std::vector<CompiledFit> fit_stages_compiled(const Problem& prob,
                                             std::span<const std::size_t> active,
                                             const FitPolicy& policy,
                                             bool want_sandwich);

}  // namespace cqlearn::qlearning
