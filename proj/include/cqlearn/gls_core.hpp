#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "cqlearn/errors.hpp"

// Weighted least squares with an exchangeable (or independence) working
// intra-cluster correlation, moment ICC estimation, and cluster-robust
// sandwich covariance. The exchangeable inverse is always applied through
// the Sherman-Morrison closed form
//   J^{-1} = 1/(1-rho) [ I - rho/(1-rho+n*rho) 11' ],
// never by dense inversion, so a fit touches each cluster only through its
// sufficient statistics (X'X, X'y, X'1, sum y, y'y, n). Bootstrap replicate
// refits run on those statistics directly.

namespace cqlearn::gls {

inline constexpr double kMaxRho = 0.999;
inline constexpr double kRankTol = 1e-10;  // pivot < tol * max diag => singular

struct WorkingCorrelation {
  enum class Kind { independence, exchangeable };
  Kind kind = Kind::independence;
  double rho = 0.0;  // ignored under independence

  static WorkingCorrelation independence() { return {}; }
  static WorkingCorrelation exchangeable(double rho);
  double effective_rho() const { return kind == Kind::independence ? 0.0 : rho; }
};

struct ClusterBlock {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

struct ClusterStats {
  Eigen::MatrixXd xtx;   // p x p
  Eigen::VectorXd xty;   // p
  Eigen::VectorXd xsum;  // p, X'1
  double ysum = 0.0;
  double yss = 0.0;      // y'y
  double n = 0.0;
};

ClusterStats make_stats(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);
std::vector<ClusterStats> make_stats(const std::vector<ClusterBlock>& blocks);

struct IccEstimate {
  double rho = 0.0;      // clipped to [0, kMaxRho]
  double rho_raw = 0.0;  // moment estimate before clipping
  double sigma2 = 0.0;
  bool degenerate = false;  // no cluster with n_i >= 2
};

struct GlsFit {
  Eigen::VectorXd theta_hat;
  Eigen::MatrixXd model_cov;     // sigma2_hat * (sum X' J^{-1} X)^{-1}
  Eigen::MatrixXd sandwich_cov;  // A^{-1} B A^{-1}, symmetrized
  double sigma2_hat = 0.0;
  double rho_hat = 0.0;      // post-fit moment ICC, clipped
  double rho_raw = 0.0;
  int n_clusters_used = 0;
  int n_iterations = 0;      // refits performed by iterated_gls
  bool degenerate_icc = false;
  WorkingCorrelation wc;     // weights actually used
};

// theta_hat = argmin sum_i (y_i - X_i theta)' Sigma_i^{-1} (y_i - X_i theta),
// Sigma_i = sigma2 J(rho, n_i). Also fills sigma2/rho moment estimates from
// the fit residuals and both covariances.
GlsFit solve_gls(const std::vector<ClusterBlock>& blocks, WorkingCorrelation wc);

// Moment estimator: sigma2 = sum e^2 / (sum n_i - n_params);
// rho = [sum_{j != j'} e_j e_j' / sum n_i (n_i - 1)] / sigma2, clipped.
IccEstimate estimate_icc(const std::vector<Eigen::VectorXd>& residual_blocks,
                         int n_params);

// Independence fit, then alternate (ICC re-estimate, exchangeable refit)
// until max-abs coefficient change < tol or max_iter refits.
GlsFit iterated_gls(const std::vector<ClusterBlock>& blocks, int max_iter = 10,
                    double tol = 1e-8);

// Cluster-robust covariance recomputed from blocks and a fit's residuals.
Eigen::MatrixXd sandwich_cov(const std::vector<ClusterBlock>& blocks,
                             const GlsFit& fit);

// GLS objective at theta (for minimality checks).
double objective(const std::vector<ClusterBlock>& blocks, WorkingCorrelation wc,
                 const Eigen::VectorXd& theta);

// ---------------------------------------------------------------------------
// Sufficient-statistic engine (hot path for bootstrap replicates).
// `active` is a multiset of cluster indices (duplicates are distinct
// resampled units). When `pseudo` is non-null it supplies, per original
// cluster index, either "use the observed outcome moments" or a
// cluster-constant outcome value t (pseudo-outcomes are cluster-constant
// when all covariates are cluster-level).
// ---------------------------------------------------------------------------

struct PseudoOutcome {
  bool use_observed = true;
  double value = 0.0;
};

struct FitRequest {
  WorkingCorrelation wc;
  bool want_sandwich = true;
  bool want_model_cov = true;
};

GlsFit fit_stats(std::span<const ClusterStats> stats,
                 std::span<const std::size_t> active,
                 const PseudoOutcome* pseudo,  // nullable, indexed like stats
                 const FitRequest& req);

GlsFit iterated_fit_stats(std::span<const ClusterStats> stats,
                          std::span<const std::size_t> active,
                          const PseudoOutcome* pseudo, int max_iter, double tol,
                          bool want_sandwich);

// Solve A theta = b for a symmetric PSD normal-equations matrix with the
// library's rank guard (throws singular_design_error with the column).
Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& A,
                                       const Eigen::VectorXd& b);

}  // namespace cqlearn::gls
