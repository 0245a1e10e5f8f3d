#include "cqlearn/gls_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cqlearn::gls {

namespace {

// Unpivoted LDL^T for the (symmetric PSD) normal-equations matrix. A pivot
// below kRankTol * max(diag A) raises singular_design_error carrying the
// offending column.
class Ldlt {
 public:
  void factor(const Eigen::MatrixXd& A) {
    const int p = static_cast<int>(A.rows());
    L_ = Eigen::MatrixXd::Identity(p, p);
    d_ = Eigen::VectorXd::Zero(p);
    const double max_diag = A.diagonal().maxCoeff();
    const double tol = kRankTol * std::max(max_diag, 0.0);
    for (int j = 0; j < p; ++j) {
      double dj = A(j, j);
      for (int k = 0; k < j; ++k) dj -= L_(j, k) * L_(j, k) * d_[k];
      if (!(dj > tol))
        throw singular_design_error(
            "design is rank deficient at column " + std::to_string(j), j);
      d_[j] = dj;
      for (int i = j + 1; i < p; ++i) {
        double v = A(i, j);
        for (int k = 0; k < j; ++k) v -= L_(i, k) * L_(j, k) * d_[k];
        L_(i, j) = v / dj;
      }
    }
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
    const int p = static_cast<int>(b.size());
    Eigen::VectorXd x = b;
    for (int i = 0; i < p; ++i)
      for (int k = 0; k < i; ++k) x[i] -= L_(i, k) * x[k];
    for (int i = 0; i < p; ++i) x[i] /= d_[i];
    for (int i = p - 1; i >= 0; --i)
      for (int k = i + 1; k < p; ++k) x[i] -= L_(k, i) * x[k];
    return x;
  }

  Eigen::MatrixXd inverse() const {
    const int p = static_cast<int>(d_.size());
    Eigen::MatrixXd inv(p, p);
    for (int j = 0; j < p; ++j) inv.col(j) = solve(Eigen::VectorXd::Unit(p, j));
    return 0.5 * (inv + inv.transpose());
  }

 private:
  Eigen::MatrixXd L_;
  Eigen::VectorXd d_;
};

struct ExchangeableWeight {
  double scale;  // 1 / (1 - rho)
  double c;      // rho / (1 - rho + n * rho)
};

inline ExchangeableWeight weight_for(double rho, double n) {
  return {1.0 / (1.0 - rho), rho / (1.0 - rho + n * rho)};
}

}  // namespace

Eigen::VectorXd solve_normal_equations(const Eigen::MatrixXd& A,
                                       const Eigen::VectorXd& b) {
  Ldlt chol;
  chol.factor(A);
  return chol.solve(b);
}

WorkingCorrelation WorkingCorrelation::exchangeable(double rho) {
  WorkingCorrelation wc;
  wc.kind = Kind::exchangeable;
  wc.rho = std::clamp(rho, 0.0, kMaxRho);
  return wc;
}

ClusterStats make_stats(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (X.rows() != y.size()) throw usage_error("X and y row counts differ");
  ClusterStats s;
  s.xtx = X.transpose() * X;
  s.xty = X.transpose() * y;
  s.xsum = X.colwise().sum().transpose();
  s.ysum = y.sum();
  s.yss = y.squaredNorm();
  s.n = static_cast<double>(X.rows());
  return s;
}

std::vector<ClusterStats> make_stats(const std::vector<ClusterBlock>& blocks) {
  std::vector<ClusterStats> stats;
  stats.reserve(blocks.size());
  for (const auto& b : blocks)
    if (b.X.rows() > 0) stats.push_back(make_stats(b.X, b.y));
  return stats;
}

GlsFit fit_stats(std::span<const ClusterStats> stats,
                 std::span<const std::size_t> active,
                 const PseudoOutcome* pseudo, const FitRequest& req) {
  if (active.empty()) throw insufficient_data_error("no clusters to fit");
  const int p = static_cast<int>(stats[active[0]].xtx.rows());
  const double rho = req.wc.effective_rho();

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  double total_n = 0.0;

  auto y_moments = [&](std::size_t i, Eigen::VectorXd& xty, double& ysum, double& yss) {
    const ClusterStats& s = stats[i];
    if (pseudo != nullptr && !pseudo[i].use_observed) {
      const double t = pseudo[i].value;
      xty = t * s.xsum;
      ysum = s.n * t;
      yss = s.n * t * t;
    } else {
      xty = s.xty;
      ysum = s.ysum;
      yss = s.yss;
    }
  };

  Eigen::VectorXd xty(p);
  double ysum = 0.0, yss = 0.0;
  for (std::size_t i : active) {
    const ClusterStats& s = stats[i];
    y_moments(i, xty, ysum, yss);
    const auto w = weight_for(rho, s.n);
    A.noalias() += w.scale * (s.xtx - w.c * (s.xsum * s.xsum.transpose()));
    b.noalias() += w.scale * (xty - w.c * ysum * s.xsum);
    total_n += s.n;
  }
  if (total_n <= static_cast<double>(p))
    throw insufficient_data_error("fewer observations than parameters");

  Ldlt chol;
  chol.factor(A);
  GlsFit fit;
  fit.theta_hat = chol.solve(b);
  fit.wc = req.wc;
  fit.n_clusters_used = static_cast<int>(active.size());

  // residual moments (and the sandwich meat, when requested)
  double sum_sse = 0.0, sum_cross = 0.0, sum_pairs = 0.0;
  Eigen::MatrixXd meat;
  if (req.want_sandwich) meat = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xte(p);
  for (std::size_t i : active) {
    const ClusterStats& s = stats[i];
    y_moments(i, xty, ysum, yss);
    const double quad = fit.theta_hat.dot(s.xtx * fit.theta_hat);
    const double sse = yss - 2.0 * fit.theta_hat.dot(xty) + quad;
    const double sum_e = ysum - s.xsum.dot(fit.theta_hat);
    sum_sse += sse;
    sum_cross += sum_e * sum_e - sse;
    sum_pairs += s.n * (s.n - 1.0);
    if (req.want_sandwich) {
      const auto w = weight_for(rho, s.n);
      xte.noalias() = xty - s.xtx * fit.theta_hat;
      const Eigen::VectorXd g = w.scale * (xte - w.c * sum_e * s.xsum);
      meat.noalias() += g * g.transpose();
    }
  }
  fit.sigma2_hat = std::max(sum_sse, 0.0) / (total_n - static_cast<double>(p));
  if (sum_pairs > 0.0 && fit.sigma2_hat > 0.0) {
    fit.rho_raw = (sum_cross / sum_pairs) / fit.sigma2_hat;
  } else {
    fit.rho_raw = 0.0;
    fit.degenerate_icc = (sum_pairs <= 0.0);
  }
  fit.rho_hat = std::clamp(fit.rho_raw, 0.0, kMaxRho);

  if (req.want_model_cov || req.want_sandwich) {
    const Eigen::MatrixXd a_inv = chol.inverse();
    if (req.want_model_cov) fit.model_cov = fit.sigma2_hat * a_inv;
    if (req.want_sandwich) {
      Eigen::MatrixXd sw = a_inv * meat * a_inv;
      fit.sandwich_cov = 0.5 * (sw + sw.transpose());
    }
  }
  return fit;
}

GlsFit iterated_fit_stats(std::span<const ClusterStats> stats,
                          std::span<const std::size_t> active,
                          const PseudoOutcome* pseudo, int max_iter, double tol,
                          bool want_sandwich) {
  FitRequest req;
  req.wc = WorkingCorrelation::independence();
  req.want_sandwich = false;
  req.want_model_cov = false;
  GlsFit fit = fit_stats(stats, active, pseudo, req);
  int iters = 0;
  for (int t = 1; t <= max_iter; ++t) {
    req.wc = WorkingCorrelation::exchangeable(fit.rho_hat);
    GlsFit next = fit_stats(stats, active, pseudo, req);
    const double delta = (next.theta_hat - fit.theta_hat).cwiseAbs().maxCoeff();
    fit = std::move(next);
    iters = t;
    if (delta < tol) break;
  }
  // final pass with the converged weights and the requested covariances
  req.want_sandwich = want_sandwich;
  req.want_model_cov = true;
  GlsFit out = fit_stats(stats, active, pseudo, req);
  out.n_iterations = iters;
  return out;
}

GlsFit solve_gls(const std::vector<ClusterBlock>& blocks, WorkingCorrelation wc) {
  const std::vector<ClusterStats> stats = make_stats(blocks);
  std::vector<std::size_t> active(stats.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  FitRequest req;
  req.wc = wc;
  return fit_stats(stats, active, nullptr, req);
}

IccEstimate estimate_icc(const std::vector<Eigen::VectorXd>& residual_blocks,
                         int n_params) {
  IccEstimate est;
  double sum_sse = 0.0, sum_cross = 0.0, sum_pairs = 0.0, total_n = 0.0;
  for (const auto& e : residual_blocks) {
    const double sse = e.squaredNorm();
    const double sum_e = e.sum();
    sum_sse += sse;
    sum_cross += sum_e * sum_e - sse;
    sum_pairs += static_cast<double>(e.size()) * (static_cast<double>(e.size()) - 1.0);
    total_n += static_cast<double>(e.size());
  }
  if (total_n <= static_cast<double>(n_params))
    throw insufficient_data_error("fewer residuals than parameters");
  est.sigma2 = std::max(sum_sse, 0.0) / (total_n - static_cast<double>(n_params));
  if (sum_pairs > 0.0 && est.sigma2 > 0.0) {
    est.rho_raw = (sum_cross / sum_pairs) / est.sigma2;
  } else {
    est.rho_raw = 0.0;
    est.degenerate = (sum_pairs <= 0.0);
  }
  est.rho = std::clamp(est.rho_raw, 0.0, kMaxRho);
  return est;
}

GlsFit iterated_gls(const std::vector<ClusterBlock>& blocks, int max_iter,
                    double tol) {
  const std::vector<ClusterStats> stats = make_stats(blocks);
  std::vector<std::size_t> active(stats.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  return iterated_fit_stats(stats, active, nullptr, max_iter, tol, true);
}

Eigen::MatrixXd sandwich_cov(const std::vector<ClusterBlock>& blocks,
                             const GlsFit& fit) {
  const double rho = fit.wc.effective_rho();
  const int p = static_cast<int>(fit.theta_hat.size());
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (const auto& blk : blocks) {
    if (blk.X.rows() == 0) continue;
    const auto w = weight_for(rho, static_cast<double>(blk.X.rows()));
    const Eigen::VectorXd xsum = blk.X.colwise().sum().transpose();
    A.noalias() += w.scale * (blk.X.transpose() * blk.X - w.c * (xsum * xsum.transpose()));
    const Eigen::VectorXd e = blk.y - blk.X * fit.theta_hat;
    const Eigen::VectorXd g = w.scale * (blk.X.transpose() * e - w.c * e.sum() * xsum);
    meat.noalias() += g * g.transpose();
  }
  Ldlt chol;
  chol.factor(A);
  const Eigen::MatrixXd a_inv = chol.inverse();
  Eigen::MatrixXd sw = a_inv * meat * a_inv;
  return 0.5 * (sw + sw.transpose());
}

double objective(const std::vector<ClusterBlock>& blocks, WorkingCorrelation wc,
                 const Eigen::VectorXd& theta) {
  const double rho = wc.effective_rho();
  double total = 0.0;
  for (const auto& blk : blocks) {
    if (blk.X.rows() == 0) continue;
    const auto w = weight_for(rho, static_cast<double>(blk.X.rows()));
    const Eigen::VectorXd e = blk.y - blk.X * theta;
    const double se = e.sum();
    total += w.scale * (e.squaredNorm() - w.c * se * se);
  }
  return total;
}

}  // namespace cqlearn::gls
