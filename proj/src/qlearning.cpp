#include "cqlearn/qlearning.hpp"

#include <cmath>
#include <numeric>

namespace cqlearn::qlearning {

namespace {

gls::FitRequest request_for(const FitPolicy& policy, int stage, bool want_sandwich) {
  gls::FitRequest req;
  req.want_sandwich = want_sandwich;
  req.want_model_cov = want_sandwich;
  switch (policy.kind) {
    case FitPolicy::Kind::fixed_independence:
      req.wc = gls::WorkingCorrelation::independence();
      break;
    case FitPolicy::Kind::fixed_exchangeable: {
      double rho = policy.rho;
      if (!policy.stage_rho.empty()) {
        if (stage < 1 || stage > static_cast<int>(policy.stage_rho.size()))
          throw usage_error("stage_rho does not cover stage " + std::to_string(stage));
        rho = policy.stage_rho[stage - 1];
      }
      req.wc = gls::WorkingCorrelation::exchangeable(rho);
      break;
    }
    case FitPolicy::Kind::iterated:
      break;  // handled by the caller
  }
  return req;
}

gls::GlsFit fit_with_policy(std::span<const gls::ClusterStats> stats,
                            std::span<const std::size_t> active,
                            const gls::PseudoOutcome* pseudo,
                            const FitPolicy& policy, int stage,
                            bool want_sandwich) {
  if (policy.kind == FitPolicy::Kind::iterated)
    return gls::iterated_fit_stats(stats, active, pseudo, policy.max_iter,
                                   policy.tol, want_sandwich);
  return gls::fit_stats(stats, active, pseudo,
                        request_for(policy, stage, want_sandwich));
}

StageFit make_stage_fit(const Problem& prob, int stage, gls::GlsFit gls_fit) {
  const StageDesign& d = prob.stages[stage - 1];
  StageFit fit;
  fit.stage = stage;
  fit.spec = d.spec;
  fit.layout = d.layout;
  const int m = d.layout.n_main;
  const int t = d.layout.n_tailor;
  fit.gamma_hat = gls_fit.theta_hat.segment(0, m);
  fit.beta_hat = gls_fit.theta_hat.segment(m, t);
  fit.psi_hat = gls_fit.theta_hat.segment(m + t, t);
  fit.gls = std::move(gls_fit);
  return fit;
}

}  // namespace

Eigen::MatrixXd StageFit::psi_cov() const {
  const int off = layout.psi_offset();
  const int t = layout.n_tailor;
  return gls.sandwich_cov.block(off, off, t, t);
}

// ----------------------------------------------------------------------------
// Compilation
// ----------------------------------------------------------------------------

Problem compile(const ClusteredDataset& ds, const std::vector<StageModelSpec>& specs) {
  if (static_cast<int>(specs.size()) != ds.n_stages())
    throw usage_error("model spec count does not match the dataset's stage count");
  Problem prob;
  prob.n_stages = ds.n_stages();
  prob.n_rows = ds.n_individuals();
  for (const auto& rec : ds.clusters)
    prob.cluster_sizes.push_back(static_cast<double>(rec.size()));

  for (int k = 1; k <= prob.n_stages; ++k) {
    const StageModelSpec& spec = specs[k - 1];
    if (spec.stage != k) throw usage_error("model specs must be ordered by stage");
    StageDesign d;
    d.spec = spec;
    d.layout = stage_layout(ds, spec);
    const int p = d.layout.n_params();

    for (std::size_t i = 0; i < ds.clusters.size(); ++i) {
      const ClusterRecord& rec = ds.clusters[i];
      const bool inc = rec.treatments[k - 1].assigned;
      d.included.push_back(inc ? 1 : 0);
      if (!inc) {
        d.stats.emplace_back();
        d.h0.emplace_back();
        d.h1.emplace_back();
        d.a.push_back(0.0);
        continue;
      }
      const Eigen::VectorXd h0 = main_effect_values(ds, rec, spec);
      const Eigen::VectorXd h1 = tailoring_values(ds, rec, spec);
      const double a = static_cast<double>(rec.treatments[k - 1].value);
      Eigen::VectorXd row(p);
      row << h0, h1, a * h1;

      // covariates are cluster-level, so the n_i design rows are identical
      // and the sufficient statistics have closed forms
      const double n = static_cast<double>(rec.size());
      double ysum = 0.0, yss = 0.0;
      for (double y : rec.outcomes) {
        ysum += y;
        yss += y * y;
      }
      gls::ClusterStats s;
      s.xtx = n * (row * row.transpose());
      s.xsum = n * row;
      s.xty = ysum * row;
      s.ysum = ysum;
      s.yss = yss;
      s.n = n;
      d.stats.push_back(std::move(s));
      d.h0.push_back(h0);
      d.h1.push_back(h1);
      d.a.push_back(a);
      d.pool.push_back(i);
    }
    if (d.pool.empty())
      throw insufficient_data_error("no cluster included at stage " + std::to_string(k));
    prob.stages.push_back(std::move(d));
  }
  return prob;
}

// ----------------------------------------------------------------------------
// Backward fitting over a cluster multiset
// ----------------------------------------------------------------------------

std::vector<CompiledFit> fit_stages_compiled(const Problem& prob,
                                             std::span<const std::size_t> active,
                                             const FitPolicy& policy,
                                             bool want_sandwich) {
  const int K = prob.n_stages;
  const std::size_t n_clusters = prob.cluster_sizes.size();
  std::vector<CompiledFit> fits(K);
  std::vector<gls::PseudoOutcome> pseudo;  // outcome for the stage being fit

  std::vector<std::size_t> stage_active;
  stage_active.reserve(active.size());
  for (int k = K; k >= 1; --k) {
    const StageDesign& d = prob.stages[k - 1];
    stage_active.clear();
    for (std::size_t i : active)
      if (d.included[i]) stage_active.push_back(i);
    if (stage_active.empty())
      throw insufficient_data_error("resample contains no stage-" +
                                    std::to_string(k) + " clusters");

    const gls::PseudoOutcome* pptr = (k == K) ? nullptr : pseudo.data();
    fits[k - 1].gls =
        fit_with_policy(d.stats, stage_active, pptr, policy, k, want_sandwich);

    if (k > 1) {
      // pseudo-outcome for stage k-1: max_a prediction for clusters
      // re-randomized at stage k, observed outcome otherwise
      const StageLayout& lay = d.layout;
      const Eigen::VectorXd& theta = fits[k - 1].gls.theta_hat;
      const auto gamma = theta.segment(0, lay.n_main);
      const auto beta = theta.segment(lay.n_main, lay.n_tailor);
      const auto psi = theta.segment(lay.n_main + lay.n_tailor, lay.n_tailor);
      std::vector<gls::PseudoOutcome> next(n_clusters);
      for (std::size_t i = 0; i < n_clusters; ++i) {
        if (!d.included[i]) continue;  // keeps use_observed = true
        next[i].use_observed = false;
        next[i].value = gamma.dot(d.h0[i]) + beta.dot(d.h1[i]) +
                        std::abs(psi.dot(d.h1[i]));
      }
      fits[k - 1].pseudo = next;
      pseudo = std::move(next);
    }
  }
  return fits;
}

// ----------------------------------------------------------------------------
// Public operations
// ----------------------------------------------------------------------------

StageFit fit_stage(const ClusteredDataset& ds, const StageModelSpec& spec,
                   std::span<const double> outcome, const FitPolicy& policy) {
  std::vector<DesignBlock> blocks = design_matrices(ds, spec, spec.stage);
  std::size_t pos = 0;
  std::vector<gls::ClusterStats> stats;
  for (auto& blk : blocks) {
    if (!blk.included) continue;
    const std::size_t n = static_cast<std::size_t>(blk.X.rows());
    if (pos + n > outcome.size())
      throw usage_error("outcome vector shorter than the included individuals");
    blk.y = Eigen::Map<const Eigen::VectorXd>(outcome.data() + pos,
                                              static_cast<long>(n));
    pos += n;
    stats.push_back(gls::make_stats(blk.X, blk.y));
  }
  if (pos != outcome.size())
    throw usage_error("outcome vector longer than the included individuals");

  std::vector<std::size_t> active(stats.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  gls::GlsFit g = (policy.kind == FitPolicy::Kind::iterated)
                      ? gls::iterated_fit_stats(stats, active, nullptr,
                                                policy.max_iter, policy.tol, true)
                      : gls::fit_stats(stats, active, nullptr,
                                       request_for(policy, spec.stage, true));

  StageFit fit;
  fit.stage = spec.stage;
  fit.spec = spec;
  fit.layout = stage_layout(ds, spec);
  const int m = fit.layout.n_main;
  const int t = fit.layout.n_tailor;
  fit.gamma_hat = g.theta_hat.segment(0, m);
  fit.beta_hat = g.theta_hat.segment(m, t);
  fit.psi_hat = g.theta_hat.segment(m + t, t);
  fit.gls = std::move(g);
  return fit;
}

std::vector<double> pseudo_outcome(const StageFit& fit_next,
                                   const ClusteredDataset& ds) {
  const int k_next = fit_next.stage;
  if (k_next < 1 || k_next > ds.n_stages())
    throw usage_error("stage fit does not belong to this dataset");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(ds.n_individuals()));
  for (const auto& rec : ds.clusters) {
    if (rec.treatments[k_next - 1].assigned) {
      const Eigen::VectorXd h0 = main_effect_values(ds, rec, fit_next.spec);
      const Eigen::VectorXd h1 = tailoring_values(ds, rec, fit_next.spec);
      const double t = fit_next.gamma_hat.dot(h0) + fit_next.beta_hat.dot(h1) +
                       std::abs(fit_next.psi_hat.dot(h1));
      out.insert(out.end(), rec.outcomes.size(), t);
    } else {
      out.insert(out.end(), rec.outcomes.begin(), rec.outcomes.end());
    }
  }
  return out;
}

QLearningResult fit_backward(const ClusteredDataset& ds,
                             const std::vector<StageModelSpec>& specs,
                             const FitPolicy& policy) {
  const Problem prob = compile(ds, specs);
  std::vector<std::size_t> active(ds.clusters.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  std::vector<CompiledFit> fits = fit_stages_compiled(prob, active, policy, true);

  QLearningResult result;
  for (int k = 1; k <= prob.n_stages; ++k)
    result.stage_fits.push_back(make_stage_fit(prob, k, std::move(fits[k - 1].gls)));

  for (int k = 1; k < prob.n_stages; ++k) {
    const std::vector<gls::PseudoOutcome>& ps = fits[k].pseudo;  // from stage k+1
    std::vector<double> vals;
    vals.reserve(static_cast<std::size_t>(prob.n_rows));
    for (std::size_t i = 0; i < ds.clusters.size(); ++i) {
      const ClusterRecord& rec = ds.clusters[i];
      if (ps[i].use_observed)
        vals.insert(vals.end(), rec.outcomes.begin(), rec.outcomes.end());
      else
        vals.insert(vals.end(), rec.outcomes.size(), ps[i].value);
    }
    result.pseudo_outcomes.push_back(std::move(vals));
  }
  return result;
}

Decision decision_rule(const StageFit& fit, std::span<const double> h1) {
  if (static_cast<int>(h1.size()) != fit.layout.n_tailor)
    throw usage_error("tailoring vector length does not match the fitted model");
  double v = 0.0;
  for (int j = 0; j < fit.layout.n_tailor; ++j) v += fit.psi_hat[j] * h1[j];
  Decision d;
  if (v == 0.0) {
    d.treatment = +1;
    d.tie = true;
  } else {
    d.treatment = v > 0.0 ? +1 : -1;
  }
  return d;
}

}  // namespace cqlearn::qlearning
