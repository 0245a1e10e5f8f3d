#include "cqlearn/mn_bootstrap.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "cqlearn/rng.hpp"

namespace cqlearn::boot {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Rows of the dataset flattened for the individual-level (mn-B) resampler.
// Rows within a cluster share the cluster's design row, so a replicate only
// needs per-cluster draw counts and outcome sums.
struct RowCatalog {
  std::vector<std::size_t> cluster;  // per row
  std::vector<double> y;             // per row
  std::vector<std::size_t> pool;     // rows whose cluster enters the target stage
};

RowCatalog build_rows(const ClusteredDataset& ds, const qlearning::Problem& prob,
                      int stage) {
  RowCatalog rows;
  const auto& included = prob.stages[stage - 1].included;
  std::size_t r = 0;
  for (std::size_t i = 0; i < ds.clusters.size(); ++i) {
    for (double y : ds.clusters[i].outcomes) {
      rows.cluster.push_back(i);
      rows.y.push_back(y);
      if (included[i]) rows.pool.push_back(r);
      ++r;
    }
  }
  return rows;
}

double median_cluster_size(const qlearning::Problem& prob,
                           std::span<const std::size_t> pool) {
  std::vector<double> sizes;
  sizes.reserve(pool.size());
  for (std::size_t i : pool) sizes.push_back(prob.cluster_sizes[i]);
  std::sort(sizes.begin(), sizes.end());
  const std::size_t n = sizes.size();
  if (n == 0) throw usage_error("empty cluster pool");
  return n % 2 == 1 ? sizes[n / 2] : 0.5 * (sizes[n / 2 - 1] + sizes[n / 2]);
}

qlearning::FitPolicy policy_for(Method m) {
  switch (m) {
    case Method::mn_cb_w:
    case Method::mn_b:
      return qlearning::FitPolicy::independence();
    case Method::mn_cb:
    case Method::cb:
      return qlearning::FitPolicy::iterated();
  }
  return {};
}

// Psi-block quadratic-form T statistic pieces from a compiled stage fit.
struct PsiView {
  Eigen::VectorXd psi;
  Eigen::MatrixXd cov;
};

PsiView psi_view(const qlearning::StageDesign& design, const gls::GlsFit& fit) {
  const int off = design.layout.psi_offset();
  const int t = design.layout.n_tailor;
  PsiView v;
  v.psi = fit.theta_hat.segment(off, t);
  v.cov = fit.sandwich_cov.block(off, off, t, t);
  return v;
}

double t_statistic(const PsiView& v, const Eigen::VectorXd& h1) {
  const double num = v.psi.dot(h1);
  const double var = h1.dot(v.cov * h1);
  if (!(var > 0.0)) return kInf;
  return num / std::sqrt(var);
}

// Row-level (heteroskedasticity-robust, non-clustered) Psi covariance of an
// independence fit; used by mn-B's individual-level T statistics.
Eigen::MatrixXd row_level_cov(const qlearning::StageDesign& design,
                              const Eigen::VectorXd& theta) {
  const int p = design.layout.n_params();
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t i : design.pool) {
    const gls::ClusterStats& s = design.stats[i];
    const Eigen::VectorXd x = s.xsum / s.n;  // shared design row
    const double mu = x.dot(theta);
    const double sse = s.yss - 2.0 * mu * s.ysum + s.n * mu * mu;
    A.noalias() += s.n * (x * x.transpose());
    meat.noalias() += sse * (x * x.transpose());
  }
  const Eigen::MatrixXd a_inv = A.llt().solve(Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd cov = a_inv * meat * a_inv;
  return 0.5 * (cov + cov.transpose());
}

// Backward fit over a multiset of rows (each row its own resampled unit,
// independence weights). Draws are summarized per cluster: count, sum y,
// so one replicate costs O(m + N p^2).
struct RowFitScratch {
  std::vector<double> cnt, ysum;
};

Eigen::VectorXd fit_rows_backward(const qlearning::Problem& prob,
                                  const RowCatalog& rows,
                                  std::span<const std::size_t> draw,
                                  int target_stage, RowFitScratch& scratch) {
  const std::size_t n_clusters = prob.cluster_sizes.size();
  scratch.cnt.assign(n_clusters, 0.0);
  scratch.ysum.assign(n_clusters, 0.0);
  for (std::size_t r : draw) {
    const std::size_t c = rows.cluster[r];
    scratch.cnt[c] += 1.0;
    scratch.ysum[c] += rows.y[r];
  }

  const int K = prob.n_stages;
  Eigen::VectorXd theta;
  std::vector<double> pseudo;  // cluster-constant value from the later stage
  std::vector<char> have_pseudo;
  for (int k = K; k >= target_stage; --k) {
    const qlearning::StageDesign& d = prob.stages[k - 1];
    const int p = d.layout.n_params();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
    double used = 0.0;
    for (std::size_t i = 0; i < n_clusters; ++i) {
      if (scratch.cnt[i] == 0.0 || !d.included[i]) continue;
      const gls::ClusterStats& s = d.stats[i];
      const Eigen::VectorXd x = s.xsum / s.n;
      A.noalias() += scratch.cnt[i] * (x * x.transpose());
      const double ysel = (k == K || !have_pseudo[i])
                              ? scratch.ysum[i]
                              : scratch.cnt[i] * pseudo[i];
      b.noalias() += ysel * x;
      used += scratch.cnt[i];
    }
    if (used <= static_cast<double>(p))
      throw insufficient_data_error("resample has too few stage-" +
                                    std::to_string(k) + " rows");
    theta = gls::solve_normal_equations(A, b);

    if (k > target_stage) {
      const auto& lay = d.layout;
      const auto gamma = theta.segment(0, lay.n_main);
      const auto beta = theta.segment(lay.n_main, lay.n_tailor);
      const auto psi = theta.segment(lay.n_main + lay.n_tailor, lay.n_tailor);
      pseudo.assign(n_clusters, 0.0);
      have_pseudo.assign(n_clusters, 0);
      for (std::size_t i = 0; i < n_clusters; ++i) {
        if (!d.included[i]) continue;
        pseudo[i] = gamma.dot(d.h0[i]) + beta.dot(d.h1[i]) +
                    std::abs(psi.dot(d.h1[i]));
        have_pseudo[i] = 1;
      }
    }
  }
  return theta;
}

void run_parallel(int n_tasks, int n_threads, const std::function<void(int)>& body) {
  if (n_threads <= 1) {
    for (int i = 0; i < n_tasks; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_tasks) return;
      body(i);
    }
  };
  std::vector<std::thread> threads;
  const int n = std::min(n_threads, n_tasks);
  threads.reserve(n);
  for (int t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace

// ----------------------------------------------------------------------------
// Small operations
// ----------------------------------------------------------------------------

std::string_view method_name(Method m) {
  switch (m) {
    case Method::mn_b:
      return "mn-B";
    case Method::cb:
      return "CB";
    case Method::mn_cb:
      return "MN-CB";
    case Method::mn_cb_w:
      return "MN-CB-w";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  std::replace(s.begin(), s.end(), '_', '-');
  if (s == "mn-b" || s == "mnb") return Method::mn_b;
  if (s == "cb") return Method::cb;
  if (s == "mn-cb" || s == "mncb") return Method::mn_cb;
  if (s == "mn-cb-w" || s == "mncbw") return Method::mn_cb_w;
  return std::nullopt;
}

std::vector<double> cluster_t_stats(const qlearning::StageFit& fit_next,
                                    const ClusteredDataset& ds) {
  if (fit_next.gls.sandwich_cov.size() == 0)
    throw usage_error("stage fit lacks a sandwich covariance");
  const int k = fit_next.stage;
  PsiView v{fit_next.psi_hat, fit_next.psi_cov()};
  std::vector<double> t;
  for (const auto& rec : ds.clusters) {
    if (!rec.treatments[k - 1].assigned) continue;
    const Eigen::VectorXd h1 = tailoring_values(ds, rec, fit_next.spec);
    t.push_back(t_statistic(v, h1));
  }
  return t;
}

double estimate_p(std::span<const double> t_stats, double eta) {
  if (t_stats.empty()) throw usage_error("empty T-statistic list");
  std::size_t below = 0;
  for (double t : t_stats)
    if (std::abs(t) <= eta) ++below;
  return static_cast<double>(below) / static_cast<double>(t_stats.size());
}

long resample_size(double p_hat, double lambda, long n_k) {
  if (p_hat < 0.0 || p_hat > 1.0) throw usage_error("p_hat outside [0,1]");
  if (lambda < 0.0) throw usage_error("lambda must be nonnegative");
  if (n_k < 2) throw usage_error("resampling pool must hold at least 2 units");
  const double f = (1.0 + lambda * (1.0 - p_hat)) / (1.0 + lambda);
  const double m = std::floor(std::pow(static_cast<double>(n_k), f) + 0.5);
  return std::clamp(static_cast<long>(m), 2L, n_k);
}

double default_eta(double alpha, double n_i_ref, long n_next) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw usage_error("alpha outside (0,1)");
  if (n_i_ref < 2.0) throw usage_error("reference cluster size must be >= 2");
  if (n_next < 1) throw usage_error("n_next must be >= 1");
  const boost::math::students_t dist(n_i_ref - 1.0);
  const double order = 1.0 - alpha / (2.0 * static_cast<double>(n_next));
  return boost::math::quantile(dist, order);
}

double empirical_quantile(std::span<const double> draws, double q) {
  if (draws.empty()) throw usage_error("empty sample");
  q = std::clamp(q, 0.0, 1.0);
  std::vector<double> x(draws.begin(), draws.end());
  std::sort(x.begin(), x.end());
  const double h = static_cast<double>(x.size() - 1) * q;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= x.size()) return x.back();
  const double frac = h - static_cast<double>(lo);
  return x[lo] + frac * (x[lo + 1] - x[lo]);
}

// ----------------------------------------------------------------------------
// run_bootstrap
// ----------------------------------------------------------------------------

BootstrapResult run_bootstrap(const ClusteredDataset& ds,
                              const std::vector<StageModelSpec>& specs,
                              Method method, int n_replicates, double alpha,
                              double lambda, EtaPolicy eta, std::uint64_t seed,
                              const BootstrapOptions& options) {
  if (n_replicates < 100) throw usage_error("at least 100 bootstrap replicates required");
  if (!(alpha > 0.0 && alpha < 0.5)) throw usage_error("alpha must lie in (0, 0.5)");
  if (lambda < 0.0) throw usage_error("lambda must be nonnegative");
  if (lambda > 0.10)
    std::fprintf(stderr, "warning: lambda=%g outside the recommended 0.025-0.10 range\n",
                 lambda);

  const int stage = options.stage;
  const qlearning::Problem prob = qlearning::compile(ds, specs);
  if (stage < 1 || stage > prob.n_stages) throw usage_error("inference stage out of range");
  if (method != Method::cb && stage >= prob.n_stages)
    throw usage_error("m-out-of-n methods need a later stage to assess non-regularity");

  const qlearning::FitPolicy policy = policy_for(method);
  std::vector<std::size_t> everyone(ds.clusters.size());
  for (std::size_t i = 0; i < everyone.size(); ++i) everyone[i] = i;

  const std::vector<qlearning::CompiledFit> original =
      qlearning::fit_stages_compiled(prob, everyone, policy, true);

  const qlearning::StageDesign& target = prob.stages[stage - 1];
  const Eigen::VectorXd theta_hat = original[stage - 1].gls.theta_hat;
  const int p = static_cast<int>(theta_hat.size());

  BootstrapResult result;
  result.method = method;
  result.stage = stage;
  result.alpha = alpha;
  result.lambda = lambda;
  result.seed = seed;
  result.ci_form = options.ci_form;
  result.param_labels = target.layout.labels;
  result.point = theta_hat;
  result.psi_offset = target.layout.psi_offset();
  result.psi_count = target.layout.n_tailor;
  result.n_requested = n_replicates;

  // --- non-regularity diagnostics and resample size -------------------------
  const std::vector<std::size_t>& cluster_pool = target.pool;
  const long n_cluster_pool = static_cast<long>(cluster_pool.size());

  RowCatalog rows;
  long m_draw = n_cluster_pool;  // CB default
  long n_root = n_cluster_pool;

  if (method != Method::cb) {
    const qlearning::StageDesign& next = prob.stages[stage];
    NonRegularityReport rep;
    rep.lambda = lambda;

    if (method == Method::mn_b) {
      rows = build_rows(ds, prob, stage);
      const long n_row_pool = static_cast<long>(rows.pool.size());
      const PsiView v{
          original[stage].gls.theta_hat.segment(next.layout.psi_offset(),
                                                next.layout.n_tailor),
          row_level_cov(next, original[stage].gls.theta_hat)
              .block(next.layout.psi_offset(), next.layout.psi_offset(),
                     next.layout.n_tailor, next.layout.n_tailor)};
      long n_rows_next = 0;
      for (std::size_t i : next.pool)
        n_rows_next += static_cast<long>(prob.cluster_sizes[i]);
      for (std::size_t i : next.pool) {
        const double t = t_statistic(v, next.h1[i]);
        rep.t_stats.insert(rep.t_stats.end(),
                           static_cast<std::size_t>(prob.cluster_sizes[i]), t);
      }
      rep.individual_level = true;
      rep.eta = eta.automatic
                    ? default_eta(alpha, median_cluster_size(prob, next.pool),
                                  n_rows_next)
                    : eta.value;
      rep.p_hat = estimate_p(rep.t_stats, rep.eta);
      rep.n_pool = n_row_pool;
      rep.m_hat = resample_size(rep.p_hat, lambda, n_row_pool);
      m_draw = rep.m_hat;
      n_root = n_row_pool;
    } else {
      const PsiView v = psi_view(next, original[stage].gls);
      for (std::size_t i : next.pool)
        rep.t_stats.push_back(t_statistic(v, next.h1[i]));
      rep.eta = eta.automatic
                    ? default_eta(alpha, median_cluster_size(prob, next.pool),
                                  static_cast<long>(next.pool.size()))
                    : eta.value;
      rep.p_hat = estimate_p(rep.t_stats, rep.eta);
      rep.n_pool = n_cluster_pool;
      rep.m_hat = resample_size(rep.p_hat, lambda, n_cluster_pool);
      m_draw = rep.m_hat;
    }
    result.report = std::move(rep);
  }

  // --- replicates ------------------------------------------------------------
  qlearning::FitPolicy rep_policy = policy;
  if (!options.refit_icc &&
      (method == Method::mn_cb || method == Method::cb)) {
    rep_policy.kind = qlearning::FitPolicy::Kind::fixed_exchangeable;
    for (const auto& f : original) rep_policy.stage_rho.push_back(f.gls.rho_hat);
  }

  Eigen::MatrixXd draws(n_replicates, p);
  std::vector<char> valid(static_cast<std::size_t>(n_replicates), 0);
  std::atomic<int> done{0};

  auto replicate = [&](int b) {
    rng::Engine eng = rng::make_engine(seed, static_cast<std::uint64_t>(b));
    try {
      if (method == Method::mn_b) {
        thread_local RowFitScratch scratch;
        std::vector<std::size_t> draw(static_cast<std::size_t>(m_draw));
        for (auto& r : draw) r = rows.pool[rng::uniform_index(eng, rows.pool.size())];
        draws.row(b) = fit_rows_backward(prob, rows, draw, stage, scratch);
      } else {
        std::vector<std::size_t> active(static_cast<std::size_t>(m_draw));
        for (auto& c : active)
          c = cluster_pool[rng::uniform_index(eng, cluster_pool.size())];
        const auto fits = qlearning::fit_stages_compiled(prob, active, rep_policy, false);
        draws.row(b) = fits[stage - 1].gls.theta_hat;
      }
      valid[static_cast<std::size_t>(b)] = 1;
    } catch (const singular_design_error&) {
    } catch (const insufficient_data_error&) {
    }
    if (options.progress) {
      const int d = done.fetch_add(1) + 1;
      if (d % 100 == 0)
        std::fprintf(stderr, "bootstrap: %d/%d replicates\n", d, n_replicates);
    }
  };

  int n_threads = options.parallel;
  if (n_threads <= 0)
    n_threads = static_cast<int>(std::thread::hardware_concurrency());
  run_parallel(n_replicates, std::max(1, n_threads), replicate);

  int n_valid = 0;
  for (char v : valid) n_valid += v;
  result.n_valid = n_valid;
  if (2 * (n_replicates - n_valid) > n_replicates)
    throw inference_failure_error(
        "more than half of the bootstrap replicates failed (" +
        std::to_string(n_replicates - n_valid) + " of " +
        std::to_string(n_replicates) + ")");

  result.replicates.resize(n_valid, p);
  result.replicate_ids.reserve(static_cast<std::size_t>(n_valid));
  {
    int r = 0;
    for (int b = 0; b < n_replicates; ++b) {
      if (!valid[static_cast<std::size_t>(b)]) continue;
      result.replicates.row(r++) = draws.row(b);
      result.replicate_ids.push_back(b);
    }
  }

  // --- confidence intervals ---------------------------------------------------
  result.ci_lower.resize(p);
  result.ci_upper.resize(p);
  std::vector<double> work(static_cast<std::size_t>(n_valid));
  const double root_m = std::sqrt(static_cast<double>(m_draw));
  const double root_n = std::sqrt(static_cast<double>(n_root));
  for (int j = 0; j < p; ++j) {
    if (options.ci_form == CiForm::hybrid) {
      for (int r = 0; r < n_valid; ++r)
        work[static_cast<std::size_t>(r)] =
            root_m * (result.replicates(r, j) - theta_hat[j]);
      const double lo = empirical_quantile(work, alpha / 2.0);
      const double hi = empirical_quantile(work, 1.0 - alpha / 2.0);
      result.ci_lower[j] = theta_hat[j] - hi / root_n;
      result.ci_upper[j] = theta_hat[j] - lo / root_n;
    } else {
      for (int r = 0; r < n_valid; ++r)
        work[static_cast<std::size_t>(r)] = result.replicates(r, j);
      result.ci_lower[j] = empirical_quantile(work, alpha / 2.0);
      result.ci_upper[j] = empirical_quantile(work, 1.0 - alpha / 2.0);
    }
  }
  return result;
}

std::string replicates_csv(const BootstrapResult& result) {
  std::string out = "replicate";
  for (int j = result.psi_offset; j < result.psi_offset + result.psi_count; ++j)
    out += "," + result.param_labels[static_cast<std::size_t>(j)];
  out += "\n";
  for (int r = 0; r < result.replicates.rows(); ++r) {
    out += std::to_string(result.replicate_ids[static_cast<std::size_t>(r)]);
    for (int j = result.psi_offset; j < result.psi_offset + result.psi_count; ++j)
      out += "," + format_double(result.replicates(r, j));
    out += "\n";
  }
  return out;
}

void write_replicates_csv(const BootstrapResult& result, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw schema_error("cannot write '" + path + "'");
  out << replicates_csv(result);
}

}  // namespace cqlearn::boot
