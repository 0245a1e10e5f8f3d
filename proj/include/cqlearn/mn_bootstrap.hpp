#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cqlearn/data_model.hpp"
#include "cqlearn/qlearning.hpp"

// Non-regularity diagnostics and the four bootstrap inference engines:
//   MN-CB   m-out-of-n cluster bootstrap, exchangeable working correlation
//   CB      standard cluster bootstrap (full resampling of N clusters)
//   MN-CB-w MN-CB with a deliberately wrong (independence) working model
//   mn-B    m-out-of-n bootstrap of individuals, ignoring cluster structure
// producing confidence intervals for the stage-k tailoring parameters.

namespace cqlearn::boot {

enum class Method { mn_b, cb, mn_cb, mn_cb_w };

std::string_view method_name(Method m);
std::optional<Method> parse_method(std::string_view name);

enum class CiForm { hybrid, percentile };

struct EtaPolicy {
  bool automatic = true;
  double value = 0.0;

  static EtaPolicy auto_choice() { return {}; }
  static EtaPolicy fixed(double eta) { return {false, eta}; }
};

struct NonRegularityReport {
  std::vector<double> t_stats;  // per cluster (per individual for mn-B)
  double p_hat = 0.0;
  double eta = 0.0;
  double lambda = 0.0;
  long m_hat = 0;       // resample size
  long n_pool = 0;      // units available for resampling
  bool individual_level = false;
};

struct BootstrapOptions {
  CiForm ci_form = CiForm::hybrid;
  bool refit_icc = true;   // false: freeze the original per-stage rho in replicates
  int parallel = 0;        // 0 => hardware concurrency
  bool progress = false;   // heartbeat every 100 replicates to stderr
  int stage = 1;           // stage whose parameters are the inference target
};

struct BootstrapResult {
  Method method{};
  int stage = 1;
  double alpha = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  CiForm ci_form = CiForm::hybrid;

  std::vector<std::string> param_labels;  // stage-`stage` design columns
  Eigen::VectorXd point;                  // full theta at the target stage
  Eigen::VectorXd ci_lower, ci_upper;
  int psi_offset = 0;
  int psi_count = 0;

  int n_requested = 0;
  int n_valid = 0;
  std::optional<NonRegularityReport> report;  // absent for CB

  Eigen::MatrixXd replicates;        // n_valid x p, theta draws
  std::vector<int> replicate_ids;    // original replicate indices

  Eigen::VectorXd psi_point() const { return point.segment(psi_offset, psi_count); }
  Eigen::VectorXd psi_lower() const { return ci_lower.segment(psi_offset, psi_count); }
  Eigen::VectorXd psi_upper() const { return ci_upper.segment(psi_offset, psi_count); }
};

// T_i = psi' h1_i / sqrt(h1_i' V_psi h1_i) over clusters included at the
// fit's stage, with V_psi the sandwich Psi-block. A zero denominator yields
// +inf (always counted as |T| > eta).
std::vector<double> cluster_t_stats(const qlearning::StageFit& fit_next,
                                    const ClusteredDataset& ds);

// Proportion of |T| <= eta.
double estimate_p(std::span<const double> t_stats, double eta);

// M = round(n_k ^ f(p)) with f(p) = (1 + lambda(1-p)) / (1 + lambda),
// clamped to [2, n_k].
long resample_size(double p_hat, double lambda, long n_k);

// Student-t quantile t_{n_i_ref - 1, 1 - alpha/(2 n_next)}; the Bonferroni
// choice of the T-statistic threshold.
double default_eta(double alpha, double n_i_ref, long n_next);

// Type-7 (linear interpolation) empirical quantile; q clamped to [0,1].
double empirical_quantile(std::span<const double> draws, double q);

BootstrapResult run_bootstrap(const ClusteredDataset& ds,
                              const std::vector<StageModelSpec>& specs,
                              Method method, int n_replicates, double alpha,
                              double lambda, EtaPolicy eta, std::uint64_t seed,
                              const BootstrapOptions& options = {});

// Per-replicate theta* table for external plotting.
std::string replicates_csv(const BootstrapResult& result);
void write_replicates_csv(const BootstrapResult& result, const std::string& path);

}  // namespace cqlearn::boot
