#pragma once

// Exact maximum likelihood on small discrete conditional families, and the
// NCE-vs-MLE consistency sweep built on it.

#include "ctrl/environments.hpp"
#include "ctrl/nce.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ctrl {

/// Unnormalized conditional model f_theta(x, u) on a u x x grid.
///   free_table:         f = exp(theta[u,x])
///   softmax_logits:     f = softmax_x(theta[u,.])            (Z = 1)
///   constant_partition: f = c * softmax_x(theta[u,.])        (Z = c for every u)
///   tied_base_measure:  f = scale[u] * base[u,x] * exp(theta[x]), theta shared
///                       across u, so Z varies with u.
struct TabularConditionalFamily {
  enum class Kind { free_table, softmax_logits, constant_partition, tied_base_measure };

  Kind kind = Kind::free_table;
  int x_cardinality = 1;
  int u_cardinality = 1;
  double partition_constant = 1.0;
  Mat base;   // tied_base_measure only
  Vec scale;  // tied_base_measure only

  static TabularConditionalFamily free_table(int x_card, int u_card);
  static TabularConditionalFamily softmax_logits(int x_card, int u_card);
  static TabularConditionalFamily constant_partition(int x_card, int u_card, double c);
  static TabularConditionalFamily tied_base_measure(Mat base, Vec scale);

  int num_params() const;
  /// u x x table of log f.
  Mat log_scores(const Vec& theta) const;
  /// Chain rule: dL/dtheta from dL/dlog f.
  Vec pullback(const Vec& theta, const Mat& d_log_f) const;
  /// Normalized conditional table p(x|u).
  Mat conditional(const Vec& theta) const;
};

std::string family_name(TabularConditionalFamily::Kind k);
TabularConditionalFamily::Kind parse_family(const std::string& s);

/// Empirical p(x|u); unseen u get the uniform row.
Mat empirical_conditional(const std::vector<ConditionalSample>& data, int x_card, int u_card);
/// Empirical u frequencies.
Vec empirical_u_weights(const std::vector<ConditionalSample>& data, int u_card);
/// Mean log p(x|u) over the data.
double average_log_likelihood(const Mat& table, const std::vector<ConditionalSample>& data);

/// sum_u w(u) * TV(p(.|u), q(.|u)).
double tv_distance(const Mat& p, const Mat& q, const Vec& u_weights);

struct MinimizeOptions {
  int max_iterations = 500;
  double grad_tol = 1e-9;
  /// Box bound applied to the first num_capped coordinates.
  double cap = 20.0;
  int num_capped = 0;
  /// Optional invariance projection applied after every accepted step.
  std::function<void(Vec&)> recenter;
};

struct MinimizeResult {
  Vec x;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
};

/// Levenberg-damped Newton on a smooth function of a few variables, with a
/// finite-difference Hessian built from the analytic gradient.
MinimizeResult minimize_small(const std::function<double(const Vec&, Vec*)>& f, Vec x0,
                              const MinimizeOptions& opts);

/// Maximum-likelihood conditional table. free_table is the closed-form
/// frequency estimate; the other families are fitted on the exact
/// log-likelihood with logits capped at +-20.
Mat exact_mle(const std::vector<ConditionalSample>& data, const TabularConditionalFamily& family);
/// Parameters of the exact MLE (closed-form families return log frequencies).
Vec exact_mle_params(const std::vector<ConditionalSample>& data, const TabularConditionalFamily& family);

struct NceTabularFit {
  Vec theta;
  double gamma = 0.0;
  Mat table;
  int iterations = 0;
  double grad_norm = 0.0;
};

/// Full-batch NCE fit of a tabular family to a fixed dataset and a fixed set of
/// negatives summarized as per-row outcome counts (n x x), uniform noise.
NceTabularFit fit_nce_tabular(const TabularConditionalFamily& family,
                              const std::vector<ConditionalSample>& data, const Mat& neg_counts,
                              NceConfig::Objective objective, int K);

struct ConsistencyCell {
  std::uint64_t seed = 0;
  int K = 0;
  NceConfig::Objective objective = NceConfig::Objective::ranking;
  double tv = 0.0;
  double nce_loglik = 0.0;
  double mle_loglik = 0.0;
  double gamma_hat = 0.0;
  bool failed = false;
  std::string error;
};

struct ConsistencySpec {
  SyntheticConditional env;
  TabularConditionalFamily family;
  int n = 200;
  std::vector<int> K_list{4, 16, 64, 256};
  NceConfig::Objective objective = NceConfig::Objective::ranking;
  std::vector<std::uint64_t> seeds;
  /// Draw a fresh Dirichlet(1) true table per seed (free families only).
  bool resample_table = false;
};

/// One dataset per seed, one exact MLE per seed, one NCE fit per (seed, K) on
/// that same dataset. A cell that throws is recorded as failed.
std::vector<ConsistencyCell> consistency_experiment(const ConsistencySpec& spec);

/// Seed-averaged TV per K (failed cells excluded).
std::vector<std::pair<int, double>> mean_tv_by_k(const std::vector<ConsistencyCell>& cells);

void write_consistency_csv(const std::string& path, const std::vector<ConsistencyCell>& cells);

/// The witness family used by the binary-vs-ranking dichotomy: a 4 x 3 tied
/// base-measure family whose partition function varies 4x across u, with the
/// truth inside the family.
SyntheticConditional varying_partition_env();
TabularConditionalFamily varying_partition_family();

}  // namespace ctrl
