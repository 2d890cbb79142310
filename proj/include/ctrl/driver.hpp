#pragma once

// Online exploration (optimistic bonus) and offline planning (pessimistic
// penalty) loops, replay buffering, offline dataset files and the coverage
// diagnostic.

#include "ctrl/elliptical.hpp"
#include "ctrl/environments.hpp"
#include "ctrl/format.hpp"
#include "ctrl/lowrank.hpp"
#include "ctrl/nce.hpp"
#include "ctrl/planner.hpp"

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

namespace ctrl {

class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity);

  void push(Transition t);
  size_t size() const { return entries_.size(); }
  size_t capacity() const { return capacity_; }
  std::uint64_t insertion_count() const { return inserted_; }
  /// Oldest first.
  const Transition& at(size_t i) const { return entries_.at(i); }
  std::vector<Transition> contents() const { return {entries_.begin(), entries_.end()}; }
  /// n draws with replacement.
  std::vector<Transition> sample(size_t n, Rng& rng) const;

 private:
  size_t capacity_;
  std::deque<Transition> entries_;
  std::uint64_t inserted_ = 0;
};

struct PlannerConfig {
  int q_hidden = 32;
  Activation q_activation = Activation::tanh;
  double tau = 0.005;
  double q_learning_rate = 3e-4;
  double policy_learning_rate = 3e-4;
  int batch_size = 256;
  EntropyConfig entropy;
  double vi_tol = 1e-10;

  void validate() const;
};

struct OnlineConfig {
  int episodes = 5000;  // epochs N
  int collect_per_epoch = 8;
  int repr_update_period = 500;
  /// NCE steps per representation update; 0 keeps the model frozen.
  int nce_steps = 200;
  /// Tabular mode: epochs between value-iteration refreshes.
  int policy_update_period = 50;
  /// Learned-feature mode: fitted-Q / policy steps per epoch.
  int planner_steps_per_epoch = 1;
  double epsilon_mix = 0.05;
  double gamma = 0.99;
  size_t buffer_capacity = 1000000;
  int metrics_period = 50;
  int eval_episodes = 10;
  int eval_horizon = 200;
  /// Held-out transitions scored per metrics row in learned-feature mode.
  int heldout_size = 200;
  int heldout_mc_samples = 1000;
  std::uint64_t seed = 0;
  BonusConfig bonus;
  PlannerConfig planner;

  void validate() const;
};

struct OnlineMetricsRow {
  int epoch = 0;
  long env_steps = 0;
  double return_estimate = 0.0;
  double success_rate = 0.0;
  double bonus_mean = 0.0;
  double nce_loss = 0.0;
  double heldout_loglik = 0.0;
  double td_loss = 0.0;
  double policy_entropy = 0.0;
  double mean_q = 0.0;
};

struct OnlineResult {
  std::vector<OnlineMetricsRow> metrics;
  std::vector<NceTraceRow> nce_trace;
  /// Behaviour policy (planned with the bonus) at the end of training.
  Policy policy = Policy::uniform(1);
  /// Exploitation policy planned without the bonus.
  Policy exploit_policy = Policy::uniform(1);
  /// Final evaluation of exploit_policy on the true environment.
  double final_success_rate = 0.0;
  double final_return = 0.0;
  long env_steps = 0;
};

/// Algorithm loop. Discrete state and action spaces plan exactly by value
/// iteration on the renormalized learned model; otherwise the augmented-Q
/// planner runs on frozen features over env.action_set().
/// Metrics rows are handed to `sink` as they are produced, so a caller can
/// flush them before a divergence propagates.
OnlineResult run_ctrl_ucb(const Environment& env, const OnlineConfig& config, LowRankModel& model,
                          const NceConfig& nce_config,
                          const std::function<void(const OnlineMetricsRow&)>& sink = {});

/// metrics.csv writer that flushes after every row.
class OnlineMetricsWriter {
 public:
  explicit OnlineMetricsWriter(const std::string& path);
  void write(const OnlineMetricsRow& row);

 private:
  CsvWriter csv_;
};

/// Writes one CSV row per OnlineMetricsRow.
void write_online_metrics(const std::string& path, const std::vector<OnlineMetricsRow>& rows);

struct EvalResult {
  double mean_return = 0.0;  // discounted
  double success_rate = 0.0;
};

/// Fixed-horizon rollouts of a policy over the environment's action set.
/// Success means an episode ended on a terminal transition with reward > 0.
EvalResult evaluate_policy(const Environment& env, const Policy& policy, double gamma, int episodes,
                           int horizon, Rng& rng);

struct CoverageReport {
  double c_pi_star = 0.0;
  double omega = 1.0;
  int feature_dim = 0;
  double condition_number = 0.0;
};

using FeatureFn = std::function<Vec(const Vec& state, const Vec& action)>;

/// c = tr(A (B + ridge I)^-1), A = E_target[phi phiᵀ], B = E_D[phi phiᵀ].
/// omega uses Laplace-smoothed counts when actions are discrete
/// (num_actions > 0) and is 1 otherwise. Singular B + ridge I throws
/// ConfigError.
CoverageReport coverage_coefficient(const OccupancyEstimate& target, const std::vector<Transition>& dataset,
                                    const FeatureFn& phi, double ridge = 1e-8, int num_actions = 0);

/// Occupancy estimate holding an exact S x A table.
OccupancyEstimate occupancy_from_table(const Mat& d);

/// Laplace-smoothed (+1) behaviour estimate, S x A.
Mat behavior_counts_estimate(const std::vector<Transition>& data, int num_states, int num_actions);

struct OfflineConfig {
  double gamma = 0.99;
  double reg_weight = 1.0;
  double vi_tol = 1e-10;
  int nce_steps = 2000;
  double ridge = 1e-8;
  std::uint64_t seed = 0;
  BonusConfig bonus{5.0, 1.0, BonusConfig::Mode::penalty};

  void validate() const;
};

struct OfflineResult {
  Policy policy = Policy::uniform(1);
  /// Greedy policy on the penalized Q (tabular mode).
  Mat greedy;
  Mat q;
  CoverageReport coverage;
  double penalty_mean = 0.0;
  double value_estimate = 0.0;  // rho-averaged penalized V, tabular mode
  std::vector<NceTraceRow> nce_trace;
  std::vector<int> unvisited_states;
};

/// One representation phase on the dataset, penalty from dataset features,
/// behaviour-regularized planning against r - b. Discrete spaces only. The
/// regularized policy step is solved in closed form: pi ∝ pi_b exp(Q / reg)
/// on visited states, uniform elsewhere. The coverage target is the returned
/// policy's occupancy under the learned model started from the dataset's
/// state distribution.
OfflineResult run_ctrl_lcb(const std::vector<Transition>& dataset, const Space& states, const Space& actions,
                           const OfflineConfig& config, LowRankModel& model, const NceConfig& nce_config);

// Dataset files. Header then one record per line:
//   ctrl-dataset v1
//   state: <space>
//   action: <space>
//   records: N
//   s... a... r s'... terminal
struct Dataset {
  Space states = Space::discrete(1);
  Space actions = Space::discrete(1);
  std::vector<Transition> transitions;
};

void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);

}  // namespace ctrl
