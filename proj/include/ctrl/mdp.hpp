#pragma once

// Core MDP abstractions: spaces, transitions, policies, discounted rollouts,
// occupancy estimation and exact tabular policy evaluation.

#include "ctrl/common.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ctrl {

/// A discrete set {0..n-1} or an axis-aligned box. Points of either kind are
/// carried as Vec; a discrete point is the 1-vector holding its index.
class Space {
 public:
  enum class Kind { discrete, box };

  static Space discrete(int cardinality);
  static Space box(Vec low, Vec high);

  Kind kind() const { return kind_; }
  bool is_discrete() const { return kind_ == Kind::discrete; }
  int cardinality() const { return cardinality_; }
  const Vec& low() const { return low_; }
  const Vec& high() const { return high_; }

  /// Length of a point vector (1 for discrete).
  int point_dim() const;
  /// Volume of a box, or cardinality of a discrete set.
  double measure() const;
  bool contains(const Vec& point) const;
  Vec clip(const Vec& point) const;
  /// Index of a discrete point; throws when out of range.
  int index(const Vec& point) const;

  std::string describe() const;
  static Space parse(const std::string& text);

  bool operator==(const Space& other) const;

 private:
  Kind kind_ = Kind::discrete;
  int cardinality_ = 1;
  Vec low_, high_;
};

using StateSpace = Space;
using ActionSpace = Space;

struct Transition {
  Vec state;
  Vec action;
  double reward = 0.0;
  Vec next_state;
  bool terminal = false;
};

struct StepResult {
  Vec next;
  double reward = 0.0;
  bool terminal = false;
};

/// Immutable environment description; per-episode state is owned by the caller.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual const Space& state_space() const = 0;
  virtual const Space& action_space() const = 0;
  virtual Vec reset(Rng& rng) const = 0;
  virtual StepResult step(const Vec& state, const Vec& action, Rng& rng) const = 0;
  /// The finite action set used by planners and policies. Discrete spaces
  /// return {[0], [1], ...}; continuous environments return a fixed grid.
  virtual std::vector<Vec> action_set() const;
};

struct DiscountedMdpConfig {
  double gamma = 0.99;
  Vec initial_distribution;  // categorical over discrete states (rho)

  void validate() const;
};

/// Throws std::invalid_argument unless 0 < gamma < 1.
void require_discount(double gamma);

/// pi : S -> Delta(A) over an environment's finite action set.
class Policy {
 public:
  enum class Kind { uniform, tabular, tabular_softmax, feature_softmax, epsilon_mixture };

  /// Returns the feature rows phi(s, a_k) for every action, one row per action.
  using FeatureRows = std::function<Mat(const Vec& state)>;

  static Policy uniform(int num_actions);
  static Policy tabular(Mat probabilities);
  static Policy tabular_softmax(Mat logits);
  static Policy feature_softmax(Vec weights, double temperature, int num_actions,
                                FeatureRows features);
  /// (1 - eps) * base + eps * uniform.
  static Policy epsilon_mixture(Policy base, double epsilon);

  Kind kind() const { return kind_; }
  int num_actions() const { return num_actions_; }

  Vec probs(const Vec& state) const;
  int sample(const Vec& state, Rng& rng) const;

  /// Dense |S| x |A| table for discrete state spaces.
  Mat table(int num_states) const;

  const Mat& logits() const { return table_; }
  const Vec& feature_weights() const { return weights_; }
  double temperature() const { return temperature_; }

 private:
  Kind kind_ = Kind::uniform;
  int num_actions_ = 1;
  Mat table_;
  Vec weights_;
  double temperature_ = 1.0;
  double epsilon_ = 0.0;
  FeatureRows features_;
  std::shared_ptr<const Policy> base_;
};

Vec softmax(const Vec& logits);

/// Explicit discrete MDP: transition rows are indexed by s * A + a.
struct TabularMdp {
  int num_states = 0;
  int num_actions = 0;
  Mat transition;  // (S*A) x S, row-stochastic
  Mat reward;      // S x A
  Vec rho;         // initial distribution over S
  std::vector<bool> terminal;  // optional absorbing zero-value states

  int row(int s, int a) const { return s * num_actions + a; }
  void validate(double tol = 1e-9) const;
  bool is_terminal(int s) const { return !terminal.empty() && terminal[static_cast<size_t>(s)]; }
};

TabularMdp load_tabular_mdp(const std::string& path);
TabularMdp parse_tabular_mdp(const std::string& text);
std::string format_tabular_mdp(const TabularMdp& mdp);

/// Random dense MDP with Dirichlet(1) rows and uniform [0,1] rewards.
TabularMdp random_tabular_mdp(int num_states, int num_actions, Rng& rng);

/// Environment view of a TabularMdp; reward is r(s,a), next ~ P(.|s,a).
class TabularEnvironment : public Environment {
 public:
  explicit TabularEnvironment(TabularMdp mdp);
  const Space& state_space() const override { return states_; }
  const Space& action_space() const override { return actions_; }
  Vec reset(Rng& rng) const override;
  StepResult step(const Vec& state, const Vec& action, Rng& rng) const override;
  const TabularMdp& mdp() const { return mdp_; }

 private:
  TabularMdp mdp_;
  Space states_, actions_;
};

/// Rollout stopped by an independent Bernoulli(1 - gamma) per step, an
/// environment terminal, or the 10/(1-gamma) length cap.
std::vector<Transition> sample_discounted_rollout(const Environment& env, const Policy& policy,
                                                  double gamma, Rng& rng);

/// Fixed-horizon rollout (stops early only on a terminal).
std::vector<Transition> sample_rollout(const Environment& env, const Policy& policy, int horizon,
                                       Rng& rng);

struct OccupancyEstimate {
  struct Entry {
    Vec state;
    Vec action;
    double weight = 0.0;
  };
  std::vector<Entry> entries;  // sorted lexicographically by (state, action)
  double normalization = 0.0;  // total discounted mass before normalizing

  double weight(const Vec& state, const Vec& action) const;
  /// Expectation of f(s, a) under the normalized weights.
  double expectation(const std::function<double(const Vec&, const Vec&)>& f) const;
};

OccupancyEstimate estimate_occupancy(const std::vector<std::vector<Transition>>& rollouts,
                                     double gamma);

/// Exact V^pi per state from (I - gamma P_pi) V = r_pi.
Vec policy_state_values(const TabularMdp& mdp, const Mat& policy, double gamma);
/// Q^pi(s,a) = r + gamma * P V^pi.
Mat policy_q_values(const TabularMdp& mdp, const Mat& policy, double gamma);
/// E_{s ~ rho}[V^pi(s)].
double policy_value(const TabularMdp& mdp, const Mat& policy, double gamma);
/// Exact normalized discounted occupancy d^pi (S x A).
Mat exact_occupancy(const TabularMdp& mdp, const Mat& policy, double gamma);

}  // namespace ctrl
