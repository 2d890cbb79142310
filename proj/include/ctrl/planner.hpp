#pragma once

// Planning against a model plus bonus: exact value iteration for discrete
// MDPs, and fitted-Q evaluation with an augmented head on frozen features
// followed by softmax policy updates.

#include "ctrl/diffnet.hpp"
#include "ctrl/mdp.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace ctrl {

struct ValueIterationResult {
  Vec V;
  Mat Q;       // S x A
  Mat greedy;  // S x A one-hot, lowest index on ties
  int sweeps = 0;
  double residual = 0.0;

  Policy policy() const { return Policy::tabular(greedy); }
};

/// P is (S*A) x S with row s*A+a; R is S x A. Absorbing states have V = 0.
/// Iterates V <- max_a Q until the sup-norm residual drops below tol.
ValueIterationResult value_iteration(const Mat& P, const Mat& R, double gamma, double tol = 1e-10,
                                     const std::vector<char>& absorbing = {},
                                     const Vec* warm_start = nullptr);
ValueIterationResult value_iteration(const TabularMdp& mdp, const Mat& R, double gamma, double tol = 1e-10);

/// Lowest-index argmax per row as a one-hot table.
Mat greedy_table(const Mat& Q);

/// Q(phi) = w1ᵀphi + w2ᵀ sigma(w3ᵀphi), with a Polyak-averaged target copy.
struct AugmentedQ {
  Vec w1, w2;
  Mat w3;  // d x m
  Activation sigma = Activation::tanh;
  Vec target;  // packed target parameters
  double tau = 0.005;

  /// w1 = w2 = 0, w3 small Gaussian.
  static AugmentedQ init(int d, int m, Activation sigma, double tau, Rng& rng);

  int d() const { return static_cast<int>(w1.size()); }
  int m() const { return static_cast<int>(w2.size()); }
  int num_params() const { return d() + m() + d() * m(); }
  /// [w1, w2, vec(w3) column-major].
  Vec params() const;
  void set_params(const Vec& p);

  double value(const Vec& phi) const;
  double target_value(const Vec& phi) const;
  /// One value per row of Phi.
  Vec values(const Mat& phi_rows) const;
  /// target <- tau * online + (1 - tau) * target.
  void polyak();
  /// Value and gradient w.r.t. the packed parameters for packed p.
  static double evaluate(const Vec& p, int d, int m, Activation sigma, const Vec& phi, Vec* grad);
};

struct EntropyConfig {
  double weight = 0.0;
  bool enabled = false;

  double effective() const { return enabled ? weight : 0.0; }
  void validate() const;
};

/// Frozen per-state views the planner needs. phi_rows(s) holds phi(s, a_k) in
/// row k; policy_rows(s) the policy's own features in row k.
struct PlannerFeatures {
  int num_actions = 0;
  std::function<Mat(const Vec& state)> phi_rows;
  std::function<Mat(const Vec& state)> policy_rows;
  std::function<int(const Vec& action)> action_index;
  /// Bonus (or penalty, already signed) added to the reward: bonus(phi).
  std::function<double(const Vec& phi)> bonus;
};

struct PlannerState {
  AugmentedQ q;
  Vec policy_weights;
  double temperature = 1.0;
  int num_actions = 0;
  std::function<Mat(const Vec& state)> policy_rows;
  long iteration = 0;

  Vec probs(const Vec& state) const;
  Policy policy() const;
};

/// Squared TD error (Q(phi_i) - y_i + w log pi_i)^2 averaged over items, with
/// y and the log-pi term precomputed.
struct TdItem {
  Vec phi;
  double target = 0.0;
  double log_pi_term = 0.0;
};
double td_loss(const AugmentedQ& q, const Vec& params, const std::vector<TdItem>& items, Vec* grad);

/// Per-state entropy-regularized policy objective, negated for descent:
///   L(v) = -(1/n) sum_s [ sum_a pi_a (Q_a - w log pi_a) - reg * KL(pi || pi_b) ]
/// with pi = softmax(F_s v / T). The KL term is used when log_behavior is set.
struct PolicyItem {
  Mat features;  // A x p
  Vec q;         // A
  Vec log_behavior;  // A, or empty
};
double policy_surrogate(const Vec& v, double temperature, const std::vector<PolicyItem>& items,
                        double entropy_weight, double reg_weight, Vec* grad);

/// One TD step on (w1, w2, w3); y = r + b + gamma (1 - terminal) Qtarget(s', a')
/// with a' ~ pi(.|s'). Returns the pre-step loss.
double fitted_q_step(PlannerState& state, const std::vector<Transition>& batch,
                     const PlannerFeatures& features, const EntropyConfig& entropy, double gamma,
                     OptimizerState& optimizer, Rng& rng);

/// One step on the policy weights against the current Q. Returns the surrogate.
double policy_gradient_step(PlannerState& state, const std::vector<Vec>& states,
                            const PlannerFeatures& features, const EntropyConfig& entropy,
                            OptimizerState& optimizer);

/// Same with the behaviour-KL penalty.
double offline_regularized_step(PlannerState& state, const std::vector<Vec>& states,
                                const PlannerFeatures& features,
                                const std::function<Vec(const Vec& state)>& behavior_logprob,
                                double reg_weight, OptimizerState& optimizer);

/// Policy entropy averaged over states.
double mean_policy_entropy(const PlannerState& state, const std::vector<Vec>& states);

}  // namespace ctrl
