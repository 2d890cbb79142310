#include "ctrl/planner.hpp"

#include "ctrl/kernels.hpp"

#include <cmath>

namespace ctrl {

Mat greedy_table(const Mat& Q) {
  Mat g = Mat::Zero(Q.rows(), Q.cols());
  for (Eigen::Index s = 0; s < Q.rows(); ++s) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < Q.cols(); ++a)
      if (Q(s, a) > Q(s, best)) best = a;
    g(s, best) = 1.0;
  }
  return g;
}

ValueIterationResult value_iteration(const Mat& P, const Mat& R, double gamma, double tol,
                                     const std::vector<char>& absorbing, const Vec* warm_start) {
  require_discount(gamma);
  if (!(tol > 0)) throw std::invalid_argument("value_iteration tolerance must be > 0");
  const Eigen::Index S = R.rows();
  if (P.rows() != S * R.cols() || P.cols() != S) throw std::invalid_argument("value_iteration shape mismatch");
  if (!R.allFinite()) throw std::invalid_argument("value_iteration reward is not finite");
  if (!absorbing.empty() && static_cast<Eigen::Index>(absorbing.size()) != S) {
    throw std::invalid_argument("absorbing mask length mismatch");
  }
  ValueIterationResult res;
  res.V = warm_start ? *warm_start : Vec::Zero(S);
  if (res.V.size() != S) throw std::invalid_argument("warm start length mismatch");
  // Enough sweeps to contract any start below tol, with generous slack.
  const double span = R.cwiseAbs().maxCoeff() / (1 - gamma) + res.V.cwiseAbs().maxCoeff() + 1.0;
  const int max_sweeps = 100 + static_cast<int>(std::ceil(std::log(tol / span) / std::log(gamma)));
  for (int k = 0; k < max_sweeps; ++k) {
    kernels::bellman_backup(P, R, res.V, gamma, absorbing, res.Q);
    const Vec next = res.Q.rowwise().maxCoeff();
    res.residual = (next - res.V).lpNorm<Eigen::Infinity>();
    res.V = next;
    res.sweeps = k + 1;
    if (res.residual < tol) break;
  }
  if (!(res.residual < tol)) throw DivergenceError("value iteration did not converge");
  kernels::bellman_backup(P, R, res.V, gamma, absorbing, res.Q);
  res.greedy = greedy_table(res.Q);
  return res;
}

ValueIterationResult value_iteration(const TabularMdp& mdp, const Mat& R, double gamma, double tol) {
  std::vector<char> absorbing;
  if (!mdp.terminal.empty()) {
    for (bool t : mdp.terminal) absorbing.push_back(t ? 1 : 0);
  }
  return value_iteration(mdp.transition, R, gamma, tol, absorbing);
}

// ---------------------------------------------------------------- AugmentedQ

AugmentedQ AugmentedQ::init(int d, int m, Activation sigma, double tau, Rng& rng) {
  if (d < 1 || m < 0) throw std::invalid_argument("AugmentedQ sizes");
  if (sigma != Activation::tanh && sigma != Activation::relu) {
    throw ConfigError("AugmentedQ activation must be tanh or relu");
  }
  if (!(tau > 0 && tau <= 1)) throw ConfigError("planner.tau must lie in (0, 1]");
  AugmentedQ q;
  q.w1 = Vec::Zero(d);
  q.w2 = Vec::Zero(m);
  q.w3.resize(d, m);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index i = 0; i < q.w3.size(); ++i) q.w3.data()[i] = s * standard_normal(rng);
  q.sigma = sigma;
  q.tau = tau;
  q.target = q.params();
  return q;
}

Vec AugmentedQ::params() const {
  Vec p(num_params());
  p << w1, w2, Eigen::Map<const Vec>(w3.data(), w3.size());
  return p;
}

void AugmentedQ::set_params(const Vec& p) {
  if (p.size() != num_params()) throw std::invalid_argument("AugmentedQ parameter length mismatch");
  w1 = p.head(d());
  w2 = p.segment(d(), m());
  w3 = Eigen::Map<const Mat>(p.data() + d() + m(), d(), m());
}

double AugmentedQ::evaluate(const Vec& p, int d, int m, Activation sigma, const Vec& phi, Vec* grad) {
  const auto w1 = p.head(d);
  const auto w2 = p.segment(d, m);
  const Eigen::Map<const Mat> w3(p.data() + d + m, d, m);
  const Mat h = (w3.transpose() * phi);
  const Mat act = apply_activation(sigma, h);
  const double v = w1.dot(phi) + w2.dot(act.col(0));
  if (grad) {
    grad->resize(p.size());
    grad->head(d) = phi;
    grad->segment(d, m) = act.col(0);
    const Vec g = w2.cwiseProduct(activation_derivative(sigma, h, act).col(0));
    Eigen::Map<Mat>(grad->data() + d + m, d, m) = phi * g.transpose();
  }
  return v;
}

double AugmentedQ::value(const Vec& phi) const { return evaluate(params(), d(), m(), sigma, phi, nullptr); }

double AugmentedQ::target_value(const Vec& phi) const { return evaluate(target, d(), m(), sigma, phi, nullptr); }

Vec AugmentedQ::values(const Mat& phi_rows) const {
  const Vec p = params();
  Vec out(phi_rows.rows());
  for (Eigen::Index i = 0; i < phi_rows.rows(); ++i) out[i] = evaluate(p, d(), m(), sigma, phi_rows.row(i).transpose(), nullptr);
  return out;
}

void AugmentedQ::polyak() { target = tau * params() + (1.0 - tau) * target; }

void EntropyConfig::validate() const {
  if (!(weight >= 0) || !std::isfinite(weight)) throw ConfigError("entropy weight must be finite and >= 0");
}

// ---------------------------------------------------------------- policy

Vec PlannerState::probs(const Vec& s) const { return softmax(policy_rows(s) * policy_weights / temperature); }

Policy PlannerState::policy() const {
  return Policy::feature_softmax(policy_weights, temperature, num_actions, policy_rows);
}

double td_loss(const AugmentedQ& q, const Vec& params, const std::vector<TdItem>& items, Vec* grad) {
  if (items.empty()) throw std::invalid_argument("td_loss needs a nonempty batch");
  double loss = 0.0;
  if (grad) *grad = Vec::Zero(params.size());
  Vec g;
  const double inv = 1.0 / static_cast<double>(items.size());
  for (const auto& it : items) {
    const double v = AugmentedQ::evaluate(params, q.d(), q.m(), q.sigma, it.phi, grad ? &g : nullptr);
    const double delta = v - it.target + it.log_pi_term;
    loss += delta * delta * inv;
    if (grad) *grad += (2.0 * delta * inv) * g;
  }
  if (!std::isfinite(loss)) throw DivergenceError("Q diverged");
  return loss;
}

double policy_surrogate(const Vec& v, double temperature, const std::vector<PolicyItem>& items,
                        double entropy_weight, double reg_weight, Vec* grad) {
  if (items.empty()) throw std::invalid_argument("policy_surrogate needs a nonempty batch");
  if (reg_weight < 0) throw std::invalid_argument("reg_weight must be >= 0");
  double obj = 0.0;
  if (grad) *grad = Vec::Zero(v.size());
  const double inv = 1.0 / static_cast<double>(items.size());
  for (const auto& it : items) {
    const Vec logits = it.features * v / temperature;
    const Vec logp = logits.array() - log_sum_exp(logits);
    const Vec p = logp.array().exp();
    // Per-action payoff u_a; the objective is sum_a p_a u_a with u depending on p
    // only through log p, whose derivative term sums to zero under p.
    Vec u = it.q - entropy_weight * logp;
    const bool kl = it.log_behavior.size() > 0;
    if (kl) u -= reg_weight * (logp - it.log_behavior);
    const double j = p.dot(u);
    obj += j * inv;
    if (grad) {
      const Vec dlogits = p.cwiseProduct((u.array() - j).matrix());
      *grad -= inv * it.features.transpose() * dlogits / temperature;
    }
  }
  if (!std::isfinite(obj)) throw DivergenceError("policy objective diverged");
  return -obj;
}

double fitted_q_step(PlannerState& state, const std::vector<Transition>& batch,
                     const PlannerFeatures& features, const EntropyConfig& entropy, double gamma,
                     OptimizerState& optimizer, Rng& rng) {
  require_discount(gamma);
  const double w = entropy.effective();
  std::vector<TdItem> items;
  items.reserve(batch.size());
  for (const auto& t : batch) {
    const Mat rows = features.phi_rows(t.state);
    const int a = features.action_index(t.action);
    TdItem it;
    it.phi = rows.row(a).transpose();
    double y = t.reward + (features.bonus ? features.bonus(it.phi) : 0.0);
    if (!t.terminal) {
      const Vec pn = state.probs(t.next_state);
      const int an = sample_categorical(pn, rng);
      const Mat next_rows = features.phi_rows(t.next_state);
      y += gamma * state.q.target_value(next_rows.row(an).transpose());
    }
    it.target = y;
    if (w > 0) it.log_pi_term = w * std::log(state.probs(t.state)[a]);
    items.push_back(std::move(it));
  }
  Vec p = state.q.params(), g;
  const double loss = td_loss(state.q, p, items, &g);
  try {
    optimizer_step(optimizer, p, g);
  } catch (const DivergenceError&) {
    throw DivergenceError("Q diverged");
  }
  state.q.set_params(p);
  state.q.polyak();
  ++state.iteration;
  return loss;
}

namespace {

double policy_step(PlannerState& state, const std::vector<Vec>& states, const PlannerFeatures& features,
                   double entropy_weight, double reg_weight,
                   const std::function<Vec(const Vec&)>* behavior, OptimizerState& optimizer) {
  std::vector<PolicyItem> items;
  items.reserve(states.size());
  for (const auto& s : states) {
    PolicyItem it;
    it.features = state.policy_rows(s);
    it.q = state.q.values(features.phi_rows(s));
    if (behavior) it.log_behavior = (*behavior)(s);
    items.push_back(std::move(it));
  }
  Vec g;
  const double loss = policy_surrogate(state.policy_weights, state.temperature, items, entropy_weight, reg_weight, &g);
  optimizer_step(optimizer, state.policy_weights, g);
  return loss;
}

}  // namespace

double policy_gradient_step(PlannerState& state, const std::vector<Vec>& states,
                            const PlannerFeatures& features, const EntropyConfig& entropy,
                            OptimizerState& optimizer) {
  return policy_step(state, states, features, entropy.effective(), 0.0, nullptr, optimizer);
}

double offline_regularized_step(PlannerState& state, const std::vector<Vec>& states,
                                const PlannerFeatures& features,
                                const std::function<Vec(const Vec& state)>& behavior_logprob,
                                double reg_weight, OptimizerState& optimizer) {
  if (reg_weight < 0) throw std::invalid_argument("reg_weight must be >= 0");
  return policy_step(state, states, features, 0.0, reg_weight, &behavior_logprob, optimizer);
}

double mean_policy_entropy(const PlannerState& state, const std::vector<Vec>& states) {
  if (states.empty()) return 0.0;
  double h = 0.0;
  for (const auto& s : states) {
    const Vec p = state.probs(s);
    for (Eigen::Index a = 0; a < p.size(); ++a)
      if (p[a] > 0) h -= p[a] * std::log(p[a]);
  }
  return h / static_cast<double>(states.size());
}

}  // namespace ctrl
