#include "ctrl/driver.hpp"

#include "ctrl/format.hpp"
#include "ctrl/kernels.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace ctrl {

// ---------------------------------------------------------------- replay buffer

ReplayBuffer::ReplayBuffer(size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("replay buffer capacity must be >= 1");
}

void ReplayBuffer::push(Transition t) {
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(t));
  ++inserted_;
}

std::vector<Transition> ReplayBuffer::sample(size_t n, Rng& rng) const {
  if (entries_.empty()) throw std::invalid_argument("cannot sample an empty replay buffer");
  std::uniform_int_distribution<size_t> pick(0, entries_.size() - 1);
  std::vector<Transition> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(entries_[pick(rng)]);
  return out;
}

// ---------------------------------------------------------------- configs

void PlannerConfig::validate() const {
  if (q_hidden < 0) throw ConfigError("planner.q_hidden must be >= 0");
  if (q_activation != Activation::tanh && q_activation != Activation::relu) {
    throw ConfigError("planner.q_activation must be tanh or relu");
  }
  if (!(tau > 0 && tau <= 1)) throw ConfigError("planner.tau must lie in (0, 1]");
  if (!(q_learning_rate > 0) || !(policy_learning_rate > 0)) throw ConfigError("planner learning rates must be > 0");
  if (batch_size < 1) throw ConfigError("planner.batch_size must be >= 1");
  if (!(vi_tol > 0)) throw ConfigError("planner.vi_tol must be > 0");
  entropy.validate();
}

void OnlineConfig::validate() const {
  if (episodes < 1) throw ConfigError("driver.episodes must be >= 1");
  if (collect_per_epoch < 1) throw ConfigError("driver.collect_per_epoch must be >= 1");
  if (repr_update_period < 1) throw ConfigError("driver.repr_update_period must be >= 1");
  if (policy_update_period < 1) throw ConfigError("driver.policy_update_period must be >= 1");
  if (planner_steps_per_epoch < 0) throw ConfigError("driver.planner_steps_per_epoch must be >= 0");
  if (nce_steps < 0) throw ConfigError("driver.nce_steps must be >= 0");
  if (!(epsilon_mix >= 0 && epsilon_mix <= 1)) throw ConfigError("driver.epsilon_mix must lie in [0,1]");
  if (!(gamma > 0 && gamma < 1)) throw ConfigError("gamma must lie in (0,1)");
  if (buffer_capacity < 1) throw ConfigError("driver.buffer_capacity must be >= 1");
  if (metrics_period < 1) throw ConfigError("driver.metrics_period must be >= 1");
  if (eval_episodes < 0 || eval_horizon < 1) throw ConfigError("driver evaluation settings are invalid");
  if (heldout_size < 0 || heldout_mc_samples < 1) throw ConfigError("driver held-out settings are invalid");
  bonus.validate();
  planner.validate();
}

void OfflineConfig::validate() const {
  if (!(gamma > 0 && gamma < 1)) throw ConfigError("gamma must lie in (0,1)");
  if (reg_weight < 0 || !std::isfinite(reg_weight)) throw ConfigError("offline.reg_weight must be >= 0");
  if (nce_steps < 0) throw ConfigError("offline.nce_steps must be >= 0");
  if (ridge < 0) throw ConfigError("offline.ridge must be >= 0");
  if (!(vi_tol > 0)) throw ConfigError("offline.vi_tol must be > 0");
  bonus.validate();
}

// ---------------------------------------------------------------- evaluation

EvalResult evaluate_policy(const Environment& env, const Policy& policy, double gamma, int episodes,
                           int horizon, Rng& rng) {
  EvalResult res;
  if (episodes <= 0) return res;
  const auto actions = env.action_set();
  for (int e = 0; e < episodes; ++e) {
    Vec s = env.reset(rng);
    double ret = 0.0, disc = 1.0;
    for (int t = 0; t < horizon; ++t) {
      const int a = policy.sample(s, rng);
      const StepResult r = env.step(s, actions[static_cast<size_t>(a)], rng);
      ret += disc * r.reward;
      disc *= gamma;
      if (r.terminal) {
        if (r.reward > 0) res.success_rate += 1.0;
        break;
      }
      s = r.next;
    }
    res.mean_return += ret;
  }
  res.mean_return /= episodes;
  res.success_rate /= episodes;
  return res;
}

OnlineMetricsWriter::OnlineMetricsWriter(const std::string& path)
    : csv_(path, {"epoch", "env_steps", "return_estimate", "success_rate", "bonus_mean", "nce_loss",
                  "heldout_loglik", "td_loss", "policy_entropy", "mean_q"}) {}

void OnlineMetricsWriter::write(const OnlineMetricsRow& r) {
  csv_.row({std::to_string(r.epoch), std::to_string(r.env_steps), format_double(r.return_estimate),
            format_double(r.success_rate), format_double(r.bonus_mean), format_double(r.nce_loss),
            format_double(r.heldout_loglik), format_double(r.td_loss), format_double(r.policy_entropy),
            format_double(r.mean_q)});
  csv_.flush();
}

void write_online_metrics(const std::string& path, const std::vector<OnlineMetricsRow>& rows) {
  OnlineMetricsWriter w(path);
  for (const auto& r : rows) w.write(r);
}

namespace {

int action_index_in(const std::vector<Vec>& set, const Vec& a) {
  for (size_t k = 0; k < set.size(); ++k)
    if (set[k].size() == a.size() && set[k] == a) return static_cast<int>(k);
  throw std::invalid_argument("action is not in the planner's action set");
}

std::vector<Vec> next_states(const std::vector<Transition>& data) {
  std::vector<Vec> out;
  out.reserve(data.size());
  for (const auto& t : data) out.push_back(t.next_state);
  return out;
}

/// Samples s from the discounted occupancy by restarting with probability
/// 1 - gamma before each step (and after terminals).
class RestartChain {
 public:
  RestartChain(const Environment& env, double gamma) : env_(env), gamma_(gamma), actions_(env.action_set()) {}

  Transition step(const Policy& behavior, Rng& rng) {
    if (!have_state_ || uniform01(rng) < 1.0 - gamma_) {
      state_ = env_.reset(rng);
      have_state_ = true;
    }
    const int a = behavior.sample(state_, rng);
    const Vec& action = actions_[static_cast<size_t>(a)];
    const StepResult r = env_.step(state_, action, rng);
    Transition t{state_, action, r.reward, r.next, r.terminal};
    if (r.terminal) have_state_ = false;
    else state_ = r.next;
    return t;
  }

 private:
  const Environment& env_;
  double gamma_;
  std::vector<Vec> actions_;
  Vec state_;
  bool have_state_ = false;
};

// Sufficient statistics of a discrete dataset.
struct TabularStats {
  int S = 0, A = 0;
  Mat counts;      // S x A
  Mat reward_sum;  // S x A
  std::vector<char> absorbing;

  TabularStats(int s, int a) : S(s), A(a), counts(Mat::Zero(s, a)), reward_sum(Mat::Zero(s, a)), absorbing(static_cast<size_t>(s), 0) {}

  void add(const Transition& t) {
    const int s = static_cast<int>(t.state[0]), a = static_cast<int>(t.action[0]);
    counts(s, a) += 1.0;
    reward_sum(s, a) += t.reward;
    if (t.terminal) absorbing[static_cast<size_t>(t.next_state[0])] = 1;
  }
  Mat reward_hat() const {
    Mat r = Mat::Zero(S, A);
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        if (counts(s, a) > 0) r(s, a) = reward_sum(s, a) / counts(s, a);
    return r;
  }
};

/// phi for every (s,a), column s*A + a.
Mat tabular_features(const LowRankModel& model, int S, int A) {
  Mat enc(model.sa_input_dim(), S * A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) enc.col(s * A + a) = model.encode_sa(Vec::Constant(1, s), Vec::Constant(1, a));
  return model.phi_batch(enc);
}

/// Covariance from visit counts: sum_sa n_sa phi_sa phi_saᵀ + lambda I.
CovarianceState tabular_covariance(const Mat& features, const Mat& counts, double lambda) {
  const int A = static_cast<int>(counts.cols());
  Mat X = features;
  for (Eigen::Index c = 0; c < X.cols(); ++c) X.col(c) *= std::sqrt(counts(c / A, c % A));
  return CovarianceState::from_features(X, lambda);
}

double tabular_loglik(const Mat& P, const std::vector<Transition>& data, int A) {
  double s = 0.0;
  for (const auto& t : data) {
    const auto row = static_cast<Eigen::Index>(t.state[0]) * A + static_cast<Eigen::Index>(t.action[0]);
    s += std::log(P(row, static_cast<Eigen::Index>(t.next_state[0])));
  }
  return s / static_cast<double>(data.size());
}

OnlineResult run_tabular_ucb(const Environment& env, const OnlineConfig& cfg, LowRankModel& model,
                             const NceConfig& nce_cfg, const std::function<void(const OnlineMetricsRow&)>& sink) {
  const int S = env.state_space().cardinality(), A = env.action_space().cardinality();
  Rng rng(derive_seed(cfg.seed, 1));
  ReplayBuffer buffer(cfg.buffer_capacity);
  TabularStats stats(S, A);
  RestartChain chain(env, cfg.gamma);
  OptimizerState opt = OptimizerState::adam(nce_cfg.learning_rate);
  OnlineResult res;
  double gamma_param = nce_cfg.gamma_param;
  NceConfig ncfg = nce_cfg;

  Mat policy_table = Mat::Constant(S, A, 1.0 / A);
  Vec warm_v = Vec::Zero(S), warm_exploit = Vec::Zero(S);
  Mat last_bonus = Mat::Zero(S, A);
  double last_nce = 0.0, last_q_mean = 0.0, last_heldout = std::nan("");
  std::vector<Transition> pending;  // collected since the last representation update
  auto heldout = [&]() {
    const size_t n = std::min(pending.size(), static_cast<size_t>(cfg.heldout_size));
    if (n == 0) return last_heldout;
    const std::vector<Transition> held(pending.end() - static_cast<std::ptrdiff_t>(n), pending.end());
    return tabular_loglik(model.density_table(), held, A);
  };

  auto plan = [&](bool with_bonus, Vec& warm) {
    const Mat P = model.density_table();
    Mat R = stats.reward_hat();
    if (with_bonus) {
      const Mat features = tabular_features(model, S, A);
      const CovarianceState cov = tabular_covariance(features, stats.counts, cfg.bonus.lambda);
      last_bonus = bonus_table(cov, features, S, A, cfg.bonus);
      R += last_bonus;
    }
    const auto vi = value_iteration(P, R, cfg.gamma, cfg.planner.vi_tol, stats.absorbing, &warm);
    warm = vi.V;
    return vi;
  };

  for (int epoch = 0; epoch < cfg.episodes; ++epoch) {
    try {
      const Policy behavior = Policy::epsilon_mixture(Policy::tabular(policy_table), cfg.epsilon_mix);
      for (int k = 0; k < cfg.collect_per_epoch; ++k) {
        Transition t = chain.step(behavior, rng);
        stats.add(t);
        pending.push_back(t);
        buffer.push(std::move(t));
        ++res.env_steps;
      }
      if (cfg.nce_steps > 0 && (epoch + 1) % cfg.repr_update_period == 0) {
        last_heldout = heldout();
        const auto data = buffer.contents();
        const NoiseDistribution noise = NoiseDistribution::replay_mixture(model.next_space(), next_states(data), {});
        ncfg.gamma_param = gamma_param;
        const auto tr = train_representation(data, model, ncfg, noise, opt, cfg.nce_steps, rng);
        gamma_param = tr.gamma_param;
        if (!tr.trace.empty()) last_nce = tr.trace.back().loss;
        res.nce_trace.insert(res.nce_trace.end(), tr.trace.begin(), tr.trace.end());
        pending.clear();
      }
      if ((epoch + 1) % cfg.policy_update_period == 0) {
        const auto vi = plan(true, warm_v);
        policy_table = vi.greedy;
        last_q_mean = vi.Q.mean();
      }
      if ((epoch + 1) % cfg.metrics_period == 0 || epoch + 1 == cfg.episodes) {
        OnlineMetricsRow row;
        row.epoch = epoch + 1;
        row.env_steps = res.env_steps;
        const auto exploit = plan(false, warm_exploit);
        Rng eval_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        const EvalResult ev = evaluate_policy(env, exploit.policy(), cfg.gamma, cfg.eval_episodes, cfg.eval_horizon, eval_rng);
        row.return_estimate = ev.mean_return;
        row.success_rate = ev.success_rate;
        row.bonus_mean = last_bonus.mean();
        row.nce_loss = last_nce;
        row.heldout_loglik = heldout();
        row.td_loss = 0.0;
        row.policy_entropy = 0.0;  // greedy policy
        row.mean_q = last_q_mean;
        res.metrics.push_back(row);
        if (sink) sink(row);
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("epoch " + std::to_string(epoch) + ": " + e.what());
    }
  }
  res.policy = Policy::tabular(policy_table);
  const auto exploit = plan(false, warm_exploit);
  res.exploit_policy = exploit.policy();
  Rng eval_rng(derive_seed(cfg.seed, 2));
  const EvalResult ev = evaluate_policy(env, res.exploit_policy, cfg.gamma, std::max(cfg.eval_episodes, 1),
                                        cfg.eval_horizon, eval_rng);
  res.final_success_rate = ev.success_rate;
  res.final_return = ev.mean_return;
  return res;
}

OnlineResult run_learned_ucb(const Environment& env, const OnlineConfig& cfg, LowRankModel& model,
                             const NceConfig& nce_cfg, const std::function<void(const OnlineMetricsRow&)>& sink) {
  const auto actions = env.action_set();
  const int A = static_cast<int>(actions.size());
  Rng rng(derive_seed(cfg.seed, 1));
  ReplayBuffer buffer(cfg.buffer_capacity);
  RestartChain chain(env, cfg.gamma);
  OptimizerState nce_opt = OptimizerState::adam(nce_cfg.learning_rate);
  OptimizerState q_opt = OptimizerState::adam(cfg.planner.q_learning_rate);
  OptimizerState pi_opt = OptimizerState::adam(cfg.planner.policy_learning_rate);
  NceConfig ncfg = nce_cfg;
  double gamma_param = nce_cfg.gamma_param;
  OnlineResult res;

  auto phi_rows = [&model, actions](const Vec& s) -> Mat {
    Mat enc(model.sa_input_dim(), static_cast<Eigen::Index>(actions.size()));
    for (size_t k = 0; k < actions.size(); ++k) enc.col(static_cast<Eigen::Index>(k)) = model.encode_sa(s, actions[k]);
    return model.phi_batch(enc).transpose();
  };
  CovarianceState cov(model.d(), cfg.bonus.lambda);
  const double sign = cfg.bonus.mode == BonusConfig::Mode::penalty ? -1.0 : 1.0;
  PlannerFeatures pf;
  pf.num_actions = A;
  pf.phi_rows = phi_rows;
  pf.policy_rows = phi_rows;
  pf.action_index = [&actions](const Vec& a) { return action_index_in(actions, a); };
  pf.bonus = [&cov, &cfg, sign](const Vec& phi) { return sign * bonus(cov, phi, cfg.bonus); };

  PlannerState ps;
  ps.q = AugmentedQ::init(model.d(), cfg.planner.q_hidden, cfg.planner.q_activation, cfg.planner.tau, rng);
  ps.policy_weights = Vec::Zero(model.d());
  ps.num_actions = A;
  ps.policy_rows = phi_rows;

  double last_nce = 0.0, last_td = 0.0, last_heldout = std::nan("");
  std::vector<Transition> pending;
  // Scores the most recent transitions the model has not been trained on.
  auto heldout = [&](Rng& r) {
    const size_t n = std::min(pending.size(), static_cast<size_t>(cfg.heldout_size));
    if (n == 0) return last_heldout;
    double ll = 0.0;
    for (auto it = pending.end() - static_cast<std::ptrdiff_t>(n); it != pending.end(); ++it) {
      ll += model.conditional_density_mc(it->state, it->action, it->next_state, cfg.heldout_mc_samples, r).log_density;
    }
    return ll / static_cast<double>(n);
  };

  for (int epoch = 0; epoch < cfg.episodes; ++epoch) {
    try {
      const Policy behavior = Policy::epsilon_mixture(ps.policy(), cfg.epsilon_mix);
      for (int k = 0; k < cfg.collect_per_epoch; ++k) {
        Transition t = chain.step(behavior, rng);
        if (cfg.bonus.alpha > 0) cov.rank_one_update(model.phi(t.state, t.action));
        pending.push_back(t);
        buffer.push(std::move(t));
        ++res.env_steps;
      }
      if (cfg.nce_steps > 0 && (epoch + 1) % cfg.repr_update_period == 0) {
        {
          Rng held_rng(derive_seed(cfg.seed, 500000 + static_cast<std::uint64_t>(epoch)));
          last_heldout = heldout(held_rng);
        }
        const auto data = buffer.contents();
        const NoiseDistribution noise = NoiseDistribution::replay_mixture(model.next_space(), next_states(data), {});
        ncfg.gamma_param = gamma_param;
        const auto tr = train_representation(data, model, ncfg, noise, nce_opt, cfg.nce_steps, rng);
        gamma_param = tr.gamma_param;
        if (!tr.trace.empty()) last_nce = tr.trace.back().loss;
        res.nce_trace.insert(res.nce_trace.end(), tr.trace.begin(), tr.trace.end());
        if (cfg.bonus.alpha > 0) {
          Mat enc(model.sa_input_dim(), static_cast<Eigen::Index>(data.size()));
          for (size_t i = 0; i < data.size(); ++i) enc.col(static_cast<Eigen::Index>(i)) = model.encode_sa(data[i].state, data[i].action);
          cov = CovarianceState::from_features(model.phi_batch(enc), cfg.bonus.lambda);
        }
        pending.clear();
      }
      for (int k = 0; k < cfg.planner_steps_per_epoch; ++k) {
        const auto batch = buffer.sample(static_cast<size_t>(cfg.planner.batch_size), rng);
        last_td = fitted_q_step(ps, batch, pf, cfg.planner.entropy, cfg.gamma, q_opt, rng);
        std::vector<Vec> states;
        states.reserve(batch.size());
        for (const auto& t : batch) states.push_back(t.state);
        policy_gradient_step(ps, states, pf, cfg.planner.entropy, pi_opt);
      }
      if ((epoch + 1) % cfg.metrics_period == 0 || epoch + 1 == cfg.episodes) {
        OnlineMetricsRow row;
        row.epoch = epoch + 1;
        row.env_steps = res.env_steps;
        Rng eval_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        const EvalResult ev = evaluate_policy(env, ps.policy(), cfg.gamma, cfg.eval_episodes, cfg.eval_horizon, eval_rng);
        row.return_estimate = ev.mean_return;
        row.success_rate = ev.success_rate;
        row.nce_loss = last_nce;
        row.td_loss = last_td;
        row.heldout_loglik = heldout(eval_rng);
        // Bonus, Q and entropy summaries over the latest collected states.
        const size_t n = std::min(buffer.size(), static_cast<size_t>(std::max(cfg.heldout_size, 1)));
        std::vector<Vec> states;
        double bsum = 0.0, qsum = 0.0;
        for (size_t i = buffer.size() - n; i < buffer.size(); ++i) {
          const Transition& t = buffer.at(i);
          const Vec phi = model.phi(t.state, t.action);
          bsum += bonus(cov, phi, cfg.bonus);
          qsum += ps.q.value(phi);
          states.push_back(t.state);
        }
        row.bonus_mean = bsum / static_cast<double>(n);
        row.mean_q = qsum / static_cast<double>(n);
        row.policy_entropy = mean_policy_entropy(ps, states);
        res.metrics.push_back(row);
        if (sink) sink(row);
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("epoch " + std::to_string(epoch) + ": " + e.what());
    }
  }
  res.policy = ps.policy();
  res.exploit_policy = res.policy;
  Rng eval_rng(derive_seed(cfg.seed, 2));
  const EvalResult ev = evaluate_policy(env, res.exploit_policy, cfg.gamma, std::max(cfg.eval_episodes, 1),
                                        cfg.eval_horizon, eval_rng);
  res.final_success_rate = ev.success_rate;
  res.final_return = ev.mean_return;
  return res;
}

}  // namespace

OnlineResult run_ctrl_ucb(const Environment& env, const OnlineConfig& config, LowRankModel& model,
                          const NceConfig& nce_config, const std::function<void(const OnlineMetricsRow&)>& sink) {
  config.validate();
  nce_config.validate();
  if (!(model.state_space() == env.state_space()) || !(model.action_space() == env.action_space()) ||
      !(model.next_space() == env.state_space())) {
    throw ConfigError("model spaces do not match the environment");
  }
  if (env.state_space().is_discrete() && env.action_space().is_discrete()) {
    return run_tabular_ucb(env, config, model, nce_config, sink);
  }
  return run_learned_ucb(env, config, model, nce_config, sink);
}

// ---------------------------------------------------------------- coverage

OccupancyEstimate occupancy_from_table(const Mat& d) {
  OccupancyEstimate occ;
  for (Eigen::Index s = 0; s < d.rows(); ++s)
    for (Eigen::Index a = 0; a < d.cols(); ++a)
      if (d(s, a) > 0) {
        occ.entries.push_back({Vec::Constant(1, static_cast<double>(s)), Vec::Constant(1, static_cast<double>(a)), d(s, a)});
      }
  occ.normalization = d.sum();
  return occ;
}

Mat behavior_counts_estimate(const std::vector<Transition>& data, int S, int A) {
  Mat c = Mat::Ones(S, A);
  for (const auto& t : data) c(static_cast<Eigen::Index>(t.state[0]), static_cast<Eigen::Index>(t.action[0])) += 1.0;
  for (int s = 0; s < S; ++s) c.row(s) /= c.row(s).sum();
  return c;
}

CoverageReport coverage_coefficient(const OccupancyEstimate& target, const std::vector<Transition>& dataset,
                                    const FeatureFn& phi, double ridge, int num_actions) {
  if (dataset.empty()) throw std::invalid_argument("coverage_coefficient needs a nonempty dataset");
  if (ridge < 0) throw ConfigError("ridge must be >= 0");
  if (target.entries.empty()) throw std::invalid_argument("coverage_coefficient needs a nonempty target");
  const int d = static_cast<int>(phi(dataset.front().state, dataset.front().action).size());
  Mat Phi(d, static_cast<Eigen::Index>(dataset.size()));
  for (size_t i = 0; i < dataset.size(); ++i) Phi.col(static_cast<Eigen::Index>(i)) = phi(dataset[i].state, dataset[i].action);
  const Mat B = kernels::covariance(Phi) / static_cast<double>(dataset.size()) + ridge * Mat::Identity(d, d);
  Mat A = Mat::Zero(d, d);
  double wsum = 0.0;
  for (const auto& e : target.entries) {
    const Vec f = phi(e.state, e.action);
    A.noalias() += e.weight * f * f.transpose();
    wsum += e.weight;
  }
  A /= wsum;
  const Eigen::SelfAdjointEigenSolver<Mat> eig(B);
  const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 1e-13 * std::max(hi, 1e-300))) {
    throw ConfigError("coverage: dataset feature covariance is singular; set ridge > 0");
  }
  CoverageReport rep;
  rep.feature_dim = d;
  rep.condition_number = hi / lo;
  rep.c_pi_star = (A * B.ldlt().solve(Mat::Identity(d, d))).trace();
  rep.omega = 1.0;
  if (num_actions > 0) {
    int S = 0;
    for (const auto& t : dataset) S = std::max(S, static_cast<int>(t.state[0]) + 1);
    const Mat pb = behavior_counts_estimate(dataset, S, num_actions);
    std::vector<char> seen(static_cast<size_t>(S), 0);
    for (const auto& t : dataset) seen[static_cast<size_t>(t.state[0])] = 1;
    rep.omega = 0.0;
    for (int s = 0; s < S; ++s)
      if (seen[static_cast<size_t>(s)]) rep.omega = std::max(rep.omega, pb.row(s).maxCoeff());
  }
  return rep;
}

// ---------------------------------------------------------------- offline

OfflineResult run_ctrl_lcb(const std::vector<Transition>& dataset, const Space& states, const Space& actions,
                           const OfflineConfig& cfg, LowRankModel& model, const NceConfig& nce_cfg) {
  cfg.validate();
  nce_cfg.validate();
  if (dataset.empty()) throw ConfigError("offline dataset is empty");
  if (!states.is_discrete() || !actions.is_discrete()) {
    throw ConfigError("offline planning requires discrete state and action spaces");
  }
  if (!(model.state_space() == states) || !(model.action_space() == actions) || !(model.next_space() == states)) {
    throw ConfigError("model spaces do not match the dataset");
  }
  const int S = states.cardinality(), A = actions.cardinality();
  OfflineResult res;
  Rng rng(derive_seed(cfg.seed, 1));
  if (cfg.nce_steps > 0) {
    OptimizerState opt = OptimizerState::adam(nce_cfg.learning_rate);
    const NoiseDistribution noise = NoiseDistribution::replay_mixture(states, next_states(dataset), {});
    res.nce_trace = train_representation(dataset, model, nce_cfg, noise, opt, cfg.nce_steps, rng).trace;
  }
  TabularStats stats(S, A);
  for (const auto& t : dataset) {
    if (!states.contains(t.state) || !actions.contains(t.action) || !states.contains(t.next_state)) {
      throw ConfigError("dataset record lies outside the declared spaces");
    }
    stats.add(t);
  }
  const Mat P = model.density_table();
  const Mat features = tabular_features(model, S, A);
  const CovarianceState cov = tabular_covariance(features, stats.counts, cfg.bonus.lambda);
  const Mat penalty = bonus_table(cov, features, S, A, cfg.bonus);
  const Mat R = stats.reward_hat() - penalty;
  const auto vi = value_iteration(P, R, cfg.gamma, cfg.vi_tol, stats.absorbing);
  res.q = vi.Q;
  res.greedy = vi.greedy;

  const Mat pb = behavior_counts_estimate(dataset, S, A);
  Mat pi(S, A);
  for (int s = 0; s < S; ++s) {
    if (stats.counts.row(s).sum() == 0) {
      pi.row(s).setConstant(1.0 / A);
      res.unvisited_states.push_back(s);
      continue;
    }
    if (cfg.reg_weight == 0.0) {
      pi.row(s) = vi.greedy.row(s);
    } else {
      const Vec logits = pb.row(s).transpose().array().log() + vi.Q.row(s).transpose().array() / cfg.reg_weight;
      pi.row(s) = softmax(logits).transpose();
    }
  }
  if (!res.unvisited_states.empty()) {
    spdlog::warn("offline: {} state(s) have no data; their policy defaults to uniform", res.unvisited_states.size());
  }
  res.policy = Policy::tabular(pi);

  double pen = 0.0;
  for (const auto& t : dataset) pen += penalty(static_cast<Eigen::Index>(t.state[0]), static_cast<Eigen::Index>(t.action[0]));
  res.penalty_mean = pen / static_cast<double>(dataset.size());

  // Coverage of the returned policy under the learned model from the data's
  // state distribution.
  TabularMdp m;
  m.num_states = S;
  m.num_actions = A;
  m.transition = P;
  m.reward = R;
  m.rho = stats.counts.rowwise().sum() / stats.counts.sum();
  m.terminal.assign(static_cast<size_t>(S), false);
  for (int s = 0; s < S; ++s) m.terminal[static_cast<size_t>(s)] = stats.absorbing[static_cast<size_t>(s)] != 0;
  res.value_estimate = m.rho.dot(vi.V);
  const Mat occ = exact_occupancy(m, pi, cfg.gamma);
  auto phi = [&features, A](const Vec& s, const Vec& a) -> Vec {
    return features.col(static_cast<Eigen::Index>(s[0]) * A + static_cast<Eigen::Index>(a[0]));
  };
  res.coverage = coverage_coefficient(occupancy_from_table(occ), dataset, phi, cfg.ridge, A);
  return res;
}

// ---------------------------------------------------------------- dataset files

namespace {

void write_point(std::ostream& out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) out << format_double(v[i]) << ' ';
}

std::string header_value(std::istream& in, const std::string& key, int line_no) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("dataset: missing '" + key + "' header line");
  const std::string prefix = key + ": ";
  if (line.rfind(prefix, 0) != 0) {
    throw IoError("dataset line " + std::to_string(line_no) + ": expected '" + key + ":'");
  }
  return line.substr(prefix.size());
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset: " + path);
  out << "ctrl-dataset v1\n";
  out << "state: " << data.states.describe() << "\n";
  out << "action: " << data.actions.describe() << "\n";
  out << "records: " << data.transitions.size() << "\n";
  for (const auto& t : data.transitions) {
    write_point(out, t.state);
    write_point(out, t.action);
    out << format_double(t.reward) << ' ';
    write_point(out, t.next_state);
    out << (t.terminal ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("failed writing dataset: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "ctrl-dataset v1") throw IoError("dataset: bad magic line in " + path);
  Dataset d;
  try {
    d.states = Space::parse(header_value(in, "state", 2));
    d.actions = Space::parse(header_value(in, "action", 3));
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(std::string("dataset: bad space descriptor: ") + e.what());
  }
  const std::string n_text = header_value(in, "records", 4);
  size_t n = 0;
  try {
    n = std::stoul(n_text);
  } catch (const std::exception&) {
    throw IoError("dataset: bad record count '" + n_text + "'");
  }
  const int sd = d.states.point_dim(), ad = d.actions.point_dim();
  const size_t width = static_cast<size_t>(2 * sd + ad + 2);
  d.transitions.reserve(n);
  for (size_t r = 0; r < n; ++r) {
    const int line_no = static_cast<int>(r) + 5;
    if (!std::getline(in, line)) throw IoError("dataset: expected " + std::to_string(n) + " records, found " + std::to_string(r));
    std::istringstream ls(line);
    std::vector<double> v;
    std::string tok;
    try {
      while (ls >> tok) v.push_back(parse_double(tok));
    } catch (const std::exception&) {
      throw IoError("dataset line " + std::to_string(line_no) + ": bad number '" + tok + "'");
    }
    if (v.size() != width) throw IoError("dataset line " + std::to_string(line_no) + ": expected " + std::to_string(width) + " fields");
    Transition t;
    t.state = Eigen::Map<const Vec>(v.data(), sd);
    t.action = Eigen::Map<const Vec>(v.data() + sd, ad);
    t.reward = v[static_cast<size_t>(sd + ad)];
    t.next_state = Eigen::Map<const Vec>(v.data() + sd + ad + 1, sd);
    const double term = v.back();
    if (term != 0.0 && term != 1.0) throw IoError("dataset line " + std::to_string(line_no) + ": terminal flag must be 0 or 1");
    t.terminal = term == 1.0;
    if (!d.states.contains(t.state) || !d.actions.contains(t.action) || !d.states.contains(t.next_state)) {
      throw IoError("dataset line " + std::to_string(line_no) + ": record outside the declared spaces");
    }
    d.transitions.push_back(std::move(t));
  }
  while (std::getline(in, line)) {
    if (!trim(line).empty()) throw IoError("dataset: trailing data after the declared records");
  }
  return d;
}

}  // namespace ctrl
