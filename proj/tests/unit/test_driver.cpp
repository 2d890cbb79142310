#include "ctrl/driver.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace ctrl;

namespace {

// Action 0 stays, action 1 switches. Reward 1 for staying in state 1.
TabularMdp switch_mdp() {
  TabularMdp m;
  m.num_states = 2;
  m.num_actions = 2;
  m.transition = Mat::Zero(4, 2);
  m.transition(0, 0) = 1;
  m.transition(1, 1) = 1;
  m.transition(2, 1) = 1;
  m.transition(3, 0) = 1;
  m.reward = Mat::Zero(2, 2);
  m.reward(1, 0) = 1;
  m.rho = Vec(Eigen::Vector2d(1, 0));
  return m;
}

Transition tr(int s, int a, double r, int n, bool term = false) {
  return {Vec::Constant(1, s), Vec::Constant(1, a), r, Vec::Constant(1, n), term};
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ctrl_test_driver_" + name)).string();
}

Vec one_hot_sa(int s, int a, int A, int S) {
  Vec v = Vec::Zero(S * A);
  v[s * A + a] = 1;
  return v;
}

}  // namespace

TEST(ReplayBuffer, FifoEviction) {
  ReplayBuffer b(3);
  for (int i = 0; i < 5; ++i) b.push(tr(i, 0, i, 0));
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.insertion_count(), 5u);
  EXPECT_EQ(b.at(0).reward, 2.0);
  EXPECT_EQ(b.at(2).reward, 4.0);
  Rng rng(1);
  const auto s = b.sample(100, rng);
  EXPECT_EQ(s.size(), 100u);
  for (const auto& t : s) EXPECT_GE(t.reward, 2.0);
}

TEST(EpsilonMixture, FullMixtureIsUniform) {
  Mat onehot = Mat::Zero(1, 4);
  onehot(0, 2) = 1;
  const Policy p = Policy::epsilon_mixture(Policy::tabular(onehot), 1.0);
  Rng rng(2);
  const int n = 40000;
  Vec counts = Vec::Zero(4);
  for (int i = 0; i < n; ++i) counts[p.sample(Vec::Zero(1), rng)] += 1;
  double chi2 = 0;
  for (int a = 0; a < 4; ++a) chi2 += std::pow(counts[a] - n / 4.0, 2) / (n / 4.0);
  // 3 degrees of freedom, 0.999 quantile.
  EXPECT_LT(chi2, 16.27);
}

TEST(Online, KnownModelFindsOptimalPolicy) {
  const TabularMdp mdp = switch_mdp();
  const TabularEnvironment env(mdp);
  auto model = LowRankModel::tabular_factorization(mdp);
  OnlineConfig cfg;
  cfg.episodes = 200;
  cfg.collect_per_epoch = 8;
  cfg.policy_update_period = 10;
  cfg.metrics_period = 50;
  cfg.nce_steps = 0;
  cfg.gamma = 0.9;
  cfg.epsilon_mix = 0.3;
  cfg.eval_episodes = 4;
  cfg.eval_horizon = 50;
  cfg.bonus.alpha = 1.0;
  cfg.seed = 3;
  NceConfig ncfg;
  std::vector<int> seen;
  const auto res = run_ctrl_ucb(env, cfg, model, ncfg, [&seen](const OnlineMetricsRow& r) { seen.push_back(r.epoch); });
  const auto bf = oracle::brute_force_optimal(mdp, 0.9);
  const Mat table = res.exploit_policy.table(2);
  for (int s = 0; s < 2; ++s) EXPECT_EQ(table(s, bf.policy[static_cast<size_t>(s)]), 1.0) << s;
  EXPECT_EQ(res.env_steps, 200 * 8);
  EXPECT_EQ(seen, (std::vector<int>{50, 100, 150, 200}));
  EXPECT_EQ(res.metrics.size(), 4u);
  EXPECT_GT(res.final_return, 0.0);
}

TEST(Online, SameSeedSameMetrics) {
  const TabularMdp mdp = switch_mdp();
  const TabularEnvironment env(mdp);
  OnlineConfig cfg;
  cfg.episodes = 40;
  cfg.policy_update_period = 10;
  cfg.metrics_period = 10;
  cfg.nce_steps = 0;
  cfg.gamma = 0.9;
  cfg.seed = 4;
  auto m1 = LowRankModel::tabular_factorization(mdp), m2 = LowRankModel::tabular_factorization(mdp);
  const auto a = run_ctrl_ucb(env, cfg, m1, NceConfig{});
  const auto b = run_ctrl_ucb(env, cfg, m2, NceConfig{});
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].return_estimate, b.metrics[i].return_estimate);
    EXPECT_EQ(a.metrics[i].bonus_mean, b.metrics[i].bonus_mean);
  }
}

TEST(Online, SpaceMismatchIsConfigError) {
  const TabularEnvironment env(switch_mdp());
  Rng rng(5);
  auto other = random_tabular_mdp(3, 2, rng);
  auto model = LowRankModel::tabular_factorization(other);
  EXPECT_THROW(run_ctrl_ucb(env, OnlineConfig{}, model, NceConfig{}), ConfigError);
}

TEST(Evaluate, SelfLoopDiscountedReturn) {
  TabularMdp m;
  m.num_states = 1;
  m.num_actions = 1;
  m.transition = Mat::Ones(1, 1);
  m.reward = Mat::Ones(1, 1);
  m.rho = Vec::Ones(1);
  const TabularEnvironment env(m);
  Rng rng(6);
  const auto r = evaluate_policy(env, Policy::uniform(1), 0.5, 3, 5, rng);
  EXPECT_DOUBLE_EQ(r.mean_return, 1.9375);
  EXPECT_EQ(r.success_rate, 0.0);
}

TEST(Evaluate, TerminalRewardCountsAsSuccess) {
  TabularMdp m;
  m.num_states = 2;
  m.num_actions = 1;
  m.transition = Mat::Zero(2, 2);
  m.transition(0, 1) = 1;
  m.transition(1, 1) = 1;
  m.reward = Mat::Ones(2, 1);
  m.rho = Vec(Eigen::Vector2d(1, 0));
  m.terminal = {false, true};
  const TabularEnvironment env(m);
  Rng rng(7);
  const auto r = evaluate_policy(env, Policy::uniform(1), 0.9, 4, 10, rng);
  EXPECT_EQ(r.success_rate, 1.0);
  EXPECT_DOUBLE_EQ(r.mean_return, 1.0);
}

TEST(Offline, PenaltyPrefersWellCoveredAction) {
  // Action 1 in state 0 looks better but was seen once.
  const TabularMdp mdp = switch_mdp();
  std::vector<Transition> data;
  for (int i = 0; i < 100; ++i) data.push_back(tr(0, 0, 0.5, 0));
  data.push_back(tr(0, 1, 0.6, 1));
  OfflineConfig cfg;
  cfg.gamma = 0.05;
  cfg.nce_steps = 0;
  cfg.reg_weight = 0.0;
  auto model = LowRankModel::tabular_factorization(mdp);
  const auto pess = run_ctrl_lcb(data, Space::discrete(2), Space::discrete(2), cfg, model, NceConfig{});
  EXPECT_EQ(pess.greedy(0, 0), 1.0);
  EXPECT_EQ(pess.unvisited_states, (std::vector<int>{1}));
  EXPECT_EQ(pess.policy.table(2).row(1), Mat::Constant(1, 2, 0.5));
  // Penalty on the data: 100 * 5/sqrt(101) and one clipped at 2.
  EXPECT_NEAR(pess.penalty_mean, (100 * 5 / std::sqrt(101.0) + 2.0) / 101.0, 1e-10);

  cfg.bonus.alpha = 0.0;
  const auto greedy = run_ctrl_lcb(data, Space::discrete(2), Space::discrete(2), cfg, model, NceConfig{});
  EXPECT_EQ(greedy.greedy(0, 1), 1.0);
  EXPECT_EQ(greedy.penalty_mean, 0.0);
}

TEST(Offline, RegularizedPolicyClosedForm) {
  const TabularMdp mdp = switch_mdp();
  Rng rng(8);
  std::vector<Transition> data;
  for (int i = 0; i < 60; ++i) {
    const int s = static_cast<int>(rng() % 2), a = static_cast<int>(rng() % 2);
    data.push_back(tr(s, a, mdp.reward(s, a), a == 0 ? s : 1 - s));
  }
  OfflineConfig cfg;
  cfg.gamma = 0.8;
  cfg.nce_steps = 0;
  cfg.reg_weight = 0.7;
  auto model = LowRankModel::tabular_factorization(mdp);
  const auto res = run_ctrl_lcb(data, Space::discrete(2), Space::discrete(2), cfg, model, NceConfig{});
  Mat counts = Mat::Ones(2, 2);
  for (const auto& t : data) counts(static_cast<int>(t.state[0]), static_cast<int>(t.action[0])) += 1;
  for (int s = 0; s < 2; ++s) {
    Vec w(2);
    for (int a = 0; a < 2; ++a) w[a] = counts(s, a) * std::exp(res.q(s, a) / 0.7);
    w /= w.sum();
    const Vec got = res.policy.probs(Vec::Constant(1, s));
    EXPECT_NEAR(got[0], w[0], 1e-12);
  }
  EXPECT_GT(res.coverage.c_pi_star, 0.0);
  EXPECT_EQ(res.coverage.feature_dim, 4);
}

TEST(Offline, RejectsBadInputs) {
  const TabularMdp mdp = switch_mdp();
  auto model = LowRankModel::tabular_factorization(mdp);
  EXPECT_THROW(run_ctrl_lcb({}, Space::discrete(2), Space::discrete(2), OfflineConfig{}, model, NceConfig{}), ConfigError);
  const Space box = Space::box(Vec::Zero(1), Vec::Ones(1));
  EXPECT_THROW(run_ctrl_lcb({tr(0, 0, 0, 0)}, box, Space::discrete(2), OfflineConfig{}, model, NceConfig{}), ConfigError);
  OfflineConfig cfg;
  cfg.nce_steps = 0;
  EXPECT_THROW(run_ctrl_lcb({tr(0, 3, 0, 0)}, Space::discrete(2), Space::discrete(2), cfg, model, NceConfig{}), ConfigError);
}

TEST(Coverage, DataDistributionGivesDimension) {
  const int S = 2, A = 2;
  std::vector<Transition> data;
  Mat d = Mat::Zero(S, A);
  const int reps[4] = {3, 1, 5, 2};
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < reps[c]; ++i) {
      data.push_back(tr(c / A, c % A, 0, 0));
      d(c / A, c % A) += 1;
    }
  const FeatureFn phi = [](const Vec& s, const Vec& a) { return one_hot_sa(static_cast<int>(s[0]), static_cast<int>(a[0]), 2, 2); };
  const auto rep = coverage_coefficient(occupancy_from_table(d / d.sum()), data, phi, 1e-12, A);
  EXPECT_NEAR(rep.c_pi_star, 4.0, 1e-9);
  EXPECT_EQ(rep.feature_dim, 4);
  // Laplace smoothing: state 1 has counts 5+1, 2+1.
  EXPECT_NEAR(rep.omega, 6.0 / 9.0, 1e-12);
}

TEST(Coverage, PointTargetGivesInverseFrequency) {
  std::vector<Transition> data;
  for (int i = 0; i < 7; ++i) data.push_back(tr(0, 0, 0, 0));
  for (int i = 0; i < 3; ++i) data.push_back(tr(0, 1, 0, 0));
  const FeatureFn phi = [](const Vec& s, const Vec& a) { return one_hot_sa(static_cast<int>(s[0]), static_cast<int>(a[0]), 2, 1); };
  Mat d = Mat::Zero(1, 2);
  d(0, 1) = 1;
  EXPECT_NEAR(coverage_coefficient(occupancy_from_table(d), data, phi, 1e-12).c_pi_star, 10.0 / 3.0, 1e-9);
}

TEST(Coverage, SingularWithoutRidge) {
  const std::vector<Transition> data{tr(0, 0, 0, 0)};
  const FeatureFn phi = [](const Vec& s, const Vec& a) { return one_hot_sa(static_cast<int>(s[0]), static_cast<int>(a[0]), 2, 1); };
  Mat d = Mat::Zero(1, 2);
  d(0, 0) = 1;
  EXPECT_THROW(coverage_coefficient(occupancy_from_table(d), data, phi, 0.0), ConfigError);
  EXPECT_THROW(coverage_coefficient(occupancy_from_table(d), {}, phi, 1e-8), std::invalid_argument);
}

TEST(Coverage, MonteCarloTargetMatchesExact) {
  Rng rng(9);
  auto mdp = random_tabular_mdp(3, 2, rng);
  const TabularEnvironment env(mdp);
  const Mat pi = Mat::Constant(3, 2, 0.5);
  const double gamma = 0.8;
  std::vector<Transition> data;
  for (int i = 0; i < 300; ++i) {
    const int s = static_cast<int>(rng() % 3), a = static_cast<int>(rng() % 2);
    data.push_back(tr(s, a, 0, 0));
  }
  const FeatureFn phi = [](const Vec& s, const Vec& a) {
    Vec v(3);
    v << 1.0, s[0], a[0] + 0.5 * s[0] * s[0];
    return v;
  };
  const double exact = coverage_coefficient(occupancy_from_table(exact_occupancy(mdp, pi, gamma)), data, phi).c_pi_star;
  std::vector<std::vector<Transition>> rollouts;
  for (int i = 0; i < 40000; ++i) rollouts.push_back(sample_discounted_rollout(env, Policy::tabular(pi), gamma, rng));
  const double mc = coverage_coefficient(estimate_occupancy(rollouts, gamma), data, phi).c_pi_star;
  EXPECT_LT(std::abs(mc - exact) / exact, 0.01);
}

TEST(BehaviorEstimate, LaplaceSmoothed) {
  const std::vector<Transition> data{tr(0, 1, 0, 0), tr(0, 1, 0, 0), tr(1, 0, 0, 0)};
  const Mat pb = behavior_counts_estimate(data, 3, 2);
  EXPECT_DOUBLE_EQ(pb(0, 1), 0.75);
  EXPECT_DOUBLE_EQ(pb(1, 0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(pb(2, 0), 0.5);
}

TEST(DatasetFile, RoundTripIsExact) {
  Dataset d;
  d.states = Space::box(Vec::Zero(2), Vec::Ones(2));
  d.actions = Space::discrete(3);
  Rng rng(10);
  for (int i = 0; i < 50; ++i) {
    Transition t;
    t.state = Vec(Eigen::Vector2d(uniform01(rng), uniform01(rng)));
    t.action = Vec::Constant(1, static_cast<double>(rng() % 3));
    t.reward = standard_normal(rng) * 1e-7;
    t.next_state = Vec(Eigen::Vector2d(uniform01(rng), uniform01(rng)));
    t.terminal = i % 7 == 0;
    d.transitions.push_back(t);
  }
  const std::string p = tmp_path("rt.txt");
  write_dataset(p, d);
  const Dataset e = read_dataset(p);
  EXPECT_EQ(e.states, d.states);
  EXPECT_EQ(e.actions, d.actions);
  ASSERT_EQ(e.transitions.size(), 50u);
  for (size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(e.transitions[i].state, d.transitions[i].state);
    EXPECT_EQ(e.transitions[i].action, d.transitions[i].action);
    EXPECT_EQ(e.transitions[i].reward, d.transitions[i].reward);
    EXPECT_EQ(e.transitions[i].next_state, d.transitions[i].next_state);
    EXPECT_EQ(e.transitions[i].terminal, d.transitions[i].terminal);
  }
  std::remove(p.c_str());
}

TEST(DatasetFile, MalformedInputsAreIoErrors) {
  const std::string p = tmp_path("bad.txt");
  const auto write = [&p](const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
  };
  const std::string head = "ctrl-dataset v1\nstate: discrete 2\naction: discrete 2\n";
  EXPECT_THROW(read_dataset(tmp_path("missing.txt")), IoError);
  write("ctrl-dataset v2\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 2\n0 1 0.5 1 0\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 1\n0 1 0.5 1\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 1\n0 5 0.5 1 0\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 1\n0 1 0.5 1 2\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 1\n0 1 0.5 1 0\n0 1 0.5 1 0\n");
  EXPECT_THROW(read_dataset(p), IoError);
  write(head + "records: 1\n0 1 0.5 1 1\n");
  EXPECT_EQ(read_dataset(p).transitions.size(), 1u);
  std::remove(p.c_str());
}

TEST(ConfigValidation, RejectsOutOfRange) {
  OnlineConfig c;
  c.gamma = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  OfflineConfig o;
  o.reg_weight = -1;
  EXPECT_THROW(o.validate(), ConfigError);
}
