#include "ctrl/kernels.hpp"
#include "ctrl/planner.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ctrl;

namespace {

Vec randv(int n, Rng& rng) {
  Vec v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

Mat one_hot_rows(int A) { return Mat::Identity(A, A); }

// Single-state bandit with phi(s, a_k) = e_k and Q read off w1.
PlannerState bandit_state(const Vec& q, Rng& rng) {
  const int A = static_cast<int>(q.size());
  PlannerState st;
  st.q = AugmentedQ::init(A, 2, Activation::tanh, 1.0, rng);
  st.q.w1 = q;
  st.q.w2.setZero();
  st.num_actions = A;
  st.policy_weights = 0.3 * randv(A, rng);
  st.policy_rows = [A](const Vec&) { return one_hot_rows(A); };
  return st;
}

PlannerFeatures bandit_features(int A) {
  PlannerFeatures f;
  f.num_actions = A;
  f.phi_rows = [A](const Vec&) { return one_hot_rows(A); };
  f.policy_rows = f.phi_rows;
  f.action_index = [](const Vec& a) { return static_cast<int>(a[0]); };
  return f;
}

double tv(const Vec& a, const Vec& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

}  // namespace

TEST(ValueIteration, SelfLoopClosedForm) {
  const Mat P = Mat::Ones(2, 1);
  Mat R(1, 2);
  R << 1.0, 0.0;
  const auto r = value_iteration(P, R, 0.5);
  EXPECT_NEAR(r.V[0], 2.0, 1e-9);
  EXPECT_EQ(r.greedy(0, 0), 1.0);
  EXPECT_LT(r.residual, 1e-10);
}

TEST(ValueIteration, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto mdp = random_tabular_mdp(4, 3, rng);
    const auto r = value_iteration(mdp, mdp.reward, 0.9);
    const auto bf = oracle::brute_force_optimal(mdp, 0.9);
    EXPECT_LT((r.V - bf.V).lpNorm<Eigen::Infinity>(), 1e-8);
    // The greedy policy must achieve the optimal values.
    const Vec v = oracle::evaluate_by_iteration(mdp, r.greedy, 0.9, 600);
    EXPECT_LT((v - bf.V).lpNorm<Eigen::Infinity>(), 1e-6);
  }
}

TEST(ValueIteration, AbsorbingStatesHaveZeroValue) {
  Rng rng(2);
  auto mdp = random_tabular_mdp(3, 2, rng);
  mdp.terminal = {false, true, false};
  const auto r = value_iteration(mdp, mdp.reward, 0.9);
  EXPECT_EQ(r.V[1], 0.0);
  EXPECT_LT((r.V - oracle::evaluate_by_iteration(mdp, r.greedy, 0.9, 600)).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(ValueIteration, PenaltyNeverRaisesValues) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mdp = random_tabular_mdp(4, 2, rng);
    Mat pen(4, 2);
    for (auto& v : pen.reshaped()) v = uniform01(rng);
    const Vec a = value_iteration(mdp, mdp.reward, 0.8).V;
    const Vec b = value_iteration(mdp, mdp.reward - pen, 0.8).V;
    ASSERT_TRUE((b.array() <= a.array() + 1e-9).all());
  }
}

TEST(ValueIteration, BackupIsContraction) {
  Rng rng(4);
  const auto mdp = random_tabular_mdp(5, 3, rng);
  for (int i = 0; i < 50; ++i) {
    const Vec v1 = 5 * randv(5, rng), v2 = 5 * randv(5, rng);
    Mat q1, q2;
    kernels::bellman_backup(mdp.transition, mdp.reward, v1, 0.7, {}, q1);
    kernels::bellman_backup(mdp.transition, mdp.reward, v2, 0.7, {}, q2);
    const double lhs = (Vec(q1.rowwise().maxCoeff()) - Vec(q2.rowwise().maxCoeff())).lpNorm<Eigen::Infinity>();
    EXPECT_LE(lhs, 0.7 * (v1 - v2).lpNorm<Eigen::Infinity>() + 1e-12);
  }
}

TEST(ValueIteration, RejectsBadArguments) {
  const Mat P = Mat::Ones(1, 1), R = Mat::Ones(1, 1);
  EXPECT_THROW(value_iteration(P, R, 0.9, 0.0), std::invalid_argument);
  EXPECT_THROW(value_iteration(P, R, 1.0), std::invalid_argument);
  EXPECT_THROW(value_iteration(Mat::Ones(2, 1), R, 0.9), std::invalid_argument);
}

TEST(GreedyTable, LowestIndexOnTies) {
  Mat q(2, 3);
  q << 1, 1, 0, 0, 2, 2;
  Mat want(2, 3);
  want << 1, 0, 0, 0, 1, 0;
  EXPECT_EQ(greedy_table(q), want);
}

TEST(AugmentedQ, LinearWhenSecondLayerZero) {
  Rng rng(5);
  auto q = AugmentedQ::init(4, 3, Activation::tanh, 0.1, rng);
  EXPECT_EQ(q.w1, Vec::Zero(4));
  EXPECT_EQ(q.w2, Vec::Zero(3));
  q.w1 = randv(4, rng);
  const Vec phi = randv(4, rng);
  EXPECT_NEAR(q.value(phi), q.w1.dot(phi), 1e-14);
}

TEST(AugmentedQ, ParamsRoundTripAndHandValue) {
  Rng rng(6);
  auto q = AugmentedQ::init(3, 2, Activation::tanh, 0.1, rng);
  const Vec p = randv(q.num_params(), rng);
  q.set_params(p);
  EXPECT_EQ(q.params(), p);
  const Vec phi = randv(3, rng);
  double want = q.w1.dot(phi);
  for (int j = 0; j < 2; ++j) want += q.w2[j] * std::tanh(q.w3.col(j).dot(phi));
  EXPECT_NEAR(q.value(phi), want, 1e-13);
  Mat rows(2, 3);
  rows.row(0) = phi.transpose();
  rows.row(1) = -phi.transpose();
  const Vec vals = q.values(rows);
  EXPECT_NEAR(vals[0], want, 1e-13);
}

TEST(AugmentedQ, PolyakTauOneCopies) {
  Rng rng(7);
  auto q = AugmentedQ::init(3, 2, Activation::relu, 1.0, rng);
  q.set_params(randv(q.num_params(), rng));
  q.polyak();
  EXPECT_EQ(q.target, q.params());
  const Vec phi = randv(3, rng);
  EXPECT_EQ(q.target_value(phi), q.value(phi));
}

TEST(AugmentedQ, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  for (auto act : {Activation::tanh, Activation::sigmoid, Activation::softplus}) {
    const Vec phi = randv(4, rng);
    const LossFn f = [&](const Vec& p, Vec* g) { return AugmentedQ::evaluate(p, 4, 3, act, phi, g); };
    EXPECT_LT(check_gradient(f, randv(4 + 3 + 12, rng)).max_rel_error, 1e-5);
  }
}

TEST(TdLoss, ZeroAtFixedPoint) {
  Rng rng(9);
  auto q = AugmentedQ::init(3, 2, Activation::tanh, 0.1, rng);
  q.set_params(randv(q.num_params(), rng));
  std::vector<TdItem> items;
  for (int i = 0; i < 10; ++i) {
    TdItem it;
    it.phi = randv(3, rng);
    it.log_pi_term = -0.1 * i;
    it.target = q.value(it.phi) + it.log_pi_term;
    items.push_back(it);
  }
  Vec g;
  EXPECT_NEAR(td_loss(q, q.params(), items, &g), 0.0, 1e-24);
  EXPECT_LT(g.norm(), 1e-12);
  EXPECT_THROW(td_loss(q, q.params(), {}, nullptr), std::invalid_argument);
}

TEST(TdLoss, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  auto q = AugmentedQ::init(3, 4, Activation::tanh, 0.1, rng);
  std::vector<TdItem> items;
  for (int i = 0; i < 8; ++i) items.push_back({randv(3, rng), standard_normal(rng), 0.2 * standard_normal(rng)});
  const LossFn f = [&](const Vec& p, Vec* g) { return td_loss(q, p, items, g); };
  EXPECT_LT(check_gradient(f, randv(q.num_params(), rng)).max_rel_error, 1e-5);
}

TEST(PolicySurrogate, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  std::vector<PolicyItem> items;
  for (int i = 0; i < 5; ++i) {
    PolicyItem it;
    it.features = Mat(4, 3);
    for (auto& v : it.features.reshaped()) v = standard_normal(rng);
    it.q = randv(4, rng);
    if (i % 2 == 0) it.log_behavior = Vec(softmax(randv(4, rng)).array().log());
    items.push_back(it);
  }
  for (double ew : {0.0, 0.3})
    for (double rw : {0.0, 2.0}) {
      const LossFn f = [&](const Vec& v, Vec* g) { return policy_surrogate(v, 0.7, items, ew, rw, g); };
      EXPECT_LT(check_gradient(f, randv(3, rng)).max_rel_error, 1e-5) << ew << " " << rw;
    }
}

TEST(PolicySurrogate, HandValue) {
  PolicyItem it;
  it.features = Mat::Identity(2, 2);
  it.q = Vec(Eigen::Vector2d(1.0, 3.0));
  // Zero weights give the uniform policy.
  const double want = -(0.5 * 1 + 0.5 * 3 + 0.5 * std::log(2.0));
  EXPECT_NEAR(policy_surrogate(Vec::Zero(2), 1.0, {it}, 0.5, 0.0, nullptr), want, 1e-14);
  EXPECT_THROW(policy_surrogate(Vec::Zero(2), 1.0, {it}, 0.0, -1.0, nullptr), std::invalid_argument);
}

TEST(PolicyStep, SymmetricQGivesUniform) {
  Rng rng(12);
  auto st = bandit_state(Vec::Constant(4, 0.7), rng);
  const auto f = bandit_features(4);
  EntropyConfig ent{0.5, true};
  auto opt = OptimizerState::adam(0.05);
  const std::vector<Vec> states{Vec::Zero(1)};
  for (int i = 0; i < 200; ++i) policy_gradient_step(st, states, f, ent, opt);
  EXPECT_LT(tv(st.probs(Vec::Zero(1)), Vec::Constant(4, 0.25)), 0.01);
  EXPECT_NEAR(mean_policy_entropy(st, states), std::log(4.0), 1e-3);
}

TEST(PolicyStep, BanditImprovesMonotonically) {
  Rng rng(13);
  const Vec q = Vec(Eigen::Vector3d(0.0, 1.0, 0.5));
  auto st = bandit_state(q, rng);
  const auto f = bandit_features(3);
  auto opt = OptimizerState::sgd(0.1);
  const std::vector<Vec> states{Vec::Zero(1)};
  double prev = st.probs(states[0]).dot(q);
  for (int i = 0; i < 300; ++i) {
    policy_gradient_step(st, states, f, EntropyConfig{}, opt);
    const double cur = st.probs(states[0]).dot(q);
    ASSERT_GE(cur, prev - 1e-12);
    prev = cur;
  }
  EXPECT_GT(st.probs(states[0])[1], 0.9);
}

TEST(PolicyStep, EntropyFixedPointIsSoftmaxOfQ) {
  Rng rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const Vec q = randv(5, rng);
    const double w = 0.5 + uniform01(rng);
    auto st = bandit_state(q, rng);
    const auto f = bandit_features(5);
    auto opt = OptimizerState::adam(0.05);
    const std::vector<Vec> states{Vec::Zero(1)};
    for (int i = 0; i < 2000; ++i) policy_gradient_step(st, states, f, EntropyConfig{w, true}, opt);
    EXPECT_LT(tv(st.probs(states[0]), softmax(q / w)), 0.01);
  }
}

TEST(PolicyStep, DisabledEntropyIgnoresWeight) {
  Rng r1(15), r2(15);
  auto a = bandit_state(Vec(Eigen::Vector2d(0, 1)), r1);
  auto b = bandit_state(Vec(Eigen::Vector2d(0, 1)), r2);
  const auto f = bandit_features(2);
  auto o1 = OptimizerState::sgd(0.1), o2 = OptimizerState::sgd(0.1);
  const std::vector<Vec> states{Vec::Zero(1)};
  policy_gradient_step(a, states, f, EntropyConfig{3.0, false}, o1);
  policy_gradient_step(b, states, f, EntropyConfig{}, o2);
  EXPECT_EQ(a.policy_weights, b.policy_weights);
}

TEST(OfflineStep, ZeroRegularizerEqualsPolicyGradient) {
  Rng r1(16), r2(16);
  const Vec q = Vec(Eigen::Vector3d(0.2, -1.0, 0.4));
  auto a = bandit_state(q, r1);
  auto b = bandit_state(q, r2);
  const auto f = bandit_features(3);
  auto o1 = OptimizerState::adam(0.01), o2 = OptimizerState::adam(0.01);
  const std::vector<Vec> states{Vec::Zero(1)};
  const auto beh = [](const Vec&) { return Vec(Vec::Constant(3, -std::log(3.0))); };
  for (int i = 0; i < 50; ++i) {
    offline_regularized_step(a, states, f, beh, 0.0, o1);
    policy_gradient_step(b, states, f, EntropyConfig{}, o2);
  }
  EXPECT_EQ(a.policy_weights, b.policy_weights);
}

TEST(OfflineStep, LargeRegularizerStaysOnBehaviour) {
  Rng rng(17);
  auto st = bandit_state(Vec(Eigen::Vector3d(5.0, 0.0, -5.0)), rng);
  const auto f = bandit_features(3);
  const Vec pb = Vec(Eigen::Vector3d(0.2, 0.5, 0.3));
  const auto beh = [&pb](const Vec&) { return Vec(pb.array().log()); };
  auto opt = OptimizerState::adam(0.05);
  const std::vector<Vec> states{Vec::Zero(1)};
  for (int i = 0; i < 1000; ++i) offline_regularized_step(st, states, f, beh, 1e6, opt);
  EXPECT_LT(tv(st.probs(states[0]), pb), 0.05);
}

TEST(OfflineStep, UnitRegularizerTiltsBehaviour) {
  // argmax p.q - KL(p || u) is p proportional to u * exp(q).
  Rng rng(18);
  auto st = bandit_state(Vec(Eigen::Vector2d(1.0, 0.0)), rng);
  const auto f = bandit_features(2);
  const auto beh = [](const Vec&) { return Vec(Vec::Constant(2, -std::log(2.0))); };
  auto opt = OptimizerState::adam(0.05);
  const std::vector<Vec> states{Vec::Zero(1)};
  for (int i = 0; i < 2000; ++i) offline_regularized_step(st, states, f, beh, 1.0, opt);
  EXPECT_NEAR(st.probs(states[0])[0], std::exp(1.0) / (std::exp(1.0) + 1.0), 0.02);
  EXPECT_THROW(offline_regularized_step(st, states, f, beh, -1.0, opt), std::invalid_argument);
}

TEST(FittedQ, SelfLoopConvergesToDiscountedReturn) {
  // One state, one action, reward 1, gamma 0.5: Q = 2.
  Rng rng(19);
  PlannerState st;
  st.q = AugmentedQ::init(1, 2, Activation::tanh, 0.05, rng);
  st.num_actions = 1;
  st.policy_weights = Vec::Zero(1);
  st.policy_rows = [](const Vec&) { return Mat(Mat::Ones(1, 1)); };
  auto f = bandit_features(1);
  f.phi_rows = [](const Vec&) { return Mat(Mat::Ones(1, 1)); };
  const Transition t{Vec::Zero(1), Vec::Zero(1), 1.0, Vec::Zero(1), false};
  auto opt = OptimizerState::adam(0.02);
  for (int i = 0; i < 3000; ++i) fitted_q_step(st, {t}, f, EntropyConfig{}, 0.5, opt, rng);
  EXPECT_NEAR(st.q.value(Vec::Ones(1)), 2.0, 0.05);
  EXPECT_EQ(st.iteration, 3000);
}

TEST(FittedQ, BonusEntersTargetAndTerminalCutsBootstrap) {
  Rng rng(20);
  PlannerState st;
  st.q = AugmentedQ::init(1, 1, Activation::tanh, 0.05, rng);
  st.num_actions = 1;
  st.policy_weights = Vec::Zero(1);
  st.policy_rows = [](const Vec&) { return Mat(Mat::Ones(1, 1)); };
  auto f = bandit_features(1);
  f.phi_rows = [](const Vec&) { return Mat(Mat::Ones(1, 1)); };
  f.bonus = [](const Vec&) { return 0.5; };
  const Transition t{Vec::Zero(1), Vec::Zero(1), 1.0, Vec::Zero(1), true};
  auto opt = OptimizerState::adam(0.02);
  for (int i = 0; i < 3000; ++i) fitted_q_step(st, {t}, f, EntropyConfig{}, 0.9, opt, rng);
  EXPECT_NEAR(st.q.value(Vec::Ones(1)), 1.5, 0.02);
}

TEST(PlannerState, PolicyMatchesProbs) {
  Rng rng(21);
  auto st = bandit_state(Vec::Zero(3), rng);
  st.temperature = 0.4;
  const Policy p = st.policy();
  EXPECT_LT((p.probs(Vec::Zero(1)) - st.probs(Vec::Zero(1))).norm(), 1e-15);
  EXPECT_LT((st.probs(Vec::Zero(1)) - softmax(st.policy_weights / 0.4)).norm(), 1e-15);
}

TEST(EntropyConfig, Validation) {
  EXPECT_THROW((EntropyConfig{-1.0, true}).validate(), ConfigError);
  EXPECT_EQ((EntropyConfig{2.0, false}).effective(), 0.0);
}
