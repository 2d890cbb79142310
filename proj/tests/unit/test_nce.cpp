#include "ctrl/nce.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ctrl;

namespace {

Vec idx(int i) { return Vec::Constant(1, i); }

// Discrete model with score c * p(s') for every (s, a).
LowRankModel constant_score(int S, double c) {
  Mlp phi({S, 1}, Activation::identity, Activation::identity);
  Mlp mu({S, 1}, Activation::identity, Activation::identity);
  Vec pp = Vec::Zero(phi.num_params()), mp = Vec::Zero(mu.num_params());
  phi.bias(pp, 0)[0] = c;
  mu.bias(mp, 0)[0] = 1.0;
  phi.set_params(pp);
  mu.set_params(mp);
  return LowRankModel(Space::discrete(S), Space::discrete(1), Space::discrete(S), BaseMeasure::uniform_discrete(S),
                      phi, mu, false, Positivity::elementwise_nonneg, 1.0);
}

LowRankModel tiny_box_model(std::uint64_t seed) {
  Rng rng(seed);
  LowRankConfig cfg;
  cfg.d = 4;
  cfg.phi_hidden = {5};
  cfg.mu_hidden = {5};
  cfg.temperature = 0.5;
  const Space box = Space::box(Vec::Zero(2), Vec::Ones(2));
  LowRankModel m(box, Space::box(Vec::Constant(2, -1), Vec::Ones(2)), box, BaseMeasure::uniform_over(box), cfg, rng);
  Vec p = m.params();
  for (auto& v : p) v += 0.3 * standard_normal(rng);
  m.set_params(p);
  return m;
}

std::vector<Transition> random_box_data(int n, Rng& rng) {
  std::vector<Transition> out;
  for (int i = 0; i < n; ++i) {
    const Vec s = Vec::Random(2).cwiseAbs(), a = Vec::Random(2), x = Vec::Random(2).cwiseAbs();
    out.push_back({s, a, 0.0, x, false});
  }
  return out;
}

std::vector<Transition> discrete_data(const std::vector<ConditionalSample>& xs) {
  std::vector<Transition> out;
  for (const auto& c : xs) out.push_back({idx(c.u), idx(0), 0.0, idx(c.x), false});
  return out;
}

double mean_log_lik(const Mat& table, const std::vector<ConditionalSample>& data) {
  double s = 0;
  for (const auto& c : data) s += std::log(table(c.u, c.x));
  return s / static_cast<double>(data.size());
}

}  // namespace

TEST(HValue, Examples) {
  EXPECT_DOUBLE_EQ(h_value(4 * std::exp(0.7), 0.7, 4), 0.5);
  EXPECT_LT(h_value(1e-300, 0.0, 3), 1e-299);
  EXPECT_DOUBLE_EQ(h_value(2.0, 0.0, 1), 2.0 / 3.0);
  EXPECT_THROW(h_value(1.0, 0.0, 0), std::invalid_argument);
}

TEST(BinaryLoss, AllHalfGivesTwoLogTwo) {
  const int S = 4;
  const double c = 3.0;
  const auto model = constant_score(S, c);
  const auto noise = NoiseDistribution::uniform(Space::discrete(S));
  Rng rng(1);
  std::vector<Transition> data;
  for (int i = 0; i < 10; ++i) data.push_back({idx(i % S), idx(0), 0.0, idx((i + 1) % S), false});
  const auto batch = build_batch(data, noise, 1, rng);
  // r = c exp(-gamma) = K = 1.
  EXPECT_NEAR(binary_loss(batch, model, std::log(c)).loss, 2 * std::log(2.0), 1e-12);
}

TEST(RankingLoss, ConstantScoreGivesLogKPlusOne) {
  const auto model = constant_score(5, 0.7);
  const auto noise = NoiseDistribution::uniform(Space::discrete(5));
  Rng rng(2);
  std::vector<Transition> data;
  for (int i = 0; i < 8; ++i) data.push_back({idx(i % 5), idx(0), 0.0, idx(i % 3), false});
  EXPECT_NEAR(ranking_loss(build_batch(data, noise, 3, rng), model).loss, std::log(4.0), 1e-12);
}

TEST(NceLogits, RankingScaleInvariance) {
  Rng rng(3);
  Vec a(20);
  Mat B(20, 7);
  for (auto& v : a) v = standard_normal(rng);
  for (auto& v : B.reshaped()) v = standard_normal(rng);
  const double base = ranking_loss_logits(a, B).loss;
  for (double c : {0.1, 5.0, 100.0}) {
    const double lc = std::log(c);
    EXPECT_NEAR(ranking_loss_logits(a.array() + lc, B.array() + lc).loss, base, 1e-10);
  }
}

TEST(NceLogits, BinaryShiftInvariance) {
  Rng rng(4);
  Vec a(20);
  Mat B(20, 7);
  for (auto& v : a) v = standard_normal(rng);
  for (auto& v : B.reshaped()) v = standard_normal(rng);
  const double base = binary_loss_logits(a, B, 0.4).loss;
  for (double c : {3.7, 0.1, 100.0}) {
    const double lc = std::log(c);
    EXPECT_NEAR(binary_loss_logits(a.array() + lc, B.array() + lc, 0.4 + lc).loss, base, 1e-10);
  }
}

TEST(NceLoss, GradientsMatchFiniteDifferences) {
  Rng data_rng(5);
  const auto data = random_box_data(6, data_rng);
  const auto noise = NoiseDistribution::uniform(Space::box(Vec::Zero(2), Vec::Ones(2)));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto model = tiny_box_model(seed);
    Rng rng(100 + seed);
    const NceBatch batch = build_batch(data, noise, 4, rng);
    const Vec p0 = model.params();
    const LossFn rank = [&](const Vec& p, Vec* g) {
      model.set_params(p);
      const auto l = ranking_loss(batch, model);
      if (g) *g = l.grad;
      return l.loss;
    };
    EXPECT_LT(check_gradient(rank, p0).max_rel_error, 1e-4);
    // Binary, with gamma appended as the last coordinate.
    Vec q0(p0.size() + 1);
    q0 << p0, 0.3;
    const LossFn bin = [&](const Vec& q, Vec* g) {
      model.set_params(q.head(p0.size()));
      const auto l = binary_loss(batch, model, q[p0.size()]);
      if (g) {
        g->resize(q.size());
        *g << l.grad, l.dgamma;
      }
      return l.loss;
    };
    EXPECT_LT(check_gradient(bin, q0).max_rel_error, 1e-4);
  }
}

TEST(NceLoss, NoiseSupportViolation) {
  const auto model = constant_score(3, 1.0);
  NceBatch b;
  b.K = 1;
  b.states = {idx(0)};
  b.actions = {idx(0)};
  b.next = {idx(1)};
  b.negatives = {{idx(2)}};
  b.log_q_pos = Vec::Constant(1, -INFINITY);
  b.log_q_neg = Mat::Zero(1, 1);
  try {
    ranking_loss(b, model);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "noise support violation");
  }
  EXPECT_THROW(binary_loss(b, model, 0.0), std::invalid_argument);
}

TEST(BuildBatch, UniformNegativesChiSquare) {
  const auto noise = NoiseDistribution::uniform(Space::discrete(4));
  Rng rng(6);
  std::vector<Transition> data(40000, Transition{idx(0), idx(0), 0.0, idx(0), false});
  const auto b = build_batch(data, noise, 1, rng);
  Vec counts = Vec::Zero(4);
  for (const auto& row : b.negatives) counts[static_cast<int>(row[0][0])] += 1;
  const double e = 10000;
  const double chi2 = ((counts.array() - e).square() / e).sum();
  EXPECT_LT(chi2, 11.345);  // 3 dof, p = 0.01
  EXPECT_NEAR(b.log_q_neg(0, 0), std::log(0.25), 1e-15);
}

TEST(BuildBatch, Shape) {
  const auto noise = NoiseDistribution::uniform(Space::discrete(4));
  Rng rng(7);
  std::vector<Transition> data(3, Transition{idx(0), idx(0), 0.0, idx(1), false});
  const auto b = build_batch(data, noise, 5, rng);
  EXPECT_EQ(b.size(), 3);
  size_t neg = 0;
  for (const auto& r : b.negatives) neg += r.size();
  EXPECT_EQ(neg, 15u);
  EXPECT_EQ(b.log_q_neg.rows(), 3);
  EXPECT_EQ(b.log_q_neg.cols(), 5);
}

TEST(NoiseDistribution, FullMixDrawsOnlyFromBuffer) {
  const Space sp = Space::discrete(6);
  const auto noise = NoiseDistribution::replay_mixture(sp, {idx(2), idx(4), idx(4)}, {}, 1.0);
  Rng rng(8);
  for (int i = 0; i < 2000; ++i) {
    const int v = static_cast<int>(noise.sample(rng)[0]);
    EXPECT_TRUE(v == 2 || v == 4);
  }
  EXPECT_NEAR(std::exp(noise.log_density(idx(4))), 2.0 / 3.0, 1e-12);
}

TEST(NoiseDistribution, MixtureDensityIsWeightedSum) {
  const Space sp = Space::discrete(4);
  const auto noise = NoiseDistribution::replay_mixture(sp, {idx(0), idx(0), idx(1), idx(3)}, {}, 0.5);
  // Buffer part (0.5, 0.25, 0, 0.25), random part uniform.
  EXPECT_NEAR(std::exp(noise.log_density(idx(0))), 0.5 * 0.5 + 0.5 * 0.25, 1e-12);
  EXPECT_NEAR(std::exp(noise.log_density(idx(2))), 0.5 * 0.25, 1e-12);
  double total = 0;
  for (int x = 0; x < 4; ++x) total += std::exp(noise.log_density(idx(x)));
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(NoiseDistribution, EmptyBufferFallsBackToUniform) {
  const Space sp = Space::discrete(4);
  const auto noise = NoiseDistribution::replay_mixture(sp, {}, {}, 0.5);
  EXPECT_NEAR(noise.log_density(idx(1)), std::log(0.25), 1e-12);
}

TEST(TruncatedKde, SamplesAndDensityAgree) {
  const Space box = Space::box(Vec::Zero(2), Vec::Ones(2));
  Rng rng(9);
  std::vector<Vec> pts;
  for (int i = 0; i < 300; ++i) pts.push_back(Vec(Eigen::Vector2d(0.1 + 0.1 * standard_normal(rng), 0.8 + 0.05 * standard_normal(rng))).cwiseMax(0.0).cwiseMin(1.0));
  const TruncatedKde kde(pts, box);
  // Density integrates to 1 over the box.
  const int n = 200;
  double total = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) total += std::exp(kde.log_density(Vec(Eigen::Vector2d((i + 0.5) / n, (j + 0.5) / n)))) / (n * n);
  EXPECT_NEAR(total, 1.0, 5e-3);
  // Samples stay in the box, with mean near the data mean.
  Vec mean = Vec::Zero(2);
  for (int i = 0; i < 20000; ++i) {
    const Vec s = kde.sample(rng);
    EXPECT_TRUE(box.contains(s));
    mean += s / 20000;
  }
  Vec dm = Vec::Zero(2);
  for (const auto& p : pts) dm += p / 300;
  EXPECT_LT((mean - dm).cwiseAbs().maxCoeff(), 0.02);
}

TEST(TrainRepresentation, ZeroStepsIsNoOp) {
  auto model = tiny_box_model(10);
  const Vec before = model.params();
  NceConfig cfg;
  auto opt = OptimizerState::adam(1e-2);
  Rng rng(11);
  const auto res = train_representation({}, model, cfg, NoiseDistribution::uniform(model.next_space()), opt, 0, rng);
  EXPECT_TRUE(res.trace.empty());
  EXPECT_EQ(model.params(), before);
}

TEST(TrainRepresentation, DeterministicGivenSeed) {
  Rng data_rng(12);
  const auto data = random_box_data(50, data_rng);
  NceConfig cfg;
  cfg.batch_size = 16;
  cfg.K = 4;
  Vec finals[2];
  for (int run = 0; run < 2; ++run) {
    auto model = tiny_box_model(13);
    auto opt = OptimizerState::adam(1e-2);
    Rng rng(14);
    train_representation(data, model, cfg, NoiseDistribution::uniform(model.next_space()), opt, 30, rng);
    finals[run] = model.params();
  }
  EXPECT_EQ(finals[0], finals[1]);
}

TEST(TrainRepresentation, RankingMatchesMleOnSyntheticConditional) {
  Rng env_rng(15);
  const auto env = random_synthetic(4, 3, env_rng);
  Rng rng(16);
  const Vec uw = Vec::Constant(3, 1.0 / 3);
  const auto train = sample_synthetic(env, 2000, uw, rng);
  const auto test = sample_synthetic(env, 2000, uw, rng);
  Mat mle = Mat::Zero(3, 4);
  for (const auto& c : train) mle(c.u, c.x) += 1;
  for (int u = 0; u < 3; ++u) mle.row(u) /= mle.row(u).sum();

  LowRankConfig lc;
  lc.d = 4;
  lc.phi_hidden = {};
  lc.mu_hidden = {};
  lc.temperature = 1.0;
  Rng init(17);
  LowRankModel model(Space::discrete(3), Space::discrete(1), Space::discrete(4), BaseMeasure::uniform_discrete(4), lc, init);
  NceConfig cfg;
  cfg.K = 64;
  cfg.batch_size = 64;
  cfg.marginal_weight = 0;
  cfg.mu_norm_weight = 0;
  cfg.learning_rate = 1e-2;
  auto opt = OptimizerState::adam(cfg.learning_rate);
  const auto res = train_representation(discrete_data(train), model, cfg, NoiseDistribution::uniform(Space::discrete(4)),
                                        opt, 5000, rng);
  const Mat fitted = model.density_table();
  EXPECT_LT(std::abs(mean_log_lik(fitted, test) - mean_log_lik(mle, test)), 0.05);

  // The trace decreases on this well-posed problem.
  const size_t tenth = res.trace.size() / 10;
  double first = 0, last = 0;
  for (size_t i = 0; i < tenth; ++i) {
    first += res.trace[i].loss;
    last += res.trace[res.trace.size() - 1 - i].loss;
  }
  EXPECT_LE(last, first);
}

TEST(RankingLimit, GapShrinksWithK) {
  // loss_K - log K tends to -log p_f(x|u) + log q(x) as K grows.
  auto gap_at = [](int K) {
    double total = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto env = random_synthetic(4, 3, rng);
      Mat log_f(3, 4);
      for (auto& v : log_f.reshaped()) v = standard_normal(rng);
      const Vec log_q = Vec::Constant(4, std::log(0.25));
      const auto data = sample_synthetic(env, 200, Vec::Constant(3, 1.0 / 3), rng);
      Vec a(200);
      Mat B(200, K);
      double target = 0;
      for (int i = 0; i < 200; ++i) {
        const auto& c = data[static_cast<size_t>(i)];
        a[i] = log_f(c.u, c.x) - log_q[c.x];
        for (int j = 0; j < K; ++j) {
          const int y = static_cast<int>(rng() % 4);
          B(i, j) = log_f(c.u, y) - log_q[y];
        }
        const double log_z = log_sum_exp(log_f.row(c.u).transpose());
        target += (-(log_f(c.u, c.x) - log_z) + log_q[c.x]) / 200;
      }
      total += std::abs(ranking_loss_logits(a, B).loss - std::log(static_cast<double>(K)) - target);
    }
    return total / 20;
  };
  EXPECT_LT(gap_at(512), gap_at(8) / 3);
}

TEST(BinaryGamma, OptimumEstimatesLogPartition) {
  // Constant-partition family: every row of f sums to Z = 3.
  Rng rng(18);
  const auto env = random_synthetic(4, 3, rng);
  const double Z = 3.0;
  const Mat log_f = (env.true_table * Z).array().log();
  const Vec log_q = Vec::Constant(4, std::log(0.25));
  const int K = 512, n = 20000;
  const auto data = sample_synthetic(env, n, Vec::Constant(3, 1.0 / 3), rng);
  Mat neg = Mat::Zero(n, 4);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < K; ++j) neg(i, static_cast<int>(rng() % 4)) += 1;
  // Golden-section search on the convex 1-d loss.
  double lo = std::log(Z) - 3, hi = std::log(Z) + 3;
  const double phi = (std::sqrt(5.0) - 1) / 2;
  auto f = [&](double g) { return binary_loss_grouped(log_f, log_q, data, neg, g, K).loss; };
  for (int it = 0; it < 80; ++it) {
    const double m1 = hi - phi * (hi - lo), m2 = lo + phi * (hi - lo);
    (f(m1) < f(m2) ? hi : lo) = (f(m1) < f(m2) ? m2 : m1);
  }
  EXPECT_NEAR(0.5 * (lo + hi), std::log(Z), 0.05);
}
