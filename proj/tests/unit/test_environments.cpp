#include "ctrl/environments.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace ctrl;

namespace {

Vec pt(double x, double y) { return Eigen::Vector2d(x, y); }

ContinuousMaze open_maze(double noise) {
  ContinuousMazeSpec spec;
  spec.noise_std = noise;
  return ContinuousMaze(spec);
}

// First parameter t in [0,1] at which from + t (to - from) meets an
// axis-aligned segment, computed independently of the library.
double first_hit(const Eigen::Vector2d& f, const Eigen::Vector2d& t, const std::vector<WallSegment>& walls) {
  double best = INFINITY;
  for (const auto& w : walls) {
    const bool vertical = w.a.x() == w.b.x();
    const int fixed = vertical ? 0 : 1, free = 1 - fixed;
    const double den = t[fixed] - f[fixed];
    if (den == 0) continue;
    const double u = (w.a[fixed] - f[fixed]) / den;
    if (u < 0 || u > 1) continue;
    const double along = f[free] + u * (t[free] - f[free]);
    const double lo = std::min(w.a[free], w.b[free]), hi = std::max(w.a[free], w.b[free]);
    if (along >= lo && along <= hi) best = std::min(best, u);
  }
  return best;
}

}  // namespace

TEST(FourRoomGrid, CanonicalLayout) {
  const auto g = FourRoomGrid::canonical();
  EXPECT_EQ(g.width(), 11);
  EXPECT_EQ(g.height(), 11);
  EXPECT_EQ(g.cell(g.goal_state()), (Cell{1, 1}));
  EXPECT_EQ(g.cell(g.start_state()), (Cell{9, 9}));
}

TEST(FourRoomGrid, DeterministicMoveRight) {
  const auto g = FourRoomGrid::canonical();
  Rng rng(1);
  const int s = g.state_of({2, 2});
  const auto r = g.step_index(s, 3, rng);
  EXPECT_EQ(g.cell(r.next), (Cell{2, 3}));
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_FALSE(r.terminal);
}

TEST(FourRoomGrid, WallBlocks) {
  const auto g = FourRoomGrid::canonical();
  Rng rng(2);
  const int s = g.state_of({1, 4});  // wall at (1, 5)
  EXPECT_EQ(g.step_index(s, 3, rng).next, s);
  EXPECT_EQ(g.step_index(s, 0, rng).next, s);  // outer wall above
}

TEST(FourRoomGrid, SlipFrequency) {
  const auto g = FourRoomGrid::canonical(0.2);
  Rng rng(3);
  const int s = g.state_of({2, 2});
  const int intended = g.move(s, 1);
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) hits += g.step_index(s, 1, rng).next == intended;
  EXPECT_NEAR(static_cast<double>(hits) / n, 0.8, 0.005);
}

TEST(FourRoomGrid, GoalIsTerminalWithSparseReward) {
  const auto g = FourRoomGrid::canonical();
  Rng rng(4);
  const auto r = g.step_index(g.state_of({1, 2}), 2, rng);
  EXPECT_EQ(r.next, g.goal_state());
  EXPECT_EQ(r.reward, 1.0);
  EXPECT_TRUE(r.terminal);
}

TEST(FourRoomGrid, BadActionThrows) {
  const auto g = FourRoomGrid::canonical();
  Rng rng(5);
  EXPECT_THROW(g.step_index(0, 4, rng), std::invalid_argument);
}

TEST(FourRoomGrid, AnalyticKernelRowsSumToOne) {
  const auto m = FourRoomGrid::canonical(0.3).to_tabular();
  for (int r = 0; r < m.transition.rows(); ++r) EXPECT_EQ(m.transition.row(r).sum(), 1.0);
}

TEST(FourRoomGrid, AnalyticKernelMatchesSampler) {
  const auto g = FourRoomGrid::canonical(0.3);
  const auto m = g.to_tabular();
  Rng rng(6);
  const int s = g.state_of({5, 2});  // doorway
  for (int a = 0; a < 4; ++a) {
    Vec counts = Vec::Zero(g.num_states());
    const int n = 40000;
    for (int i = 0; i < n; ++i) counts[g.step_index(s, a, rng).next] += 1;
    EXPECT_LT((counts / n - m.transition.row(m.row(s, a)).transpose()).cwiseAbs().maxCoeff(), 0.01);
  }
}

TEST(FourRoomGrid, AsciiErrors) {
  EXPECT_THROW(FourRoomGrid::from_ascii("###\n#S#\n###\n"), ConfigError);           // no goal
  EXPECT_THROW(FourRoomGrid::from_ascii("#####\n#S#G#\n#####\n"), ConfigError);      // unreachable
  EXPECT_NO_THROW(FourRoomGrid::from_ascii("####\n#SG#\n####\n"));
}

TEST(ContinuousMaze, NoiselessStep) {
  const auto m = open_maze(0.0);
  Rng rng(7);
  const auto r = m.step(pt(0.3, 0.3), pt(1, 0), rng);
  EXPECT_NEAR(r.next[0], 0.4, 1e-15);
  EXPECT_NEAR(r.next[1], 0.3, 1e-15);
}

TEST(ContinuousMaze, NoiselessIsBitDeterministic) {
  const ContinuousMaze m = [] {
    auto spec = ContinuousMazeSpec::four_rooms();
    spec.noise_std = 0;
    return ContinuousMaze(spec);
  }();
  Rng a(1), b(2);
  for (int i = 0; i < 100; ++i) {
    const Vec s = pt(0.01 * i, 1 - 0.01 * i), act = pt(0.7, -0.3);
    EXPECT_EQ(m.step(s, act, a).next, m.step(s, act, b).next);
  }
}

TEST(ContinuousMaze, NoiseSecondMoment) {
  const auto m = open_maze(0.05);
  Rng rng(8);
  double acc = 0;
  const int n = 100000;
  // Far from the boundary so clipping never engages.
  for (int i = 0; i < n; ++i) acc += (m.step(pt(0.5, 0.5), pt(0, 0), rng).next - pt(0.5, 0.5)).squaredNorm();
  EXPECT_NEAR(acc / n, 2 * 0.05 * 0.05, 0.05 * 2 * 0.05 * 0.05);
}

TEST(ContinuousMaze, ActionsAreClipped) {
  const auto m = open_maze(0.0);
  Rng rng(9);
  EXPECT_EQ(m.step(pt(0.3, 0.3), pt(5, -5), rng).next, m.step(pt(0.3, 0.3), pt(1, -1), rng).next);
  EXPECT_THROW(m.step(pt(0.3, 0.3), pt(NAN, 0), rng), std::invalid_argument);
}

TEST(ContinuousMaze, WallProjectionAgainstGeometricOracle) {
  const ContinuousMaze m(ContinuousMazeSpec::four_rooms());
  Rng rng(10);
  int blocked = 0;
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector2d f(uniform01(rng), uniform01(rng));
    const Eigen::Vector2d t(uniform01(rng), uniform01(rng));
    const double u = first_hit(f, t, m.spec().walls);
    const Eigen::Vector2d got = m.project_through_walls(f, t);
    if (!std::isfinite(u)) {
      EXPECT_EQ(got, t);
      continue;
    }
    ++blocked;
    const Eigen::Vector2d hit = f + u * (t - f);
    EXPECT_LT((got - hit).norm(), 1e-5);
    EXPECT_TRUE(m.segment_clear(f, got));
    // Near side: moving from the stop point towards the start never crosses a wall.
    EXPECT_LE((got - f).norm(), (hit - f).norm());
  }
  EXPECT_GT(blocked, 20);
}

TEST(ContinuousMaze, StepStopsAtWall) {
  auto spec = ContinuousMazeSpec::four_rooms();
  spec.noise_std = 0;
  const ContinuousMaze m(spec);
  Rng rng(11);
  const auto r = m.step(pt(0.45, 0.4), pt(1, 0), rng);
  EXPECT_LT(r.next[0], 0.5);
  EXPECT_GT(r.next[0], 0.5 - 1e-5);
}

TEST(ContinuousMaze, GaussianModeDensity) {
  const auto m = open_maze(0.1);
  const Vec s = pt(0.4, 0.4), a = pt(1, -1);
  const Vec mode = s + a * 0.1;
  EXPECT_NEAR(m.true_conditional_density(s, a, mode), 1.0 / (2 * std::numbers::pi * 0.01), 1e-9);
  EXPECT_NEAR(m.true_conditional_density(s, a, mode + pt(0.3, 0.3)),
              m.true_conditional_density(s, a, mode) * std::exp(-9.0), 1e-12);
}

TEST(ContinuousMaze, DensityIntegratesToOne) {
  const auto m = open_maze(0.05);
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec s = pt(uniform01(rng), uniform01(rng));
    const Vec a = pt(2 * uniform01(rng) - 1, 2 * uniform01(rng) - 1);
    const Vec c = s + a * 0.1;
    const int n = 200;
    const double half = 6 * 0.05, h = 2 * half / n;
    double total = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        total += m.true_conditional_density(s, a, c + pt(-half + (i + 0.5) * h, -half + (j + 0.5) * h)) * h * h;
    EXPECT_NEAR(total, 1.0, 1e-3);
  }
}

TEST(ContinuousMaze, SpecParsing) {
  const auto spec = parse_maze_spec("dt: 0.2\nnoise_std: 0.01\nreward_mode: dense\n");
  EXPECT_EQ(spec.dt, 0.2);
  EXPECT_EQ(spec.reward_mode, RewardMode::dense);
  EXPECT_EQ(spec.walls.size(), ContinuousMazeSpec::four_rooms().walls.size());
  EXPECT_THROW(parse_maze_spec("dtt: 0.2\n"), ConfigError);
  EXPECT_THROW(ContinuousMaze([] {
                 ContinuousMazeSpec s;
                 s.dt = 0;
                 return s;
               }()),
               ConfigError);
}

TEST(SyntheticConditional, PointMassRow) {
  SyntheticConditional env;
  env.x_cardinality = 4;
  env.u_cardinality = 2;
  env.true_table = Mat::Constant(2, 4, 0.25);
  env.true_table.row(0) << 1, 0, 0, 0;
  Rng rng(13);
  for (const auto& p : sample_synthetic(env, 2000, Vec::Constant(2, 0.5), rng)) {
    if (p.u == 0) EXPECT_EQ(p.x, 0);
  }
}

TEST(SyntheticConditional, UniformFrequencies) {
  SyntheticConditional env;
  env.x_cardinality = env.u_cardinality = 4;
  env.true_table = Mat::Constant(4, 4, 0.25);
  Rng rng(14);
  Mat counts = Mat::Zero(4, 4);
  for (const auto& p : sample_synthetic(env, 40000, Vec::Constant(4, 0.25), rng)) counts(p.u, p.x) += 1;
  for (int u = 0; u < 4; ++u) {
    const Vec freq = counts.row(u).transpose() / counts.row(u).sum();
    EXPECT_LT((freq.array() - 0.25).abs().maxCoeff(), 0.02);
  }
}

TEST(SyntheticConditional, SameSeedSameSample) {
  Rng r0(15);
  const auto env = random_synthetic(4, 3, r0);
  EXPECT_NEAR(env.true_table.rowwise().sum().maxCoeff(), 1.0, 1e-12);
  Rng a(16), b(16);
  const auto x = sample_synthetic(env, 100, Vec::Constant(3, 1.0 / 3), a);
  const auto y = sample_synthetic(env, 100, Vec::Constant(3, 1.0 / 3), b);
  for (size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].x, y[i].x);
    EXPECT_EQ(x[i].u, y[i].u);
  }
}
