#include "ctrl/diffnet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace ctrl;

namespace {

double act(Activation a, double z) {
  switch (a) {
    case Activation::identity: return z;
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0 ? z : 0;
    case Activation::sigmoid: return 1 / (1 + std::exp(-z));
    case Activation::gauss: return std::exp(-z * z);
    case Activation::softplus: return std::log1p(std::exp(z));
  }
  return NAN;
}

// Straight-line forward pass with explicit loops over the documented layout.
std::vector<double> reference_forward(const Mlp& net, std::vector<double> x) {
  const auto& dims = net.dims();
  const Vec& p = net.params();
  size_t off = 0;
  for (size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l], out = dims[l + 1];
    std::vector<double> y(static_cast<size_t>(out));
    for (int o = 0; o < out; ++o) {
      double z = p[static_cast<Eigen::Index>(off + static_cast<size_t>(in * out + o))];
      for (int i = 0; i < in; ++i) z += p[static_cast<Eigen::Index>(off + static_cast<size_t>(i * out + o))] * x[static_cast<size_t>(i)];
      y[static_cast<size_t>(o)] = act(l + 2 == dims.size() ? net.output_activation() : net.hidden_activation(), z);
    }
    off += static_cast<size_t>((in + 1) * out);
    x = y;
  }
  return x;
}

Mlp random_net(std::vector<int> dims, Activation h, Activation o, Rng& rng) {
  Mlp net(std::move(dims), h, o);
  Vec p(net.num_params());
  for (auto& v : p) v = standard_normal(rng) * 0.7;
  net.set_params(p);
  return net;
}

}  // namespace

TEST(Mlp, ParamCount) {
  const Mlp net({3, 5, 2}, Activation::tanh, Activation::identity);
  EXPECT_EQ(net.num_params(), (3 + 1) * 5 + (5 + 1) * 2);
  EXPECT_THROW(Mlp({3}, Activation::tanh, Activation::identity), std::invalid_argument);
}

TEST(Mlp, ZeroParamsGiveZeroOutput) {
  Mlp net({3, 4, 2}, Activation::tanh, Activation::identity);
  net.set_params(Vec::Zero(net.num_params()));
  EXPECT_EQ(net.forward(Vec::Ones(3)), Vec::Zero(2));
}

TEST(Mlp, IdentityEmbedding) {
  Mlp net({3, 3}, Activation::tanh, Activation::identity);
  Vec p = Vec::Zero(net.num_params());
  net.weight(p, 0) = Mat::Identity(3, 3);
  net.set_params(p);
  const Vec x(Eigen::Vector3d(0.3, -2.0, 7.5));
  EXPECT_EQ(net.forward(x), x);
}

TEST(Mlp, ForwardMatchesStraightLineOracle) {
  Rng rng(1);
  for (auto [h, o] : {std::pair{Activation::tanh, Activation::identity}, {Activation::relu, Activation::softplus},
                      {Activation::gauss, Activation::sigmoid}, {Activation::sigmoid, Activation::tanh}}) {
    const Mlp net = random_net({4, 6, 5, 3}, h, o, rng);
    Vec x(4);
    for (auto& v : x) v = standard_normal(rng);
    const Vec got = net.forward(x);
    const auto want = reference_forward(net, std::vector<double>(x.data(), x.data() + 4));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(got[i], want[static_cast<size_t>(i)], 1e-12);
  }
}

TEST(Mlp, DimensionMismatchThrows) {
  const Mlp net({3, 2}, Activation::tanh, Activation::identity);
  EXPECT_THROW(net.forward(Vec::Zero(2)), std::invalid_argument);
}

TEST(Mlp, LinearLayerGradientRow) {
  Rng rng(2);
  const Mlp net = random_net({3, 4}, Activation::tanh, Activation::identity, rng);
  const Vec x(Eigen::Vector3d(0.5, -1.5, 2.0));
  const int j = 2;
  const Vec g = net.backward(x, Vec::Unit(4, j));
  Vec expect = Vec::Zero(net.num_params());
  net.weight(expect, 0).row(j) = x.transpose();
  net.bias(expect, 0)[j] = 1.0;
  EXPECT_EQ(g, expect);
}

TEST(Mlp, ZeroUpstreamZeroGradient) {
  Rng rng(3);
  const Mlp net = random_net({3, 5, 2}, Activation::tanh, Activation::softplus, rng);
  Vec ig;
  const Vec g = net.backward(Vec::Ones(3), Vec::Zero(2), &ig);
  EXPECT_EQ(g, Vec::Zero(net.num_params()));
  EXPECT_EQ(ig, Vec::Zero(3));
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  Rng rng(4);
  for (auto [h, o] : {std::pair{Activation::tanh, Activation::identity}, {Activation::gauss, Activation::softplus},
                      {Activation::sigmoid, Activation::sigmoid}, {Activation::softplus, Activation::tanh}}) {
    for (int trial = 0; trial < 5; ++trial) {
      Mlp net = random_net({3, 6, 4, 2}, h, o, rng);
      Vec x(3), up(2);
      for (auto& v : x) v = standard_normal(rng);
      for (auto& v : up) v = standard_normal(rng);
      const LossFn f = [&](const Vec& p, Vec* grad) {
        Mlp n2 = net;
        n2.set_params(p);
        if (grad) *grad = n2.backward(x, up);
        return up.dot(n2.forward(x));
      };
      EXPECT_LT(check_gradient(f, net.params()).max_rel_error, 1e-4);
      // Input gradient as well.
      Vec ig;
      net.backward(x, up, &ig);
      for (int i = 0; i < 3; ++i) {
        Vec xp = x, xm = x;
        xp[i] += 1e-5;
        xm[i] -= 1e-5;
        EXPECT_NEAR(ig[i], (up.dot(net.forward(xp)) - up.dot(net.forward(xm))) / 2e-5, 1e-6);
      }
    }
  }
}

TEST(Mlp, BatchBackwardSumsSingleBackward) {
  Rng rng(5);
  const Mlp net = random_net({2, 4, 3}, Activation::tanh, Activation::identity, rng);
  Mat X = Mat::Random(2, 5), U = Mat::Random(3, 5);
  Mlp::Tape tape;
  const Mat out = net.forward_batch(X, tape);
  Vec g = Vec::Zero(net.num_params());
  net.backward_batch(tape, U, g);
  Vec sum = Vec::Zero(net.num_params());
  for (int i = 0; i < 5; ++i) {
    sum += net.backward(X.col(i), U.col(i));
    EXPECT_LT((out.col(i) - net.forward(X.col(i))).cwiseAbs().maxCoeff(), 1e-14);
  }
  EXPECT_LT((g - sum).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mlp, BoundedOutputsStayInRange) {
  Rng rng(6);
  const Mlp sig = random_net({2, 8, 1}, Activation::relu, Activation::sigmoid, rng);
  const Mlp gau = random_net({2, 8, 1}, Activation::relu, Activation::gauss, rng);
  const Mlp th = random_net({2, 8, 1}, Activation::relu, Activation::tanh, rng);
  const Mat X = Mat::Random(2, 100000) * 20;
  const Mat a = sig.forward_batch(X), b = gau.forward_batch(X), c = th.forward_batch(X);
  EXPECT_GE(a.minCoeff(), 0.0);
  EXPECT_LE(a.maxCoeff(), 1.0);
  EXPECT_GE(b.minCoeff(), 0.0);
  EXPECT_LE(b.maxCoeff(), 1.0);
  EXPECT_GE(c.minCoeff(), -1.0);
  EXPECT_LE(c.maxCoeff(), 1.0);
}

TEST(Mlp, Deterministic) {
  Rng rng(7);
  const Mlp net = random_net({3, 16, 4}, Activation::tanh, Activation::identity, rng);
  const Vec x = Vec::Constant(3, 0.3);
  EXPECT_EQ(net.forward(x), net.forward(x));
  EXPECT_EQ(net.backward(x, Vec::Ones(4)), net.backward(x, Vec::Ones(4)));
}

TEST(Mlp, GlorotBounds) {
  Mlp net({10, 30, 2}, Activation::tanh, Activation::identity);
  Rng rng(8);
  net.init_glorot(rng);
  const Vec& p = net.params();
  EXPECT_LE(net.weight(p, 0).cwiseAbs().maxCoeff(), std::sqrt(6.0 / 40));
  EXPECT_LE(net.weight(p, 1).cwiseAbs().maxCoeff(), std::sqrt(6.0 / 32));
  EXPECT_EQ(net.bias(p, 0), Vec::Zero(30));
}

TEST(Mlp, BlobRoundTrip) {
  Rng rng(9);
  const Mlp net = random_net({3, 4, 2}, Activation::gauss, Activation::softplus, rng);
  std::stringstream ss;
  write_mlp(ss, net);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "CTRLMLP1");
  // magic + L + dims + 2 tags + count + params
  EXPECT_EQ(bytes.size(), 8u + 4 + 3 * 4 + 2 + 8 + 8u * static_cast<size_t>(net.num_params()));
  const Mlp back = read_mlp(ss);
  EXPECT_EQ(back.dims(), net.dims());
  EXPECT_EQ(back.params(), net.params());
  EXPECT_EQ(back.output_activation(), Activation::softplus);
  std::stringstream bad("CTRLMLPX");
  EXPECT_ANY_THROW(read_mlp(bad));
}

TEST(CheckGradient, QuadraticIsExact) {
  const LossFn f = [](const Vec& p, Vec* g) {
    if (g) *g = p;
    return 0.5 * p.squaredNorm();
  };
  Rng rng(10);
  Vec p(50);
  for (auto& v : p) v = standard_normal(rng);
  const auto rep = check_gradient(f, p);
  EXPECT_LT(rep.max_rel_error, 1e-8);
  EXPECT_LT((rep.analytic - p).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(CheckGradient, ConstantLossIsDefined) {
  const LossFn f = [](const Vec& p, Vec* g) {
    if (g) *g = Vec::Zero(p.size());
    return 3.0;
  };
  const auto rep = check_gradient(f, Vec::Ones(4));
  EXPECT_TRUE(std::isfinite(rep.max_rel_error));
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(CheckGradient, SubsamplesLargeVectors) {
  const LossFn f = [](const Vec& p, Vec* g) {
    if (g) *g = p;
    return 0.5 * p.squaredNorm();
  };
  EXPECT_EQ(check_gradient(f, Vec::Ones(1000)).coordinates.size(), 200u);
}

TEST(CheckGradient, NonFiniteLossThrows) {
  const LossFn f = [](const Vec&, Vec*) { return NAN; };
  EXPECT_THROW(check_gradient(f, Vec::Ones(2)), std::invalid_argument);
}

TEST(Optimizer, SgdStep) {
  auto st = OptimizerState::sgd(0.1);
  Vec p = Vec::Ones(1);
  optimizer_step(st, p, Vec::Ones(1));
  EXPECT_DOUBLE_EQ(p[0], 0.9);
}

TEST(Optimizer, AdamFirstStepDescends) {
  auto st = OptimizerState::adam(0.01);
  Vec p(Eigen::Vector2d(1.0, -1.0));
  const Vec before = p;
  const Vec g(Eigen::Vector2d(2.0, -0.5));
  optimizer_step(st, p, g);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(std::signbit(before[i] - p[i]), std::signbit(g[i]));
    EXPECT_NEAR(std::abs(before[i] - p[i]), 0.01, 1e-8);
  }
}

TEST(Optimizer, AdamConvergesOnQuadratic) {
  auto st = OptimizerState::adam(0.1);
  Vec p = Vec::Zero(1);
  for (int i = 0; i < 500; ++i) optimizer_step(st, p, Vec::Constant(1, 2 * (p[0] - 3)));
  EXPECT_LT(std::abs(p[0] - 3), 1e-2);
}

TEST(Optimizer, NonFiniteGradientDiverges) {
  auto st = OptimizerState::adam(0.1);
  Vec p = Vec::Zero(1);
  try {
    optimizer_step(st, p, Vec::Constant(1, NAN));
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_STREQ(e.what(), "diverged");
  }
}
