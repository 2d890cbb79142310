#include "ctrl/gradcheck.hpp"

#include "ctrl/nce.hpp"
#include "ctrl/planner.hpp"

#include <cmath>
#include <functional>

namespace ctrl {

namespace {

// Small continuous model: (s, a) in [0,1]^2 x [-1,1]^2, softplus link, bounded phi.
LowRankModel tiny_model(Rng& rng) {
  const Space states = Space::box(Vec::Zero(2), Vec::Ones(2));
  const Space actions = Space::box(-Vec::Ones(2), Vec::Ones(2));
  LowRankConfig cfg;
  cfg.d = 4;
  cfg.phi_hidden = {5};
  cfg.mu_hidden = {5};
  cfg.temperature = 0.5;
  LowRankModel m(states, actions, states, BaseMeasure::uniform_over(states), cfg, rng);
  // Wider weights than the default init so every coordinate carries signal.
  Vec p = m.params();
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.3 * standard_normal(rng);
  m.set_params(p);
  return m;
}

std::vector<Transition> tiny_data(int n, Rng& rng) {
  std::vector<Transition> data;
  for (int i = 0; i < n; ++i) {
    Transition t;
    t.state = Vec::NullaryExpr(2, [&] { return uniform01(rng); });
    t.action = Vec::NullaryExpr(2, [&] { return 2 * uniform01(rng) - 1; });
    t.next_state = Vec::NullaryExpr(2, [&] { return uniform01(rng); });
    data.push_back(t);
  }
  return data;
}

double check(const LossFn& f, const Vec& p) { return check_gradient(f, p, 1e-5, 200).max_rel_error; }

using Instance = std::function<double(Rng&)>;

double nce_instance(Rng& rng, bool binary) {
  LowRankModel model = tiny_model(rng);
  const auto data = tiny_data(6, rng);
  const NoiseDistribution noise = NoiseDistribution::uniform(model.next_space());
  const NceBatch batch = build_batch(data, noise, 5, rng);
  const double gamma0 = standard_normal(rng);
  const int np = model.num_params();
  Vec p(np + (binary ? 1 : 0));
  p.head(np) = model.params();
  if (binary) p[np] = gamma0;
  auto loss = [&](const Vec& x, Vec* grad) {
    LowRankModel m = model;
    m.set_params(x.head(np));
    const NceLoss l = binary ? binary_loss(batch, m, x[np]) : ranking_loss(batch, m);
    if (grad) {
      grad->resize(x.size());
      grad->head(np) = l.grad;
      if (binary) (*grad)[np] = l.dgamma;
    }
    return l.loss;
  };
  return check(loss, p);
}

double marginal_instance(Rng& rng) {
  LowRankModel model = tiny_model(rng);
  const auto data = tiny_data(5, rng);
  std::vector<std::pair<Vec, Vec>> sa;
  for (const auto& t : data) sa.emplace_back(t.state, t.action);
  const std::uint64_t draw_seed = rng();
  auto loss = [&](const Vec& x, Vec* grad) {
    LowRankModel m = model;
    m.set_params(x);
    Rng r(draw_seed);  // same Monte-Carlo draws at every evaluation
    const LossGrad lg = normalization_regularizer(m, sa, 7, false, r);
    if (grad) *grad = lg.grad;
    return lg.value;
  };
  return check(loss, model.params());
}

double mu_norm_instance(Rng& rng) {
  LowRankModel model = tiny_model(rng);
  const std::uint64_t draw_seed = rng();
  auto loss = [&](const Vec& x, Vec* grad) {
    LowRankModel m = model;
    m.set_params(x);
    Rng r(draw_seed);
    const LossGrad lg = mu_norm_regularizer(m, 7, false, r);
    if (grad) *grad = lg.grad;
    return lg.value;
  };
  return check(loss, model.params());
}

double td_instance(Rng& rng) {
  const int d = 5, m = 4;
  AugmentedQ q = AugmentedQ::init(d, m, Activation::tanh, 0.005, rng);
  Vec p = q.params();
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = standard_normal(rng);
  std::vector<TdItem> items(8);
  for (auto& it : items) {
    it.phi = Vec::NullaryExpr(d, [&] { return standard_normal(rng); });
    it.target = standard_normal(rng);
    it.log_pi_term = 0.3 * std::log(0.05 + uniform01(rng));
  }
  auto loss = [&](const Vec& x, Vec* grad) { return td_loss(q, x, items, grad); };
  return check(loss, p);
}

double policy_instance(Rng& rng) {
  const int A = 4, dim = 6;
  std::vector<PolicyItem> items(5);
  for (auto& it : items) {
    it.features = Mat::NullaryExpr(A, dim, [&] { return standard_normal(rng); });
    it.q = Vec::NullaryExpr(A, [&] { return standard_normal(rng); });
    const Vec b = Vec::NullaryExpr(A, [&] { return standard_normal(rng); });
    it.log_behavior = b.array() - log_sum_exp(b);
  }
  const Vec v = Vec::NullaryExpr(dim, [&] { return 0.5 * standard_normal(rng); });
  const double w = 0.1 + uniform01(rng), reg = uniform01(rng), T = 0.5 + uniform01(rng);
  auto loss = [&](const Vec& x, Vec* grad) { return policy_surrogate(x, T, items, w, reg, grad); };
  return check(loss, v);
}

}  // namespace

std::vector<GradientSuiteEntry> run_gradient_suite(std::uint64_t seed, int instances, double tolerance) {
  if (instances < 1) throw std::invalid_argument("gradient suite needs instances >= 1");
  const std::vector<std::pair<std::string, Instance>> cases = {
      {"binary_nce", [](Rng& r) { return nce_instance(r, true); }},
      {"ranking_nce", [](Rng& r) { return nce_instance(r, false); }},
      {"marginal_regularizer", marginal_instance},
      {"mu_norm_regularizer", mu_norm_instance},
      {"td_loss", td_instance},
      {"policy_surrogate", policy_instance},
  };
  std::vector<GradientSuiteEntry> out;
  for (size_t c = 0; c < cases.size(); ++c) {
    GradientSuiteEntry e;
    e.loss = cases[c].first;
    e.instances = instances;
    for (int i = 0; i < instances; ++i) {
      Rng rng(derive_seed(seed, c * 1000 + static_cast<std::uint64_t>(i)));
      e.worst_rel_error = std::max(e.worst_rel_error, cases[c].second(rng));
    }
    e.passed = e.worst_rel_error < tolerance;
    out.push_back(e);
  }
  return out;
}

}  // namespace ctrl
