#include "ctrl/mdp.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "ctrl/format.hpp"

namespace ctrl {

// ---------------------------------------------------------------- Space

Space Space::discrete(int cardinality) {
  if (cardinality < 1) throw std::invalid_argument("discrete space needs cardinality >= 1");
  Space s;
  s.kind_ = Kind::discrete;
  s.cardinality_ = cardinality;
  return s;
}

Space Space::box(Vec low, Vec high) {
  if (low.size() == 0 || low.size() != high.size()) {
    throw std::invalid_argument("box space needs matching non-empty bounds");
  }
  for (int i = 0; i < low.size(); ++i) {
    if (!(low[i] < high[i])) throw std::invalid_argument("box space needs low < high componentwise");
  }
  Space s;
  s.kind_ = Kind::box;
  s.cardinality_ = 0;
  s.low_ = std::move(low);
  s.high_ = std::move(high);
  return s;
}

int Space::point_dim() const { return is_discrete() ? 1 : static_cast<int>(low_.size()); }

double Space::measure() const {
  if (is_discrete()) return cardinality_;
  return (high_ - low_).prod();
}

bool Space::contains(const Vec& p) const {
  if (p.size() != point_dim() || !p.allFinite()) return false;
  if (is_discrete()) {
    const double v = p[0];
    return v == std::floor(v) && v >= 0 && v < cardinality_;
  }
  return ((p.array() >= low_.array()) && (p.array() <= high_.array())).all();
}

Vec Space::clip(const Vec& p) const {
  if (is_discrete()) return p;
  return p.cwiseMax(low_).cwiseMin(high_);
}

int Space::index(const Vec& p) const {
  if (!is_discrete()) throw std::logic_error("index() on a box space");
  if (!contains(p)) throw std::out_of_range("point outside discrete space");
  return static_cast<int>(p[0]);
}

std::string Space::describe() const {
  std::ostringstream os;
  if (is_discrete()) {
    os << "discrete " << cardinality_;
  } else {
    os << "box " << low_.size();
    for (int i = 0; i < low_.size(); ++i) os << ' ' << format_double(low_[i]);
    for (int i = 0; i < high_.size(); ++i) os << ' ' << format_double(high_[i]);
  }
  return os.str();
}

Space Space::parse(const std::string& text) {
  std::istringstream is(text);
  std::string kind;
  is >> kind;
  if (kind == "discrete") {
    int n = 0;
    if (!(is >> n)) throw std::invalid_argument("bad discrete space descriptor: " + text);
    return discrete(n);
  }
  if (kind == "box") {
    int dim = 0;
    if (!(is >> dim) || dim < 1) throw std::invalid_argument("bad box space descriptor: " + text);
    Vec lo(dim), hi(dim);
    std::string tok;
    for (int i = 0; i < dim; ++i) {
      if (!(is >> tok)) throw std::invalid_argument("bad box space descriptor: " + text);
      lo[i] = parse_double(tok);
    }
    for (int i = 0; i < dim; ++i) {
      if (!(is >> tok)) throw std::invalid_argument("bad box space descriptor: " + text);
      hi[i] = parse_double(tok);
    }
    return box(lo, hi);
  }
  throw std::invalid_argument("unknown space kind: " + text);
}

bool Space::operator==(const Space& o) const {
  if (kind_ != o.kind_) return false;
  if (is_discrete()) return cardinality_ == o.cardinality_;
  return low_ == o.low_ && high_ == o.high_;
}

std::vector<Vec> Environment::action_set() const {
  const Space& a = action_space();
  if (!a.is_discrete()) {
    throw std::logic_error("continuous environment must provide its own action_set()");
  }
  std::vector<Vec> out;
  out.reserve(static_cast<size_t>(a.cardinality()));
  for (int i = 0; i < a.cardinality(); ++i) out.push_back(Vec::Constant(1, i));
  return out;
}

void require_discount(double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("discount must satisfy 0 < gamma < 1");
  }
}

void DiscountedMdpConfig::validate() const {
  require_discount(gamma);
  if (initial_distribution.size() > 0) {
    if ((initial_distribution.array() < 0).any() ||
        std::abs(initial_distribution.sum() - 1.0) > 1e-9) {
      throw std::invalid_argument("initial distribution must be a probability vector");
    }
  }
}

// ---------------------------------------------------------------- Policy

Vec softmax(const Vec& logits) {
  const double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

Policy Policy::uniform(int num_actions) {
  if (num_actions < 1) throw std::invalid_argument("policy needs at least one action");
  Policy p;
  p.kind_ = Kind::uniform;
  p.num_actions_ = num_actions;
  return p;
}

Policy Policy::tabular(Mat probabilities) {
  for (int s = 0; s < probabilities.rows(); ++s) {
    if ((probabilities.row(s).array() < 0).any() ||
        std::abs(probabilities.row(s).sum() - 1.0) > 1e-9) {
      throw std::invalid_argument("tabular policy rows must be probability vectors");
    }
  }
  Policy p;
  p.kind_ = Kind::tabular;
  p.num_actions_ = static_cast<int>(probabilities.cols());
  p.table_ = std::move(probabilities);
  return p;
}

Policy Policy::tabular_softmax(Mat logits) {
  Policy p;
  p.kind_ = Kind::tabular_softmax;
  p.num_actions_ = static_cast<int>(logits.cols());
  p.table_ = std::move(logits);
  return p;
}

Policy Policy::feature_softmax(Vec weights, double temperature, int num_actions,
                               FeatureRows features) {
  if (!(temperature > 0)) throw std::invalid_argument("softmax temperature must be > 0");
  Policy p;
  p.kind_ = Kind::feature_softmax;
  p.num_actions_ = num_actions;
  p.weights_ = std::move(weights);
  p.temperature_ = temperature;
  p.features_ = std::move(features);
  return p;
}

Policy Policy::epsilon_mixture(Policy base, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0,1]");
  Policy p;
  p.kind_ = Kind::epsilon_mixture;
  p.num_actions_ = base.num_actions();
  p.epsilon_ = epsilon;
  p.base_ = std::make_shared<const Policy>(std::move(base));
  return p;
}

Vec Policy::probs(const Vec& state) const {
  switch (kind_) {
    case Kind::uniform:
      return Vec::Constant(num_actions_, 1.0 / num_actions_);
    case Kind::tabular:
      return table_.row(static_cast<Eigen::Index>(state[0])).transpose();
    case Kind::tabular_softmax:
      return softmax(table_.row(static_cast<Eigen::Index>(state[0])).transpose());
    case Kind::feature_softmax: {
      const Mat rows = features_(state);
      return softmax(rows * weights_ / temperature_);
    }
    case Kind::epsilon_mixture: {
      Vec p = base_->probs(state) * (1.0 - epsilon_);
      p.array() += epsilon_ / num_actions_;
      return p;
    }
  }
  return {};
}

int Policy::sample(const Vec& state, Rng& rng) const { return sample_categorical(probs(state), rng); }

Mat Policy::table(int num_states) const {
  Mat out(num_states, num_actions_);
  for (int s = 0; s < num_states; ++s) out.row(s) = probs(Vec::Constant(1, s)).transpose();
  return out;
}

// ---------------------------------------------------------------- Tabular MDP

void TabularMdp::validate(double tol) const {
  if (num_states < 1 || num_actions < 1) throw std::invalid_argument("MDP needs S, A >= 1");
  if (transition.rows() != num_states * num_actions || transition.cols() != num_states) {
    throw std::invalid_argument("transition matrix must be (S*A) x S");
  }
  if (reward.rows() != num_states || reward.cols() != num_actions) {
    throw std::invalid_argument("reward matrix must be S x A");
  }
  if (rho.size() != num_states) throw std::invalid_argument("rho must have S entries");
  for (int r = 0; r < transition.rows(); ++r) {
    if ((transition.row(r).array() < 0).any() || std::abs(transition.row(r).sum() - 1.0) > tol) {
      throw std::invalid_argument("transition row " + std::to_string(r) +
                                  " is not a probability vector");
    }
  }
  if ((rho.array() < 0).any() || std::abs(rho.sum() - 1.0) > tol) {
    throw std::invalid_argument("rho is not a probability vector");
  }
  if (!terminal.empty() && terminal.size() != static_cast<size_t>(num_states)) {
    throw std::invalid_argument("terminal mask must have S entries");
  }
}

namespace {

Mat yaml_matrix(const YAML::Node& node, const char* name) {
  if (!node || !node.IsSequence()) throw ConfigError(std::string("missing matrix '") + name + "'");
  const auto rows = node.size();
  if (rows == 0) throw ConfigError(std::string("empty matrix '") + name + "'");
  const auto cols = node[0].size();
  Mat m(rows, cols);
  for (size_t i = 0; i < rows; ++i) {
    if (node[i].size() != cols) throw ConfigError(std::string("ragged matrix '") + name + "'");
    for (size_t j = 0; j < cols; ++j) m(i, j) = node[i][j].as<double>();
  }
  return m;
}

}  // namespace

TabularMdp parse_tabular_mdp(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("tabular MDP parse error: ") + e.what());
  }
  TabularMdp mdp;
  try {
    mdp.num_states = root["states"].as<int>();
    mdp.num_actions = root["actions"].as<int>();
    mdp.transition = yaml_matrix(root["transition"], "transition");
    mdp.reward = yaml_matrix(root["reward"], "reward");
    const auto rho = root["rho"];
    if (!rho || !rho.IsSequence()) throw ConfigError("missing vector 'rho'");
    mdp.rho.resize(static_cast<Eigen::Index>(rho.size()));
    for (size_t i = 0; i < rho.size(); ++i) mdp.rho[static_cast<Eigen::Index>(i)] = rho[i].as<double>();
    if (const auto term = root["terminal"]) {
      mdp.terminal.assign(static_cast<size_t>(mdp.num_states), false);
      for (const auto& t : term) mdp.terminal.at(t.as<size_t>()) = true;
    }
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("tabular MDP field error: ") + e.what());
  }
  try {
    mdp.validate(1e-9);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return mdp;
}

TabularMdp load_tabular_mdp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open tabular MDP file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_tabular_mdp(ss.str());
}

std::string format_tabular_mdp(const TabularMdp& mdp) {
  std::ostringstream os;
  auto row = [&](const auto& r) {
    os << "[";
    for (Eigen::Index j = 0; j < r.size(); ++j) os << (j ? ", " : "") << format_double(r[j]);
    os << "]";
  };
  os << "states: " << mdp.num_states << "\nactions: " << mdp.num_actions << "\nrho: ";
  row(mdp.rho);
  os << "\nreward:\n";
  for (int s = 0; s < mdp.num_states; ++s) {
    os << "  - ";
    row(Vec(mdp.reward.row(s).transpose()));
    os << "\n";
  }
  os << "transition:\n";
  for (int r = 0; r < mdp.transition.rows(); ++r) {
    os << "  - ";
    row(Vec(mdp.transition.row(r).transpose()));
    os << "\n";
  }
  if (!mdp.terminal.empty()) {
    os << "terminal: [";
    bool first = true;
    for (int s = 0; s < mdp.num_states; ++s) {
      if (mdp.is_terminal(s)) {
        os << (first ? "" : ", ") << s;
        first = false;
      }
    }
    os << "]\n";
  }
  return os.str();
}

TabularMdp random_tabular_mdp(int num_states, int num_actions, Rng& rng) {
  TabularMdp mdp;
  mdp.num_states = num_states;
  mdp.num_actions = num_actions;
  mdp.transition.resize(num_states * num_actions, num_states);
  std::exponential_distribution<double> expo(1.0);
  for (int r = 0; r < mdp.transition.rows(); ++r) {
    for (int c = 0; c < num_states; ++c) mdp.transition(r, c) = expo(rng);
    mdp.transition.row(r) /= mdp.transition.row(r).sum();
  }
  mdp.reward.resize(num_states, num_actions);
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a) mdp.reward(s, a) = uniform01(rng);
  mdp.rho = Vec::Constant(num_states, 1.0 / num_states);
  return mdp;
}

TabularEnvironment::TabularEnvironment(TabularMdp mdp)
    : mdp_(std::move(mdp)),
      states_(Space::discrete(mdp_.num_states)),
      actions_(Space::discrete(mdp_.num_actions)) {
  mdp_.validate();
}

Vec TabularEnvironment::reset(Rng& rng) const {
  return Vec::Constant(1, sample_categorical(mdp_.rho, rng));
}

StepResult TabularEnvironment::step(const Vec& state, const Vec& action, Rng& rng) const {
  const int s = states_.index(state);
  const int a = actions_.index(action);
  const int next = sample_categorical(mdp_.transition.row(mdp_.row(s, a)).transpose(), rng);
  return {Vec::Constant(1, next), mdp_.reward(s, a), mdp_.is_terminal(next)};
}

// ---------------------------------------------------------------- Rollouts

namespace {

Transition take_step(const Environment& env, const Policy& policy,
                     const std::vector<Vec>& actions, const Vec& state, Rng& rng) {
  const int ai = policy.sample(state, rng);
  const Vec& action = actions[static_cast<size_t>(ai)];
  StepResult res = env.step(state, action, rng);
  if (!res.next.allFinite()) throw DivergenceError("environment emitted a non-finite state");
  return {state, action, res.reward, std::move(res.next), res.terminal};
}

}  // namespace

std::vector<Transition> sample_discounted_rollout(const Environment& env, const Policy& policy,
                                                  double gamma, Rng& rng) {
  require_discount(gamma);
  const auto actions = env.action_set();
  const auto cap = static_cast<size_t>(std::ceil(10.0 / (1.0 - gamma)));
  std::vector<Transition> out;
  Vec state = env.reset(rng);
  while (out.size() < cap) {
    out.push_back(take_step(env, policy, actions, state, rng));
    if (out.back().terminal) break;
    if (uniform01(rng) >= gamma) break;
    state = out.back().next_state;
  }
  return out;
}

std::vector<Transition> sample_rollout(const Environment& env, const Policy& policy, int horizon,
                                       Rng& rng) {
  const auto actions = env.action_set();
  std::vector<Transition> out;
  Vec state = env.reset(rng);
  for (int t = 0; t < horizon; ++t) {
    out.push_back(take_step(env, policy, actions, state, rng));
    if (out.back().terminal) break;
    state = out.back().next_state;
  }
  return out;
}

// ---------------------------------------------------------------- Occupancy

namespace {

struct PointPairLess {
  static bool less(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      if (a[i] != b[i]) return a[i] < b[i];
    }
    return false;
  }
  bool operator()(const std::pair<Vec, Vec>& x, const std::pair<Vec, Vec>& y) const {
    if (less(x.first, y.first)) return true;
    if (less(y.first, x.first)) return false;
    return less(x.second, y.second);
  }
};

}  // namespace

double OccupancyEstimate::weight(const Vec& state, const Vec& action) const {
  for (const auto& e : entries) {
    if (e.state == state && e.action == action) return e.weight;
  }
  return 0.0;
}

double OccupancyEstimate::expectation(
    const std::function<double(const Vec&, const Vec&)>& f) const {
  double acc = 0.0;
  for (const auto& e : entries) acc += e.weight * f(e.state, e.action);
  return acc;
}

OccupancyEstimate estimate_occupancy(const std::vector<std::vector<Transition>>& rollouts,
                                     double gamma) {
  require_discount(gamma);
  std::map<std::pair<Vec, Vec>, double, PointPairLess> acc;
  double total = 0.0;
  for (const auto& rollout : rollouts) {
    double disc = 1.0;
    for (const auto& t : rollout) {
      acc[{t.state, t.action}] += disc;
      total += disc;
      disc *= gamma;
    }
  }
  if (acc.empty() || !(total > 0)) throw std::invalid_argument("no data");
  OccupancyEstimate est;
  est.normalization = total;
  est.entries.reserve(acc.size());
  for (const auto& [key, w] : acc) est.entries.push_back({key.first, key.second, w / total});
  return est;
}

// ---------------------------------------------------------------- Exact evaluation

namespace {

Mat policy_transition(const TabularMdp& mdp, const Mat& policy) {
  Mat p = Mat::Zero(mdp.num_states, mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) continue;
    for (int a = 0; a < mdp.num_actions; ++a) {
      p.row(s) += policy(s, a) * mdp.transition.row(mdp.row(s, a));
    }
  }
  // Terminal states absorb with zero value: drop transitions into them.
  for (int s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) p.col(s).setZero();
  }
  return p;
}

void check_policy_shape(const TabularMdp& mdp, const Mat& policy) {
  if (policy.rows() != mdp.num_states || policy.cols() != mdp.num_actions) {
    throw std::invalid_argument("policy table must be S x A");
  }
}

}  // namespace

Vec policy_state_values(const TabularMdp& mdp, const Mat& policy, double gamma) {
  require_discount(gamma);
  check_policy_shape(mdp, policy);
  const Mat p = policy_transition(mdp, policy);
  Vec r(mdp.num_states);
  for (int s = 0; s < mdp.num_states; ++s) {
    r[s] = mdp.is_terminal(s) ? 0.0 : policy.row(s).dot(mdp.reward.row(s));
  }
  const Mat system = Mat::Identity(mdp.num_states, mdp.num_states) - gamma * p;
  Eigen::PartialPivLU<Mat> lu(system);
  Vec v = lu.solve(r);
  if (!v.allFinite()) throw std::runtime_error("policy evaluation: singular Bellman system");
  return v;
}

Mat policy_q_values(const TabularMdp& mdp, const Mat& policy, double gamma) {
  const Vec v = policy_state_values(mdp, policy, gamma);
  Vec v_cont = v;
  for (int s = 0; s < mdp.num_states; ++s) {
    if (mdp.is_terminal(s)) v_cont[s] = 0.0;
  }
  Mat q(mdp.num_states, mdp.num_actions);
  for (int s = 0; s < mdp.num_states; ++s)
    for (int a = 0; a < mdp.num_actions; ++a)
      q(s, a) = mdp.reward(s, a) + gamma * mdp.transition.row(mdp.row(s, a)).dot(v_cont);
  return q;
}

double policy_value(const TabularMdp& mdp, const Mat& policy, double gamma) {
  return mdp.rho.dot(policy_state_values(mdp, policy, gamma));
}

Mat exact_occupancy(const TabularMdp& mdp, const Mat& policy, double gamma) {
  require_discount(gamma);
  check_policy_shape(mdp, policy);
  const Mat p = policy_transition(mdp, policy);
  // d_s^T = (1-gamma) rho^T (I - gamma P_pi)^{-1}
  const Mat system = (Mat::Identity(mdp.num_states, mdp.num_states) - gamma * p).transpose();
  const Vec ds = (1.0 - gamma) * system.partialPivLu().solve(mdp.rho);
  Mat d(mdp.num_states, mdp.num_actions);
  for (int s = 0; s < mdp.num_states; ++s) d.row(s) = ds[s] * policy.row(s);
  return d / d.sum();
}

}  // namespace ctrl
