#include "ctrl/lowrank.hpp"

#include "ctrl/format.hpp"
#include "ctrl/kernels.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace ctrl {

// ---------------------------------------------------------------- BaseMeasure

BaseMeasure BaseMeasure::uniform_discrete(int cardinality) {
  if (cardinality < 1) throw std::invalid_argument("uniform_discrete needs cardinality >= 1");
  BaseMeasure m;
  m.kind_ = Kind::uniform_discrete;
  m.cardinality_ = cardinality;
  return m;
}

BaseMeasure BaseMeasure::uniform_box(Vec low, Vec high) {
  if (low.size() != high.size() || low.size() == 0 || !(low.array() < high.array()).all()) {
    throw std::invalid_argument("uniform_box needs low < high componentwise");
  }
  BaseMeasure m;
  m.kind_ = Kind::uniform_box;
  m.a_ = std::move(low);
  m.b_ = std::move(high);
  return m;
}

BaseMeasure BaseMeasure::gaussian(Vec mean, Vec std) {
  if (mean.size() != std.size() || mean.size() == 0 || !(std.array() > 0).all()) {
    throw std::invalid_argument("gaussian base measure needs positive std");
  }
  BaseMeasure m;
  m.kind_ = Kind::gaussian;
  m.a_ = std::move(mean);
  m.b_ = std::move(std);
  return m;
}

BaseMeasure BaseMeasure::uniform_over(const Space& space) {
  return space.is_discrete() ? uniform_discrete(space.cardinality()) : uniform_box(space.low(), space.high());
}

double BaseMeasure::log_density(const Vec& x) const {
  switch (kind_) {
    case Kind::uniform_discrete: {
      if (x.size() != 1) throw std::invalid_argument("discrete point must be a 1-vector");
      const double v = x[0];
      if (v != std::floor(v) || v < 0 || v >= cardinality_) return -INFINITY;
      return -std::log(static_cast<double>(cardinality_));
    }
    case Kind::uniform_box: {
      if (x.size() != a_.size()) throw std::invalid_argument("box point dimension mismatch");
      if ((x.array() < a_.array()).any() || (x.array() > b_.array()).any()) return -INFINITY;
      return -std::log((b_ - a_).prod());
    }
    case Kind::gaussian: {
      if (x.size() != a_.size()) throw std::invalid_argument("gaussian point dimension mismatch");
      const double D = static_cast<double>(a_.size());
      const double e = ((x - a_).array() / b_.array()).square().sum();
      return -0.5 * e - 0.5 * D * std::log(2.0 * std::numbers::pi) - b_.array().log().sum();
    }
  }
  return -INFINITY;
}

Vec BaseMeasure::sample(Rng& rng) const {
  switch (kind_) {
    case Kind::uniform_discrete: {
      const int i = std::min(cardinality_ - 1, static_cast<int>(uniform01(rng) * cardinality_));
      return Vec::Constant(1, i);
    }
    case Kind::uniform_box: {
      Vec x(a_.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = a_[i] + (b_[i] - a_[i]) * uniform01(rng);
      return x;
    }
    case Kind::gaussian: {
      Vec x(a_.size());
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = a_[i] + b_[i] * standard_normal(rng);
      return x;
    }
  }
  return {};
}

std::string BaseMeasure::describe() const {
  std::ostringstream os;
  switch (kind_) {
    case Kind::uniform_discrete:
      os << "uniform_discrete " << cardinality_;
      return os.str();
    case Kind::uniform_box: os << "uniform_box " << a_.size(); break;
    case Kind::gaussian: os << "gaussian " << a_.size(); break;
  }
  for (Eigen::Index i = 0; i < a_.size(); ++i) os << ' ' << format_double(a_[i]);
  for (Eigen::Index i = 0; i < b_.size(); ++i) os << ' ' << format_double(b_[i]);
  return os.str();
}

BaseMeasure BaseMeasure::parse(const std::string& text) {
  std::istringstream is(text);
  std::string kind;
  int n = 0;
  if (!(is >> kind >> n)) throw ConfigError("bad base measure descriptor: " + text);
  if (kind == "uniform_discrete") return uniform_discrete(n);
  if (n < 1) throw ConfigError("bad base measure descriptor: " + text);
  Vec a(n), b(n);
  std::string tok;
  for (int i = 0; i < 2 * n; ++i) {
    if (!(is >> tok)) throw ConfigError("bad base measure descriptor: " + text);
    (i < n ? a[i] : b[i - n]) = parse_double(tok);
  }
  if (kind == "uniform_box") return uniform_box(a, b);
  if (kind == "gaussian") return gaussian(a, b);
  throw ConfigError("unknown base measure kind '" + kind + "'");
}

// ---------------------------------------------------------------- encoding

std::string positivity_name(Positivity p) {
  return p == Positivity::softplus_on_inner ? "softplus_on_inner" : "elementwise_nonneg";
}

Positivity parse_positivity(const std::string& s) {
  if (s == "softplus_on_inner") return Positivity::softplus_on_inner;
  if (s == "elementwise_nonneg") return Positivity::elementwise_nonneg;
  throw ConfigError("unknown positivity mode '" + s + "'");
}

int encoded_dim(const Space& space) {
  return space.is_discrete() ? space.cardinality() : static_cast<int>(space.low().size());
}

void encode_into(const Space& space, const Vec& point, double* out) {
  if (space.is_discrete()) {
    const int n = space.cardinality();
    std::fill(out, out + n, 0.0);
    out[space.index(point)] = 1.0;
    return;
  }
  if (point.size() != space.low().size()) throw std::invalid_argument("point dimension mismatch");
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    out[i] = 2.0 * (point[i] - space.low()[i]) / (space.high()[i] - space.low()[i]) - 1.0;
  }
}

// ---------------------------------------------------------------- LowRankModel

namespace {

int sa_dim(const Space& s, const Space& a) {
  if (s.is_discrete() && a.is_discrete()) return s.cardinality() * a.cardinality();
  return encoded_dim(s) + encoded_dim(a);
}

std::vector<int> layer_dims(int in, const std::vector<int>& hidden, int out) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

}  // namespace

LowRankModel::LowRankModel(Space state, Space action, Space next, BaseMeasure base,
                           const LowRankConfig& cfg, Rng& rng)
    : state_(std::move(state)),
      action_(std::move(action)),
      next_(std::move(next)),
      base_(std::move(base)),
      bounded_(cfg.bounded_phi),
      positivity_(cfg.positivity),
      temperature_(cfg.temperature) {
  if (cfg.d < 1) throw ConfigError("feature dimension d must be >= 1");
  if (!(cfg.temperature > 0)) throw ConfigError("temperature must be > 0");
  phi_net_ = Mlp(layer_dims(sa_dim(state_, action_), cfg.phi_hidden, cfg.d), cfg.hidden_activation,
                 Activation::identity);
  mu_net_ = Mlp(layer_dims(encoded_dim(next_), cfg.mu_hidden, cfg.d), cfg.hidden_activation, cfg.mu_output);
  phi_net_.init_glorot(rng);
  mu_net_.init_glorot(rng);
}

LowRankModel::LowRankModel(Space state, Space action, Space next, BaseMeasure base, Mlp phi_net,
                           Mlp mu_net, bool bounded_phi, Positivity positivity, double temperature)
    : state_(std::move(state)),
      action_(std::move(action)),
      next_(std::move(next)),
      base_(std::move(base)),
      phi_net_(std::move(phi_net)),
      mu_net_(std::move(mu_net)),
      bounded_(bounded_phi),
      positivity_(positivity),
      temperature_(temperature) {
  if (phi_net_.input_dim() != sa_dim(state_, action_)) throw std::invalid_argument("phi net input dim mismatch");
  if (mu_net_.input_dim() != encoded_dim(next_)) throw std::invalid_argument("mu net input dim mismatch");
  if (phi_net_.output_dim() != mu_net_.output_dim()) throw std::invalid_argument("phi/mu output dims differ");
  if (!(temperature_ > 0)) throw std::invalid_argument("temperature must be > 0");
}

LowRankModel LowRankModel::tabular_factorization(const TabularMdp& mdp) {
  mdp.validate();
  const int S = mdp.num_states, A = mdp.num_actions, d = S * A;
  Mlp phi({d, d}, Activation::identity, Activation::identity);
  Mlp mu({S, d}, Activation::identity, Activation::identity);
  Vec pp = Vec::Zero(phi.num_params());
  phi.weight(pp, 0).setIdentity();
  phi.set_params(pp);
  Vec mp = Vec::Zero(mu.num_params());
  mu.weight(mp, 0) = static_cast<double>(S) * mdp.transition;
  mu.set_params(mp);
  LowRankModel m(Space::discrete(S), Space::discrete(A), Space::discrete(S), BaseMeasure::uniform_discrete(S),
                 std::move(phi), std::move(mu), false, Positivity::elementwise_nonneg, 1.0);
  Vec theta(d);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) theta[mdp.row(s, a)] = mdp.reward(s, a);
  m.reward_head = theta;
  return m;
}

Vec LowRankModel::params() const {
  Vec p(num_params());
  p << phi_net_.params(), mu_net_.params();
  return p;
}

void LowRankModel::set_params(const Vec& p) {
  if (p.size() != num_params()) throw std::invalid_argument("model parameter length mismatch");
  phi_net_.set_params(p.head(phi_net_.num_params()));
  mu_net_.set_params(p.tail(mu_net_.num_params()));
}

Vec LowRankModel::encode_sa(const Vec& s, const Vec& a) const {
  Vec out(sa_input_dim());
  if (joint_discrete()) {
    out.setZero();
    out[state_.index(s) * action_.cardinality() + action_.index(a)] = 1.0;
    return out;
  }
  encode_into(state_, s, out.data());
  encode_into(action_, a, out.data() + encoded_dim(state_));
  return out;
}

Vec LowRankModel::encode_next(const Vec& s_next) const {
  Vec out(next_input_dim());
  encode_into(next_, s_next, out.data());
  return out;
}

Mat LowRankModel::phi_batch(const Mat& encoded_sa) const {
  Mat f = phi_net_.forward_batch(encoded_sa);
  if (bounded_) {
    for (Eigen::Index i = 0; i < f.cols(); ++i) {
      const double n = f.col(i).norm();
      if (n > 1.0) f.col(i) /= n;
    }
  }
  return f;
}

Mat LowRankModel::mu_batch(const Mat& encoded_next) const { return mu_net_.forward_batch(encoded_next); }

Vec LowRankModel::phi(const Vec& s, const Vec& a) const { return phi_batch(Mat(encode_sa(s, a))).col(0); }

Vec LowRankModel::mu(const Vec& s_next) const { return mu_batch(Mat(encode_next(s_next))).col(0); }

double LowRankModel::link_arg(double inner) const {
  return positivity_ == Positivity::softplus_on_inner ? inner / temperature_ : inner;
}

double LowRankModel::log_link(double z) const {
  if (positivity_ == Positivity::softplus_on_inner) return z < -30.0 ? z : std::log(softplus(z));
  if (z < -1e-12) throw DivergenceError("negative inner product under elementwise_nonneg positivity");
  return z > 0.0 ? std::log(z) : -INFINITY;
}

double LowRankModel::dlog_link(double z) const {
  if (positivity_ == Positivity::softplus_on_inner) return z < -30.0 ? 1.0 : sigmoid(z) / softplus(z);
  return 1.0 / z;
}

double LowRankModel::link(double z) const {
  if (positivity_ == Positivity::softplus_on_inner) return softplus(z);
  return std::max(z, 0.0);
}

double LowRankModel::log_score(const Vec& s, const Vec& a, const Vec& s_next) const {
  const double z = link_arg(phi(s, a).dot(mu(s_next)));
  if (!std::isfinite(z)) throw DivergenceError("non-finite network output");
  return log_link(z) + base_.log_density(s_next);
}

double LowRankModel::unnormalized_score(const Vec& s, const Vec& a, const Vec& s_next) const {
  const double z = link_arg(phi(s, a).dot(mu(s_next)));
  if (!std::isfinite(z)) throw DivergenceError("non-finite network output");
  return link(z) * base_.density(s_next);
}

ConditionalDensity LowRankModel::conditional_density_exact(const Vec& s, const Vec& a,
                                                           const Vec& s_next) const {
  if (!next_.is_discrete()) throw std::invalid_argument("exact normalizer requires a discrete state space");
  const int n = next_.cardinality();
  Mat enc = Mat::Identity(n, n);
  const Mat mu_all = mu_batch(enc);
  const Vec f = phi(s, a);
  double z_total = 0.0;
  for (int j = 0; j < n; ++j) {
    z_total += link(link_arg(f.dot(mu_all.col(j)))) * base_.density(Vec::Constant(1, j));
  }
  ConditionalDensity out;
  out.log_z = std::log(z_total);
  out.log_density = log_score(s, a, s_next) - out.log_z;
  out.density = std::exp(out.log_density);
  return out;
}

ConditionalDensity LowRankModel::conditional_density_mc(const Vec& s, const Vec& a, const Vec& s_next,
                                                        int K, Rng& rng) const {
  if (K < 1) throw std::invalid_argument("monte_carlo normalizer needs K >= 1");
  Mat enc(next_input_dim(), K);
  for (int j = 0; j < K; ++j) enc.col(j) = encode_next(base_.sample(rng));
  const Mat mu_all = mu_batch(enc);
  const Vec f = phi(s, a);
  double sum = 0.0;
  for (int j = 0; j < K; ++j) sum += link(link_arg(f.dot(mu_all.col(j))));
  ConditionalDensity out;
  out.log_z = std::log(sum / K);
  out.log_density = log_score(s, a, s_next) - out.log_z;
  out.density = std::exp(out.log_density);
  return out;
}

SharedNormalizer::SharedNormalizer(const LowRankModel& model, int K, Rng& rng) : model_(model) {
  if (K < 1) throw std::invalid_argument("monte_carlo normalizer needs K >= 1");
  Mat enc(model.next_input_dim(), K);
  for (int j = 0; j < K; ++j) enc.col(j) = model.encode_next(model.base_measure().sample(rng));
  mu_ = model.mu_batch(enc);
}

double SharedNormalizer::log_z(const Vec& s, const Vec& a) const {
  const Vec z = (mu_.transpose() * model_.phi(s, a)).unaryExpr([this](double v) { return model_.link_arg(v); });
  double sum = 0.0;
  for (Eigen::Index j = 0; j < z.size(); ++j) sum += model_.link(z[j]);
  return std::log(sum / static_cast<double>(z.size()));
}

double SharedNormalizer::log_density(const Vec& s, const Vec& a, const Vec& s_next) const {
  return model_.log_score(s, a, s_next) - log_z(s, a);
}

Vec SharedNormalizer::log_density_many(const Vec& s, const Vec& a, const std::vector<Vec>& next) const {
  const double lz = log_z(s, a);
  const Vec f = model_.phi(s, a);
  Mat enc(model_.next_input_dim(), static_cast<Eigen::Index>(next.size()));
  for (size_t j = 0; j < next.size(); ++j) enc.col(static_cast<Eigen::Index>(j)) = model_.encode_next(next[j]);
  const Mat mu = model_.mu_batch(enc);
  Vec out(static_cast<Eigen::Index>(next.size()));
  for (size_t j = 0; j < next.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    out[i] = model_.log_link(model_.link_arg(f.dot(mu.col(i)))) + model_.base_measure().log_density(next[j]) - lz;
  }
  return out;
}

Mat LowRankModel::density_table() const {
  if (!state_.is_discrete() || !action_.is_discrete() || !next_.is_discrete()) {
    throw std::invalid_argument("density_table requires discrete spaces");
  }
  const int S = state_.cardinality(), A = action_.cardinality(), N = next_.cardinality();
  Mat enc_sa(sa_input_dim(), S * A);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < A; ++a) enc_sa.col(s * A + a) = encode_sa(Vec::Constant(1, s), Vec::Constant(1, a));
  const Mat ph = phi_batch(enc_sa);
  const Mat mu_all = mu_batch(Mat::Identity(N, N));
  Vec log_base(N);
  for (int j = 0; j < N; ++j) log_base[j] = base_.log_density(Vec::Constant(1, j));
  const bool sp = positivity_ == Positivity::softplus_on_inner;
  return kernels::density_rows(ph, mu_all, sp ? 1.0 / temperature_ : 1.0, sp, log_base);
}

// ---------------------------------------------------------------- ScoreGraph

ScoreGraph::ScoreGraph(const LowRankModel& model, Mat sa_inputs, Mat next_inputs) : model_(model) {
  phi_raw_ = model.phi_net().forward_batch(sa_inputs, phi_tape_);
  phi_ = phi_raw_;
  if (model.bounded_phi()) {
    for (Eigen::Index i = 0; i < phi_.cols(); ++i) {
      const double n = phi_raw_.col(i).norm();
      if (n > 1.0) phi_.col(i) /= n;
    }
  }
  mu_ = model.mu_net().forward_batch(next_inputs, mu_tape_);
  if (!phi_.allFinite() || !mu_.allFinite()) throw DivergenceError("non-finite network output");
  scale_ = model.positivity() == Positivity::softplus_on_inner ? 1.0 / model.temperature() : 1.0;
}

double ScoreGraph::z(int i, int j) const { return scale_ * phi_.col(i).dot(mu_.col(j)); }

void ScoreGraph::add_pair_grad(int i, int j, double dz, Mat& d_phi, Mat& d_mu) const {
  d_phi.col(i) += (dz * scale_) * mu_.col(j);
  d_mu.col(j) += (dz * scale_) * phi_.col(i);
}

Vec ScoreGraph::backward(const Mat& d_phi, const Mat& d_mu) const {
  Mat d_raw = d_phi;
  if (model_.bounded_phi()) {
    for (Eigen::Index i = 0; i < phi_.cols(); ++i) {
      const double n = phi_raw_.col(i).norm();
      if (n > 1.0) {
        const double proj = phi_.col(i).dot(d_phi.col(i));
        d_raw.col(i) = (d_phi.col(i) - proj * phi_.col(i)) / n;
      }
    }
  }
  Vec g_phi = Vec::Zero(model_.phi_net().num_params());
  Vec g_mu = Vec::Zero(model_.mu_net().num_params());
  model_.phi_net().backward_batch(phi_tape_, d_raw, g_phi);
  model_.mu_net().backward_batch(mu_tape_, d_mu, g_mu);
  Vec g(g_phi.size() + g_mu.size());
  g << g_phi, g_mu;
  return g;
}

// ---------------------------------------------------------------- InputTable

int InputTable::add(const Vec& s, const Vec& a) {
  if (!sa_side_) throw std::logic_error("InputTable: next-side table given (s, a)");
  if (model_.joint_discrete()) {
    const int key = model_.state_space().index(s) * model_.action_space().cardinality() +
                    model_.action_space().index(a);
    if (index_.empty()) index_.assign(static_cast<size_t>(model_.sa_input_dim()), -1);
    int& slot = index_[static_cast<size_t>(key)];
    if (slot < 0) {
      slot = size();
      columns_.push_back(model_.encode_sa(s, a));
    }
    return slot;
  }
  columns_.push_back(model_.encode_sa(s, a));
  return size() - 1;
}

int InputTable::add(const Vec& s_next) {
  if (sa_side_) throw std::logic_error("InputTable: sa-side table given a next state");
  if (model_.next_space().is_discrete()) {
    const int key = model_.next_space().index(s_next);
    if (index_.empty()) index_.assign(static_cast<size_t>(model_.next_space().cardinality()), -1);
    int& slot = index_[static_cast<size_t>(key)];
    if (slot < 0) {
      slot = size();
      columns_.push_back(model_.encode_next(s_next));
    }
    return slot;
  }
  columns_.push_back(model_.encode_next(s_next));
  return size() - 1;
}

Mat InputTable::matrix() const {
  const int rows = sa_side_ ? model_.sa_input_dim() : model_.next_input_dim();
  Mat m(rows, size());
  for (int i = 0; i < size(); ++i) m.col(i) = columns_[static_cast<size_t>(i)];
  return m;
}

// ---------------------------------------------------------------- regularizers

LossGrad normalization_regularizer(const LowRankModel& model,
                                   const std::vector<std::pair<Vec, Vec>>& sa_batch, int K,
                                   bool stratified, Rng& rng) {
  if (K < 1) throw std::invalid_argument("normalization_regularizer needs K >= 1");
  if (sa_batch.empty()) throw std::invalid_argument("normalization_regularizer needs a nonempty batch");
  if (stratified && !model.next_space().is_discrete()) {
    throw std::invalid_argument("stratified normalization needs a discrete state space");
  }
  const int n = static_cast<int>(sa_batch.size());
  InputTable us(model, true), ys(model, false);
  std::vector<int> ucol(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ucol[static_cast<size_t>(i)] = us.add(sa_batch[static_cast<size_t>(i)].first, sa_batch[static_cast<size_t>(i)].second);

  // Per row: columns of the draws and their weights in the average.
  std::vector<std::vector<std::pair<int, double>>> rows(static_cast<size_t>(n));
  if (stratified) {
    const int N = model.next_space().cardinality();
    std::vector<std::pair<int, double>> all;
    for (int j = 0; j < N; ++j) {
      const Vec y = Vec::Constant(1, j);
      all.emplace_back(ys.add(y), model.base_measure().density(y));
    }
    for (auto& r : rows) r = all;
  } else {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < K; ++j) {
        rows[static_cast<size_t>(i)].emplace_back(ys.add(model.base_measure().sample(rng)), 1.0 / K);
      }
    }
  }
  ScoreGraph g(model, us.matrix(), ys.matrix());
  Mat d_phi = Mat::Zero(g.phi().rows(), g.num_sa());
  Mat d_mu = Mat::Zero(g.mu().rows(), g.num_next());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int u = ucol[static_cast<size_t>(i)];
    double zhat = 0.0;
    for (const auto& [col, w] : rows[static_cast<size_t>(i)]) zhat += w * model.link(g.z(u, col));
    const double lz = std::log(zhat);
    total += lz * lz;
    // d/dz of (log Zhat)^2 = 2 log Zhat * w g'(z) / Zhat
    for (const auto& [col, w] : rows[static_cast<size_t>(i)]) {
      const double z = g.z(u, col);
      const double gp = model.positivity() == Positivity::softplus_on_inner ? sigmoid(z) : 1.0;
      g.add_pair_grad(u, col, 2.0 * lz * w * gp / zhat / n, d_phi, d_mu);
    }
  }
  LossGrad out;
  out.value = total / n;
  if (!std::isfinite(out.value)) throw DivergenceError("normalization regularizer is not finite");
  out.grad = g.backward(d_phi, d_mu);
  return out;
}

LossGrad mu_norm_regularizer(const LowRankModel& model, int K, bool stratified, Rng& rng) {
  if (K < 1) throw std::invalid_argument("mu_norm_regularizer needs K >= 1");
  std::vector<double> w;
  Mat enc;
  if (stratified) {
    if (!model.next_space().is_discrete()) throw std::invalid_argument("stratified mu norm needs a discrete state space");
    const int N = model.next_space().cardinality();
    enc = Mat::Identity(N, N);
    for (int j = 0; j < N; ++j) w.push_back(model.base_measure().density(Vec::Constant(1, j)));
  } else {
    enc.resize(model.next_input_dim(), K);
    for (int j = 0; j < K; ++j) {
      enc.col(j) = model.encode_next(model.base_measure().sample(rng));
      w.push_back(1.0 / K);
    }
  }
  Mlp::Tape tape;
  const Mat mu = model.mu_net().forward_batch(enc, tape);
  Mat up(mu.rows(), mu.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < mu.cols(); ++j) {
    total += w[static_cast<size_t>(j)] * mu.col(j).squaredNorm();
    up.col(j) = 2.0 * w[static_cast<size_t>(j)] * mu.col(j);
  }
  LossGrad out;
  out.value = total;
  out.grad = Vec::Zero(model.num_params());
  Vec g_mu = Vec::Zero(model.mu_net().num_params());
  model.mu_net().backward_batch(tape, up, g_mu);
  out.grad.tail(g_mu.size()) = g_mu;
  return out;
}

// ---------------------------------------------------------------- checkpoints

void save_model(const std::string& path, const LowRankModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model checkpoint " + path);
  out << "ctrl-model v1\n";
  out << "d: " << model.d() << '\n';
  out << "state_space: " << model.state_space().describe() << '\n';
  out << "action_space: " << model.action_space().describe() << '\n';
  out << "next_space: " << model.next_space().describe() << '\n';
  out << "positivity: " << positivity_name(model.positivity()) << '\n';
  out << "temperature: " << format_double(model.temperature()) << '\n';
  out << "bounded_phi: " << (model.bounded_phi() ? "true" : "false") << '\n';
  out << "base_measure: " << model.base_measure().describe() << '\n';
  out << "end\n";
  write_mlp(out, model.phi_net());
  write_mlp(out, model.mu_net());
  if (!out) throw IoError("failed writing model checkpoint " + path);
}

LowRankModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model checkpoint " + path);
  std::string line;
  std::getline(in, line);
  if (line != "ctrl-model v1") throw IoError(path + ": not a model checkpoint");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line) && line != "end") {
    const auto pos = line.find(": ");
    if (pos == std::string::npos) throw IoError(path + ": malformed header line '" + line + "'");
    kv[line.substr(0, pos)] = line.substr(pos + 2);
  }
  if (line != "end") throw IoError(path + ": truncated header");
  auto field = [&](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw IoError(path + ": header missing '" + k + "'");
    return it->second;
  };
  try {
    Mlp phi = read_mlp(in);
    Mlp mu = read_mlp(in);
    LowRankModel m(Space::parse(field("state_space")), Space::parse(field("action_space")),
                   Space::parse(field("next_space")), BaseMeasure::parse(field("base_measure")),
                   std::move(phi), std::move(mu), field("bounded_phi") == "true",
                   parse_positivity(field("positivity")), parse_double(field("temperature")));
    if (m.d() != std::stoi(field("d"))) throw IoError(path + ": feature dimension mismatch");
    return m;
  } catch (const ConfigError& e) {
    throw IoError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace ctrl
