#include "ctrl/nce.hpp"

#include "ctrl/format.hpp"
#include "ctrl/kernels.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <numbers>

namespace ctrl {

double h_value(double score_ratio, double gamma, int K) {
  if (K < 1) throw std::invalid_argument("h_value needs K >= 1");
  if (!(score_ratio >= 0)) throw std::invalid_argument("score ratio must be nonnegative");
  const double r = score_ratio * std::exp(-gamma);
  return r / (r + K);
}

void NceBatch::validate() const {
  const auto n = static_cast<Eigen::Index>(next.size());
  if (K < 1) throw std::invalid_argument("NceBatch needs K >= 1");
  if (states.size() != next.size() || actions.size() != next.size() || negatives.size() != next.size() ||
      log_q_pos.size() != n || log_q_neg.rows() != n || log_q_neg.cols() != K) {
    throw std::invalid_argument("NceBatch shape mismatch");
  }
  for (const auto& row : negatives) {
    if (static_cast<int>(row.size()) != K) throw std::invalid_argument("NceBatch negatives row has wrong length");
  }
  const auto ok = [](double v) { return std::isfinite(v); };
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!ok(log_q_pos[i])) throw std::invalid_argument("noise support violation");
    for (int j = 0; j < K; ++j)
      if (!ok(log_q_neg(i, j))) throw std::invalid_argument("noise support violation");
  }
}

LogitLoss ranking_loss_logits(const Vec& a, const Mat& B) {
  Vec rows;
  LogitLoss out;
  kernels::ranking_rows(a, B, rows, out.da, out.dB);
  const double n = static_cast<double>(a.size());
  out.loss = rows.sum() / n;
  out.da /= n;
  out.dB /= n;
  return out;
}

LogitLoss binary_loss_logits(const Vec& a, const Mat& B, double gamma) {
  Vec rows, dg;
  LogitLoss out;
  kernels::binary_rows(a, B, gamma, std::log(static_cast<double>(B.cols())), rows, out.da, out.dB, dg);
  const double n = static_cast<double>(a.size());
  out.loss = rows.sum() / n;
  out.da /= n;
  out.dB /= n;
  out.dgamma = dg.sum() / n;
  return out;
}

namespace {

// Scores of a batch laid out for the logit losses, plus what the reverse pass
// needs to map logit gradients back onto the networks.
struct BatchScores {
  std::vector<int> ucol, xcol;
  std::vector<std::vector<int>> ycol;
  Vec a;
  Mat B;
};

NceLoss model_loss(const NceBatch& batch, const LowRankModel& model, bool binary, double gamma) {
  batch.validate();
  const int n = batch.size(), K = batch.K;
  InputTable us(model, true), ys(model, false);
  BatchScores sc;
  sc.ucol.resize(static_cast<size_t>(n));
  sc.xcol.resize(static_cast<size_t>(n));
  sc.ycol.assign(static_cast<size_t>(n), std::vector<int>(static_cast<size_t>(K)));
  for (int i = 0; i < n; ++i) {
    const auto I = static_cast<size_t>(i);
    sc.ucol[I] = us.add(batch.states[I], batch.actions[I]);
    sc.xcol[I] = ys.add(batch.next[I]);
    for (int j = 0; j < K; ++j) sc.ycol[I][static_cast<size_t>(j)] = ys.add(batch.negatives[I][static_cast<size_t>(j)]);
  }
  ScoreGraph g(model, us.matrix(), ys.matrix());
  const auto& base = model.base_measure();
  sc.a.resize(n);
  sc.B.resize(n, K);
  Mat zB(n, K);
  Vec za(n);
  for (int i = 0; i < n; ++i) {
    const auto I = static_cast<size_t>(i);
    za[i] = g.z(sc.ucol[I], sc.xcol[I]);
    sc.a[i] = model.log_link(za[i]) + base.log_density(batch.next[I]) - batch.log_q_pos[i];
    for (int j = 0; j < K; ++j) {
      zB(i, j) = g.z(sc.ucol[I], sc.ycol[I][static_cast<size_t>(j)]);
      sc.B(i, j) = model.log_link(zB(i, j)) + base.log_density(batch.negatives[I][static_cast<size_t>(j)]) -
                   batch.log_q_neg(i, j);
    }
  }
  const LogitLoss ll = binary ? binary_loss_logits(sc.a, sc.B, gamma) : ranking_loss_logits(sc.a, sc.B);
  if (!std::isfinite(ll.loss)) throw DivergenceError("NCE loss is not finite");
  Mat d_phi = Mat::Zero(g.phi().rows(), g.num_sa());
  Mat d_mu = Mat::Zero(g.mu().rows(), g.num_next());
  for (int i = 0; i < n; ++i) {
    const auto I = static_cast<size_t>(i);
    g.add_pair_grad(sc.ucol[I], sc.xcol[I], ll.da[i] * model.dlog_link(za[i]), d_phi, d_mu);
    for (int j = 0; j < K; ++j) {
      if (ll.dB(i, j) == 0.0) continue;
      g.add_pair_grad(sc.ucol[I], sc.ycol[I][static_cast<size_t>(j)], ll.dB(i, j) * model.dlog_link(zB(i, j)),
                      d_phi, d_mu);
    }
  }
  NceLoss out;
  out.loss = ll.loss;
  out.grad = g.backward(d_phi, d_mu);
  out.dgamma = ll.dgamma;
  return out;
}

}  // namespace

NceLoss ranking_loss(const NceBatch& batch, const LowRankModel& model) {
  return model_loss(batch, model, false, 0.0);
}

NceLoss binary_loss(const NceBatch& batch, const LowRankModel& model, double gamma) {
  return model_loss(batch, model, true, gamma);
}

// ---------------------------------------------------------------- grouped losses

namespace {

void check_grouped(const Mat& log_f, const Vec& log_q, const std::vector<ConditionalSample>& data,
                   const Mat& neg_counts) {
  if (log_q.size() != log_f.cols() || neg_counts.cols() != log_f.cols() ||
      neg_counts.rows() != static_cast<Eigen::Index>(data.size())) {
    throw std::invalid_argument("grouped NCE shape mismatch");
  }
  if (!log_q.allFinite()) throw std::invalid_argument("noise support violation");
  for (const auto& d : data) {
    if (d.u < 0 || d.u >= log_f.rows() || d.x < 0 || d.x >= log_f.cols()) {
      throw std::invalid_argument("grouped NCE sample out of range");
    }
  }
}

}  // namespace

GroupedLoss ranking_loss_grouped(const Mat& log_f, const Vec& log_q,
                                 const std::vector<ConditionalSample>& data, const Mat& neg_counts) {
  check_grouped(log_f, log_q, data, neg_counts);
  const auto X = log_f.cols();
  const double n = static_cast<double>(data.size());
  GroupedLoss out;
  out.d_logf = Mat::Zero(log_f.rows(), X);
  Vec b(X);
  for (size_t i = 0; i < data.size(); ++i) {
    const int u = data[i].u, x = data[i].x;
    const double a = log_f(u, x) - log_q[x];
    double m = a;
    for (Eigen::Index k = 0; k < X; ++k) {
      b[k] = log_f(u, k) - log_q[k];
      if (neg_counts(static_cast<Eigen::Index>(i), k) > 0) m = std::max(m, b[k]);
    }
    double s = std::exp(a - m);
    for (Eigen::Index k = 0; k < X; ++k) {
      const double c = neg_counts(static_cast<Eigen::Index>(i), k);
      if (c > 0) s += c * std::exp(b[k] - m);
    }
    const double lse = m + std::log(s);
    out.loss += lse - a;
    out.d_logf(u, x) += (std::exp(a - lse) - 1.0) / n;
    for (Eigen::Index k = 0; k < X; ++k) {
      const double c = neg_counts(static_cast<Eigen::Index>(i), k);
      if (c > 0) out.d_logf(u, k) += c * std::exp(b[k] - lse) / n;
    }
  }
  out.loss /= n;
  return out;
}

GroupedLoss binary_loss_grouped(const Mat& log_f, const Vec& log_q,
                                const std::vector<ConditionalSample>& data, const Mat& neg_counts,
                                double gamma, int K) {
  check_grouped(log_f, log_q, data, neg_counts);
  if (K < 1) throw std::invalid_argument("binary grouped loss needs K >= 1");
  const auto X = log_f.cols();
  const double n = static_cast<double>(data.size());
  const double c = gamma + std::log(static_cast<double>(K));
  GroupedLoss out;
  out.d_logf = Mat::Zero(log_f.rows(), X);
  for (size_t i = 0; i < data.size(); ++i) {
    const int u = data[i].u, x = data[i].x;
    const double a = log_f(u, x) - log_q[x];
    out.loss += softplus(c - a);
    const double sp = sigmoid(c - a);
    out.d_logf(u, x) -= sp / n;
    out.dgamma += sp / n;
    for (Eigen::Index k = 0; k < X; ++k) {
      const double cnt = neg_counts(static_cast<Eigen::Index>(i), k);
      if (cnt == 0) continue;
      const double b = log_f(u, k) - log_q[k];
      out.loss += cnt * softplus(b - c);
      const double sn = cnt * sigmoid(b - c);
      out.d_logf(u, k) += sn / n;
      out.dgamma -= sn / n;
    }
  }
  out.loss /= n;
  return out;
}

// ---------------------------------------------------------------- TruncatedKde

namespace {
double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
}  // namespace

TruncatedKde::TruncatedKde(const std::vector<Vec>& points, const Space& box, int max_centers) {
  if (box.is_discrete()) throw std::invalid_argument("TruncatedKde needs a box space");
  if (points.empty()) throw std::invalid_argument("TruncatedKde needs at least one point");
  if (max_centers < 1) throw std::invalid_argument("TruncatedKde needs max_centers >= 1");
  low_ = box.low();
  high_ = box.high();
  const auto D = low_.size();
  const size_t n = points.size();
  const size_t m = std::min(n, static_cast<size_t>(max_centers));
  centers_.resize(D, static_cast<Eigen::Index>(m));
  for (size_t k = 0; k < m; ++k) {
    const size_t idx = m == n ? k : (k * n) / m;
    centers_.col(static_cast<Eigen::Index>(k)) = box.clip(points[idx]);
  }
  const Vec mean = centers_.rowwise().mean();
  const Vec var = (centers_.colwise() - mean).array().square().rowwise().mean();
  const double factor = std::pow(4.0 / ((static_cast<double>(D) + 2.0) * static_cast<double>(m)),
                                 1.0 / (static_cast<double>(D) + 4.0));
  h_.resize(D);
  for (Eigen::Index d = 0; d < D; ++d) {
    h_[d] = std::max(std::sqrt(var[d]), 1e-3 * (high_[d] - low_[d])) * factor;
  }
  log_mass_.resize(static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < centers_.cols(); ++i) {
    double lm = 0.0;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double mass = normal_cdf((high_[d] - centers_(d, i)) / h_[d]) - normal_cdf((low_[d] - centers_(d, i)) / h_[d]);
      lm += std::log(std::max(mass, 1e-300));
    }
    log_mass_[i] = lm;
  }
}

Vec TruncatedKde::sample(Rng& rng) const {
  const auto m = centers_.cols();
  const auto i = std::min<Eigen::Index>(m - 1, static_cast<Eigen::Index>(uniform01(rng) * static_cast<double>(m)));
  Vec x(centers_.rows());
  for (Eigen::Index d = 0; d < x.size(); ++d) {
    double v = centers_(d, i);
    for (int tries = 0; tries < 10000; ++tries) {
      v = centers_(d, i) + h_[d] * standard_normal(rng);
      if (v >= low_[d] && v <= high_[d]) break;
      v = centers_(d, i);
    }
    x[d] = v;
  }
  return x;
}

double TruncatedKde::log_density(const Vec& x) const {
  if ((x.array() < low_.array()).any() || (x.array() > high_.array()).any()) return -INFINITY;
  return kernels::kde_log_density(centers_, h_, log_mass_, Mat(x))[0];
}

Vec TruncatedKde::log_density_batch(const Mat& q) const {
  Vec out = kernels::kde_log_density(centers_, h_, log_mass_, q);
  for (Eigen::Index k = 0; k < q.cols(); ++k) {
    if ((q.col(k).array() < low_.array()).any() || (q.col(k).array() > high_.array()).any()) out[k] = -INFINITY;
  }
  return out;
}

// ---------------------------------------------------------------- NoiseDistribution

NoiseDistribution NoiseDistribution::from_base(BaseMeasure base) {
  NoiseDistribution n;
  n.kind_ = Kind::base_measure;
  n.base_ = std::move(base);
  return n;
}

NoiseDistribution NoiseDistribution::uniform(const Space& space) {
  NoiseDistribution n;
  n.kind_ = Kind::uniform;
  n.space_ = space;
  n.base_ = BaseMeasure::uniform_over(space);
  return n;
}

NoiseDistribution NoiseDistribution::replay_mixture(const Space& space, const std::vector<Vec>& buffer_states,
                                                    const std::vector<Vec>& random_pool, double mix) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw ConfigError("replay mixture weight must lie in [0,1]");
  if (buffer_states.empty()) {
    spdlog::warn("replay_mixture noise: empty replay buffer, falling back to uniform noise");
    return uniform(space);
  }
  NoiseDistribution n = uniform(space);
  n.kind_ = Kind::replay_mixture;
  n.mix_ = mix;
  if (space.is_discrete()) {
    const int N = space.cardinality();
    n.buffer_.uniform = false;
    n.buffer_.counts = Vec::Zero(N);
    for (const auto& s : buffer_states) n.buffer_.counts[space.index(s)] += 1.0;
    n.buffer_.counts /= n.buffer_.counts.sum();
    if (!random_pool.empty()) {
      n.random_.uniform = false;
      n.random_.counts = Vec::Ones(N);
      for (const auto& s : random_pool) n.random_.counts[space.index(s)] += 1.0;
      n.random_.counts /= n.random_.counts.sum();
    }
  } else {
    n.buffer_.uniform = false;
    n.buffer_.kde = TruncatedKde(buffer_states, space);
    if (!random_pool.empty()) {
      n.random_.uniform = false;
      n.random_.kde = TruncatedKde(random_pool, space);
    }
  }
  return n;
}

Vec NoiseDistribution::sample_component(const Component& c, Rng& rng) const {
  if (c.uniform) return base_.sample(rng);
  if (space_.is_discrete()) return Vec::Constant(1, sample_categorical(c.counts, rng));
  return c.kde.sample(rng);
}

std::vector<double> NoiseDistribution::component_log_density(const Component& c,
                                                             const std::vector<Vec>& xs) const {
  std::vector<double> out(xs.size());
  if (c.uniform) {
    for (size_t i = 0; i < xs.size(); ++i) out[i] = base_.log_density(xs[i]);
  } else if (space_.is_discrete()) {
    for (size_t i = 0; i < xs.size(); ++i) out[i] = std::log(c.counts[space_.index(xs[i])]);
  } else {
    Mat q(space_.low().size(), static_cast<Eigen::Index>(xs.size()));
    for (size_t i = 0; i < xs.size(); ++i) q.col(static_cast<Eigen::Index>(i)) = xs[i];
    const Vec v = c.kde.log_density_batch(q);
    for (size_t i = 0; i < xs.size(); ++i) out[i] = v[static_cast<Eigen::Index>(i)];
  }
  return out;
}

Vec NoiseDistribution::sample(Rng& rng) const {
  if (kind_ != Kind::replay_mixture) return base_.sample(rng);
  return uniform01(rng) < mix_ ? sample_component(buffer_, rng) : sample_component(random_, rng);
}

std::vector<double> NoiseDistribution::log_density_batch(const std::vector<Vec>& xs) const {
  if (kind_ != Kind::replay_mixture) {
    std::vector<double> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) out[i] = base_.log_density(xs[i]);
    return out;
  }
  const auto lb = component_log_density(buffer_, xs);
  const auto lr = component_log_density(random_, xs);
  const double wb = std::log(mix_), wr = std::log1p(-mix_);
  std::vector<double> out(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) out[i] = log_add_exp(wb + lb[i], wr + lr[i]);
  return out;
}

double NoiseDistribution::log_density(const Vec& x) const { return log_density_batch({x})[0]; }

NceBatch build_batch(const std::vector<Transition>& data, const NoiseDistribution& noise, int K, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("build_batch needs data");
  if (K < 1) throw std::invalid_argument("build_batch needs K >= 1");
  NceBatch b;
  b.K = K;
  const auto n = static_cast<Eigen::Index>(data.size());
  b.log_q_pos.resize(n);
  b.log_q_neg.resize(n, K);
  std::vector<Vec> all;
  all.reserve(data.size() * static_cast<size_t>(K + 1));
  for (const auto& t : data) {
    b.states.push_back(t.state);
    b.actions.push_back(t.action);
    b.next.push_back(t.next_state);
    std::vector<Vec> row;
    row.reserve(static_cast<size_t>(K));
    for (int j = 0; j < K; ++j) row.push_back(noise.sample(rng));
    b.negatives.push_back(std::move(row));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    all.push_back(b.next[static_cast<size_t>(i)]);
    for (const auto& y : b.negatives[static_cast<size_t>(i)]) all.push_back(y);
  }
  const auto lq = noise.log_density_batch(all);
  size_t k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    b.log_q_pos[i] = lq[k++];
    for (int j = 0; j < K; ++j) b.log_q_neg(i, j) = lq[k++];
  }
  return b;
}

// ---------------------------------------------------------------- trainer

void NceConfig::validate() const {
  if (K < 1) throw ConfigError("nce.K must be >= 1");
  if (batch_size < 1) throw ConfigError("nce.batch_size must be >= 1");
  if (marginal_samples < 1) throw ConfigError("nce.marginal_samples must be >= 1");
  if (marginal_weight < 0 || mu_norm_weight < 0) throw ConfigError("nce regularizer weights must be >= 0");
  if (!(learning_rate > 0)) throw ConfigError("nce.learning_rate must be > 0");
}

std::string objective_name(NceConfig::Objective o) {
  return o == NceConfig::Objective::binary ? "binary" : "ranking";
}

NceConfig::Objective parse_objective(const std::string& s) {
  if (s == "binary") return NceConfig::Objective::binary;
  if (s == "ranking") return NceConfig::Objective::ranking;
  throw ConfigError("unknown NCE objective '" + s + "' (expected binary|ranking)");
}

NceTrainResult train_representation(const std::vector<Transition>& data, LowRankModel& model,
                                    const NceConfig& config, const NoiseDistribution& noise,
                                    OptimizerState& optimizer, int steps, Rng& rng) {
  config.validate();
  if (steps < 0) throw std::invalid_argument("train_representation needs steps >= 0");
  NceTrainResult res;
  res.gamma_param = config.gamma_param;
  if (steps == 0) return res;
  if (data.empty()) throw std::invalid_argument("train_representation needs data");
  const bool binary = config.objective == NceConfig::Objective::binary;
  const int np = model.num_params();
  Vec theta(np + (binary ? 1 : 0));
  theta.head(np) = model.params();
  if (binary) theta[np] = res.gamma_param;

  std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
  std::vector<Transition> mb(static_cast<size_t>(config.batch_size));
  std::vector<std::pair<Vec, Vec>> sa(static_cast<size_t>(config.batch_size));
  for (int step = 0; step < steps; ++step) {
    for (size_t i = 0; i < mb.size(); ++i) {
      mb[i] = data[pick(rng)];
      sa[i] = {mb[i].state, mb[i].action};
    }
    try {
      const NceBatch batch = build_batch(mb, noise, config.K, rng);
      const NceLoss nl = binary ? binary_loss(batch, model, res.gamma_param) : ranking_loss(batch, model);
      Vec grad = Vec::Zero(theta.size());
      grad.head(np) = nl.grad;
      if (binary) grad[np] = nl.dgamma;
      NceTraceRow row{step, nl.loss, 0.0, 0.0};
      if (config.marginal_weight > 0) {
        const LossGrad mr = normalization_regularizer(model, sa, config.marginal_samples, config.stratified, rng);
        row.marginal_reg = mr.value;
        grad.head(np) += config.marginal_weight * mr.grad;
      }
      if (config.mu_norm_weight > 0) {
        const LossGrad mu = mu_norm_regularizer(model, config.marginal_samples, config.stratified, rng);
        row.mu_reg = mu.value;
        grad.head(np) += config.mu_norm_weight * mu.grad;
      }
      const double total = row.loss + config.marginal_weight * row.marginal_reg + config.mu_norm_weight * row.mu_reg;
      if (!std::isfinite(total)) throw DivergenceError("non-finite loss");
      optimizer_step(optimizer, theta, grad);
      model.set_params(theta.head(np));
      if (binary) res.gamma_param = theta[np];
      res.trace.push_back(row);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string("NCE training diverged at step ") + std::to_string(step) + ": " + e.what());
    }
  }
  return res;
}

void write_nce_trace(const std::string& path, const std::vector<NceTraceRow>& trace) {
  CsvWriter w(path, {"step", "loss", "marginal_reg", "mu_reg"});
  for (const auto& r : trace) {
    w.row({std::to_string(r.step), format_double(r.loss), format_double(r.marginal_reg), format_double(r.mu_reg)});
  }
}

}  // namespace ctrl
