#include "ctrl/mle_oracle.hpp"

#include "ctrl/format.hpp"

#include <cmath>
#include <map>

namespace ctrl {

using Kind = TabularConditionalFamily::Kind;

TabularConditionalFamily TabularConditionalFamily::free_table(int x_card, int u_card) {
  if (x_card < 1 || u_card < 1) throw std::invalid_argument("family cardinalities must be >= 1");
  TabularConditionalFamily f;
  f.kind = Kind::free_table;
  f.x_cardinality = x_card;
  f.u_cardinality = u_card;
  return f;
}

TabularConditionalFamily TabularConditionalFamily::softmax_logits(int x_card, int u_card) {
  auto f = free_table(x_card, u_card);
  f.kind = Kind::softmax_logits;
  return f;
}

TabularConditionalFamily TabularConditionalFamily::constant_partition(int x_card, int u_card, double c) {
  if (!(c > 0)) throw std::invalid_argument("partition constant must be > 0");
  auto f = free_table(x_card, u_card);
  f.kind = Kind::constant_partition;
  f.partition_constant = c;
  return f;
}

TabularConditionalFamily TabularConditionalFamily::tied_base_measure(Mat base, Vec scale) {
  if (base.rows() != scale.size() || base.size() == 0) throw std::invalid_argument("tied family shape mismatch");
  if (!(base.array() > 0).all() || !(scale.array() > 0).all()) {
    throw std::invalid_argument("tied family needs a positive base and scale");
  }
  TabularConditionalFamily f;
  f.kind = Kind::tied_base_measure;
  f.x_cardinality = static_cast<int>(base.cols());
  f.u_cardinality = static_cast<int>(base.rows());
  f.base = std::move(base);
  f.scale = std::move(scale);
  return f;
}

int TabularConditionalFamily::num_params() const {
  return kind == Kind::tied_base_measure ? x_cardinality : x_cardinality * u_cardinality;
}

Mat TabularConditionalFamily::log_scores(const Vec& theta) const {
  if (theta.size() != num_params()) throw std::invalid_argument("family parameter length mismatch");
  const int U = u_cardinality, X = x_cardinality;
  Mat out(U, X);
  if (kind == Kind::tied_base_measure) {
    for (int u = 0; u < U; ++u)
      for (int x = 0; x < X; ++x) out(u, x) = std::log(scale[u]) + std::log(base(u, x)) + theta[x];
    return out;
  }
  for (int u = 0; u < U; ++u)
    for (int x = 0; x < X; ++x) out(u, x) = theta[u * X + x];
  if (kind == Kind::free_table) return out;
  const double lc = kind == Kind::constant_partition ? std::log(partition_constant) : 0.0;
  for (int u = 0; u < U; ++u) {
    const double l = log_sum_exp(out.row(u).transpose());
    out.row(u).array() += lc - l;
  }
  return out;
}

Vec TabularConditionalFamily::pullback(const Vec& theta, const Mat& d) const {
  const int U = u_cardinality, X = x_cardinality;
  Vec g = Vec::Zero(num_params());
  if (kind == Kind::tied_base_measure) {
    for (int x = 0; x < X; ++x) g[x] = d.col(x).sum();
    return g;
  }
  for (int u = 0; u < U; ++u) {
    if (kind == Kind::free_table) {
      for (int x = 0; x < X; ++x) g[u * X + x] = d(u, x);
      continue;
    }
    const Vec p = softmax(theta.segment(u * X, X));
    const double s = d.row(u).sum();
    for (int x = 0; x < X; ++x) g[u * X + x] = d(u, x) - p[x] * s;
  }
  return g;
}

Mat TabularConditionalFamily::conditional(const Vec& theta) const {
  const Mat lf = log_scores(theta);
  Mat out(lf.rows(), lf.cols());
  for (Eigen::Index u = 0; u < lf.rows(); ++u) out.row(u) = softmax(lf.row(u).transpose()).transpose();
  return out;
}

std::string family_name(Kind k) {
  switch (k) {
    case Kind::free_table: return "free_table";
    case Kind::softmax_logits: return "softmax_logits";
    case Kind::constant_partition: return "constant_partition";
    case Kind::tied_base_measure: return "tied_base_measure";
  }
  return "?";
}

Kind parse_family(const std::string& s) {
  for (auto k : {Kind::free_table, Kind::softmax_logits, Kind::constant_partition, Kind::tied_base_measure}) {
    if (family_name(k) == s) return k;
  }
  throw ConfigError("unknown family '" + s + "'");
}

Mat empirical_conditional(const std::vector<ConditionalSample>& data, int x_card, int u_card) {
  Mat c = Mat::Zero(u_card, x_card);
  for (const auto& d : data) {
    if (d.u < 0 || d.u >= u_card || d.x < 0 || d.x >= x_card) throw std::invalid_argument("sample out of range");
    c(d.u, d.x) += 1.0;
  }
  for (int u = 0; u < u_card; ++u) {
    const double s = c.row(u).sum();
    if (s > 0) c.row(u) /= s;
    else c.row(u).setConstant(1.0 / x_card);
  }
  return c;
}

Vec empirical_u_weights(const std::vector<ConditionalSample>& data, int u_card) {
  if (data.empty()) throw std::invalid_argument("no data");
  Vec w = Vec::Zero(u_card);
  for (const auto& d : data) w[d.u] += 1.0;
  return w / static_cast<double>(data.size());
}

double average_log_likelihood(const Mat& table, const std::vector<ConditionalSample>& data) {
  if (data.empty()) throw std::invalid_argument("no data");
  double s = 0.0;
  for (const auto& d : data) s += std::log(table(d.u, d.x));
  return s / static_cast<double>(data.size());
}

double tv_distance(const Mat& p, const Mat& q, const Vec& w) {
  if (p.rows() != q.rows() || p.cols() != q.cols() || w.size() != p.rows()) {
    throw std::invalid_argument("tv_distance shape mismatch");
  }
  double tv = 0.0;
  for (Eigen::Index u = 0; u < p.rows(); ++u) tv += w[u] * 0.5 * (p.row(u) - q.row(u)).cwiseAbs().sum();
  return tv;
}

// ---------------------------------------------------------------- minimizer

MinimizeResult minimize_small(const std::function<double(const Vec&, Vec*)>& f, Vec x0,
                              const MinimizeOptions& opts) {
  const auto n = x0.size();
  const int nc = std::min<int>(opts.num_capped, static_cast<int>(n));
  auto clamp = [&](Vec& x) {
    for (int i = 0; i < nc; ++i) x[i] = std::clamp(x[i], -opts.cap, opts.cap);
    if (opts.recenter) opts.recenter(x);
  };
  auto projected = [&](const Vec& x, const Vec& g) {
    Vec pg = g;
    for (int i = 0; i < nc; ++i) {
      if ((x[i] >= opts.cap && g[i] < 0) || (x[i] <= -opts.cap && g[i] > 0)) pg[i] = 0.0;
    }
    return pg;
  };
  MinimizeResult res;
  Vec x = std::move(x0);
  clamp(x);
  Vec g;
  double fx = f(x, &g);
  if (!std::isfinite(fx)) throw DivergenceError("objective is not finite at the starting point");
  double lambda = 1e-3;
  int it = 0;
  for (; it < opts.max_iterations; ++it) {
    const Vec pg = projected(x, g);
    if (pg.lpNorm<Eigen::Infinity>() < opts.grad_tol) break;
    std::vector<Eigen::Index> free;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i >= nc || pg[i] != 0.0 || std::abs(x[i]) < opts.cap) free.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(free.size());
    Mat H(m, m);
    for (Eigen::Index c = 0; c < m; ++c) {
      const Eigen::Index i = free[static_cast<size_t>(c)];
      const double h = 1e-5 * std::max(1.0, std::abs(x[i]));
      Vec xp = x, xm = x, gp, gm;
      xp[i] += h;
      xm[i] -= h;
      f(xp, &gp);
      f(xm, &gm);
      for (Eigen::Index r = 0; r < m; ++r) H(r, c) = (gp[free[static_cast<size_t>(r)]] - gm[free[static_cast<size_t>(r)]]) / (2 * h);
    }
    H = 0.5 * (H + H.transpose());
    Vec gf(m);
    for (Eigen::Index r = 0; r < m; ++r) gf[r] = pg[free[static_cast<size_t>(r)]];
    bool accepted = false;
    for (int tries = 0; tries < 40; ++tries) {
      Mat Hd = H;
      Hd.diagonal().array() += lambda * (H.diagonal().cwiseAbs().array() + 1.0);
      const Vec step = Hd.ldlt().solve(-gf);
      Vec xn = x;
      for (Eigen::Index r = 0; r < m; ++r) xn[free[static_cast<size_t>(r)]] += step[r];
      clamp(xn);
      Vec gn;
      const double fn = f(xn, &gn);
      if (std::isfinite(fn) && fn < fx) {
        x = std::move(xn);
        g = std::move(gn);
        fx = fn;
        lambda = std::max(lambda * 0.25, 1e-12);
        accepted = true;
        break;
      }
      lambda *= 8.0;
    }
    if (!accepted) break;  // no further decrease representable
  }
  res.x = x;
  res.value = fx;
  res.grad_norm = projected(x, g).lpNorm<Eigen::Infinity>();
  res.iterations = it;
  return res;
}

namespace {

std::function<void(Vec&)> row_recenter(const TabularConditionalFamily& fam) {
  const int U = fam.u_cardinality, X = fam.x_cardinality;
  return [U, X](Vec& th) {
    for (int u = 0; u < U; ++u) th.segment(u * X, X).array() -= th.segment(u * X, X).maxCoeff();
  };
}

}  // namespace

Vec exact_mle_params(const std::vector<ConditionalSample>& data, const TabularConditionalFamily& fam) {
  if (data.empty()) throw std::invalid_argument("exact_mle needs data");
  const int U = fam.u_cardinality, X = fam.x_cardinality;
  Mat counts = Mat::Zero(U, X);
  for (const auto& d : data) {
    if (d.u < 0 || d.u >= U || d.x < 0 || d.x >= X) throw std::invalid_argument("sample out of range");
    counts(d.u, d.x) += 1.0;
  }
  const double n = static_cast<double>(data.size());
  if (fam.kind == Kind::free_table) {
    const Mat p = empirical_conditional(data, X, U);
    Vec th(U * X);
    for (int u = 0; u < U; ++u)
      for (int x = 0; x < X; ++x) th[u * X + x] = p(u, x) > 0 ? std::log(p(u, x)) : -INFINITY;
    return th;
  }
  const Vec nu = counts.rowwise().sum();
  auto nll = [&](const Vec& th, Vec* grad) {
    const Mat lp = fam.conditional(th).array().log().matrix();
    double v = 0.0;
    for (int u = 0; u < U; ++u)
      for (int x = 0; x < X; ++x)
        if (counts(u, x) > 0) v -= counts(u, x) * lp(u, x);
    if (grad) {
      // d(-loglik)/dlog f(u,x) = -(count(u,x) - n_u p(x|u)) / n
      Mat d(U, X);
      const Mat p = lp.array().exp().matrix();
      for (int u = 0; u < U; ++u)
        for (int x = 0; x < X; ++x) d(u, x) = -(counts(u, x) - nu[u] * p(u, x)) / n;
      *grad = fam.pullback(th, d);
    }
    return v / n;
  };
  MinimizeOptions opts;
  opts.grad_tol = 1e-10;
  opts.num_capped = fam.num_params();
  if (fam.kind != Kind::tied_base_measure) {
    opts.recenter = row_recenter(fam);
  } else {
    opts.recenter = [](Vec& th) { th.array() -= th.maxCoeff(); };
  }
  return minimize_small(nll, Vec::Zero(fam.num_params()), opts).x;
}

Mat exact_mle(const std::vector<ConditionalSample>& data, const TabularConditionalFamily& fam) {
  if (fam.kind == Kind::free_table) return empirical_conditional(data, fam.x_cardinality, fam.u_cardinality);
  return fam.conditional(exact_mle_params(data, fam));
}

NceTabularFit fit_nce_tabular(const TabularConditionalFamily& fam, const std::vector<ConditionalSample>& data,
                              const Mat& neg_counts, NceConfig::Objective objective, int K) {
  const int P = fam.num_params();
  const Vec log_q = Vec::Constant(fam.x_cardinality, -std::log(static_cast<double>(fam.x_cardinality)));
  const bool binary = objective == NceConfig::Objective::binary;
  auto loss = [&](const Vec& v, Vec* grad) {
    const Vec th = v.head(P);
    const Mat lf = fam.log_scores(th);
    const GroupedLoss gl = binary ? binary_loss_grouped(lf, log_q, data, neg_counts, v[P], K)
                                  : ranking_loss_grouped(lf, log_q, data, neg_counts);
    if (grad) {
      grad->resize(v.size());
      grad->head(P) = fam.pullback(th, gl.d_logf);
      if (binary) (*grad)[P] = gl.dgamma;
    }
    return gl.loss;
  };
  MinimizeOptions opts;
  opts.num_capped = P;
  if (fam.kind == Kind::softmax_logits || fam.kind == Kind::constant_partition ||
      (fam.kind == Kind::free_table && !binary)) {
    const auto rc = row_recenter(fam);
    opts.recenter = [rc, P](Vec& v) {
      Vec th = v.head(P);
      rc(th);
      v.head(P) = th;
    };
  }
  const MinimizeResult r = minimize_small(loss, Vec::Zero(P + (binary ? 1 : 0)), opts);
  NceTabularFit fit;
  fit.theta = r.x.head(P);
  fit.gamma = binary ? r.x[P] : 0.0;
  fit.table = fam.conditional(fit.theta);
  fit.iterations = r.iterations;
  fit.grad_norm = r.grad_norm;
  return fit;
}

std::vector<ConsistencyCell> consistency_experiment(const ConsistencySpec& spec) {
  const int X = spec.family.x_cardinality, U = spec.family.u_cardinality;
  if (spec.env.x_cardinality != X || spec.env.u_cardinality != U) {
    throw ConfigError("consistency: environment and family cardinalities differ");
  }
  if (spec.n < 1) throw ConfigError("consistency: n must be >= 1");
  for (size_t i = 0; i < spec.K_list.size(); ++i) {
    if (spec.K_list[i] < 1 || (i > 0 && spec.K_list[i] <= spec.K_list[i - 1])) {
      throw ConfigError("consistency: K_list must be increasing and positive");
    }
  }
  std::vector<ConsistencyCell> cells;
  const Vec u_dist = Vec::Constant(U, 1.0 / U);
  for (const auto seed : spec.seeds) {
    Rng rng(derive_seed(seed, 0));
    SyntheticConditional env = spec.env;
    if (spec.resample_table) env = random_synthetic(X, U, rng);
    const auto data = sample_synthetic(env, spec.n, u_dist, rng);
    const Mat mle = exact_mle(data, spec.family);
    const Vec w = empirical_u_weights(data, U);
    const double mle_ll = average_log_likelihood(mle, data);
    for (const int K : spec.K_list) {
      ConsistencyCell cell;
      cell.seed = seed;
      cell.K = K;
      cell.objective = spec.objective;
      cell.mle_loglik = mle_ll;
      try {
        Rng nrng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(K)));
        std::uniform_int_distribution<int> draw(0, X - 1);
        Mat counts = Mat::Zero(spec.n, X);
        for (int i = 0; i < spec.n; ++i)
          for (int j = 0; j < K; ++j) counts(i, draw(nrng)) += 1.0;
        const auto fit = fit_nce_tabular(spec.family, data, counts, spec.objective, K);
        cell.tv = tv_distance(fit.table, mle, w);
        cell.nce_loglik = average_log_likelihood(fit.table, data);
        cell.gamma_hat = fit.gamma;
        if (!std::isfinite(cell.tv)) throw DivergenceError("non-finite TV");
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      cells.push_back(cell);
    }
  }
  return cells;
}

std::vector<std::pair<int, double>> mean_tv_by_k(const std::vector<ConsistencyCell>& cells) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& c : cells) {
    if (c.failed) continue;
    acc[c.K].first += c.tv;
    acc[c.K].second += 1;
  }
  std::vector<std::pair<int, double>> out;
  for (const auto& [k, v] : acc) out.emplace_back(k, v.first / v.second);
  return out;
}

void write_consistency_csv(const std::string& path, const std::vector<ConsistencyCell>& cells) {
  CsvWriter w(path, {"seed", "K", "objective", "tv", "nce_loglik", "mle_loglik", "gamma_hat", "failed"});
  for (const auto& c : cells) {
    w.row({std::to_string(c.seed), std::to_string(c.K), objective_name(c.objective), format_double(c.tv),
           format_double(c.nce_loglik), format_double(c.mle_loglik), format_double(c.gamma_hat),
           c.failed ? "1" : "0"});
  }
}

namespace {

Mat witness_base() {
  Mat b(3, 4);
  b << 0.15, 0.4, 0.45, 0.0,
       0.5, 0.0, 0.0, 0.5,
       0.0, 0.0, 0.3, 0.7;
  b.array() += 0.005;
  for (Eigen::Index u = 0; u < b.rows(); ++u) b.row(u) /= b.row(u).sum();
  return b;
}

}  // namespace

TabularConditionalFamily varying_partition_family() {
  Vec scale(3);
  scale << 1.0, 2.0, 4.0;
  return TabularConditionalFamily::tied_base_measure(witness_base(), scale);
}

SyntheticConditional varying_partition_env() {
  SyntheticConditional env;
  env.x_cardinality = 4;
  env.u_cardinality = 3;
  env.true_table = witness_base();
  env.family = ConditionalFamilyKind::tied_base_measure;
  return env;
}

}  // namespace ctrl
