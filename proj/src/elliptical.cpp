#include "ctrl/elliptical.hpp"

#include "ctrl/kernels.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace ctrl {

CovarianceState::CovarianceState(int d, double lambda) : lambda_(lambda) {
  if (d < 1) throw std::invalid_argument("covariance dimension must be >= 1");
  if (!(lambda > 0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be > 0");
  sigma_ = lambda * Mat::Identity(d, d);
  inverse_ = Mat::Identity(d, d) / lambda;
}

CovarianceState CovarianceState::from_features(const Mat& X, double lambda) {
  CovarianceState st(static_cast<int>(X.rows()), lambda);
  if (!X.allFinite()) throw std::invalid_argument("non-finite feature");
  st.sigma_ += kernels::covariance(X);
  st.count_ = X.cols();
  st.refactor();
  return st;
}

void CovarianceState::refactor() {
  sigma_ = 0.5 * (sigma_ + sigma_.transpose());
  Eigen::LLT<Mat> llt(sigma_);
  if (llt.info() != Eigen::Success) throw DivergenceError("covariance lost positive definiteness");
  inverse_ = llt.solve(Mat::Identity(d(), d()));
  since_refactor_ = 0;
}

void CovarianceState::rank_one_update(const Vec& phi) {
  if (phi.size() != d()) throw std::invalid_argument("feature length mismatch");
  if (!all_finite(phi)) throw std::invalid_argument("non-finite feature");
  ++count_;
  if (phi.squaredNorm() == 0.0) return;
  sigma_.noalias() += phi * phi.transpose();
  const Vec u = inverse_ * phi;
  inverse_.noalias() -= (u * u.transpose()) / (1.0 + phi.dot(u));
  if (++since_refactor_ >= refactor_period) refactor();
}

double CovarianceState::quadratic_form(const Vec& phi) const {
  if (phi.size() != d()) throw std::invalid_argument("feature length mismatch");
  return phi.dot(inverse_ * phi);
}

void BonusConfig::validate() const {
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw ConfigError("bonus.alpha must be >= 0");
  if (!(lambda > 0) || !std::isfinite(lambda)) throw ConfigError("bonus.lambda must be > 0");
}

std::string bonus_mode_name(BonusConfig::Mode m) { return m == BonusConfig::Mode::bonus ? "bonus" : "penalty"; }

BonusConfig::Mode parse_bonus_mode(const std::string& s) {
  if (s == "bonus") return BonusConfig::Mode::bonus;
  if (s == "penalty") return BonusConfig::Mode::penalty;
  throw ConfigError("unknown bonus mode '" + s + "'");
}

namespace {

double clipped(double q, double alpha) {
  if (q < 0) {
    spdlog::warn("negative elliptical quadratic form {} clamped to 0", q);
    q = 0;
  }
  return std::min(alpha * std::sqrt(q), BonusConfig::clip);
}

}  // namespace

double bonus(const CovarianceState& state, const Vec& phi, const BonusConfig& config) {
  if (config.alpha == 0.0) return 0.0;
  return clipped(state.quadratic_form(phi), config.alpha);
}

Vec bonus_batch(const CovarianceState& state, const Mat& features, const BonusConfig& config) {
  if (features.rows() != state.d()) throw std::invalid_argument("feature length mismatch");
  if (config.alpha == 0.0) return Vec::Zero(features.cols());
  Vec q = kernels::quadratic_forms(features, state.inverse());
  for (Eigen::Index i = 0; i < q.size(); ++i) q[i] = clipped(q[i], config.alpha);
  return q;
}

Mat bonus_table(const CovarianceState& state, const Mat& features, int num_states, int num_actions,
                const BonusConfig& config) {
  if (features.cols() != static_cast<Eigen::Index>(num_states) * num_actions) {
    throw std::invalid_argument("bonus_table needs one feature column per (s,a)");
  }
  const Vec b = bonus_batch(state, features, config);
  Mat out(num_states, num_actions);
  for (int s = 0; s < num_states; ++s)
    for (int a = 0; a < num_actions; ++a) out(s, a) = b[s * num_actions + a];
  return out;
}

}  // namespace ctrl
