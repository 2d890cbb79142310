#pragma once

// Feature covariance with a maintained inverse, and the clipped elliptical
// bonus / penalty built on it.

#include "ctrl/common.hpp"

#include <string>

namespace ctrl {

class CovarianceState {
 public:
  CovarianceState() = default;
  CovarianceState(int d, double lambda);

  /// Sigma = X Xᵀ + lambda I over the columns of X, inverse by Cholesky.
  static CovarianceState from_features(const Mat& X, double lambda);

  /// Sherman-Morrison update; the inverse is re-factorized from sigma every
  /// refactor_period updates to bound drift.
  void rank_one_update(const Vec& phi);
  void refactor();

  int d() const { return static_cast<int>(sigma_.rows()); }
  double lambda() const { return lambda_; }
  long count() const { return count_; }
  const Mat& sigma() const { return sigma_; }
  const Mat& inverse() const { return inverse_; }

  /// phiᵀ Sigma⁻¹ phi.
  double quadratic_form(const Vec& phi) const;

  static constexpr long refactor_period = 1000;

 private:
  Mat sigma_, inverse_;
  double lambda_ = 1.0;
  long count_ = 0;
  long since_refactor_ = 0;
};

struct BonusConfig {
  enum class Mode { bonus, penalty };
  double alpha = 5.0;
  double lambda = 1.0;
  Mode mode = Mode::bonus;
  static constexpr double clip = 2.0;

  void validate() const;
};

std::string bonus_mode_name(BonusConfig::Mode m);
BonusConfig::Mode parse_bonus_mode(const std::string& s);

/// min(alpha * sqrt(phiᵀ Sigma⁻¹ phi), 2). Penalty mode returns the same
/// magnitude; callers subtract it.
double bonus(const CovarianceState& state, const Vec& phi, const BonusConfig& config);

/// Bonus for every column of a feature matrix.
Vec bonus_batch(const CovarianceState& state, const Mat& features, const BonusConfig& config);

/// S x A table from features laid out with column s * A + a.
Mat bonus_table(const CovarianceState& state, const Mat& features, int num_states, int num_actions,
                const BonusConfig& config);

}  // namespace ctrl
