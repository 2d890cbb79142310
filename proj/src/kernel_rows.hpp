#pragma once

// Per-item bodies shared by the serial and OpenMP kernels, so the two differ
// only in how the outer loop is scheduled.

#include "ctrl/common.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace ctrl::kernels::detail {

inline void backup_row(const Mat& P, const Mat& R, const Vec& V, double gamma,
                       const std::vector<char>& absorbing, Mat& Q, Eigen::Index s) {
  const Eigen::Index A = R.cols();
  if (!absorbing.empty() && absorbing[static_cast<size_t>(s)]) {
    Q.row(s).setZero();
    return;
  }
  for (Eigen::Index a = 0; a < A; ++a) Q(s, a) = R(s, a) + gamma * P.row(s * A + a).dot(V);
}

inline double quadratic_form(const Mat& X, const Mat& M, Eigen::Index i) {
  return X.col(i).dot(M * X.col(i));
}

inline Mat chunk_outer(const Mat& X, Eigen::Index c, int chunk) {
  const Eigen::Index begin = c * chunk;
  const Eigen::Index len = std::min<Eigen::Index>(chunk, X.cols() - begin);
  const auto block = X.middleCols(begin, len);
  Mat out = Mat::Zero(X.rows(), X.rows());
  out.selfadjointView<Eigen::Lower>().rankUpdate(block);
  out.triangularView<Eigen::StrictlyUpper>() = out.transpose();
  return out;
}

inline void density_row(const Mat& phi, const Mat& mu, double scale, bool softplus_link,
                        const Vec& log_base, Mat& out, Eigen::Index i) {
  double total = 0.0;
  for (Eigen::Index j = 0; j < mu.cols(); ++j) {
    const double z = scale * phi.col(i).dot(mu.col(j));
    const double g = softplus_link ? softplus(z) : std::max(z, 0.0);
    const double v = g * std::exp(log_base[j]);
    out(i, j) = v;
    total += v;
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw DivergenceError("density row " + std::to_string(i) + " has no positive mass");
  }
  out.row(i) /= total;
}

inline void ranking_row(const Vec& a, const Mat& B, Vec& loss, Vec& da, Mat& dB, Eigen::Index i) {
  double m = a[i];
  for (Eigen::Index j = 0; j < B.cols(); ++j) m = std::max(m, B(i, j));
  double s = std::exp(a[i] - m);
  for (Eigen::Index j = 0; j < B.cols(); ++j) s += std::exp(B(i, j) - m);
  const double lse = m + std::log(s);
  loss[i] = lse - a[i];
  da[i] = std::exp(a[i] - lse) - 1.0;
  for (Eigen::Index j = 0; j < B.cols(); ++j) dB(i, j) = std::exp(B(i, j) - lse);
}

inline void binary_row(const Vec& a, const Mat& B, double c, Vec& loss, Vec& da, Mat& dB,
                       Vec& dgamma, Eigen::Index i) {
  double l = softplus(c - a[i]);
  const double sp = sigmoid(c - a[i]);
  da[i] = -sp;
  double dg = sp;
  for (Eigen::Index j = 0; j < B.cols(); ++j) {
    l += softplus(B(i, j) - c);
    const double sn = sigmoid(B(i, j) - c);
    dB(i, j) = sn;
    dg -= sn;
  }
  loss[i] = l;
  dgamma[i] = dg;
}

inline double kde_point(const Mat& centers, const Vec& h, const Vec& log_mass, const Mat& q,
                        Eigen::Index k) {
  const Eigen::Index D = centers.rows();
  const Eigen::Index n = centers.cols();
  double log_norm = -0.5 * static_cast<double>(D) * std::log(2.0 * std::numbers::pi);
  for (Eigen::Index d = 0; d < D; ++d) log_norm -= std::log(h[d]);
  double m = -INFINITY;
  std::vector<double> terms(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double e = 0.0;
    for (Eigen::Index d = 0; d < D; ++d) {
      const double u = (q(d, k) - centers(d, i)) / h[d];
      e += u * u;
    }
    const double t = log_norm - 0.5 * e - log_mass[i];
    terms[static_cast<size_t>(i)] = t;
    m = std::max(m, t);
  }
  if (!std::isfinite(m)) return -INFINITY;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s) - std::log(static_cast<double>(n));
}

}  // namespace ctrl::kernels::detail
