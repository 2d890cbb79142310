#include "ctrl/kernels.hpp"

#include "kernel_rows.hpp"

namespace ctrl::kernels::serial {

void bellman_backup(const Mat& P, const Mat& R, const Vec& V, double gamma,
                    const std::vector<char>& absorbing, Mat& Q) {
  Q.resize(R.rows(), R.cols());
  for (Eigen::Index s = 0; s < R.rows(); ++s) detail::backup_row(P, R, V, gamma, absorbing, Q, s);
}

Vec quadratic_forms(const Mat& X, const Mat& M) {
  Vec out(X.cols());
  for (Eigen::Index i = 0; i < X.cols(); ++i) out[i] = detail::quadratic_form(X, M, i);
  return out;
}

Mat covariance(const Mat& X) {
  Mat total = Mat::Zero(X.rows(), X.rows());
  const Eigen::Index chunks = (X.cols() + kChunk - 1) / kChunk;
  for (Eigen::Index c = 0; c < chunks; ++c) total += detail::chunk_outer(X, c, kChunk);
  return total;
}

Mat density_rows(const Mat& phi, const Mat& mu, double scale, bool softplus_link,
                 const Vec& log_base) {
  Mat out(phi.cols(), mu.cols());
  for (Eigen::Index i = 0; i < phi.cols(); ++i)
    detail::density_row(phi, mu, scale, softplus_link, log_base, out, i);
  return out;
}

void ranking_rows(const Vec& a, const Mat& B, Vec& loss, Vec& da, Mat& dB) {
  loss.resize(a.size());
  da.resize(a.size());
  dB.resize(B.rows(), B.cols());
  for (Eigen::Index i = 0; i < a.size(); ++i) detail::ranking_row(a, B, loss, da, dB, i);
}

void binary_rows(const Vec& a, const Mat& B, double gamma, double log_k, Vec& loss, Vec& da,
                 Mat& dB, Vec& dgamma) {
  loss.resize(a.size());
  da.resize(a.size());
  dgamma.resize(a.size());
  dB.resize(B.rows(), B.cols());
  const double c = gamma + log_k;
  for (Eigen::Index i = 0; i < a.size(); ++i) detail::binary_row(a, B, c, loss, da, dB, dgamma, i);
}

Vec kde_log_density(const Mat& centers, const Vec& bandwidth, const Vec& log_mass,
                    const Mat& queries) {
  Vec out(queries.cols());
  for (Eigen::Index k = 0; k < queries.cols(); ++k)
    out[k] = detail::kde_point(centers, bandwidth, log_mass, queries, k);
  return out;
}

}  // namespace ctrl::kernels::serial
