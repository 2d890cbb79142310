#include "ctrl/kernels.hpp"

#include "kernel_rows.hpp"

#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ctrl::kernels {

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

namespace parallel {

// Exceptions may not leave an OpenMP region; the first one is carried out.
#define CTRL_OMP_GUARDED_FOR(N, BODY)                          \
  std::exception_ptr err;                                      \
  _Pragma("omp parallel for schedule(static)")                 \
  for (Eigen::Index i_ = 0; i_ < (N); ++i_) {                  \
    try {                                                      \
      BODY;                                                    \
    } catch (...) {                                            \
      _Pragma("omp critical") if (!err) err = std::current_exception(); \
    }                                                          \
  }                                                            \
  if (err) std::rethrow_exception(err);

void bellman_backup(const Mat& P, const Mat& R, const Vec& V, double gamma,
                    const std::vector<char>& absorbing, Mat& Q) {
  Q.resize(R.rows(), R.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index s = 0; s < R.rows(); ++s) detail::backup_row(P, R, V, gamma, absorbing, Q, s);
}

Vec quadratic_forms(const Mat& X, const Mat& M) {
  Vec out(X.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < X.cols(); ++i) out[i] = detail::quadratic_form(X, M, i);
  return out;
}

Mat covariance(const Mat& X) {
  const Eigen::Index chunks = (X.cols() + kChunk - 1) / kChunk;
  std::vector<Mat> parts(static_cast<size_t>(chunks));
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < chunks; ++c) parts[static_cast<size_t>(c)] = detail::chunk_outer(X, c, kChunk);
  Mat total = Mat::Zero(X.rows(), X.rows());
  for (const auto& p : parts) total += p;
  return total;
}

Mat density_rows(const Mat& phi, const Mat& mu, double scale, bool softplus_link,
                 const Vec& log_base) {
  Mat out(phi.cols(), mu.cols());
  CTRL_OMP_GUARDED_FOR(phi.cols(), detail::density_row(phi, mu, scale, softplus_link, log_base, out, i_))
  return out;
}

void ranking_rows(const Vec& a, const Mat& B, Vec& loss, Vec& da, Mat& dB) {
  loss.resize(a.size());
  da.resize(a.size());
  dB.resize(B.rows(), B.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < a.size(); ++i) detail::ranking_row(a, B, loss, da, dB, i);
}

void binary_rows(const Vec& a, const Mat& B, double gamma, double log_k, Vec& loss, Vec& da,
                 Mat& dB, Vec& dgamma) {
  loss.resize(a.size());
  da.resize(a.size());
  dgamma.resize(a.size());
  dB.resize(B.rows(), B.cols());
  const double c = gamma + log_k;
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < a.size(); ++i) detail::binary_row(a, B, c, loss, da, dB, dgamma, i);
}

Vec kde_log_density(const Mat& centers, const Vec& bandwidth, const Vec& log_mass,
                    const Mat& queries) {
  Vec out(queries.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index k = 0; k < queries.cols(); ++k)
    out[k] = detail::kde_point(centers, bandwidth, log_mass, queries, k);
  return out;
}

}  // namespace parallel
}  // namespace ctrl::kernels
