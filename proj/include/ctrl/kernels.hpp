#pragma once

// Hot loops with two implementations: a plain serial reference and an OpenMP
// version. Both produce bit-identical results: parallel loops write disjoint
// outputs, and reductions sum fixed-size chunks in index order.

#include "ctrl/common.hpp"

#include <vector>

namespace ctrl::kernels {

// Column chunk used by blocked reductions; independent of the thread count.
inline constexpr int kChunk = 256;

#define CTRL_KERNEL_DECLS                                                                       \
  /* Q(s,a) = R(s,a) + gamma * P.row(s*A+a) . V; rows of absorbing states are 0. */             \
  void bellman_backup(const Mat& P, const Mat& R, const Vec& V, double gamma,                    \
                      const std::vector<char>& absorbing, Mat& Q);                              \
  /* out_i = x_iᵀ M x_i for each column x_i of X. */                                            \
  Vec quadratic_forms(const Mat& X, const Mat& M);                                              \
  /* sum_i x_i x_iᵀ over the columns of X. */                                                   \
  Mat covariance(const Mat& X);                                                                 \
  /* Row-normalized g(scale * phi_iᵀ mu_j) * exp(log_base_j); softplus link when               \
     softplus_link, identity otherwise. */                                                      \
  Mat density_rows(const Mat& phi, const Mat& mu, double scale, bool softplus_link,             \
                   const Vec& log_base);                                                        \
  /* Ranking NCE per row: loss_i = lse(a_i, B_i.) - a_i and its derivatives. */                 \
  void ranking_rows(const Vec& a, const Mat& B, Vec& loss, Vec& da, Mat& dB);                   \
  /* Binary NCE per row with offset c = gamma + log K:                                          \
     loss_i = softplus(c - a_i) + sum_j softplus(B_ij - c). dgamma_i = d loss_i / d gamma. */   \
  void binary_rows(const Vec& a, const Mat& B, double gamma, double log_k, Vec& loss, Vec& da,  \
                   Mat& dB, Vec& dgamma);                                                       \
  /* log of (1/n) sum_i N(x; c_i, diag(h^2)) / mass_i for every query column. */                \
  Vec kde_log_density(const Mat& centers, const Vec& bandwidth, const Vec& log_mass,           \
                      const Mat& queries);

namespace serial {
CTRL_KERNEL_DECLS
}
namespace parallel {
CTRL_KERNEL_DECLS
}

#undef CTRL_KERNEL_DECLS

/// Whether the parallel variants were built with OpenMP.
bool openmp_enabled();

// The library calls these; they route to the parallel variants.
using parallel::bellman_backup;
using parallel::binary_rows;
using parallel::covariance;
using parallel::density_rows;
using parallel::kde_log_density;
using parallel::quadratic_forms;
using parallel::ranking_rows;

}  // namespace ctrl::kernels
