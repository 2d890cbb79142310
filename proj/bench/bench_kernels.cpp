// Serial reference vs OpenMP variant for each hot kernel. Compare the pairs
// with OMP_NUM_THREADS set to the core count.

#include "ctrl/kernels.hpp"

#include <benchmark/benchmark.h>

using namespace ctrl;
namespace ks = ctrl::kernels::serial;
namespace kp = ctrl::kernels::parallel;

namespace {

Mat randn(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  Mat m(r, c);
  for (auto& v : m.reshaped()) v = standard_normal(rng);
  return m;
}

template <bool Parallel>
void BM_BellmanBackup(benchmark::State& st) {
  const int S = static_cast<int>(st.range(0)), A = 4;
  Mat P = randn(S * A, S, 1).cwiseAbs();
  for (Eigen::Index r = 0; r < P.rows(); ++r) P.row(r) /= P.row(r).sum();
  const Mat R = randn(S, A, 2);
  const Vec V = randn(S, 1, 3).col(0);
  Mat Q;
  for (auto _ : st) {
    if constexpr (Parallel) kp::bellman_backup(P, R, V, 0.99, {}, Q);
    else ks::bellman_backup(P, R, V, 0.99, {}, Q);
    benchmark::DoNotOptimize(Q.data());
  }
}

template <bool Parallel>
void BM_QuadraticForms(benchmark::State& st) {
  const Mat X = randn(64, st.range(0), 4), M = randn(64, 64, 5);
  for (auto _ : st) {
    Vec out = Parallel ? kp::quadratic_forms(X, M) : ks::quadratic_forms(X, M);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_Covariance(benchmark::State& st) {
  const Mat X = randn(64, st.range(0), 6);
  for (auto _ : st) {
    Mat out = Parallel ? kp::covariance(X) : ks::covariance(X);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_DensityRows(benchmark::State& st) {
  const Mat phi = randn(32, 64, 7), mu = randn(32, st.range(0), 8);
  const Vec lb = Vec::Zero(st.range(0));
  for (auto _ : st) {
    Mat out = Parallel ? kp::density_rows(phi, mu, 1.0, true, lb) : ks::density_rows(phi, mu, 1.0, true, lb);
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_RankingRows(benchmark::State& st) {
  const Vec a = randn(st.range(0), 1, 9).col(0);
  const Mat B = randn(st.range(0), 64, 10);
  Vec l, da;
  Mat dB;
  for (auto _ : st) {
    if constexpr (Parallel) kp::ranking_rows(a, B, l, da, dB);
    else ks::ranking_rows(a, B, l, da, dB);
    benchmark::DoNotOptimize(l.data());
  }
}

template <bool Parallel>
void BM_BinaryRows(benchmark::State& st) {
  const Vec a = randn(st.range(0), 1, 11).col(0);
  const Mat B = randn(st.range(0), 64, 12);
  Vec l, da, g;
  Mat dB;
  for (auto _ : st) {
    if constexpr (Parallel) kp::binary_rows(a, B, 0.1, 4.0, l, da, dB, g);
    else ks::binary_rows(a, B, 0.1, 4.0, l, da, dB, g);
    benchmark::DoNotOptimize(l.data());
  }
}

template <bool Parallel>
void BM_KdeLogDensity(benchmark::State& st) {
  const Mat centers = randn(2, st.range(0), 13), q = randn(2, 256, 14);
  const Vec h = Vec::Constant(2, 0.1), lm = Vec::Zero(st.range(0));
  for (auto _ : st) {
    Vec out = Parallel ? kp::kde_log_density(centers, h, lm, q) : ks::kde_log_density(centers, h, lm, q);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

#define CTRL_BENCH_PAIR(fn, lo, hi)                                   \
  BENCHMARK(fn<false>)->Name(#fn "/serial")->RangeMultiplier(4)->Range(lo, hi); \
  BENCHMARK(fn<true>)->Name(#fn "/parallel")->RangeMultiplier(4)->Range(lo, hi)

CTRL_BENCH_PAIR(BM_BellmanBackup, 64, 1024);
CTRL_BENCH_PAIR(BM_QuadraticForms, 256, 16384);
CTRL_BENCH_PAIR(BM_Covariance, 256, 16384);
CTRL_BENCH_PAIR(BM_DensityRows, 256, 16384);
CTRL_BENCH_PAIR(BM_RankingRows, 256, 16384);
CTRL_BENCH_PAIR(BM_BinaryRows, 256, 16384);
CTRL_BENCH_PAIR(BM_KdeLogDensity, 256, 16384);

BENCHMARK_MAIN();
