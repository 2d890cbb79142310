#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ctrl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Every stochastic routine takes one of these explicitly; there is no global
// generator anywhere in the library.
using Rng = std::mt19937_64;

/// Derives an independent child seed from (base, stream) with a SplitMix64
/// finalizer, so per-seed / per-cell streams never overlap in practice.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Draws an index from an unnormalized nonnegative weight vector.
int sample_categorical(const Vec& weights, Rng& rng);

// Error taxonomy. The CLI maps these onto exit codes 2/3/4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool all_finite(const Vec& v);

/// log(exp(a) + exp(b)) without overflow; handles -inf operands.
double log_add_exp(double a, double b);

/// Numerically stable log(sum(exp(v))).
double log_sum_exp(const Vec& v);

double softplus(double z);
double sigmoid(double z);

}  // namespace ctrl
