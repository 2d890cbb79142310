#pragma once

// Finite-difference audit of every differentiable loss the library exposes.

#include <cstdint>
#include <string>
#include <vector>

namespace ctrl {

struct GradientSuiteEntry {
  std::string loss;
  int instances = 0;
  double worst_rel_error = 0.0;
  bool passed = false;
};

/// Runs `instances` random draws of each loss (binary NCE, ranking NCE,
/// marginal regularizer, mu-norm regularizer, TD loss, policy surrogate) and
/// compares analytic gradients with central differences.
std::vector<GradientSuiteEntry> run_gradient_suite(std::uint64_t seed, int instances = 10,
                                                   double tolerance = 1e-4);

}  // namespace ctrl
