#pragma once

// Brute-force reference implementations used by `verify` and the tests.

#include <cstddef>
#include <span>
#include <vector>

#include "dproxy/tensor.hpp"

namespace dproxy::oracles {

struct OptimalPartition {
  std::vector<int> assignments;
  double inertia = 0.0;
};

/// Minimum within-cluster sum of squares over every assignment of n points
/// to exactly k non-empty clusters. Exponential in n; intended for n <= 10.
OptimalPartition brute_force_kmeans(const Tensor2<double>& points, std::size_t k);

/// Rand index by enumerating every unordered pair.
double pairwise_rand_index(std::span<const int> a, std::span<const int> b);

}  // namespace dproxy::oracles
