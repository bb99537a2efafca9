#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dproxy/tensor.hpp"

namespace dproxy::clustering {

struct KMeansOptions {
  std::size_t max_iter = 300;
  double tol = 1e-6;      // stop when no centroid moves farther than this
  std::size_t restarts = 1;  // best-of-N by inertia; ties keep the earliest
};

struct ClusteringResult {
  std::vector<int> assignments;
  Tensor2<double> centroids;
  double inertia = 0.0;
  std::size_t iterations = 0;
  /// Inertia after each assignment step of the winning restart.
  std::vector<double> inertia_trace;
};

/// Squared-Euclidean K-means: k-means++ seeding, Lloyd iterations, then
/// single-point moves while any lowers the inertia.
/// Empty clusters seize the point farthest from its centroid; equidistant
/// points go to the lowest centroid index. Deterministic in (points, k, seed).
/// Throws TooFewPoints when n < k.
ClusteringResult kmeans(const Tensor2<double>& points, std::size_t k, std::uint64_t seed,
                        const KMeansOptions& options = {});

/// Sum of squared distances from each point to its assigned centroid.
double inertia(const Tensor2<double>& points, const std::vector<int>& assignments, const Tensor2<double>& centroids);

}  // namespace dproxy::clustering
