#include "dproxy/oracles.hpp"

#include <limits>

#include "dproxy/error.hpp"

namespace dproxy::oracles {

OptimalPartition brute_force_kmeans(const Tensor2<double>& points, std::size_t k) {
  const std::size_t n = points.rows, d = points.cols;
  if (k == 0 || n < k) throw Error(ErrorCode::TooFewPoints, "brute_force_kmeans needs n >= k >= 1");
  if (n > 12) throw Error(ErrorCode::ConfigInvalid, "brute_force_kmeans is limited to n <= 12");

  OptimalPartition best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<int> assign(n, 0);
  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k);
  while (true) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums[c * d + j] += points(i, j);
    }
    bool full = true;
    for (auto c : counts) full = full && c > 0;
    if (full) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<std::size_t>(assign[i]);
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = points(i, j) - sums[c * d + j] / static_cast<double>(counts[c]);
          total += diff * diff;
        }
      }
      if (total < best.inertia) {
        best.inertia = total;
        best.assignments = assign;
      }
    }
    // next assignment in base-k counting order
    std::size_t pos = 0;
    while (pos < n && assign[pos] == static_cast<int>(k) - 1) assign[pos++] = 0;
    if (pos == n) break;
    ++assign[pos];
  }
  return best;
}

double pairwise_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "partitions differ in length");
  if (a.size() < 2) throw Error(ErrorCode::InvalidPartition, "need at least two samples");
  std::size_t agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      agree += ((a[i] == a[j]) == (b[i] == b[j])) ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(total);
}

}  // namespace dproxy::oracles
