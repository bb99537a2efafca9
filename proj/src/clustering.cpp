#include "dproxy/clustering.hpp"

#include <cmath>
#include <limits>

#include "dproxy/rng.hpp"

namespace dproxy::clustering {

namespace {

double sqdist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

Tensor2<double> plus_plus_init(const Tensor2<double>& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows;
  Tensor2<double> centers(k, pts.cols);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::size_t pick = uniform_index(rng, n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(pts.row(pick).begin(), pts.row(pick).end(), centers.row(c).begin());
    if (c + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sqdist(pts.row(i), centers.row(c)));
      total += best[i];
    }
    if (total <= 0.0) {
      pick = uniform_index(rng, n);
      continue;
    }
    const double target = uniform01(rng) * total;
    double acc = 0.0;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += best[i];
      if (acc > target && best[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centers;
}

// Returns inertia; ties go to the lowest index.
double assign(const Tensor2<double>& pts, const Tensor2<double>& centers, std::vector<int>& labels,
              std::vector<double>& dist) {
  double total = 0.0;
  for (std::size_t i = 0; i < pts.rows; ++i) {
    int arg = 0;
    double bestd = sqdist(pts.row(i), centers.row(0));
    for (std::size_t c = 1; c < centers.rows; ++c) {
      const double d = sqdist(pts.row(i), centers.row(c));
      if (d < bestd) {
        bestd = d;
        arg = static_cast<int>(c);
      }
    }
    labels[i] = arg;
    dist[i] = bestd;
    total += bestd;
  }
  return total;
}

// Moves the farthest point of a multi-member cluster into each empty cluster.
void repair_empty(const Tensor2<double>& pts, Tensor2<double>& centers, std::vector<int>& labels,
                  std::vector<double>& dist, std::vector<std::size_t>& counts) {
  for (std::size_t c = 0; c < centers.rows; ++c) {
    if (counts[c] > 0) continue;
    std::size_t far = pts.rows;
    double fard = -1.0;
    for (std::size_t i = 0; i < pts.rows; ++i) {
      if (counts[static_cast<std::size_t>(labels[i])] > 1 && dist[i] > fard) {
        fard = dist[i];
        far = i;
      }
    }
    if (far == pts.rows) continue;
    --counts[static_cast<std::size_t>(labels[far])];
    labels[far] = static_cast<int>(c);
    counts[c] = 1;
    dist[far] = 0.0;
    std::copy(pts.row(far).begin(), pts.row(far).end(), centers.row(c).begin());
  }
}

// Assignment step followed by empty-cluster repair; returns the inertia.
double assign_step(const Tensor2<double>& pts, Tensor2<double>& centers, std::vector<int>& labels,
                   std::vector<double>& dist, std::vector<std::size_t>& counts) {
  assign(pts, centers, labels, dist);
  std::fill(counts.begin(), counts.end(), 0);
  for (int l : labels) ++counts[static_cast<std::size_t>(l)];
  repair_empty(pts, centers, labels, dist, counts);
  double total = 0.0;
  for (double x : dist) total += x;
  return total;
}

// Single-point moves that lower inertia exactly (Hartigan). Moving x from a
// to b changes inertia by n_b/(n_b+1)|x-mu_b|^2 - n_a/(n_a-1)|x-mu_a|^2.
// Every fixed point here is also a fixed point of Lloyd's iteration.
void hartigan_pass(const Tensor2<double>& pts, Tensor2<double>& centers, std::vector<int>& labels,
                   std::vector<std::size_t>& counts) {
  const std::size_t n = pts.rows, d = pts.cols, k = centers.rows;
  auto recompute = [&](std::size_t c) {
    auto dst = centers.row(c);
    std::fill(dst.begin(), dst.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (static_cast<std::size_t>(labels[i]) != c) continue;
      for (std::size_t j = 0; j < d; ++j) dst[j] += pts(i, j);
    }
    for (double& x : dst) x /= static_cast<double>(counts[c]);
  };
  for (std::size_t c = 0; c < k; ++c)
    if (counts[c] > 0) recompute(c);
  bool moved = true;
  for (std::size_t pass = 0; moved && pass < 100; ++pass) {
    moved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = static_cast<std::size_t>(labels[i]);
      if (counts[a] < 2) continue;
      const double na = static_cast<double>(counts[a]);
      const double leave = na / (na - 1.0) * sqdist(pts.row(i), centers.row(a));
      std::size_t best = a;
      double best_delta = -1e-12 * (1.0 + leave);
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a) continue;
        const double nb = static_cast<double>(counts[b]);
        const double delta = nb / (nb + 1.0) * sqdist(pts.row(i), centers.row(b)) - leave;
        if (delta < best_delta) {
          best_delta = delta;
          best = b;
        }
      }
      if (best == a) continue;
      labels[i] = static_cast<int>(best);
      --counts[a];
      ++counts[best];
      recompute(a);
      recompute(best);
      moved = true;
    }
  }
}

ClusteringResult lloyd(const Tensor2<double>& pts, std::size_t k, Rng& rng, const KMeansOptions& opt) {
  const std::size_t n = pts.rows, d = pts.cols;
  ClusteringResult r;
  r.centroids = plus_plus_init(pts, k, rng);
  r.assignments.assign(n, -1);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k, 0);
  std::vector<int> previous;

  for (std::size_t it = 0; it < opt.max_iter; ++it) {
    r.inertia = assign_step(pts, r.centroids, r.assignments, dist, counts);
    r.inertia_trace.push_back(r.inertia);
    r.iterations = it + 1;
    if (r.assignments == previous) break;  // centroids are already the means

    Tensor2<double> next(k, d);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = next.row(static_cast<std::size_t>(r.assignments[i]));
      auto src = pts.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        std::copy(r.centroids.row(c).begin(), r.centroids.row(c).end(), next.row(c).begin());
        continue;
      }
      for (double& x : next.row(c)) x /= static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(sqdist(next.row(c), r.centroids.row(c))));
    }
    previous = r.assignments;
    r.centroids = std::move(next);
    if (shift < opt.tol) {
      r.inertia = assign_step(pts, r.centroids, r.assignments, dist, counts);
      r.inertia_trace.push_back(r.inertia);
      break;
    }
  }
  hartigan_pass(pts, r.centroids, r.assignments, counts);
  r.inertia = inertia(pts, r.assignments, r.centroids);
  r.inertia_trace.push_back(r.inertia);
  return r;
}

}  // namespace

double inertia(const Tensor2<double>& points, const std::vector<int>& assignments, const Tensor2<double>& centroids) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i)
    total += sqdist(points.row(i), centroids.row(static_cast<std::size_t>(assignments[i])));
  return total;
}

ClusteringResult kmeans(const Tensor2<double>& points, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
  if (k < 1) throw Error(ErrorCode::TooFewPoints, "kmeans: k must be at least 1");
  if (points.rows < k) {
    throw Error(ErrorCode::TooFewPoints, "kmeans: " + std::to_string(points.rows) + " points for k=" + std::to_string(k));
  }
  ClusteringResult best;
  const std::size_t restarts = std::max<std::size_t>(1, options.restarts);
  for (std::size_t r = 0; r < restarts; ++r) {
    Rng rng = make_rng(seed, "kmeans-restart", r);
    ClusteringResult cur = lloyd(points, k, rng, options);
    if (r == 0 || cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

}  // namespace dproxy::clustering
