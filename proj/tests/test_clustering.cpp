#include <doctest.h>

#include <cmath>

#include "dproxy/clustering.hpp"
#include "dproxy/oracles.hpp"
#include "dproxy/rng.hpp"

using namespace dproxy;
using clustering::kmeans;

namespace {

Tensor2<double> random_points(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed, "test-kmeans");
  Tensor2<double> p(n, d);
  for (auto& x : p.data) x = standard_normal(rng);
  return p;
}

}  // namespace

TEST_CASE("k = 1 yields the mean and total scatter") {
  const auto p = random_points(20, 3, 1);
  const auto r = kmeans(p, 1, 5);
  std::vector<double> mean(3, 0.0);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 3; ++j) mean[j] += p(i, j) / 20.0;
  double scatter = 0.0;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 3; ++j) scatter += (p(i, j) - mean[j]) * (p(i, j) - mean[j]);
  for (std::size_t j = 0; j < 3; ++j) CHECK(r.centroids(0, j) == doctest::Approx(mean[j]).epsilon(1e-12));
  CHECK(r.inertia == doctest::Approx(scatter).epsilon(1e-12));
}

TEST_CASE("separated pairs are split") {
  const auto p = Tensor2<double>::from(4, 2, {0, 0, 0, 1, 10, 0, 10, 1});
  const auto r = kmeans(p, 2, 3);
  CHECK(r.assignments[0] == r.assignments[1]);
  CHECK(r.assignments[2] == r.assignments[3]);
  CHECK(r.assignments[0] != r.assignments[2]);
  const int a = r.assignments[0];
  CHECK(r.centroids(a, 0) == doctest::Approx(0.0));
  CHECK(r.centroids(a, 1) == doctest::Approx(0.5));
  CHECK(r.centroids(1 - a, 0) == doctest::Approx(10.0));
  CHECK(r.centroids(1 - a, 1) == doctest::Approx(0.5));
  CHECK(r.inertia == doctest::Approx(1.0));
}

TEST_CASE("small instances reach the exhaustive optimum") {
  int hits = 0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const std::size_t n = 4 + s % 5;
    const auto p = random_points(n, 2, 100 + s);
    const auto best = oracles::brute_force_kmeans(p, 2);
    clustering::KMeansOptions opt;
    opt.restarts = 10;
    const auto r = kmeans(p, 2, s, opt);
    if (std::abs(r.inertia - best.inertia) <= 1e-9) ++hits;
  }
  CHECK(hits == 30);
}

TEST_CASE("identical inputs give identical assignments") {
  const auto p = random_points(50, 4, 9);
  clustering::KMeansOptions opt;
  opt.restarts = 3;
  const auto a = kmeans(p, 4, 11, opt);
  const auto b = kmeans(p, 4, 11, opt);
  CHECK(a.assignments == b.assignments);
  CHECK(a.centroids == b.centroids);
  CHECK(a.inertia == b.inertia);
}

TEST_CASE("inertia trace never increases") {
  const auto p = random_points(80, 3, 21);
  const auto r = kmeans(p, 5, 2);
  REQUIRE_FALSE(r.inertia_trace.empty());
  for (std::size_t i = 1; i < r.inertia_trace.size(); ++i) CHECK(r.inertia_trace[i] <= r.inertia_trace[i - 1] + 1e-12);
  CHECK(clustering::inertia(p, r.assignments, r.centroids) == doctest::Approx(r.inertia));
}

TEST_CASE("duplicate points still give k non-empty clusters") {
  Tensor2<double> p(6, 2, 1.0);
  p(5, 0) = 2.0;
  const auto r = kmeans(p, 3, 1);
  std::vector<int> counts(3, 0);
  for (int a : r.assignments) ++counts[a];
  for (int c : counts) CHECK(c > 0);
}

TEST_CASE("too few points") {
  try {
    kmeans(random_points(2, 2, 1), 3, 1);
    FAIL("expected TooFewPoints");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooFewPoints);
  }
}
