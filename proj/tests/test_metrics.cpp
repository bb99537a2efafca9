#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dproxy/metrics.hpp"
#include "dproxy/oracles.hpp"
#include "dproxy/rng.hpp"

using namespace dproxy;
using metrics::nmi;
using metrics::rand_index;
using V = std::vector<int>;

namespace {

// Direct contingency-table NMI, independent of the library implementation.
double nmi_oracle(const V& a, const V& b) {
  const int ka = *std::max_element(a.begin(), a.end()) + 1;
  const int kb = *std::max_element(b.begin(), b.end()) + 1;
  const double n = static_cast<double>(a.size());
  std::vector<double> table(ka * kb, 0.0), pa(ka, 0.0), pb(kb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[a[i] * kb + b[i]] += 1.0 / n;
    pa[a[i]] += 1.0 / n;
    pb[b[i]] += 1.0 / n;
  }
  double mi = 0.0, ha = 0.0, hb = 0.0;
  for (int i = 0; i < ka; ++i)
    for (int j = 0; j < kb; ++j)
      if (table[i * kb + j] > 0) mi += table[i * kb + j] * std::log(table[i * kb + j] / (pa[i] * pb[j]));
  for (double p : pa)
    if (p > 0) ha -= p * std::log(p);
  for (double p : pb)
    if (p > 0) hb -= p * std::log(p);
  return mi / std::sqrt(ha * hb);
}

}  // namespace

TEST_CASE("nmi hand examples") {
  CHECK(nmi(V{0, 0, 1, 1}, V{0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(nmi(V{0, 0, 1, 1}, V{1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(nmi(V{0, 0, 1, 1}, V{0, 1, 0, 1}) == 0.0);
  CHECK(nmi(V{0, 0, 1, 1}, V{0, 1, 0, 1}, metrics::NmiNormalization::Arithmetic) == 0.0);
}

TEST_CASE("nmi degenerate partitions") {
  CHECK(nmi(V{0, 0, 0}, V{1, 1, 1}) == 1.0);
  CHECK(nmi(V{0, 0, 0, 0}, V{0, 1, 0, 1}) == 0.0);
  CHECK_THROWS_AS(nmi(V{0, 1}, V{0, 1, 1}), Error);
  CHECK_THROWS_AS(nmi(V{0}, V{0}), Error);
  CHECK_THROWS_AS(nmi(V{0, -1}, V{0, 1}), Error);
}

TEST_CASE("nmi matches the contingency-table oracle") {
  Rng rng = make_rng(5, "test-metrics");
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 5 + uniform_index(rng, 40);
    V a(n), b(n);
    for (auto& x : a) x = static_cast<int>(uniform_index(rng, 4));
    for (auto& x : b) x = static_cast<int>(uniform_index(rng, 3));
    a[0] = 0, a[1] = 1, b[0] = 0, b[1] = 1;
    const double got = nmi(a, b);
    CHECK(got == doctest::Approx(nmi_oracle(a, b)).epsilon(1e-12));
    CHECK(got >= 0.0);
    CHECK(got <= 1.0 + 1e-12);
    CHECK(got == doctest::Approx(nmi(b, a)).epsilon(1e-14));
  }
}

TEST_CASE("rand index hand examples and pairwise oracle") {
  CHECK(rand_index(V{0, 0, 1, 1}, V{0, 0, 1, 1}) == 1.0);
  CHECK(rand_index(V{0, 0, 1, 1}, V{0, 1, 0, 1}) == doctest::Approx(2.0 / 6.0));
  CHECK(rand_index(V{0, 1, 2}, V{0, 0, 0}) == 0.0);
  Rng rng = make_rng(6, "test-metrics");
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    V a(n), b(n);
    for (auto& x : a) x = static_cast<int>(uniform_index(rng, 5));
    for (auto& x : b) x = static_cast<int>(uniform_index(rng, 5));
    CHECK(rand_index(a, b) == oracles::pairwise_rand_index(a, b));
  }
}

TEST_CASE("zeroshot assignment picks the most similar candidate") {
  const auto cands = Tensor2<float>::from(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(metrics::zeroshot_assign(Tensor2<float>::from(1, 3, {0, 1, 0}), cands) == V{1});
  const float h = std::sqrt(0.5f);
  CHECK(metrics::zeroshot_assign(Tensor2<float>::from(1, 3, {h, h, 0}), cands) == V{0});
  CHECK(metrics::zeroshot_assign(Tensor2<float>::from(1, 3, {0.1f, 0.3f, -2.0f}), cands) == V{1});
  CHECK_THROWS_AS(metrics::zeroshot_assign(Tensor2<float>(1, 2, 1.0f), cands), Error);
}
