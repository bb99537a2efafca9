#include <doctest.h>

#include <cmath>
#include <set>

#include "dproxy/error.hpp"
#include "dproxy/rng.hpp"

using namespace dproxy;

TEST_CASE("fnv1a64 matches published test vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("derived seeds depend on seed, stream and index") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s : {0ULL, 1ULL, 2ULL})
    for (const char* stream : {"batching", "kmeans", "init"})
      for (std::uint64_t i = 0; i < 4; ++i) seen.insert(derive_seed(s, stream, i));
  CHECK(seen.size() == 36);
  CHECK(derive_seed(7, "batching", 3) == derive_seed(7, "batching", 3));
}

TEST_CASE("named streams replay identically") {
  Rng a = make_rng(11, "x"), b = make_rng(11, "x");
  for (int i = 0; i < 100; ++i) CHECK(a() == b());
}

TEST_CASE("uniform_index stays in range and covers it") {
  Rng rng = make_rng(3, "u");
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto k = uniform_index(rng, 7);
    REQUIRE(k < 7);
    seen.insert(k);
  }
  CHECK(seen.size() == 7);
  CHECK(uniform_index(rng, 1) == 0);
}

TEST_CASE("uniform01 and standard_normal have the expected moments") {
  Rng rng = make_rng(5, "moments");
  double su = 0.0, sn = 0.0, sn2 = 0.0;
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = uniform01(rng);
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    const double z = standard_normal(rng);
    sn += z;
    sn2 += z * z;
  }
  CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(sn / n) < 0.01);
  CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("error codes split into validation and runtime failures") {
  CHECK(is_validation_error(ErrorCode::ConfigInvalid));
  CHECK(is_validation_error(ErrorCode::BadMagic));
  CHECK_FALSE(is_validation_error(ErrorCode::NonFiniteLoss));
  CHECK_FALSE(is_validation_error(ErrorCode::IoError));
  const Error e(ErrorCode::SpecInvalid, "bad");
  CHECK(e.code() == ErrorCode::SpecInvalid);
  CHECK(e.detail() == "bad");
  CHECK(std::string(e.what()) == "SpecInvalid: bad");
}
