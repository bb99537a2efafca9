#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dproxy {

using Rng = std::mt19937_64;

std::uint64_t fnv1a64(std::string_view text);

/// Derives an independent sub-stream seed from a run seed, a stream name and
/// an index. All randomness in a run flows from one seed through here.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, stream, index));
}

/// Uniform integer in [0, n). Avoids std::uniform_int_distribution so that
/// sequences do not depend on the standard library implementation.
std::uint64_t uniform_index(Rng& rng, std::uint64_t n);

/// Uniform double in [0, 1) built from the top 53 bits.
double uniform01(Rng& rng);

/// Standard normal via Box-Muller on uniform01.
double standard_normal(Rng& rng);

}  // namespace dproxy
