#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "divrl/error.hpp"

namespace divrl {

// Random streams are std::mt19937_64 engines. Draws go through the helpers
// below rather than <random> distributions: the distributions are
// implementation-defined and std::normal_distribution caches a value, which
// would break byte-identical logs across toolchains and checkpoint resume.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for the named stream `name` under `master`. Distinct names give
/// statistically independent engines.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  return splitmix64(splitmix64(master) ^ fnv1a(name));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t index) {
  return splitmix64(derive_seed(master, name) + splitmix64(index + 0x632BE59BD9B4E019ULL));
}

inline Rng make_stream(std::uint64_t master, std::string_view name) {
  return Rng(derive_seed(master, name));
}

inline Rng make_stream(std::uint64_t master, std::string_view name, std::uint64_t index) {
  return Rng(derive_seed(master, name, index));
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

/// Unbiased integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  DIVRL_REQUIRE(n > 0, ContractViolation, "uniform_index: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

inline bool bernoulli(Rng& rng, double p) { return uniform01(rng) < p; }

/// Standard normal via Box-Muller; consumes exactly two engine outputs.
inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Index drawn from a categorical with the given (unnormalised) weights.
template <typename Weights>
std::size_t categorical(Rng& rng, const Weights& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  DIVRL_REQUIRE(total > 0.0, ContractViolation, "categorical: weights sum to zero");
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < std::size(weights); ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = i;
    acc += weights[i];
    if (u < acc) return i;
  }
  return last_positive;
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_restore(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  DIVRL_REQUIRE(!is.fail(), ChecksumError, "corrupt rng state");
}

}  // namespace divrl
