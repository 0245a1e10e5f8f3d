#pragma once

#include <cmath>
#include <cstdint>
#include <random>

// Deterministic randomness. Every consumer derives an independent stream
// from (master seed, stream index), so results do not depend on worker
// count or scheduling. All variate transforms are written out explicitly:
// std::mt19937_64 output is pinned by the standard, but the std
// distributions are not, and we want bit-stable results across toolchains.

namespace cqlearn::rng {

using Engine = std::mt19937_64;

// splitmix64 finalizer; good avalanche for seed derivation.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ mix64(stream + 0x243F6A8885A308D3ULL));
}

inline Engine make_engine(std::uint64_t seed, std::uint64_t stream = 0) {
  return Engine(derive(seed, stream));
}

// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Unbiased integer in [0, n) by rejection.
inline std::size_t uniform_index(Engine& eng, std::size_t n) {
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = eng();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

// Standard normal via Box-Muller; consumes exactly two uniforms, no cache.
inline double normal(Engine& eng) {
  const double u1 = 1.0 - uniform01(eng);  // (0, 1]
  const double u2 = uniform01(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

inline int rademacher(Engine& eng) { return (eng() >> 63) ? 1 : -1; }

inline bool bernoulli(Engine& eng, double p) { return uniform01(eng) < p; }

}  // namespace cqlearn::rng
