#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace objsdf {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and stream ids
/// (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

inline double uniform01(Rng& rng) {
  // 53 random bits; identical across standard libraries, unlike
  // std::uniform_real_distribution.
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double normal01(Rng& rng) {
  // Box-Muller on our own uniforms for cross-platform reproducibility.
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) { return rng() % n; }

}  // namespace objsdf
