#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace cmark {

using Rng = std::mt19937_64;

/// Uniform double in [lo, hi) from the top 53 bits of one draw; stable across
/// standard library implementations, unlike std::uniform_real_distribution.
inline double uniform(Rng& rng, double lo, double hi) {
  const double unit = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * unit;
}

/// Uniform integer in [lo, hi] (inclusive) by rejection sampling.
inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  const std::uint64_t limit = span == 0 ? 0 : (UINT64_MAX / span) * span;
  std::uint64_t draw = rng();
  while (span != 0 && draw >= limit) draw = rng();
  return lo + static_cast<std::int64_t>(span == 0 ? draw : draw % span);
}

/// Standard normal draw by Box-Muller over uniform(), for the same reason.
inline double normal(Rng& rng) {
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace cmark
