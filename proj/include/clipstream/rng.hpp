#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace clipstream {

/// splitmix64 step: advances the state and returns the next 64-bit output.
/// Used both as a cheap standalone generator and as the seed-expansion /
/// seed-mixing function throughout the project so derived streams are
/// decorrelated from one another.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// One-shot mix of two 64-bit values into one, for deriving sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (0x9E3779B97F4A7C15ull + (b << 6) + (b >> 2));
  return splitmix64(s);
}

/// FNV-1a 64-bit hash, for mixing strings into seeds.
inline std::uint64_t fnv1a(std::string_view s,
                           std::uint64_t h = 0xCBF29CE484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// FNV-1a continuation over a 64-bit integer (big-endian byte order).
inline std::uint64_t fnv1a_u64(std::uint64_t v,
                               std::uint64_t h = 0xCBF29CE484222325ull) {
  for (int shift = 56; shift >= 0; shift -= 8) {
    h ^= static_cast<unsigned char>(v >> shift);
    h *= 0x100000001B3ull;
  }
  return h;
}

/// FNV-1a 64-bit hash over a byte span, for payload digests.
inline std::uint64_t fnv1a_bytes(std::span<const std::uint8_t> bytes,
                                 std::uint64_t h = 0xCBF29CE484222325ull) {
  for (std::uint8_t c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Uniform double in [0, 1) from the top 53 bits of one mt19937_64 draw.
/// Hand-rolled (not std::uniform_real_distribution) so the value sequence is
/// identical across standard-library implementations.
inline double u01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two u01 draws, again hand-rolled for
/// cross-platform reproducibility. Consumes exactly two generator outputs.
inline double standard_normal(std::mt19937_64& rng) {
  double a = u01(rng);
  double b = u01(rng);
  // Guard against log(0).
  if (a <= 0.0) a = 0x1.0p-53;
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(a)) * std::cos(kTwoPi * b);
}

}  // namespace clipstream
