// SPDX-License-Identifier: Apache-2.0
#pragma once

// Portable seeded randomness.
//
// Generator: SplitMix64 (Steele, Lea, Flood 2014; Vigna's reference
// constants). Every random decision that belongs to a row, an epoch or a
// model component draws from its own substream:
//
//     substream(seed, index).state = mix(seed ^ mix(index + 0x9E3779B97F4A7C15))
//
// where mix() is the SplitMix64 finalizer. Outputs therefore depend only on
// (seed, index) and never on how many draws other rows consumed, which
// keeps injectors reproducible across implementations and row-parallel.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace trainwatch {

inline constexpr std::uint64_t splitmix_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr Rng(std::uint64_t seed) noexcept : state_(seed) {}

  static constexpr Rng substream(std::uint64_t seed, std::uint64_t index) noexcept {
    return Rng(splitmix_mix(seed ^ splitmix_mix(index + kGolden)));
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  constexpr result_type operator()() noexcept { return next(); }

  constexpr std::uint64_t next() noexcept {
    state_ += kGolden;
    return splitmix_mix(state_);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire's multiply-shift; n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Standard normal via Box-Muller (one variate per call, no cached state).
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  std::uint64_t state_;
};

}  // namespace trainwatch
