#pragma once

// Seeded random streams.
//
// Every random quantity in a run is drawn from a named sub-stream derived from
// the master seed, so two simulations that share a seed see the same arrival
// realization node by node (common random numbers) regardless of what the
// controller does.

#include <array>
#include <cstdint>
#include <initializer_list>
#include <limits>

namespace bpsig {

/// SplitMix64 finalizer; used for seed derivation only.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Folds a list of tags into a seed. Order matters.
constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = mix64(master);
  for (auto t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

/// Purpose tags for sub-streams.
enum class Stream : std::uint64_t {
  arrivals = 0xa1,
  routing = 0xb2,
  sample = 0xc3,
  drift = 0xd4,
};

/// xoshiro256** (Blackman & Vigna). Small state, so one engine per
/// (node, purpose) stays cheap on large grids.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed = 0) noexcept { reseed(seed); }

  void reseed(std::uint64_t seed) noexcept {
    std::uint64_t z = seed;
    for (auto& w : s_) {
      z += 0x9e3779b97f4a7c15ULL;
      w = mix64(z);
    }
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  friend bool operator==(const Xoshiro256&, const Xoshiro256&) = default;

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> s_{};
};

/// Engine for the sub-stream (master, purpose, index).
inline Xoshiro256 make_stream(std::uint64_t master, Stream purpose, std::uint64_t index = 0) {
  return Xoshiro256(derive_seed(master, {static_cast<std::uint64_t>(purpose), index}));
}

}  // namespace bpsig
