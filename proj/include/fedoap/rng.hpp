#pragma once

#include <cstdint>
#include <string_view>

namespace fedoap {

// SplitMix64. The stream depends only on the seed, so every platform
// reproduces the same sequence bit for bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on (0, 1], 53 bits of resolution.
  double uniform_open0() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(next_u64() >> 11) * 0x1.0p-53);
  }

  // Uniform integer in [0, n). Uses a modulo reduction; the bias is
  // negligible for the small n used here.
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Box-Muller on two (0, 1] uniforms; always consumes exactly two draws.
  // Throws NegativeVariance when variance < 0.
  double gaussian(double mean, double variance);

  std::uint64_t state() const noexcept { return state_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t state_;
};

// Derives an independent child seed from (seed, stream) through one SplitMix64
// step, so seed ^ index style derivations do not collide trivially.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed ^ stream);
  return r.next_u64();
}

// FNV-1a, for turning names into seed streams.
inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace fedoap
