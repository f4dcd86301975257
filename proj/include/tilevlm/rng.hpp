#pragma once

#include <cstdint>
#include <string_view>

#include "tilevlm/common.hpp"

namespace tvlm {

// SplitMix64 (Steele et al. constants). Every random draw in the engine comes
// from one of these, keyed by a root seed plus a stream name, so runs are
// reproducible across platforms: the sequence depends only on integer
// arithmetic and IEEE doubles.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

 private:
  std::uint64_t state_;
};

// Stream splitting: a child stream is keyed by hashing the stream name into
// the root seed. Independent components (weight init, dataset synthesis,
// training shuffles) each get their own named stream.
inline Rng derive_rng(std::uint64_t root_seed, std::string_view stream) {
  std::uint64_t h = fnv1a64(stream, root_seed ^ 0x9e3779b97f4a7c15ull);
  return Rng(h);
}

}  // namespace tvlm
