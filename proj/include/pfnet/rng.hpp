#pragma once

#include <cmath>
#include <cstdint>

namespace pfnet {

// Deterministic, platform-independent random source. The standard library
// engines are portable but its distributions are not, so sampling is done
// here from raw bits. xoshiro256** state is expanded from a single 64-bit
// seed with splitmix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + next_double() * (hi - lo); }

  // Box-Muller; two draws per sample, nothing cached so replay is exact.
  double normal(double mean, double sigma) {
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_double();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    return mean + sigma * z;
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  std::uint64_t state_[4];
};

// Stream-splitting rule: the generator for element `index` of a seeded run is
// Rng(derive_stream(seed, index)). Samples at an index depend on (seed, index)
// only, never on how many elements are drawn or on worker scheduling.
inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t x = seed ^ (0xA0761D6478BD642Full + index * 0xE7037ED1A0B428DBull);
  return Rng::splitmix64(x);
}

inline std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return derive_stream(derive_stream(seed, a), b);
}

}  // namespace pfnet
