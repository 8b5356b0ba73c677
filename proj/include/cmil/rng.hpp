#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace cmil {

// Deterministic counter-free RNG built on splitmix64. Substreams are derived
// from the constructing seed (not the evolving state), so draws for slide i
// do not depend on how many draws slide i-1 consumed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : base_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Derived stream, independent of this stream's position.
  Rng substream(std::uint64_t key) const {
    std::uint64_t z = base_ ^ (0x9E3779B97F4A7C15ULL + key * 0xD1342543DE82EF95ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return Rng(z ^ (z >> 31));
  }

  // Uniform on [0,1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n >= 1.
  std::uint64_t uniform_int(std::uint64_t n) {
    // modulo bias is negligible for n << 2^64 but reject anyway
    std::uint64_t limit = ~0ULL - (~0ULL % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller (one value per pair of uniforms).
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Standard Gumbel(0,1).
  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
    return -std::log(-std::log(u));
  }

  double exponential(double rate) {
    double u = uniform();
    if (u > 1.0 - 1e-16) u = 1.0 - 1e-16;
    return -std::log(1.0 - u) / rate;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const { return base_; }

 private:
  std::uint64_t base_;
  std::uint64_t state_;
};

}  // namespace cmil
