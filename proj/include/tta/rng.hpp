#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tta {

// Deterministic random source. All value transforms are hand-rolled on top of
// the (standardized) mt19937_64 bit stream, so identical seeds produce
// identical sequences on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n == 0 is a caller bug; returns 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) return 0;
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller; caches the spare deviate.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Stable substream derivation, e.g. Rng(Rng::mix(seed, step, layer)).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b = 0,
                           std::uint64_t c = 0) {
    std::uint64_t x = a;
    x = splitmix(x + 0x9e3779b97f4a7c15ULL + b);
    x = splitmix(x + 0xbf58476d1ce4e5b9ULL + c);
    return splitmix(x);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tta
