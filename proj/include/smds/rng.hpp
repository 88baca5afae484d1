#pragma once

#include <cmath>
#include <cstdint>

#include "smds/common.hpp"

namespace smds {

/// Counter-based 64-bit generator (splitmix64 output function over an
/// incrementing counter).  Every distribution below is implemented on top of
/// next_u64() with a fixed draw order, so a (seed, call sequence) pair fully
/// determines the stream on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : counter_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (counter_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  Vec normal_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

  /// Poisson draw; Knuth's product method for small means, rounded normal
  /// approximation beyond mean 50 (simulated rates stay well below that).
  long poisson(double mean) {
    if (mean < 0.0) throw NumericError("Rng::poisson: negative mean");
    if (mean == 0.0) return 0;
    if (mean > 50.0) {
      const double z = normal();
      const double v = std::round(mean + std::sqrt(mean) * z);
      return v < 0.0 ? 0 : static_cast<long>(v);
    }
    const double limit = std::exp(-mean);
    long k = 0;
    double prod = uniform();
    while (prod > limit) {
      ++k;
      prod *= uniform();
    }
    return k;
  }

  /// Derive an independent child stream; used to give parallel work items
  /// (systems, folds, repeats) decorrelated seeds from one root seed.
  Rng spawn(std::uint64_t tag) {
    std::uint64_t z = next_u64();
    return Rng(z ^ (0xD1B54A32D192ED03ull * tag + 0x9E3779B97F4A7C15ull));
  }

 private:
  std::uint64_t counter_;
};

/// Stateless seed derivation for reproducible work items.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t tag) {
  Rng r(root ^ (tag * 0xA24BAED4963EE407ull + 0x9552F252C43A7ABDull));
  return r.next_u64();
}

}  // namespace smds
