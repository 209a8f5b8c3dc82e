#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stam {

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
}

/// Deterministic RNG with hand-rolled distributions so that streams are
/// stable across standard-library versions. One instance per worker.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n). n must be positive.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform01() * static_cast<double>(n)) % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Standard normal via Box-Muller (no cached second value, keeps the
  /// stream position a pure function of the call count).
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  /// Independent child stream keyed by (constructor seed, salt); used to give
  /// each sample/arm/worker its own generator so results do not depend on
  /// scheduling or on how much of the parent stream was consumed.
  Rng fork(uint64_t salt) const { return Rng(hash_combine(seed_, salt)); }

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
};

}  // namespace stam
