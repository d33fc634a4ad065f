#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace roidiff {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable seed derivation for independent streams (per session, per window,
// per timestep...). Order of arguments matters.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = splitmix64(base ^ 0x1234567890abcdefULL);
  s = splitmix64(s ^ a);
  s = splitmix64(s ^ b);
  s = splitmix64(s ^ c);
  return s;
}

// Deterministic generator. Normal draws use Box-Muller (no cached spare) so
// the draw sequence is a pure function of the seed and call count,
// independent of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform in (0, 1]
  double uniform_open() { return (static_cast<double>(gen_() >> 11) + 1.0) * 0x1.0p-53; }

  double normal() {
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // integer in [0, n), unbiased
  uint64_t below(uint64_t n) {
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= lim);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  void fill_normal(float* dst, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(normal());
  }

  void fill_uniform(float* dst, size_t n, float lo, float hi) {
    for (size_t i = 0; i < n; ++i)
      dst[i] = lo + (hi - lo) * static_cast<float>(uniform());
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace roidiff
