#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "landiff/common.hpp"

namespace landiff {

// xoshiro256++ seeded through splitmix64. Self-contained so that streams are
// reproducible across standard libraries and platforms; std::normal_distribution
// and friends are implementation-defined and must not be used anywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
    have_spare_ = false;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1) with 53 bits of randomness.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; bias is negligible for any n
  // this project uses and determinism is what matters.
  uint64_t below(uint64_t n) {
    return uint64_t((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  int index(int n) { return int(below(uint64_t(n))); }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller (explicit, platform-stable).
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Derives an independent stream for a named sub-task of a run seed.
  static uint64_t derive(uint64_t seed, std::string_view tag, uint64_t salt = 0) {
    uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    for (char c : tag) {
      h ^= uint64_t(uint8_t(c));
      h *= 0x100000001b3ULL;
    }
    h ^= salt + 0x9e3779b97f4a7c15ULL;
    uint64_t x = h;
    return splitmix64(x);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t state_[4] = {};
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace landiff
