#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace gcunet {

// PCG32 (O'Neill). Hand-rolled so that streams are identical across
// platforms and standard library versions; std::mt19937 distributions are
// not bit-stable between implementations.
class Rng {
 public:
  Rng() : Rng(0x853c49e6748fea9bULL, 0xda3e39cb94b95bdbULL, true) {}
  explicit Rng(uint64_t seed, uint64_t stream = 1) { reseed(seed, stream); }

  void reseed(uint64_t seed, uint64_t stream = 1) {
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
    have_spare_ = false;
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Unbiased integer in [0, bound).
  uint32_t below(uint32_t bound) {
    uint32_t threshold = (-bound) % bound;
    for (;;) {
      uint32_t r = next_u32();
      if (r >= threshold) return r % bound;
    }
  }

  // Uniform in [0, 1) with 32 bits of mantissa input.
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the spare is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Standard normal re-drawn until |z| <= cut (rejection, not clamping).
  double truncated_normal(double cut = 2.0) {
    for (;;) {
      double z = normal();
      if (z >= -cut && z <= cut) return z;
    }
  }

  // Independent child stream derived from (state, label, index). Consuming
  // the child never advances the parent, so e.g. per-epoch streams do not
  // depend on how much randomness an epoch used.
  Rng split(const std::string& label, uint64_t index = 0) const {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
    auto mix = [&h](uint64_t x) {
      for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xff;
        h *= 1099511628211ULL;
      }
    };
    mix(state_);
    mix(inc_);
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    mix(index);
    // splitmix64 finalizer to decorrelate seed and stream id
    auto fin = [](uint64_t x) {
      x += 0x9e3779b97f4a7c15ULL;
      x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
      x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
      return x ^ (x >> 31);
    };
    return Rng(fin(h), fin(h ^ 0x5851f42d4c957f2dULL));
  }

  uint64_t state() const { return state_; }
  uint64_t inc() const { return inc_; }
  void restore(uint64_t state, uint64_t inc) {
    state_ = state;
    inc_ = inc;
    have_spare_ = false;
  }

 private:
  Rng(uint64_t s, uint64_t i, bool) : state_(s), inc_(i) {}
  uint64_t state_ = 0;
  uint64_t inc_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace gcunet
