#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace capmem {

// Deterministic, stream-addressed randomness. Every consumer of randomness
// (init, batch offsets, dropout masks, sampling) derives its own stream from
// the run seed and a label; the k-th draw of a stream depends only on
// (seed, label, k), never on what other streams have drawn.
class RngStream {
 public:
  RngStream() = default;

  RngStream(uint64_t seed, std::string_view label) {
    // FNV-1a over the label, then one splitmix-style mix against the seed.
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    state_ = mix(seed + 0x9e3779b97f4a7c15ull * (h | 1ull));
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the spare is cached per stream.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n). n must be positive.
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(
        (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
  }

 private:
  static uint64_t mix(uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

class Rng {
 public:
  Rng() = default;
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t seed() const { return seed_; }

  RngStream stream(std::string_view label) const { return RngStream(seed_, label); }

 private:
  uint64_t seed_ = 0;
};

}  // namespace capmem
