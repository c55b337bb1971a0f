// Counter-based random streams. Every consumer derives its own stream from
// (seed, purpose, step), so data order, dropout and init never share state.
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace lmmt {

inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

class RngStream {
 public:
  RngStream(uint64_t seed, std::string_view purpose, uint64_t step = 0)
      : key_(mix64(mix64(mix64(seed) ^ hash_str(purpose)) ^ step)) {}

  uint64_t next_u64() { return mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  // uniform in [0,1), 53-bit resolution
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  float next_float() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

  // uniform integer in [0, n), n >= 1
  uint64_t next_below(uint64_t n) {
    const uint64_t bound = n == 0 ? 0 : (0ULL - n) % n;  // 2^64 mod n
    uint64_t x = next_u64();
    while (x < bound) x = next_u64();
    return x % n;
  }

  // standard normal via Box-Muller
  float next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    spare_ = static_cast<float>(r * std::sin(t));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(t));
  }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace lmmt
