#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace neuronscope {

/// Deterministic RNG with hand-rolled distributions.
///
/// std::mt19937_64 raw output is pinned by the standard, but the standard
/// distributions are implementation-defined, so every draw here is built
/// directly from raw 64-bit words. Same seed, same platform-independent
/// stream.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t bits() { return gen_(); }

  /// Uniform double in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n) {
    // Rejection sampling; unbiased and deterministic.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  /// Standard normal via Box-Muller (stateless: the spare draw is discarded).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// Derives an independent sub-seed from a base seed, a purpose tag and up to
/// two indices (FNV-1a over the pieces). Keeps unrelated pipeline stages on
/// unrelated streams.
uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

}  // namespace neuronscope
