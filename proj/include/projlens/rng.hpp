#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include "projlens/common.hpp"

namespace projlens {

// Deterministic RNG. std::mt19937_64 output is fully specified by the
// standard, but the standard distributions are not, so all draws below are
// implemented by hand. Every consumer derives a named stream so that adding
// a draw in one place never shifts another.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Unbiased draw in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw_runtime("Rng::below: n must be > 0");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return x % n;
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; spare is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = unit();
    } while (u1 <= 0.0);
    u2 = unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), in draw order.
  std::vector<size_t> sample_indices(size_t n, size_t k) {
    if (k > n) throw_runtime("Rng::sample_indices: k > n");
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k; ++i) {
      const size_t j = static_cast<size_t>(below(pool.size() - i)) + i;
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Derives an independent stream from a base seed and a label, e.g.
// derive_rng(split_seed, "image_shuffle").
inline uint64_t derive_seed(uint64_t seed, std::string_view stream) {
  Fnv1a64 h;
  h.update(&seed, sizeof(seed));
  h.update(stream);
  return h.value();
}

inline Rng derive_rng(uint64_t seed, std::string_view stream) {
  return Rng(derive_seed(seed, stream));
}

}  // namespace projlens
