#pragma once

#include <cmath>

#include "projlens/common.hpp"

namespace projlens {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// Two-sided two-proportion z-test. Returns 1.0 when both samples are empty
// of successes (no evidence of a difference either way).
inline double two_proportion_p_value(size_t k1, size_t n1, size_t k2, size_t n2) {
  if (n1 == 0 || n2 == 0) throw_config("two_proportion_p_value: empty sample");
  const double p1 = static_cast<double>(k1) / static_cast<double>(n1);
  const double p2 = static_cast<double>(k2) / static_cast<double>(n2);
  const double pooled = static_cast<double>(k1 + k2) / static_cast<double>(n1 + n2);
  const double var = pooled * (1.0 - pooled) *
                     (1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2));
  if (var <= 0.0) return 1.0;
  const double z = (p1 - p2) / std::sqrt(var);
  return 2.0 * (1.0 - normal_cdf(std::abs(z)));
}

}  // namespace projlens
