#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace headlab {

/// Two decimals, halves rounded away from zero.
inline std::string fixed2(double v) {
  if (!std::isfinite(v)) return "nan";
  const double r = std::copysign(std::floor(std::abs(v) * 100.0 + 0.5 + 1e-9), v) / 100.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", r == 0.0 ? 0.0 : r);
  return buf;
}

inline std::string sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace headlab
