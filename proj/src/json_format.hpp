#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace chromofit::detail {

/// Shortest-form-agnostic decimal rendering with 17 significant digits, so
/// every double survives a text round trip bit for bit.
inline std::string fmt17(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace chromofit::detail
