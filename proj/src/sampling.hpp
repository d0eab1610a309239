#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>

namespace twinseg::detail {

using Extent3 = std::array<std::size_t, 3>;

inline double clamp_coord(double v, std::size_t n) { return std::clamp(v, 0.0, static_cast<double>(n - 1)); }

/// Trilinear sample of a [D,H,W] grid at fractional (z,y,x); coordinates are
/// clamped to the grid (edge replication).
inline double sample_trilinear(const double* grid, const Extent3& e, double z, double y, double x) {
  z = clamp_coord(z, e[0]);
  y = clamp_coord(y, e[1]);
  x = clamp_coord(x, e[2]);
  const std::size_t z0 = static_cast<std::size_t>(z), y0 = static_cast<std::size_t>(y),
                    x0 = static_cast<std::size_t>(x);
  const std::size_t z1 = std::min(z0 + 1, e[0] - 1), y1 = std::min(y0 + 1, e[1] - 1), x1 = std::min(x0 + 1, e[2] - 1);
  const double fz = z - static_cast<double>(z0), fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  auto at = [&](std::size_t a, std::size_t b, std::size_t c) { return grid[(a * e[1] + b) * e[2] + c]; };
  const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
  const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
  const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
  const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
  const double c0 = c00 * (1 - fy) + c01 * fy;
  const double c1 = c10 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

inline std::size_t nearest_index(double v, std::size_t n) {
  return static_cast<std::size_t>(std::lround(clamp_coord(v, n)));
}

}  // namespace twinseg::detail
