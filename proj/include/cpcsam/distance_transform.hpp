// Exact Euclidean distance transform (Felzenszwalb & Huttenlocher lower
// envelope), with per-axis spacing.
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace cpcsam {

namespace detail {

// 1D squared-distance transform of f sampled at unit steps, physical step `step`.
// Writes min_q f[q] + (step*(p-q))^2 into out[p].
inline void edt_1d(std::span<const double> f, double step, std::span<double> out,
                   std::vector<std::size_t>& hull, std::vector<double>& bounds) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const std::size_t n = f.size();
  hull.assign(n, 0);
  bounds.assign(n + 1, 0.0);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (!any) {
      hull[0] = q;
      bounds[0] = -inf;
      bounds[1] = inf;
      any = true;
      continue;
    }
    const double sq = step * static_cast<double>(q);
    while (true) {
      const std::size_t v = hull[k];
      const double sv = step * static_cast<double>(v);
      const double s = ((f[q] + sq * sq) - (f[v] + sv * sv)) / (2.0 * (sq - sv));
      if (s <= bounds[k]) {
        if (k == 0) {
          hull[0] = q;
          bounds[0] = -inf;
          bounds[1] = inf;
          break;
        }
        --k;
        continue;
      }
      ++k;
      hull[k] = q;
      bounds[k] = s;
      bounds[k + 1] = inf;
      break;
    }
  }
  if (!any) {
    for (std::size_t p = 0; p < n; ++p) out[p] = inf;
    return;
  }
  k = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double sp = step * static_cast<double>(p);
    while (bounds[k + 1] < sp) ++k;
    const std::size_t q = hull[k];
    const double d = step * (static_cast<double>(p) - static_cast<double>(q));
    out[p] = f[q] + d * d;
  }
}

}  // namespace detail

// Squared distance from every pixel to the nearest site pixel. Infinity where
// no site exists.
inline std::vector<double> squared_distance_to_sites(std::span<const std::uint8_t> sites, std::size_t height,
                                                     std::size_t width, double row_spacing = 1.0,
                                                     double col_spacing = 1.0) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> grid(height * width);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = sites[i] ? 0.0 : inf;

  std::vector<std::size_t> hull;
  std::vector<double> bounds;
  std::vector<double> column(height), column_out(height);
  for (std::size_t x = 0; x < width; ++x) {
    for (std::size_t y = 0; y < height; ++y) column[y] = grid[y * width + x];
    detail::edt_1d(column, row_spacing, column_out, hull, bounds);
    for (std::size_t y = 0; y < height; ++y) grid[y * width + x] = column_out[y];
  }
  std::vector<double> row(width), row_out(width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) row[x] = grid[y * width + x];
    detail::edt_1d(row, col_spacing, row_out, hull, bounds);
    for (std::size_t x = 0; x < width; ++x) grid[y * width + x] = row_out[x];
  }
  return grid;
}

}  // namespace cpcsam
