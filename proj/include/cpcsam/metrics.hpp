// Overlap and surface-distance metrics on binary masks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cpcsam/data_io.hpp"
#include "cpcsam/distance_transform.hpp"
#include "cpcsam/prompt_geometry.hpp"

namespace cpcsam {

namespace detail {

inline void require_same_grid(const BinaryMask& a, const BinaryMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

struct OverlapCounts {
  std::size_t pred = 0, gt = 0, both = 0;
};

inline OverlapCounts overlap(const BinaryMask& pred, const BinaryMask& gt) {
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    c.pred += pred.cells[i];
    c.gt += gt.cells[i];
    c.both += pred.cells[i] & gt.cells[i];
  }
  return c;
}

}  // namespace detail

// Percent. Both empty -> 100, exactly one empty -> 0.
inline double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  detail::require_same_grid(pred, gt, "dsc");
  const auto c = detail::overlap(pred, gt);
  if (c.pred + c.gt == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.gt);
}

inline double jaccard(const BinaryMask& pred, const BinaryMask& gt) {
  detail::require_same_grid(pred, gt, "jaccard");
  const auto c = detail::overlap(pred, gt);
  const std::size_t uni = c.pred + c.gt - c.both;
  if (uni == 0) return 100.0;
  return 100.0 * static_cast<double>(c.both) / static_cast<double>(uni);
}

// Foreground pixels 4-adjacent to background, image border counting as background.
inline std::vector<std::size_t> boundary_pixels(const BinaryMask& mask) {
  std::vector<std::size_t> out;
  const int h = mask.height, w = mask.width;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == h - 1 || c == w - 1 || !mask.at(r - 1, c) || !mask.at(r + 1, c) ||
                        !mask.at(r, c - 1) || !mask.at(r, c + 1);
      if (edge) out.push_back(static_cast<std::size_t>(r) * w + c);
    }
  return out;
}

// Pooled symmetric nearest boundary distances: pred boundary -> gt boundary in
// raster order, then gt -> pred. Empty when either mask is empty.
inline std::vector<double> surface_distances(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing = {}) {
  detail::require_same_grid(pred, gt, "surface_distances");
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  if (bp.empty() || bg.empty()) return {};
  const auto h = static_cast<std::size_t>(pred.height), w = static_cast<std::size_t>(pred.width);
  auto sites = [&](const std::vector<std::size_t>& b) {
    std::vector<std::uint8_t> s(h * w, 0);
    for (auto i : b) s[i] = 1;
    return s;
  };
  const auto to_gt = squared_distance_to_sites(sites(bg), h, w, spacing.row, spacing.col);
  const auto to_pred = squared_distance_to_sites(sites(bp), h, w, spacing.row, spacing.col);
  std::vector<double> out;
  out.reserve(bp.size() + bg.size());
  for (auto i : bp) out.push_back(std::sqrt(to_gt[i]));
  for (auto i : bg) out.push_back(std::sqrt(to_pred[i]));
  return out;
}

// q-quantile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

// nullopt when either mask is empty.
inline std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing = {}) {
  const auto d = surface_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  return percentile(d, 0.95);
}

inline std::optional<double> asd(const BinaryMask& pred, const BinaryMask& gt, Spacing spacing = {}) {
  const auto d = surface_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  double total = 0.0;
  for (double x : d) total += x;
  return total / static_cast<double>(d.size());
}

}  // namespace cpcsam
