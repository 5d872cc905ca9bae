// Dense per-pixel class distributions and label maps.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace cpcsam {

// Row-major (height*width x classes) probabilities; pixel i, class k at data[i*classes + k].
struct ProbMap {
  int height = 0;
  int width = 0;
  int classes = 0;
  std::vector<double> data;

  ProbMap() = default;
  ProbMap(int h, int w, int c) : height(h), width(w), classes(c), data(static_cast<std::size_t>(h) * w * c, 0.0) {}
  ProbMap(int h, int w, int c, std::vector<double> values) : height(h), width(w), classes(c), data(std::move(values)) {
    if (data.size() != static_cast<std::size_t>(h) * w * c) throw std::invalid_argument("ProbMap: size mismatch");
  }

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  double& at(int r, int c, int k) { return data[(static_cast<std::size_t>(r) * width + c) * classes + k]; }
  double at(int r, int c, int k) const { return data[(static_cast<std::size_t>(r) * width + c) * classes + k]; }

  bool same_shape(const ProbMap& o) const { return height == o.height && width == o.width && classes == o.classes; }

  // Per-pixel argmax; ties resolve to the lowest class index.
  std::vector<int> argmax() const {
    std::vector<int> out(pixels(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double* row = data.data() + i * classes;
      int best = 0;
      for (int k = 1; k < classes; ++k)
        if (row[k] > row[best]) best = k;
      out[i] = best;
    }
    return out;
  }

  // Largest deviation of any pixel's distribution from the simplex.
  double simplex_error() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < pixels(); ++i) {
      double total = 0.0;
      for (int k = 0; k < classes; ++k) {
        const double v = data[i * classes + k];
        if (v < 0.0) worst = std::max(worst, -v);
        total += v;
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
    return worst;
  }

  bool operator==(const ProbMap&) const = default;
};

inline ProbMap one_hot(std::span<const int> labels, int height, int width, int classes) {
  if (labels.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("one_hot: size mismatch");
  ProbMap out(height, width, classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) throw std::invalid_argument("one_hot: label out of range");
    out.data[i * classes + labels[i]] = 1.0;
  }
  return out;
}

inline bool is_one_hot(const ProbMap& m) {
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    int ones = 0;
    for (int k = 0; k < m.classes; ++k) {
      const double v = m.data[i * m.classes + k];
      if (v == 1.0) ++ones;
      else if (v != 0.0) return false;
    }
    if (ones != 1) return false;
  }
  return true;
}

// Elementwise mean of maps of equal shape.
inline ProbMap mean_map(std::span<const ProbMap> maps) {
  if (maps.empty()) throw std::invalid_argument("mean_map: no maps");
  ProbMap out(maps[0].height, maps[0].width, maps[0].classes);
  for (const auto& m : maps) {
    if (!m.same_shape(out)) throw std::invalid_argument("mean_map: shape mismatch");
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += m.data[i];
  }
  const double inv = 1.0 / static_cast<double>(maps.size());
  for (auto& v : out.data) v *= inv;
  return out;
}

}  // namespace cpcsam
