#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace cpcsam {

// Single-channel intensity image, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("Image: dimensions must be positive");
  }
  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const Image&) const = default;
};

// Integer class map aligned with an Image.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("LabelMap: dimensions must be positive");
  }
  int& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const LabelMap&) const = default;
};

}  // namespace cpcsam
