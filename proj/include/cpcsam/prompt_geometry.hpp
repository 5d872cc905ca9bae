// Point-prompt extraction from (possibly noisy) class probability maps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpcsam/distance_transform.hpp"
#include "cpcsam/prob_map.hpp"
#include "cpcsam/rng.hpp"

namespace cpcsam {

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("BinaryMask: dimensions must be positive");
    cells.assign(static_cast<std::size_t>(h) * w, 0);
  }

  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r) * width + c]; }
  void set(int r, int c, bool on = true) { cells[static_cast<std::size_t>(r) * width + c] = on ? 1 : 0; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), 1)); }
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

enum class Connectivity { four = 4, eight = 8 };

struct ComponentMap {
  int height = 0;
  int width = 0;
  // 0 is background; labels 1..n ordered by each component's first pixel in raster order.
  std::vector<int> labels;
  // sizes[k - 1] is the pixel count of label k.
  std::vector<std::size_t> sizes;

  std::size_t count() const { return sizes.size(); }
};

// Two-pass union-find labelling.
inline ComponentMap connected_components(const BinaryMask& mask, Connectivity connectivity = Connectivity::eight) {
  if (mask.height <= 0 || mask.width <= 0) throw std::invalid_argument("connected_components: empty dimensions");
  const int h = mask.height, w = mask.width;
  std::vector<int> provisional(static_cast<std::size_t>(h) * w, 0);
  std::vector<int> parent{0};
  auto find = [&](int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  auto unite = [&](int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c)) continue;
      std::vector<int> neighbours;
      auto look = [&](int rr, int cc) {
        if (rr < 0 || cc < 0 || cc >= w) return;
        const int lbl = provisional[static_cast<std::size_t>(rr) * w + cc];
        if (lbl) neighbours.push_back(lbl);
      };
      look(r, c - 1);
      look(r - 1, c);
      if (connectivity == Connectivity::eight) {
        look(r - 1, c - 1);
        look(r - 1, c + 1);
      }
      int& slot = provisional[static_cast<std::size_t>(r) * w + c];
      if (neighbours.empty()) {
        slot = static_cast<int>(parent.size());
        parent.push_back(slot);
      } else {
        slot = *std::min_element(neighbours.begin(), neighbours.end());
        for (int n : neighbours) unite(slot, n);
      }
    }
  }

  ComponentMap out;
  out.height = h;
  out.width = w;
  out.labels.assign(provisional.size(), 0);
  std::vector<int> remap(parent.size(), 0);
  for (std::size_t i = 0; i < provisional.size(); ++i) {
    if (!provisional[i]) continue;
    const int root = find(provisional[i]);
    if (!remap[root]) {
      out.sizes.push_back(0);
      remap[root] = static_cast<int>(out.sizes.size());
    }
    out.labels[i] = remap[root];
    ++out.sizes[remap[root] - 1];
  }
  return out;
}

// Largest component; ties go to the component whose first raster-order pixel
// is smallest, i.e. the lowest label.
inline BinaryMask largest_component(const BinaryMask& mask, Connectivity connectivity = Connectivity::eight) {
  BinaryMask out(mask.height, mask.width);
  const ComponentMap cc = connected_components(mask, connectivity);
  if (cc.count() == 0) return out;
  std::size_t best = 0;
  for (std::size_t k = 1; k < cc.sizes.size(); ++k)
    if (cc.sizes[k] > cc.sizes[best]) best = k;
  const int label = static_cast<int>(best) + 1;
  for (std::size_t i = 0; i < cc.labels.size(); ++i) out.cells[i] = cc.labels[i] == label ? 1 : 0;
  return out;
}

enum class PromptMode { center, random };

inline std::string to_string(PromptMode mode) { return mode == PromptMode::center ? "center" : "random"; }

struct PromptPoint {
  int row = 0;
  int col = 0;
  int class_id = 1;
  PromptMode mode = PromptMode::center;
  bool positive = true;

  bool operator==(const PromptPoint&) const = default;
};

struct PromptSet {
  std::vector<PromptPoint> points;
  int source_branch = 0;

  void add(const PromptPoint& p) {
    for (const auto& q : points)
      if (q.class_id == p.class_id && q.mode == p.mode)
        throw std::invalid_argument("PromptSet: duplicate (class, mode) pair");
    points.push_back(p);
  }
  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
  bool operator==(const PromptSet&) const = default;
};

// Euclidean distance to the nearest background pixel, pixels outside the image
// counting as background.
inline std::vector<double> distance_to_background(const BinaryMask& mask) {
  const std::size_t ph = static_cast<std::size_t>(mask.height) + 2;
  const std::size_t pw = static_cast<std::size_t>(mask.width) + 2;
  std::vector<std::uint8_t> background(ph * pw, 1);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) background[(r + 1) * pw + (c + 1)] = mask.at(r, c) ? 0 : 1;
  const auto padded = squared_distance_to_sites(background, ph, pw);
  std::vector<double> out(static_cast<std::size_t>(mask.height) * mask.width);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      out[static_cast<std::size_t>(r) * mask.width + c] = std::sqrt(padded[(r + 1) * pw + (c + 1)]);
  return out;
}

inline PromptPoint center_point(const BinaryMask& component, int class_id = 1) {
  const auto dist = distance_to_background(component);
  int best = -1;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (!component.cells[i]) continue;
    if (best < 0 || dist[i] > dist[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  if (best < 0) throw std::invalid_argument("no foreground");
  return {best / component.width, best % component.width, class_id, PromptMode::center, true};
}

inline PromptPoint random_point(const BinaryMask& component, std::uint64_t seed, int class_id = 1) {
  std::vector<int> pixels;
  for (std::size_t i = 0; i < component.cells.size(); ++i)
    if (component.cells[i]) pixels.push_back(static_cast<int>(i));
  if (pixels.empty()) throw std::invalid_argument("no foreground");
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pixels.size() - 1);
  const int idx = pixels[pick(gen)];
  return {idx / component.width, idx % component.width, class_id, PromptMode::random, true};
}

// Per-pixel argmax (lowest class wins ties) restricted to one class.
inline BinaryMask argmax_mask(const ProbMap& prob, int class_id) {
  BinaryMask mask(prob.height, prob.width);
  const auto labels = prob.argmax();
  for (std::size_t i = 0; i < labels.size(); ++i) mask.cells[i] = labels[i] == class_id ? 1 : 0;
  return mask;
}

inline BinaryMask label_mask(std::span<const int> labels, int height, int width, int class_id) {
  BinaryMask mask(height, width);
  for (std::size_t i = 0; i < mask.cells.size(); ++i) mask.cells[i] = labels[i] == class_id ? 1 : 0;
  return mask;
}

// Seed for the `draw`-th random point of class `class_id`.
inline std::uint64_t random_point_seed(std::uint64_t seed, int class_id, int draw) {
  return derive_seed(derive_seed(seed, static_cast<std::uint64_t>(class_id)), static_cast<std::uint64_t>(draw));
}

struct PromptModes {
  bool center = true;
  bool random = true;
};

// Prompts from a dense label map: largest component per foreground class.
inline PromptSet prompts_from_labels(std::span<const int> labels, int height, int width, int num_classes,
                                     PromptModes modes, std::uint64_t seed, int draw = 0,
                                     Connectivity connectivity = Connectivity::eight) {
  PromptSet set;
  for (int k = 1; k < num_classes; ++k) {
    const BinaryMask comp = largest_component(label_mask(labels, height, width, k), connectivity);
    if (comp.empty()) continue;
    if (modes.center) set.add(center_point(comp, k));
    if (modes.random) set.add(random_point(comp, random_point_seed(seed, k, draw), k));
  }
  return set;
}

inline PromptSet extract_prompts(const ProbMap& prob, PromptModes modes, std::uint64_t seed,
                                 Connectivity connectivity = Connectivity::eight) {
  const auto labels = prob.argmax();
  return prompts_from_labels(labels, prob.height, prob.width, prob.classes, modes, seed, 0, connectivity);
}

// Splits a set into the points of one mode.
inline PromptSet select_mode(const PromptSet& set, PromptMode mode) {
  PromptSet out;
  out.source_branch = set.source_branch;
  for (const auto& p : set.points)
    if (p.mode == mode) out.points.push_back(p);
  return out;
}

// Points on a single component: the center first (if requested), then
// `n_random` independent uniform draws.
inline std::vector<PromptPoint> multi_point_prompts(const BinaryMask& component, int n_center, int n_random,
                                                    std::uint64_t seed, int class_id = 1) {
  if (n_center < 0 || n_center > 1) throw std::invalid_argument("multi_point_prompts: n_center must be 0 or 1");
  if (n_random < 0) throw std::invalid_argument("multi_point_prompts: n_random must be non-negative");
  std::vector<PromptPoint> out;
  if (n_center == 1) out.push_back(center_point(component, class_id));
  for (int d = 0; d < n_random; ++d)
    out.push_back(random_point(component, random_point_seed(seed, class_id, d), class_id));
  return out;
}

// Center set (if requested) followed by `n_random` random sets. Every set holds
// at most one point per foreground class; draw 0 reproduces extract_prompts.
inline std::vector<PromptSet> multi_point_prompts_from_labels(std::span<const int> labels, int height, int width,
                                                              int num_classes, int n_center, int n_random,
                                                              std::uint64_t seed,
                                                              Connectivity connectivity = Connectivity::eight) {
  if (n_center < 0 || n_center > 1) throw std::invalid_argument("multi_point_prompts: n_center must be 0 or 1");
  if (n_random < 0) throw std::invalid_argument("multi_point_prompts: n_random must be non-negative");
  std::vector<PromptSet> sets;
  std::vector<BinaryMask> comps;
  for (int k = 1; k < num_classes; ++k)
    comps.push_back(largest_component(label_mask(labels, height, width, k), connectivity));
  if (n_center == 1) {
    PromptSet s;
    for (int k = 1; k < num_classes; ++k)
      if (!comps[k - 1].empty()) s.add(center_point(comps[k - 1], k));
    sets.push_back(std::move(s));
  }
  for (int d = 0; d < n_random; ++d) {
    PromptSet s;
    for (int k = 1; k < num_classes; ++k)
      if (!comps[k - 1].empty()) s.add(random_point(comps[k - 1], random_point_seed(seed, k, d), k));
    sets.push_back(std::move(s));
  }
  return sets;
}

inline std::vector<PromptSet> multi_point_prompts(const ProbMap& prob, int n_center, int n_random, std::uint64_t seed,
                                                  Connectivity connectivity = Connectivity::eight) {
  const auto labels = prob.argmax();
  return multi_point_prompts_from_labels(labels, prob.height, prob.width, prob.classes, n_center, n_random, seed,
                                         connectivity);
}

}  // namespace cpcsam
