// Cross-prompted forward pass: each branch's unprompted prediction yields
// point prompts for the other branch, whose prompted outputs are ensembled.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cpcsam/autograd.hpp"
#include "cpcsam/losses.hpp"
#include "cpcsam/model.hpp"
#include "cpcsam/prompt_geometry.hpp"

namespace cpcsam {

struct PointBudget {
  int n_center = 1;
  int n_random = 1;

  int total() const { return n_center + n_random; }
  void validate() const {
    if (n_center < 0 || n_center > 1) throw std::invalid_argument("num_center_points must be 0 or 1");
    if (n_random < 0) throw std::invalid_argument("num_random_points must be non-negative");
    if (total() < 1) throw std::invalid_argument("at least one center or random point is required");
  }
};

struct BranchPrediction {
  int branch_id = 1;
  Var unprompted;
  // Center-prompted map first (when n_center == 1), then random-prompted maps.
  std::vector<Var> prompted;
  int n_center = 0;
  Var ensemble;
  bool degenerate = false;
  std::vector<PromptSet> prompts;
  // prompted_classes[k]: class k received a point in any prompt set.
  std::vector<bool> prompted_classes;

  bool has_center() const { return n_center == 1; }
  const Var& center() const {
    if (!has_center()) throw std::logic_error("BranchPrediction: no center-prompted map");
    return prompted.front();
  }
  std::vector<Var> randoms() const { return {prompted.begin() + n_center, prompted.end()}; }
  const Var& random(std::size_t i = 0) const { return prompted.at(static_cast<std::size_t>(n_center) + i); }
};

// Seed for prompts drawn from `source_branch`'s prediction.
inline std::uint64_t direction_seed(std::uint64_t seed, int source_branch) {
  return derive_seed(seed, static_cast<std::uint64_t>(source_branch));
}

// Sum then scale by 1/n; for two maps this is exactly (a + b) / 2.
inline Var ensemble_of(const std::vector<Var>& maps) {
  if (maps.empty()) throw std::invalid_argument("ensemble_of: no maps");
  Var acc = maps.front();
  for (std::size_t i = 1; i < maps.size(); ++i) acc = ag::add(acc, maps[i]);
  return ag::scale(acc, 1.0 / static_cast<double>(maps.size()));
}

// Decodes `branch` once per prompt set. When no set carries a point the
// unprompted map stands in for every prompted map and the result is flagged.
inline BranchPrediction prompted_branch(const PromptableSegmenter& model, const Var& features, int branch,
                                        const Var& unprompted, std::vector<PromptSet> sets, int n_center) {
  BranchPrediction out;
  out.branch_id = branch;
  out.unprompted = unprompted;
  out.n_center = n_center;
  out.prompted_classes.assign(static_cast<std::size_t>(model.num_classes()), false);
  bool any = false;
  for (const auto& s : sets) {
    any = any || !s.empty();
    for (const auto& p : s.points) out.prompted_classes[static_cast<std::size_t>(p.class_id)] = true;
  }
  out.degenerate = !any;
  for (const auto& s : sets) {
    if (out.degenerate) out.prompted.push_back(unprompted);
    else out.prompted.push_back(model.decode(branch, features, model.prompt_encode(s)));
  }
  out.prompts = std::move(sets);
  out.ensemble = ensemble_of(out.prompted);
  return out;
}

inline std::vector<Var> unprompted_all(const PromptableSegmenter& model, const Var& features) {
  std::vector<Var> maps;
  const PromptEmbedding none = model.prompt_encode();
  for (int b = 1; b <= model.num_decoders(); ++b) maps.push_back(model.decode(b, features, none));
  return maps;
}

// Prompts for branch t come from the other branch's unprompted map (from its
// own map in single-branch models).
inline std::vector<BranchPrediction> forward_from_features(const PromptableSegmenter& model, const Var& features,
                                                           PointBudget budget, std::uint64_t seed) {
  budget.validate();
  const auto& cfg = model.config();
  const std::vector<Var> p = unprompted_all(model, features);
  std::vector<BranchPrediction> out;
  for (int t = 1; t <= model.num_decoders(); ++t) {
    const int source = model.num_decoders() == 2 ? 3 - t : t;
    const ProbMap source_map = as_map(p[static_cast<std::size_t>(source - 1)], cfg.height, cfg.width);
    auto sets = multi_point_prompts(source_map, budget.n_center, budget.n_random, direction_seed(seed, source));
    for (auto& s : sets) s.source_branch = source;
    out.push_back(prompted_branch(model, features, t, p[static_cast<std::size_t>(t - 1)], std::move(sets),
                                  budget.n_center));
  }
  return out;
}

inline std::vector<BranchPrediction> forward_all(const PromptableSegmenter& model, const Image& image,
                                                 PointBudget budget, std::uint64_t seed) {
  return forward_from_features(model, model.encode(image), budget, seed);
}

}  // namespace cpcsam
