// Desk-scale semi-supervised comparison on synthetic data.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cpcsam/cpcsam.hpp"

namespace desk {

using namespace cpcsam;

struct Setup {
  int n_train = 200;
  int n_labeled = 5;
  int n_val = 20;
  int n_test = 60;
  int resolution = 32;
  int classes = 2;
  double noise = 0.06;
  int max_distractors = 2;
  std::uint64_t data_seed = 2024;
  int iterations = 2000;
  int warmup = 1000;
  double max_lr = 1e-3;
  int val_every = 200;
};

struct Data {
  TrainingData train;
  std::vector<ImageSample> test;
};

inline Data make_data(const Setup& s) {
  SyntheticOptions opt;
  opt.n_samples = s.n_train + s.n_val + s.n_test;
  opt.resolution = s.resolution;
  opt.num_classes = s.classes;
  opt.seed = s.data_seed;
  opt.noise = s.noise;
  opt.max_distractors = s.max_distractors;
  const auto all = generate_synthetic(opt);
  Data d;
  for (int i = 0; i < opt.n_samples; ++i) {
    ImageSample x = preprocess(all[static_cast<std::size_t>(i)], s.resolution, s.resolution);
    if (i < s.n_labeled) {
      d.train.labeled.push_back(std::move(x));
    } else if (i < s.n_train) {
      x.label.reset();
      d.train.unlabeled.push_back(std::move(x));
    } else if (i < s.n_train + s.n_val) {
      d.train.val.push_back(std::move(x));
    } else {
      d.test.push_back(std::move(x));
    }
  }
  return d;
}

enum class Variant { full, cross_only, vanilla, labeled_only };

inline const char* name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::cross_only: return "cross_prompting_only";
    case Variant::vanilla: return "vanilla_cps";
    case Variant::labeled_only: return "labeled_only";
  }
  return "?";
}

inline RunConfig config_for(Variant v, std::uint64_t seed, const Setup& s) {
  RunConfig c;
  c.model.num_classes = s.classes;
  c.model.height = c.model.width = s.resolution;
  c.model.patch = toy_patch_size(s.resolution, s.resolution);
  c.model.seed = seed;
  c.train.seed = seed;
  c.train.total_iterations = s.iterations;
  c.train.warmup_iterations = s.warmup;
  c.train.max_lr = s.max_lr;
  c.train.val_every = s.val_every;
  auto& a = c.train.ablation;
  switch (v) {
    case Variant::full: break;
    case Variant::cross_only:
      a.num_random_points = 0;
      a.disable_pcr = true;
      break;
    case Variant::vanilla: a.vanilla_cps = true; break;
    case Variant::labeled_only: a.disable_unlabeled = true; break;
  }
  return c;
}

struct Outcome {
  double test_dsc = 0.0;
  double best_val = 0.0;
  int best_iteration = 0;
  PromptableSegmenter model;  // best-validation weights
};

// Trains one variant and scores the best-validation weights on the test set.
inline Outcome run(Variant v, std::uint64_t seed, const Setup& s, const Data& d) {
  Trainer tr(config_for(v, seed, s), d.train);
  std::optional<PromptableSegmenter> best;
  while (!tr.finished()) {
    const StepRecord r = tr.train_step();
    if (r.iteration % s.val_every == 0 || tr.finished()) {
      const auto prev = tr.best_iteration();
      tr.validate_now();
      if (!best || tr.best_iteration() != prev || tr.best_iteration() == r.iteration) {
        if (tr.best_iteration() == r.iteration) best = tr.model().clone();
      }
    }
  }
  Outcome o{mean_dsc(*best, d.test), *tr.best_val_dsc(), tr.best_iteration(), std::move(*best)};
  return o;
}

}  // namespace desk
