// Semi-supervised training loop with cross prompting and prompt consistency.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcsam/checkpoint.hpp"
#include "cpcsam/config.hpp"
#include "cpcsam/cross_prompting.hpp"
#include "cpcsam/data_io.hpp"
#include "cpcsam/evaluation.hpp"
#include "cpcsam/losses.hpp"
#include "cpcsam/model.hpp"
#include "cpcsam/optim.hpp"
#include "cpcsam/rng.hpp"

namespace cpcsam {

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDraw {
  double angle_degrees = 0.0;
  bool hflip = false;
  bool vflip = false;
};

inline AugmentDraw draw_augment(std::mt19937_64& rng, double max_degrees = 20.0, bool flips = true) {
  AugmentDraw d;
  std::uniform_real_distribution<double> angle(-max_degrees, max_degrees);
  std::bernoulli_distribution coin(0.5);
  d.angle_degrees = max_degrees > 0.0 ? angle(rng) : 0.0;
  if (flips) {
    d.hflip = coin(rng);
    d.vflip = coin(rng);
  }
  return d;
}

namespace detail {

template <class Grid, class Sampler>
Grid transform_grid(const Grid& src, const AugmentDraw& d, Sampler sample) {
  Grid out = src;
  const int h = src.height, w = src.width;
  const double theta = d.angle_degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      // Output pixel -> flipped coordinates -> inverse rotation into the source.
      const double fy = d.vflip ? h - 1 - y : y;
      const double fx = d.hflip ? w - 1 - x : x;
      const double dy = fy - cy, dx = fx - cx;
      const double sy = cy + c * dy - s * dx;
      const double sx = cx + s * dy + c * dx;
      out.at(y, x) = sample(src, sy, sx);
    }
  return out;
}

}  // namespace detail

// Rotation about the image center then flips; bilinear for the image, nearest
// for the label, zero outside the source.
inline ImageSample apply_augment(const ImageSample& sample, const AugmentDraw& d) {
  if (d.angle_degrees == 0.0 && !d.hflip && !d.vflip) return sample;
  ImageSample out = sample;
  out.image = detail::transform_grid(sample.image, d, [](const Image& img, double y, double x) {
    if (y < -0.5 || x < -0.5 || y > img.height - 0.5 || x > img.width - 0.5) return 0.0;
    const double cy = std::clamp(y, 0.0, img.height - 1.0), cx = std::clamp(x, 0.0, img.width - 1.0);
    const int y0 = static_cast<int>(std::floor(cy)), x0 = static_cast<int>(std::floor(cx));
    const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
    const double wy = cy - y0, wx = cx - x0;
    const double top = img.at(y0, x0) * (1 - wx) + img.at(y0, x1) * wx;
    const double bot = img.at(y1, x0) * (1 - wx) + img.at(y1, x1) * wx;
    return top * (1 - wy) + bot * wy;
  });
  if (sample.label)
    out.label = detail::transform_grid(*sample.label, d, [](const LabelMap& lbl, double y, double x) {
      const int ry = static_cast<int>(std::lround(y)), rx = static_cast<int>(std::lround(x));
      if (ry < 0 || rx < 0 || ry >= lbl.height || rx >= lbl.width) return 0;
      return lbl.at(ry, rx);
    });
  return out;
}

inline ImageSample augment(const ImageSample& sample, std::mt19937_64& rng, double max_degrees = 20.0,
                           bool flips = true) {
  return apply_augment(sample, draw_augment(rng, max_degrees, flips));
}

// ---------------------------------------------------------------------------
// Data streams and batches

// Endless index stream over [0, n); reshuffles at the start of every pass.
class CyclingStream {
 public:
  CyclingStream() = default;
  CyclingStream(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = order_.size();
  }

  bool empty() const { return order_.empty(); }
  std::size_t size() const { return order_.size(); }

  std::size_t next() {
    if (order_.empty()) throw std::logic_error("CyclingStream: empty stream");
    if (pos_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
      ++passes_;
    }
    return order_[pos_++];
  }

  long long passes() const { return passes_; }

  json to_json() const {
    return {{"order", order_}, {"pos", pos_}, {"passes", passes_}, {"rng", serialize_rng(rng_)}};
  }
  static CyclingStream from_json(const json& j) {
    CyclingStream s;
    s.order_ = j.at("order").get<std::vector<std::size_t>>();
    s.pos_ = j.at("pos").get<std::size_t>();
    s.passes_ = j.at("passes").get<long long>();
    s.rng_ = deserialize_rng(j.at("rng").get<std::string>());
    return s;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  long long passes_ = 0;
};

struct Batch {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

inline Batch compose_batch(CyclingStream& labeled, CyclingStream& unlabeled, const TrainConfig& cfg) {
  if (labeled.empty()) throw std::invalid_argument("compose_batch: labeled set is empty");
  Batch b;
  const int n_l = cfg.labeled_per_batch();
  const int n_u = cfg.unlabeled_per_batch();
  if (n_u > 0 && unlabeled.empty()) throw std::invalid_argument("compose_batch: unlabeled set is empty");
  for (int i = 0; i < n_l; ++i) b.labeled.push_back(labeled.next());
  for (int i = 0; i < n_u; ++i) b.unlabeled.push_back(unlabeled.next());
  return b;
}

// Preprocessed samples at model resolution. Unlabeled samples carry no label.
struct TrainingData {
  std::vector<ImageSample> labeled;
  std::vector<ImageSample> unlabeled;
  std::vector<ImageSample> val;
};

inline TrainingData load_training_data(const Manifest& manifest, const RunConfig& cfg) {
  TrainingData d;
  const int h = cfg.model.height, w = cfg.model.width;
  for (const auto& id : manifest.split.labeled_ids) d.labeled.push_back(preprocess(load_sample(manifest, id), h, w));
  if (!cfg.train.ablation.disable_unlabeled)
    for (const auto& id : manifest.split.unlabeled_ids) {
      ImageSample s = preprocess(load_sample(manifest, id), h, w);
      s.label.reset();
      d.unlabeled.push_back(std::move(s));
    }
  for (const auto& id : manifest.split.by_name(cfg.data.val_split)) {
    ImageSample s = preprocess(load_sample(manifest, id), h, w);
    if (!s.label) throw DataError("validation sample " + id + " has no label");
    d.val.push_back(std::move(s));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Losses for one batch

struct StepLosses {
  Var total;
  Var l_s;
  Var l_cross;
  Var l_c;
  int n_masked = 0;
  std::vector<double> labeled_losses;    // per-sample L_s
  std::vector<double> unlabeled_cross;   // per-sample L_cross
  std::vector<double> unlabeled_pcr;     // per-sample L_c
};

namespace detail {

inline Var mean_of(const std::vector<Var>& terms) {
  if (terms.empty()) return Var::zeros(1, 1);
  return ag::weighted_sum(terms, std::vector<double>(terms.size(), 1.0 / static_cast<double>(terms.size())));
}

}  // namespace detail

// Supervised composite for one labeled sample.
inline Var labeled_sample_loss(const PromptableSegmenter& model, const RunConfig& cfg, const ImageSample& s,
                               std::uint64_t prompt_seed) {
  const auto& mc = model.config();
  const auto& a = cfg.train.ablation;
  const LossConfig loss = cfg.effective_loss();
  const ProbMap y = one_hot(s.label.value().labels, mc.height, mc.width, mc.num_classes);
  const Var features = model.encode(s.image);
  if (a.vanilla_cps) return supervised_loss(unprompted_all(model, features), {}, y, loss);

  const PointBudget budget = a.budget();
  std::vector<BranchPrediction> preds;
  if (cfg.train.labeled_prompts == PromptSource::ground_truth) {
    const auto& lbl = *s.label;
    const auto p = unprompted_all(model, features);
    const auto sets = multi_point_prompts_from_labels(lbl.labels, lbl.height, lbl.width, mc.num_classes,
                                                      budget.n_center, budget.n_random, prompt_seed);
    for (int b = 1; b <= model.num_decoders(); ++b)
      preds.push_back(prompted_branch(model, features, b, p[static_cast<std::size_t>(b - 1)], sets, budget.n_center));
  } else {
    preds = forward_from_features(model, features, budget, prompt_seed);
  }
  std::vector<Var> unprompted, prompted;
  for (const auto& bp : preds) {
    unprompted.push_back(bp.unprompted);
    if (!bp.degenerate) prompted.insert(prompted.end(), bp.prompted.begin(), bp.prompted.end());
  }
  // Normalized so that one center and one random map per branch has weight 1.
  return supervised_loss(unprompted, prompted, y, loss, 2.0 / static_cast<double>(budget.total()));
}

struct UnlabeledLosses {
  Var cross;
  Var pcr;
  bool masked = false;
};

inline UnlabeledLosses unlabeled_sample_loss(const PromptableSegmenter& model, const RunConfig& cfg,
                                             const ImageSample& s, std::uint64_t prompt_seed) {
  const auto& mc = model.config();
  const auto& a = cfg.train.ablation;
  const LossConfig loss = cfg.effective_loss();
  const MapShape shape{mc.height, mc.width};
  const Var features = model.encode(s.image);
  UnlabeledLosses out;
  if (a.vanilla_cps) {
    const auto p = unprompted_all(model, features);
    const Var& p1 = p.front();
    const Var& p2 = p.back();
    out.cross = cross_prompting_loss(p1, p2, p1, p2, shape, false, loss);
    if (p.size() == 1) out.cross = ag::scale(out.cross, 0.5);
    out.pcr = Var::zeros(1, 1);
    return out;
  }
  const auto preds = forward_from_features(model, features, a.budget(), prompt_seed);
  const BranchPrediction& b1 = preds.front();
  const BranchPrediction& b2 = preds.back();
  out.masked = b1.degenerate || b2.degenerate;
  out.cross = cross_prompting_loss(b1.unprompted, b2.unprompted, b1.ensemble, b2.ensemble, shape, out.masked, loss,
                                   b1.prompted_classes, b2.prompted_classes);
  if (a.disable_pcr) {
    out.pcr = Var::zeros(1, 1);
  } else {
    out.pcr = pcr_loss_multi(b1.randoms(), b1.ensemble, b2.randoms(), b2.ensemble, shape, out.masked, loss,
                             b1.prompted_classes, b2.prompted_classes);
  }
  // One decoder appears on both sides of the symmetric losses; count it once.
  if (preds.size() == 1) {
    out.cross = ag::scale(out.cross, 0.5);
    out.pcr = ag::scale(out.pcr, 0.5);
  }
  return out;
}

inline StepLosses compute_step_losses(const PromptableSegmenter& model, const RunConfig& cfg,
                                      const std::vector<ImageSample>& labeled,
                                      const std::vector<std::uint64_t>& labeled_seeds,
                                      const std::vector<ImageSample>& unlabeled,
                                      const std::vector<std::uint64_t>& unlabeled_seeds) {
  if (labeled.size() != labeled_seeds.size() || unlabeled.size() != unlabeled_seeds.size())
    throw std::invalid_argument("compute_step_losses: one prompt seed per sample is required");
  StepLosses out;
  std::vector<Var> ls, lcross, lc;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    ls.push_back(labeled_sample_loss(model, cfg, labeled[i], labeled_seeds[i]));
    out.labeled_losses.push_back(ls.back().item());
  }
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    auto u = unlabeled_sample_loss(model, cfg, unlabeled[i], unlabeled_seeds[i]);
    out.n_masked += u.masked;
    lcross.push_back(u.cross);
    lc.push_back(u.pcr);
    out.unlabeled_cross.push_back(u.cross.item());
    out.unlabeled_pcr.push_back(u.pcr.item());
  }
  out.l_s = detail::mean_of(ls);
  out.l_cross = detail::mean_of(lcross);
  out.l_c = detail::mean_of(lc);
  const LossConfig loss = cfg.effective_loss();
  const double values[] = {out.l_s.item(), out.l_cross.item(), out.l_c.item()};
  if (std::all_of(std::begin(values), std::end(values), [](double v) { return std::isfinite(v); }))
    out.total = total_loss(out.l_s, out.l_cross, out.l_c, loss);
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

struct StepRecord {
  int iteration = 0;  // 1-based index of the completed step
  double lr = 0.0;
  double l_s = 0.0;
  double l_cross = 0.0;
  double l_c = 0.0;
  double l_total = 0.0;
  int n_labeled = 0;
  int n_unlabeled = 0;
  int n_masked = 0;
  std::optional<double> val_dsc;
};

inline json to_json(const StepRecord& r) {
  return {{"iteration", r.iteration}, {"lr", r.lr},           {"l_s", r.l_s},
          {"l_cross", r.l_cross},     {"l_c", r.l_c},         {"l_total", r.l_total},
          {"n_labeled", r.n_labeled}, {"n_unlabeled", r.n_unlabeled}, {"n_masked", r.n_masked},
          {"val_dsc", r.val_dsc ? json(*r.val_dsc) : json(nullptr)}};
}

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const json& diagnostics() const { return diagnostics_; }

 private:
  json diagnostics_;
};

inline int steps_per_epoch(const TrainConfig& t, const TrainingData& data) {
  const std::size_t n = data.labeled.size() + data.unlabeled.size();
  return std::max(1, static_cast<int>((n + static_cast<std::size_t>(t.batch_size) - 1) / t.batch_size));
}

// Schedule with epoch counts converted to iterations.
inline ScheduleConfig resolved_schedule(const TrainConfig& t, const TrainingData& data) {
  ScheduleConfig s = t.schedule();
  if (t.iteration_unit == IterationUnit::epochs) {
    const int k = steps_per_epoch(t, data);
    s.total_iterations *= k;
    s.warmup_iterations *= k;
  }
  return s;
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, TrainingData data)
      : cfg_(cfg), model_(cfg.effective_model()), data_(std::move(data)) {
    validate(cfg_);
    model_.apply_lora(cfg_.lora);
    init_common();
    const auto seed = cfg_.train.seed;
    labeled_stream_ = CyclingStream(data_.labeled.size(), stream_seed(seed, "data.labeled"));
    unlabeled_stream_ = CyclingStream(data_.unlabeled.size(), stream_seed(seed, "data.unlabeled"));
    augment_rng_.seed(stream_seed(seed, "augment"));
    prompt_rng_.seed(stream_seed(seed, "prompt"));
  }

  // Resumes from a checkpoint written with training state.
  Trainer(Checkpoint ckpt, TrainingData data)
      : cfg_(std::move(ckpt.config)), model_(std::move(ckpt.model)), data_(std::move(data)) {
    if (!ckpt.train_state || !ckpt.optimizer) throw CheckpointError("checkpoint carries no training state");
    init_common();
    const json& st = *ckpt.train_state;
    iteration_ = st.at("iteration").get<int>();
    labeled_stream_ = CyclingStream::from_json(st.at("labeled_stream"));
    unlabeled_stream_ = CyclingStream::from_json(st.at("unlabeled_stream"));
    augment_rng_ = deserialize_rng(st.at("augment_rng").get<std::string>());
    prompt_rng_ = deserialize_rng(st.at("prompt_rng").get<std::string>());
    if (!st.at("best_val_dsc").is_null()) best_val_ = st.at("best_val_dsc").get<double>();
    best_iteration_ = st.at("best_iteration").get<int>();
    if (labeled_stream_.size() != data_.labeled.size() || unlabeled_stream_.size() != data_.unlabeled.size())
      throw CheckpointError("checkpoint training state does not match the dataset");
    auto& om = *ckpt.optimizer;
    optimizer_.restore(om.steps, std::move(om.m), std::move(om.v));
  }

  const RunConfig& config() const { return cfg_; }
  const PromptableSegmenter& model() const { return model_; }
  PromptableSegmenter& model() { return model_; }
  const TrainingData& data() const { return data_; }
  const ScheduleConfig& schedule() const { return schedule_; }
  int iteration() const { return iteration_; }
  bool finished() const { return iteration_ >= schedule_.total_iterations; }
  std::optional<double> best_val_dsc() const { return best_val_; }
  int best_iteration() const { return best_iteration_; }

  StepRecord train_step() {
    if (finished()) throw std::logic_error("train_step: schedule exhausted");
    const Batch batch = compose_batch(labeled_stream_, unlabeled_stream_, cfg_.train);
    std::vector<ImageSample> labeled, unlabeled;
    std::vector<std::uint64_t> l_seeds, u_seeds;
    for (auto i : batch.labeled) labeled.push_back(maybe_augment(data_.labeled[i]));
    for (auto i : batch.unlabeled) unlabeled.push_back(maybe_augment(data_.unlabeled[i]));
    for (std::size_t i = 0; i < labeled.size(); ++i) l_seeds.push_back(prompt_rng_());
    for (std::size_t i = 0; i < unlabeled.size(); ++i) u_seeds.push_back(prompt_rng_());

    const int k = iteration_ + 1;
    const double lr = lr_schedule(k, schedule_);
    StepLosses losses = compute_step_losses(model_, cfg_, labeled, l_seeds, unlabeled, u_seeds);
    if (!losses.total.defined()) throw non_finite(k, lr, labeled, unlabeled, losses);

    model_.zero_grad();
    ag::backward(losses.total);
    optimizer_.step(model_, lr);
    model_.zero_grad();
    iteration_ = k;

    StepRecord r;
    r.iteration = k;
    r.lr = lr;
    r.l_s = losses.l_s.item();
    r.l_cross = losses.l_cross.item();
    r.l_c = losses.l_c.item();
    r.l_total = losses.total.item();
    r.n_labeled = static_cast<int>(labeled.size());
    r.n_unlabeled = static_cast<int>(unlabeled.size());
    r.n_masked = losses.n_masked;
    return r;
  }

  // Mean validation DSC; updates the best record. nullopt without a val set.
  std::optional<double> validate_now() {
    if (data_.val.empty()) return std::nullopt;
    std::vector<ImageSample> subset = data_.val;
    if (cfg_.train.max_val_samples > 0 && subset.size() > static_cast<std::size_t>(cfg_.train.max_val_samples))
      subset.resize(static_cast<std::size_t>(cfg_.train.max_val_samples));
    const double v = mean_dsc(model_, subset);
    if (!best_val_ || v > *best_val_) {
      best_val_ = v;
      best_iteration_ = iteration_;
    }
    return v;
  }

  json train_state() const {
    return {{"iteration", iteration_},
            {"labeled_stream", labeled_stream_.to_json()},
            {"unlabeled_stream", unlabeled_stream_.to_json()},
            {"augment_rng", serialize_rng(augment_rng_)},
            {"prompt_rng", serialize_rng(prompt_rng_)},
            {"best_val_dsc", best_val_ ? json(*best_val_) : json(nullptr)},
            {"best_iteration", best_iteration_}};
  }

  OptimizerMoments optimizer_moments() const {
    return {optimizer_.steps(), optimizer_.first_moments(), optimizer_.second_moments()};
  }

  void save(const std::filesystem::path& path, bool with_state = true) const {
    if (with_state) save_checkpoint(path, model_, cfg_, train_state(), optimizer_moments());
    else save_checkpoint(path, model_, cfg_);
  }

 private:
  void init_common() {
    validate(cfg_);
    if (data_.labeled.empty()) throw std::invalid_argument("training requires at least one labeled sample");
    if (cfg_.train.unlabeled_per_batch() > 0 && data_.unlabeled.empty())
      throw std::invalid_argument("training requires unlabeled samples unless ablation.disable_unlabeled is set");
    for (const auto& s : data_.labeled)
      if (!s.label) throw std::invalid_argument("labeled sample " + s.id + " has no label");
    schedule_ = resolved_schedule(cfg_.train, data_);
    optimizer_ = AdamW(model_, cfg_.train.adamw());
  }

  ImageSample maybe_augment(const ImageSample& s) {
    if (!cfg_.train.augment) return s;
    return augment(s, augment_rng_, cfg_.train.rotation_degrees, cfg_.train.flips);
  }

  TrainingError non_finite(int k, double lr, const std::vector<ImageSample>& labeled,
                           const std::vector<ImageSample>& unlabeled, const StepLosses& losses) const {
    json ids_l = json::array(), ids_u = json::array();
    for (const auto& s : labeled) ids_l.push_back(s.id);
    for (const auto& s : unlabeled) ids_u.push_back(s.id);
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(std::to_string(v)); };
    json per_l = json::array(), per_c = json::array(), per_p = json::array();
    for (double v : losses.labeled_losses) per_l.push_back(num(v));
    for (double v : losses.unlabeled_cross) per_c.push_back(num(v));
    for (double v : losses.unlabeled_pcr) per_p.push_back(num(v));
    json dump = {{"iteration", k},
                 {"lr", lr},
                 {"labeled_ids", ids_l},
                 {"unlabeled_ids", ids_u},
                 {"l_s", num(losses.l_s.item())},
                 {"l_cross", num(losses.l_cross.item())},
                 {"l_c", num(losses.l_c.item())},
                 {"labeled_losses", per_l},
                 {"unlabeled_cross", per_c},
                 {"unlabeled_pcr", per_p}};
    return TrainingError("non-finite loss at iteration " + std::to_string(k), std::move(dump));
  }

  RunConfig cfg_;
  PromptableSegmenter model_;
  TrainingData data_;
  ScheduleConfig schedule_;
  AdamW optimizer_;
  CyclingStream labeled_stream_;
  CyclingStream unlabeled_stream_;
  std::mt19937_64 augment_rng_;
  std::mt19937_64 prompt_rng_;
  int iteration_ = 0;
  std::optional<double> best_val_;
  int best_iteration_ = 0;
};

// ---------------------------------------------------------------------------
// Full run with logging and checkpoints under `out_dir`:
//   checkpoints/{latest,best,final}.ckpt, logs/train.ndjson, config.json

struct TrainingOptions {
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainingResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::vector<StepRecord> log;
  std::optional<double> best_val_dsc;
  int best_iteration = 0;
};

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& out) { return out / "checkpoints"; }
inline std::filesystem::path log_path(const std::filesystem::path& out) { return out / "logs" / "train.ndjson"; }

inline TrainingResult run_training(const RunConfig& cfg, TrainingData data, const std::filesystem::path& out_dir,
                                   const TrainingOptions& opts = {}) {
  namespace fs = std::filesystem;
  std::optional<Trainer> trainer;
  if (opts.resume_from) trainer.emplace(load_checkpoint(*opts.resume_from), std::move(data));
  else trainer.emplace(cfg, std::move(data));

  fs::create_directories(checkpoint_dir(out_dir));
  fs::create_directories(out_dir / "logs");
  {
    std::ofstream c(out_dir / "config.json");
    if (!c) throw CheckpointError("cannot write " + (out_dir / "config.json").string());
    c << to_json(trainer->config()).dump(2) << "\n";
  }

  // On resume keep the log lines up to the restored iteration.
  std::vector<std::string> kept;
  if (opts.resume_from) {
    std::ifstream old(log_path(out_dir));
    for (std::string line; std::getline(old, line);)
      if (!line.empty() && json::parse(line).at("iteration").get<int>() <= trainer->iteration()) kept.push_back(line);
  }
  std::ofstream log(log_path(out_dir), std::ios::trunc);
  if (!log) throw CheckpointError("cannot write " + log_path(out_dir).string());
  for (const auto& line : kept) log << line << "\n";

  TrainingResult result;
  const fs::path best = checkpoint_dir(out_dir) / "best.ckpt";
  const fs::path latest = checkpoint_dir(out_dir) / "latest.ckpt";
  const int val_every = trainer->config().train.val_every;
  while (!trainer->finished()) {
    StepRecord r;
    try {
      r = trainer->train_step();
    } catch (const TrainingError& e) {
      std::ofstream dump(out_dir / "logs" / "nonfinite_dump.json");
      dump << e.diagnostics().dump(2) << "\n";
      throw;
    }
    const bool last = trainer->finished();
    if ((val_every > 0 && r.iteration % val_every == 0) || last) {
      const auto before = trainer->best_val_dsc();
      r.val_dsc = trainer->validate_now();
      if (r.val_dsc && (!before || *trainer->best_val_dsc() > *before)) trainer->save(best);
      trainer->save(latest);
    }
    log << to_json(r).dump() << "\n";
    log.flush();
    if (!log) throw CheckpointError("failed writing training log");
    if (opts.on_step) opts.on_step(r);
    result.log.push_back(r);
  }
  result.final_checkpoint = checkpoint_dir(out_dir) / "final.ckpt";
  trainer->save(result.final_checkpoint);
  if (!fs::exists(best)) trainer->save(best);
  result.best_checkpoint = best;
  result.best_val_dsc = trainer->best_val_dsc();
  result.best_iteration = trainer->best_iteration();
  return result;
}

inline std::vector<StepRecord> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open log " + path.string());
  std::vector<StepRecord> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    StepRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.lr = j.at("lr").get<double>();
    r.l_s = j.at("l_s").get<double>();
    r.l_cross = j.at("l_cross").get<double>();
    r.l_c = j.at("l_c").get<double>();
    r.l_total = j.at("l_total").get<double>();
    r.n_labeled = j.at("n_labeled").get<int>();
    r.n_unlabeled = j.at("n_unlabeled").get<int>();
    r.n_masked = j.at("n_masked").get<int>();
    if (!j.at("val_dsc").is_null()) r.val_dsc = j.at("val_dsc").get<double>();
    out.push_back(r);
  }
  return out;
}

}  // namespace cpcsam
