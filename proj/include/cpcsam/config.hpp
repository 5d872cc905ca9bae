// Run configuration: model, LoRA, loss, training and data settings with a
// JSON representation. Values resolve as command-line flag > file > default.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcsam/cross_prompting.hpp"
#include "cpcsam/losses.hpp"
#include "cpcsam/model.hpp"
#include "cpcsam/optim.hpp"

namespace cpcsam {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Ablation {
  bool disable_unlabeled = false;
  bool vanilla_cps = false;
  bool disable_pcr = false;
  bool single_branch = false;
  int num_center_points = 1;
  int num_random_points = 1;

  PointBudget budget() const { return {num_center_points, num_random_points}; }
};

enum class IterationUnit { iterations, epochs };
enum class PromptSource { ground_truth, prediction };

struct TrainConfig {
  int total_iterations = 10000;
  int warmup_iterations = 5000;
  IterationUnit iteration_unit = IterationUnit::iterations;
  double max_lr = 1e-3;
  double final_lr_ratio = 0.01;
  int batch_size = 6;
  double labeled_fraction = 0.5;
  bool augment = true;
  double rotation_degrees = 20.0;
  bool flips = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int val_every = 200;
  int max_val_samples = 0;  // 0 = all
  // Where labeled samples take their prompts from during supervision.
  PromptSource labeled_prompts = PromptSource::ground_truth;
  Ablation ablation;

  int labeled_per_batch() const {
    if (ablation.disable_unlabeled) return batch_size;
    return static_cast<int>(static_cast<double>(batch_size) * labeled_fraction);
  }
  int unlabeled_per_batch() const { return batch_size - labeled_per_batch(); }
  ScheduleConfig schedule() const { return {total_iterations, warmup_iterations, max_lr, final_lr_ratio}; }
  AdamWConfig adamw() const { return {beta1, beta2, adam_eps, weight_decay}; }
};

struct DataConfig {
  std::string manifest;
  std::string val_split = "val";
};

struct RunConfig {
  ModelConfig model;
  LoraConfig lora;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;

  // Model settings after applying the ablation flags.
  ModelConfig effective_model() const {
    ModelConfig m = model;
    m.num_decoders = train.ablation.single_branch ? 1 : 2;
    return m;
  }

  // Loss weights after applying the ablation flags.
  LossConfig effective_loss() const {
    LossConfig l = loss;
    if (train.ablation.disable_pcr || train.ablation.vanilla_cps) l.lambda2 = 0.0;
    if (train.ablation.disable_unlabeled) l.lambda1 = l.lambda2 = 0.0;
    return l;
  }
};

// All validation problems, each naming its field. Empty when valid.
inline std::vector<std::string> validation_errors(const RunConfig& c) {
  std::vector<std::string> out;
  try {
    c.effective_model().validate();
  } catch (const std::invalid_argument& e) {
    out.emplace_back(e.what());
  }
  if (c.lora.rank <= 0) out.emplace_back("lora.rank must be positive");
  if (!(c.lora.scaling > 0.0)) out.emplace_back("lora.scaling must be positive");
  if (!(c.lora.init_std >= 0.0)) out.emplace_back("lora.init_std must be non-negative");
  if (auto e = c.loss.validate(); !e.empty()) out.push_back(e);
  const auto& t = c.train;
  if (t.total_iterations < 0) out.emplace_back("train.total_iterations must be non-negative");
  if (t.warmup_iterations < 0 || t.warmup_iterations > t.total_iterations)
    out.emplace_back("train.warmup_iterations must lie in [0, train.total_iterations]");
  if (!(t.max_lr > 0.0)) out.emplace_back("train.max_lr must be positive");
  if (!(t.final_lr_ratio > 0.0 && t.final_lr_ratio <= 1.0)) out.emplace_back("train.final_lr_ratio must lie in (0, 1]");
  if (t.batch_size < 1) out.emplace_back("train.batch_size must be positive");
  if (!(t.labeled_fraction > 0.0 && t.labeled_fraction <= 1.0))
    out.emplace_back("train.labeled_fraction must lie in (0, 1]");
  if (t.labeled_fraction == 0.5 && t.batch_size % 2 != 0 && !t.ablation.disable_unlabeled)
    out.emplace_back("train.batch_size must be even when train.labeled_fraction is 0.5");
  if (t.batch_size >= 1 && t.labeled_per_batch() < 1) out.emplace_back("train.labeled_fraction leaves no labeled sample");
  if (!(t.rotation_degrees >= 0.0 && t.rotation_degrees <= 180.0))
    out.emplace_back("train.rotation_degrees must lie in [0, 180]");
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) out.emplace_back("train.beta1 must lie in [0, 1)");
  if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) out.emplace_back("train.beta2 must lie in [0, 1)");
  if (!(t.adam_eps > 0.0)) out.emplace_back("train.adam_eps must be positive");
  if (!(t.weight_decay >= 0.0)) out.emplace_back("train.weight_decay must be non-negative");
  if (t.val_every < 0) out.emplace_back("train.val_every must be non-negative");
  if (t.max_val_samples < 0) out.emplace_back("train.max_val_samples must be non-negative");
  const auto& a = t.ablation;
  if (a.num_center_points < 0 || a.num_center_points > 1) out.emplace_back("ablation.num_center_points must be 0 or 1");
  if (a.num_random_points < 0) out.emplace_back("ablation.num_random_points must be non-negative");
  if (a.num_center_points + a.num_random_points < 1)
    out.emplace_back("ablation.num_center_points + ablation.num_random_points must be at least 1");
  return out;
}

inline void validate(const RunConfig& c) {
  const auto errors = validation_errors(c);
  if (errors.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& e : errors) msg += "\n  " + e;
  throw ConfigError(msg);
}

inline constexpr int kRunConfigVersion = 1;

inline json to_json(const LossMix& m) { return {{"dice", m.dice}, {"ce", m.ce}}; }

inline json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& a = t.ablation;
  return {
      {"schema", "cpcsam.run_config"},
      {"version", kRunConfigVersion},
      {"model",
       {{"num_classes", m.num_classes},
        {"height", m.height},
        {"width", m.width},
        {"patch", m.patch},
        {"channels", m.channels},
        {"dim", m.dim},
        {"depth", m.depth},
        {"heads", m.heads},
        {"mlp_ratio", m.mlp_ratio},
        {"min_decoder_dim", m.min_decoder_dim},
        {"seed", m.seed}}},
      {"lora", {{"rank", c.lora.rank}, {"scaling", c.lora.scaling}, {"init_std", c.lora.init_std}}},
      {"loss",
       {{"lambda1", c.loss.lambda1},
        {"lambda2", c.loss.lambda2},
        {"supervised_unprompted", to_json(c.loss.supervised_unprompted)},
        {"supervised_prompted", to_json(c.loss.supervised_prompted)},
        {"unsupervised", to_json(c.loss.unsupervised)},
        {"dice_eps", c.loss.dice_eps},
        {"pseudo_label", c.loss.pseudo_label == PseudoLabel::hard ? "hard" : "soft"}}},
      {"train",
       {{"total_iterations", t.total_iterations},
        {"warmup_iterations", t.warmup_iterations},
        {"iteration_unit", t.iteration_unit == IterationUnit::iterations ? "iterations" : "epochs"},
        {"max_lr", t.max_lr},
        {"final_lr_ratio", t.final_lr_ratio},
        {"batch_size", t.batch_size},
        {"labeled_fraction", t.labeled_fraction},
        {"augment", t.augment},
        {"rotation_degrees", t.rotation_degrees},
        {"flips", t.flips},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"weight_decay", t.weight_decay},
        {"seed", t.seed},
        {"val_every", t.val_every},
        {"max_val_samples", t.max_val_samples},
        {"labeled_prompts", t.labeled_prompts == PromptSource::ground_truth ? "ground_truth" : "prediction"}}},
      {"ablation",
       {{"disable_unlabeled", a.disable_unlabeled},
        {"vanilla_cps", a.vanilla_cps},
        {"disable_pcr", a.disable_pcr},
        {"single_branch", a.single_branch},
        {"num_center_points", a.num_center_points},
        {"num_random_points", a.num_random_points}}},
      {"data", {{"manifest", c.data.manifest}, {"val_split", c.data.val_split}}},
  };
}

namespace detail {

// Reads fields from one JSON object, collecting type errors and unknown keys.
class FieldReader {
 public:
  FieldReader(const json& root, std::string section, std::vector<std::string>& errors)
      : section_(std::move(section)), errors_(errors) {
    if (!root.contains(section_)) return;
    const json& node = root.at(section_);
    if (!node.is_object()) {
      errors_.push_back(section_ + " must be an object");
      return;
    }
    node_ = &node;
    for (const auto& [key, _] : node.items()) unseen_.push_back(key);
  }

  ~FieldReader() {
    for (const auto& key : unseen_) errors_.push_back("unknown field " + section_ + "." + key);
  }

  template <class T>
  void read(const std::string& key, T& out) {
    const json* v = take(key);
    if (!v) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) return fail(key, "a boolean");
      out = v->get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) return fail(key, "a string");
      out = v->get<std::string>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<long long>() < 0))
        return fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v->is_number_integer()) return fail(key, "an integer");
      out = v->get<T>();
    } else {
      if (!v->is_number()) return fail(key, "a number");
      out = v->get<T>();
    }
  }

  void read(const std::string& key, LossMix& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_object() || !v->contains("dice") || !v->contains("ce") || v->size() != 2 || !v->at("dice").is_number() ||
        !v->at("ce").is_number())
      return fail(key, "an object {dice, ce}");
    out = {v->at("dice").get<double>(), v->at("ce").get<double>()};
  }

  template <class E>
  void read_enum(const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& names) {
    const json* v = take(key);
    if (!v) return;
    if (v->is_string())
      for (const auto& [name, value] : names)
        if (v->get<std::string>() == name) {
          out = value;
          return;
        }
    std::string allowed;
    for (const auto& [name, _] : names) allowed += (allowed.empty() ? "" : " | ") + name;
    fail(key, "one of " + allowed);
  }

 private:
  const json* take(const std::string& key) {
    if (!node_ || !node_->contains(key)) return nullptr;
    std::erase(unseen_, key);
    return &node_->at(key);
  }
  void fail(const std::string& key, const std::string& what) {
    errors_.push_back(section_ + "." + key + " must be " + what);
  }

  std::string section_;
  std::vector<std::string>& errors_;
  const json* node_ = nullptr;
  std::vector<std::string> unseen_;
};

}  // namespace detail

// Parses and validates; missing fields keep their defaults.
inline RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::vector<std::string> errors;
  for (const auto& [key, _] : j.items()) {
    static const std::vector<std::string> known{"schema", "version", "model", "lora", "loss", "train", "ablation", "data"};
    if (std::find(known.begin(), known.end(), key) == known.end()) errors.push_back("unknown field " + key);
  }
  if (j.contains("version") && j.at("version") != kRunConfigVersion)
    errors.push_back("version must be " + std::to_string(kRunConfigVersion));
  RunConfig c;
  {
    detail::FieldReader r(j, "model", errors);
    auto& m = c.model;
    r.read("num_classes", m.num_classes);
    r.read("height", m.height);
    r.read("width", m.width);
    m.patch = toy_patch_size(std::max(m.height, 1), std::max(m.width, 1));
    r.read("patch", m.patch);
    r.read("channels", m.channels);
    r.read("dim", m.dim);
    r.read("depth", m.depth);
    r.read("heads", m.heads);
    r.read("mlp_ratio", m.mlp_ratio);
    r.read("min_decoder_dim", m.min_decoder_dim);
    r.read("seed", m.seed);
  }
  {
    detail::FieldReader r(j, "lora", errors);
    r.read("rank", c.lora.rank);
    r.read("scaling", c.lora.scaling);
    r.read("init_std", c.lora.init_std);
  }
  {
    detail::FieldReader r(j, "loss", errors);
    auto& l = c.loss;
    r.read("lambda1", l.lambda1);
    r.read("lambda2", l.lambda2);
    r.read("supervised_unprompted", l.supervised_unprompted);
    r.read("supervised_prompted", l.supervised_prompted);
    r.read("unsupervised", l.unsupervised);
    r.read("dice_eps", l.dice_eps);
    r.read_enum<PseudoLabel>("pseudo_label", l.pseudo_label, {{"hard", PseudoLabel::hard}, {"soft", PseudoLabel::soft}});
  }
  {
    detail::FieldReader r(j, "train", errors);
    auto& t = c.train;
    r.read("total_iterations", t.total_iterations);
    r.read("warmup_iterations", t.warmup_iterations);
    r.read_enum<IterationUnit>("iteration_unit", t.iteration_unit,
                               {{"iterations", IterationUnit::iterations}, {"epochs", IterationUnit::epochs}});
    r.read("max_lr", t.max_lr);
    r.read("final_lr_ratio", t.final_lr_ratio);
    r.read("batch_size", t.batch_size);
    r.read("labeled_fraction", t.labeled_fraction);
    r.read("augment", t.augment);
    r.read("rotation_degrees", t.rotation_degrees);
    r.read("flips", t.flips);
    r.read("beta1", t.beta1);
    r.read("beta2", t.beta2);
    r.read("adam_eps", t.adam_eps);
    r.read("weight_decay", t.weight_decay);
    r.read("seed", t.seed);
    r.read("val_every", t.val_every);
    r.read("max_val_samples", t.max_val_samples);
    r.read_enum<PromptSource>("labeled_prompts", t.labeled_prompts,
                              {{"ground_truth", PromptSource::ground_truth}, {"prediction", PromptSource::prediction}});
  }
  {
    detail::FieldReader r(j, "ablation", errors);
    auto& a = c.train.ablation;
    r.read("disable_unlabeled", a.disable_unlabeled);
    r.read("vanilla_cps", a.vanilla_cps);
    r.read("disable_pcr", a.disable_pcr);
    r.read("single_branch", a.single_branch);
    r.read("num_center_points", a.num_center_points);
    r.read("num_random_points", a.num_random_points);
  }
  {
    detail::FieldReader r(j, "data", errors);
    r.read("manifest", c.data.manifest);
    r.read("val_split", c.data.val_split);
  }
  if (errors.empty()) errors = validation_errors(c);
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return c;
}

// RFC 7386 merge of `overrides` onto the file contents, then parse.
inline RunConfig resolve_run_config(const std::optional<json>& file, const json& overrides) {
  json merged = file.value_or(json::object());
  if (!merged.is_object()) throw ConfigError("configuration must be a JSON object");
  merged.merge_patch(overrides);
  return run_config_from_json(merged);
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) { return run_config_from_json(read_json_file(path)); }

}  // namespace cpcsam
