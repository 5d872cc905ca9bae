// Command-line front end: synth, train, eval, prompts.
// Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cpcsam/checkpoint.hpp"
#include "cpcsam/config.hpp"
#include "cpcsam/data_io.hpp"
#include "cpcsam/evaluation.hpp"
#include "cpcsam/trainer.hpp"

namespace cpcsam::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// Raised for bad flags, missing inputs and invalid configuration.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

inline bool non_empty_dir(const fs::path& p) { return fs::exists(p) && fs::is_directory(p) && !fs::is_empty(p); }

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

inline void prepare_out_dir(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) throw UsageError("--out-dir is not a directory: " + out.string());
  if (non_empty_dir(out) && !force)
    throw UsageError("output directory " + out.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(out);
}

struct SynthArgs {
  int n = 20;
  int resolution = 32;
  int classes = 2;
  std::uint64_t seed = 0;
  int n_labeled = -1;
  double val_frac = 0.1;
  double test_frac = 0.2;
  int max_distractors = 2;
  double noise = 0.06;
  std::string out_dir;
  bool force = false;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  prepare_out_dir(a.out_dir, a.force);
  SyntheticOptions opt{a.n, a.resolution, a.classes, a.seed, a.max_distractors, a.noise};
  const auto samples = generate_synthetic(opt);
  SplitOptions split{a.n_labeled >= 0 ? a.n_labeled : std::max(1, a.n / 10), a.val_frac, a.test_frac, a.seed};
  const Manifest m = write_dataset(a.out_dir, samples, a.classes, split);
  out << "wrote " << samples.size() << " samples to " << a.out_dir << " (labeled " << m.split.labeled_ids.size()
      << ", unlabeled " << m.split.unlabeled_ids.size() << ", val " << m.split.val_ids.size() << ", test "
      << m.split.test_ids.size() << ")\n";
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string out_dir;
  std::string resume;
  bool force = false;
  json overrides = json::object();
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  std::optional<json> file;
  if (!a.config.empty()) {
    require_file(a.config, "config file");
    try {
      file = read_json_file(a.config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  json overrides = a.overrides;
  if (!a.manifest.empty()) overrides["data"]["manifest"] = a.manifest;

  std::string manifest_path = overrides.contains("data") && overrides["data"].contains("manifest")
                                  ? overrides["data"]["manifest"].get<std::string>()
                                  : (file && file->contains("data") ? file->at("data").value("manifest", "") : "");
  if (manifest_path.empty()) throw UsageError("a manifest is required (--manifest or data.manifest)");
  require_file(manifest_path, "manifest");
  Manifest manifest;
  try {
    manifest = load_manifest(manifest_path);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  // The class count defaults to the manifest's.
  const bool classes_given = (file && file->contains("model") && file->at("model").contains("num_classes")) ||
                             (overrides.contains("model") && overrides["model"].contains("num_classes"));
  if (!classes_given) overrides["model"]["num_classes"] = manifest.num_classes;

  RunConfig cfg;
  try {
    cfg = resolve_run_config(file, overrides);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (cfg.model.num_classes != manifest.num_classes)
    throw UsageError("model.num_classes (" + std::to_string(cfg.model.num_classes) +
                     ") does not match the manifest (" + std::to_string(manifest.num_classes) + ")");

  std::optional<fs::path> resume;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    resume = a.resume;
    fs::create_directories(a.out_dir);
  } else {
    prepare_out_dir(a.out_dir, a.force);
  }

  TrainingData data = load_training_data(manifest, cfg);
  out << "training: " << data.labeled.size() << " labeled, " << data.unlabeled.size() << " unlabeled, "
      << data.val.size() << " validation samples\n";
  TrainingOptions opts;
  opts.resume_from = resume;
  const TrainingResult r = run_training(cfg, std::move(data), a.out_dir, opts);
  out << "steps: " << r.log.size() << "\n";
  if (!r.log.empty()) out << "final loss: " << r.log.back().l_total << "\n";
  if (r.best_val_dsc) out << "best validation DSC: " << *r.best_val_dsc << " at iteration " << r.best_iteration << "\n";
  out << "final checkpoint: " << r.final_checkpoint.string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string mode = "unprompted";
  std::string out_dir;
  bool force = false;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.manifest, "manifest");
  EvalMode mode;
  try {
    mode = eval_mode_from_string(a.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Manifest manifest;
  std::vector<std::string> ids;
  try {
    manifest = load_manifest(a.manifest);
    ids = manifest.split.by_name(a.split);
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  if (ids.empty()) throw UsageError("split '" + a.split + "' is empty");
  for (const auto& id : ids)
    if (!manifest.entry(id).label_path)
      throw UsageError("ground truth required: sample " + id + " in split '" + a.split + "' has no label");
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  if (ckpt.model.num_classes() != manifest.num_classes)
    throw UsageError("checkpoint and manifest disagree on the number of classes");

  EvaluationReport report = evaluate_manifest(ckpt.model, manifest, a.split, mode);
  report.run_config = to_json(ckpt.config);
  if (!a.out_dir.empty()) {
    fs::create_directories(fs::path(a.out_dir) / "reports");
    const fs::path path = fs::path(a.out_dir) / "reports" / (a.split + "_" + a.mode + ".json");
    if (fs::exists(path) && !a.force) throw UsageError("report " + path.string() + " exists (use --force)");
    write_report(report, path);
    out << "report: " << path.string() << "\n";
  }
  out << summary_table(report);
  for (const auto& e : report.errors) out << "error: " << e.sample_id << ": " << e.message << "\n";
  return report.errors.empty() ? kExitOk : kExitRuntime;
}

struct PromptArgs {
  std::string image;
  std::string mask;
  std::string checkpoint;
  std::string modes = "center,random";
  std::uint64_t seed = 0;
  int classes = 0;
  std::string overlay;
};

inline PromptModes parse_modes(const std::string& text) {
  PromptModes m{false, false};
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok == "center") m.center = true;
    else if (tok == "random") m.random = true;
    else throw UsageError("unknown prompt mode '" + tok + "' (expected center and/or random)");
  }
  if (!m.center && !m.random) throw UsageError("--modes selects no prompt mode");
  return m;
}

inline void write_overlay(const fs::path& path, Image base, const PromptSet& set) {
  for (const auto& p : set.points)
    for (int d = -1; d <= 1; ++d) {
      if (p.row + d >= 0 && p.row + d < base.height) base.at(p.row + d, p.col) = p.mode == PromptMode::center ? 1.0 : 0.0;
      if (p.col + d >= 0 && p.col + d < base.width) base.at(p.row, p.col + d) = p.mode == PromptMode::center ? 1.0 : 0.0;
    }
  write_image_pgm(path, base);
}

inline int cmd_prompts(const PromptArgs& a, std::ostream& out) {
  if (!a.mask.empty() && !a.checkpoint.empty())
    throw UsageError("ambiguous prompt source: give either --mask or --checkpoint, not both");
  if (a.mask.empty() && a.checkpoint.empty()) throw UsageError("a prompt source is required (--mask or --checkpoint)");
  const PromptModes modes = parse_modes(a.modes);
  PromptSet set;
  Image base;
  json doc;
  if (!a.mask.empty()) {
    require_file(a.mask, "mask");
    LabelMap lbl;
    try {
      lbl = read_label_pgm(a.mask);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
    int classes = a.classes;
    if (classes == 0) classes = std::max(2, *std::max_element(lbl.labels.begin(), lbl.labels.end()) + 1);
    set = prompts_from_labels(lbl.labels, lbl.height, lbl.width, classes, modes, a.seed);
    base = Image(lbl.height, lbl.width);
    for (std::size_t i = 0; i < lbl.labels.size(); ++i) base.pixels[i] = lbl.labels[i] > 0 ? 0.5 : 0.0;
    doc["source"] = "mask";
    doc["height"] = lbl.height;
    doc["width"] = lbl.width;
  } else {
    require_file(a.checkpoint, "checkpoint");
    if (a.image.empty()) throw UsageError("--image is required with --checkpoint");
    require_file(a.image, "image");
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    ImageSample s;
    s.id = fs::path(a.image).stem().string();
    try {
      s.image = read_image_pgm(a.image);
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
    const auto& mc = ckpt.model.config();
    s = preprocess(s, mc.height, mc.width);
    set = extract_prompts(infer_probabilities(ckpt.model, s.image), modes, a.seed);
    base = s.image;
    doc["source"] = "checkpoint";
    doc["height"] = mc.height;
    doc["width"] = mc.width;
  }
  doc["seed"] = a.seed;
  doc["points"] = json::array();
  for (const auto& p : set.points)
    doc["points"].push_back({{"row", p.row}, {"col", p.col}, {"class", p.class_id}, {"mode", to_string(p.mode)}});
  out << doc.dump(2) << "\n";
  if (!a.overlay.empty()) write_overlay(a.overlay, base, set);
  return kExitOk;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Semi-supervised promptable segmentation with cross prompting", "cpcsam"};
  app.require_subcommand(1);

  detail::SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset with a manifest");
  s->add_option("--n", synth.n, "Number of samples")->check(CLI::NonNegativeNumber);
  s->add_option("--resolution", synth.resolution, "Image side length")->check(CLI::Range(8, 4096));
  s->add_option("--classes", synth.classes, "Number of classes including background")->check(CLI::Range(2, 16));
  s->add_option("--seed", synth.seed, "Random seed");
  s->add_option("--n-labeled", synth.n_labeled, "Labeled training samples (default n/10)");
  s->add_option("--val-frac", synth.val_frac, "Validation fraction")->check(CLI::Range(0.0, 1.0));
  s->add_option("--test-frac", synth.test_frac, "Test fraction")->check(CLI::Range(0.0, 1.0));
  s->add_option("--max-distractors", synth.max_distractors, "Unlabeled blobs per image")->check(CLI::NonNegativeNumber);
  s->add_option("--noise", synth.noise, "Background noise level")->check(CLI::NonNegativeNumber);
  s->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  s->add_flag("--force", synth.force, "Allow a non-empty output directory");

  detail::TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", train.config, "Run configuration file (JSON)");
  t->add_option("--manifest", train.manifest, "Dataset manifest");
  t->add_option("--out-dir", train.out_dir, "Output directory")->required();
  t->add_option("--resume", train.resume, "Resume from a checkpoint with training state");
  t->add_flag("--force", train.force, "Allow a non-empty output directory");
  // Flag overrides; only flags actually given enter the override document.
  struct Override {
    std::string flag, section, key;
    enum Kind { integer, real, flag_kind, text } kind;
  };
  const std::vector<Override> overrides = {
      {"--total-iterations", "train", "total_iterations", Override::integer},
      {"--warmup-iterations", "train", "warmup_iterations", Override::integer},
      {"--iteration-unit", "train", "iteration_unit", Override::text},
      {"--max-lr", "train", "max_lr", Override::real},
      {"--batch-size", "train", "batch_size", Override::integer},
      {"--seed", "train", "seed", Override::integer},
      {"--val-every", "train", "val_every", Override::integer},
      {"--labeled-prompts", "train", "labeled_prompts", Override::text},
      {"--lambda1", "loss", "lambda1", Override::real},
      {"--lambda2", "loss", "lambda2", Override::real},
      {"--lora-rank", "lora", "rank", Override::integer},
      {"--model-seed", "model", "seed", Override::integer},
      {"--num-center-points", "ablation", "num_center_points", Override::integer},
      {"--num-random-points", "ablation", "num_random_points", Override::integer},
      {"--vanilla-cps", "ablation", "vanilla_cps", Override::flag_kind},
      {"--disable-pcr", "ablation", "disable_pcr", Override::flag_kind},
      {"--disable-unlabeled", "ablation", "disable_unlabeled", Override::flag_kind},
      {"--single-branch", "ablation", "single_branch", Override::flag_kind},
  };
  std::vector<std::string> raw(overrides.size());
  std::vector<CLI::Option*> opts;
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    const auto& o = overrides[i];
    const std::string help = o.section + "." + o.key;
    if (o.kind == Override::flag_kind) opts.push_back(t->add_flag(o.flag, help));
    else opts.push_back(t->add_option(o.flag, raw[i], help));
  }

  detail::EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--manifest", ev.manifest, "Dataset manifest")->required();
  e->add_option("--split", ev.split, "labeled, unlabeled, val or test");
  e->add_option("--mode", ev.mode, "unprompted or gt_prompt");
  e->add_option("--out-dir", ev.out_dir, "Writes reports/<split>_<mode>.json here");
  e->add_flag("--force", ev.force, "Overwrite an existing report");

  detail::PromptArgs pr;
  auto* p = app.add_subcommand("prompts", "Extract point prompts from a mask or a model prediction");
  p->add_option("--image", pr.image, "Input image (with --checkpoint)");
  p->add_option("--mask", pr.mask, "Label map");
  p->add_option("--checkpoint", pr.checkpoint, "Checkpoint whose prediction supplies the prompts");
  p->add_option("--modes", pr.modes, "Comma-separated: center, random");
  p->add_option("--seed", pr.seed, "Seed for random points");
  p->add_option("--classes", pr.classes, "Class count for --mask (default: max label + 1)");
  p->add_option("--overlay", pr.overlay, "Write an overlay image marking the points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return detail::cmd_synth(synth, out);
    if (t->parsed()) {
      for (std::size_t i = 0; i < overrides.size(); ++i) {
        const auto& o = overrides[i];
        if (opts[i]->count() == 0) continue;
        json& slot = train.overrides[o.section][o.key];
        try {
          switch (o.kind) {
            case Override::flag_kind: slot = true; break;
            case Override::text: slot = raw[i]; break;
            case Override::integer: slot = std::stoll(raw[i]); break;
            case Override::real: slot = std::stod(raw[i]); break;
          }
        } catch (const std::logic_error&) {
          throw UsageError(o.flag + " expects a number, got '" + raw[i] + "'");
        }
        if (o.key == "seed" && slot.is_number_integer() && slot.get<long long>() < 0)
          throw UsageError(o.flag + " must be non-negative");
        if (o.key == "seed") slot = slot.get<std::uint64_t>();
      }
      return detail::cmd_train(train, out);
    }
    if (e->parsed()) return detail::cmd_eval(ev, out);
    if (p->parsed()) return detail::cmd_prompts(pr, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace cpcsam::cli
