// Inference modes, per-sample metric records and dataset reports.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcsam/cross_prompting.hpp"
#include "cpcsam/data_io.hpp"
#include "cpcsam/losses.hpp"
#include "cpcsam/metrics.hpp"
#include "cpcsam/model.hpp"

namespace cpcsam {

enum class EvalMode { unprompted, gt_prompt };

inline std::string to_string(EvalMode m) { return m == EvalMode::unprompted ? "unprompted" : "gt_prompt"; }

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "unprompted") return EvalMode::unprompted;
  if (s == "gt_prompt") return EvalMode::gt_prompt;
  throw std::invalid_argument("unknown evaluation mode '" + s + "' (expected unprompted or gt_prompt)");
}

inline LabelMap argmax_labels(const ProbMap& prob) {
  LabelMap out(prob.height, prob.width);
  out.labels = prob.argmax();
  return out;
}

// Mean of every decoder's unprompted map.
inline ProbMap infer_probabilities(const PromptableSegmenter& model, const Image& image) {
  const Var features = model.encode(image);
  return as_map(ensemble_of(unprompted_all(model, features)), model.config().height, model.config().width);
}

inline LabelMap infer(const PromptableSegmenter& model, const Image& image) {
  return argmax_labels(infer_probabilities(model, image));
}

// Decodes every branch with `prompts` and averages; empty prompts give the
// unprompted ensemble.
inline ProbMap prompted_probabilities(const PromptableSegmenter& model, const Var& features, const PromptSet& prompts) {
  const PromptEmbedding emb = model.prompt_encode(prompts);
  std::vector<Var> maps;
  for (int b = 1; b <= model.num_decoders(); ++b) maps.push_back(model.decode(b, features, emb));
  return as_map(ensemble_of(maps), model.config().height, model.config().width);
}

// Center points of each ground-truth class's largest component prompt every
// branch. Classes absent from the ground truth get no point.
inline LabelMap gt_prompt_eval(const PromptableSegmenter& model, const Image& image, const LabelMap& gt) {
  const auto& cfg = model.config();
  if (gt.height != cfg.height || gt.width != cfg.width)
    throw std::invalid_argument("gt_prompt_eval: ground truth resolution does not match the model");
  const PromptSet prompts = prompts_from_labels(gt.labels, gt.height, gt.width, cfg.num_classes, {true, false}, 0);
  if (prompts.empty()) return infer(model, image);
  return argmax_labels(prompted_probabilities(model, model.encode(image), prompts));
}

struct MetricsRecord {
  std::string sample_id;
  int class_id = 1;
  double dsc = 0.0;
  double jc = 0.0;
  std::optional<double> hd95;
  std::optional<double> asd;
  std::vector<std::string> flags;
  bool operator==(const MetricsRecord&) const = default;
};

struct ClassSummary {
  int class_id = 1;
  int samples = 0;
  double dsc = 0.0;
  double jc = 0.0;
  std::optional<double> hd95;
  std::optional<double> asd;
  int surface_excluded = 0;  // records without a defined hd95/asd
  bool operator==(const ClassSummary&) const = default;
};

struct SampleError {
  std::string sample_id;
  std::string message;
  bool operator==(const SampleError&) const = default;
};

struct EvaluationReport {
  std::string mode;
  std::string split;
  std::vector<MetricsRecord> records;
  std::vector<ClassSummary> per_class;
  ClassSummary mean;  // class_id 0; means of the per-class means
  std::vector<SampleError> errors;
  json run_config;
  bool operator==(const EvaluationReport&) const = default;
};

inline std::vector<MetricsRecord> sample_metrics(const std::string& id, const LabelMap& pred, const LabelMap& gt,
                                                 int num_classes, Spacing spacing = {},
                                                 const std::vector<std::string>& flags = {}) {
  if (pred.height != gt.height || pred.width != gt.width) throw std::invalid_argument("sample_metrics: shape mismatch");
  std::vector<MetricsRecord> out;
  for (int k = 1; k < num_classes; ++k) {
    const BinaryMask p = label_mask(pred.labels, pred.height, pred.width, k);
    const BinaryMask g = label_mask(gt.labels, gt.height, gt.width, k);
    MetricsRecord r{id, k, dsc(p, g), jaccard(p, g), hd95(p, g, spacing), asd(p, g, spacing), flags};
    if (!r.hd95) r.flags.push_back("surface_undefined");
    out.push_back(std::move(r));
  }
  return out;
}

// Unweighted means over samples per class, then over classes.
inline void summarize(EvaluationReport& report, int num_classes) {
  report.per_class.clear();
  for (int k = 1; k < num_classes; ++k) {
    ClassSummary s;
    s.class_id = k;
    double hd = 0.0, as = 0.0;
    int defined = 0;
    for (const auto& r : report.records) {
      if (r.class_id != k) continue;
      ++s.samples;
      s.dsc += r.dsc;
      s.jc += r.jc;
      if (r.hd95 && r.asd) {
        hd += *r.hd95;
        as += *r.asd;
        ++defined;
      } else {
        ++s.surface_excluded;
      }
    }
    if (s.samples > 0) {
      s.dsc /= s.samples;
      s.jc /= s.samples;
    }
    if (defined > 0) {
      s.hd95 = hd / defined;
      s.asd = as / defined;
    }
    report.per_class.push_back(s);
  }
  ClassSummary m;
  m.class_id = 0;
  double hd = 0.0, as = 0.0;
  int defined = 0;
  for (const auto& s : report.per_class) {
    m.samples = std::max(m.samples, s.samples);
    m.dsc += s.dsc;
    m.jc += s.jc;
    m.surface_excluded += s.surface_excluded;
    if (s.hd95) {
      hd += *s.hd95;
      as += *s.asd;
      ++defined;
    }
  }
  if (!report.per_class.empty()) {
    m.dsc /= static_cast<double>(report.per_class.size());
    m.jc /= static_cast<double>(report.per_class.size());
  }
  if (defined > 0) {
    m.hd95 = hd / defined;
    m.asd = as / defined;
  }
  report.mean = m;
}

// Predicts at model resolution and scores against the original-resolution label.
inline std::vector<MetricsRecord> evaluate_sample(const PromptableSegmenter& model, const ImageSample& raw,
                                                  EvalMode mode) {
  if (!raw.label) throw DataError("ground truth required for sample " + raw.id);
  const auto& cfg = model.config();
  const ImageSample s = preprocess(raw, cfg.height, cfg.width);
  const LabelMap pred_small = mode == EvalMode::unprompted ? infer(model, s.image) : gt_prompt_eval(model, s.image, *s.label);
  const LabelMap pred = resize_nearest(pred_small, raw.label->height, raw.label->width);
  return sample_metrics(raw.id, pred, *raw.label, cfg.num_classes, raw.spacing.value_or(Spacing{}), s.flags);
}

inline EvaluationReport evaluate_dataset(const PromptableSegmenter& model, const std::vector<ImageSample>& samples,
                                         EvalMode mode, const std::string& split = "") {
  if (samples.empty()) throw std::invalid_argument("evaluate_dataset: empty split");
  EvaluationReport report;
  report.mode = to_string(mode);
  report.split = split;
  for (const auto& s : samples) {
    try {
      auto recs = evaluate_sample(model, s, mode);
      report.records.insert(report.records.end(), recs.begin(), recs.end());
    } catch (const std::exception& e) {
      report.errors.push_back({s.id, e.what()});
    }
  }
  summarize(report, model.num_classes());
  return report;
}

// Loads each sample lazily; unreadable samples are reported and skipped.
inline EvaluationReport evaluate_manifest(const PromptableSegmenter& model, const Manifest& manifest,
                                          const std::string& split, EvalMode mode) {
  const auto& ids = manifest.split.by_name(split);
  if (ids.empty()) throw DataError("split '" + split + "' is empty");
  EvaluationReport report;
  report.mode = to_string(mode);
  report.split = split;
  for (const auto& id : ids) {
    try {
      const ImageSample s = load_sample(manifest, id);
      auto recs = evaluate_sample(model, s, mode);
      report.records.insert(report.records.end(), recs.begin(), recs.end());
    } catch (const std::exception& e) {
      report.errors.push_back({id, e.what()});
    }
  }
  summarize(report, model.num_classes());
  return report;
}

// Mean foreground DSC of the unprompted ensemble over preprocessed samples.
inline double mean_dsc(const PromptableSegmenter& model, const std::vector<ImageSample>& samples) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    const LabelMap pred = infer(model, s.image);
    const auto recs = sample_metrics(s.id, pred, s.label.value(), model.num_classes());
    double d = 0.0;
    for (const auto& r : recs) d += r.dsc;
    total += d / static_cast<double>(recs.size());
  }
  return total / static_cast<double>(samples.size());
}

// Mean pairwise disagreement (100 - mean foreground DSC) between predictions
// under `n_prompts` random ground-truth prompts on one preprocessed sample.
inline double prompt_disagreement(const PromptableSegmenter& model, const ImageSample& s, int n_prompts,
                                  std::uint64_t seed) {
  const auto& gt = s.label.value();
  const int C = model.num_classes();
  const auto sets = multi_point_prompts_from_labels(gt.labels, gt.height, gt.width, C, 0, n_prompts, seed);
  const Var features = model.encode(s.image);
  std::vector<LabelMap> preds;
  for (const auto& set : sets) preds.push_back(argmax_labels(prompted_probabilities(model, features, set)));
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t j = i + 1; j < preds.size(); ++j) {
      const auto recs = sample_metrics(s.id, preds[i], preds[j], C);
      double d = 0.0;
      for (const auto& r : recs) d += r.dsc;
      total += 100.0 - d / static_cast<double>(recs.size());
      ++pairs;
    }
  return pairs == 0 ? 0.0 : total / pairs;
}

// ---------------------------------------------------------------------------
// Report serialization

inline constexpr int kReportVersion = 1;

namespace detail {

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
inline std::optional<double> read_optional(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

inline json summary_to_json(const ClassSummary& s) {
  return {{"class", s.class_id},
          {"samples", s.samples},
          {"dsc", s.dsc},
          {"jc", s.jc},
          {"hd95", optional_number(s.hd95)},
          {"asd", optional_number(s.asd)},
          {"surface_excluded", s.surface_excluded}};
}

inline ClassSummary summary_from_json(const json& j) {
  return {j.at("class").get<int>(),          j.at("samples").get<int>(),        j.at("dsc").get<double>(),
          j.at("jc").get<double>(),          read_optional(j.at("hd95")),       read_optional(j.at("asd")),
          j.at("surface_excluded").get<int>()};
}

}  // namespace detail

inline json report_to_json(const EvaluationReport& r) {
  json records = json::array();
  for (const auto& m : r.records)
    records.push_back({{"sample_id", m.sample_id},
                       {"class", m.class_id},
                       {"dsc", m.dsc},
                       {"jc", m.jc},
                       {"hd95", detail::optional_number(m.hd95)},
                       {"asd", detail::optional_number(m.asd)},
                       {"flags", m.flags}});
  json per_class = json::array();
  for (const auto& s : r.per_class) per_class.push_back(detail::summary_to_json(s));
  json errors = json::array();
  for (const auto& e : r.errors) errors.push_back({{"sample_id", e.sample_id}, {"message", e.message}});
  return {{"schema", "cpcsam.report"},
          {"version", kReportVersion},
          {"mode", r.mode},
          {"split", r.split},
          {"records", records},
          {"summary", {{"per_class", per_class}, {"mean", detail::summary_to_json(r.mean)}}},
          {"errors", errors},
          {"run_config", r.run_config}};
}

inline EvaluationReport report_from_json(const json& j) {
  if (j.value("schema", "") != "cpcsam.report") throw DataError("not a cpcsam report");
  if (j.value("version", 0) != kReportVersion) throw DataError("unsupported report version");
  EvaluationReport r;
  r.mode = j.at("mode").get<std::string>();
  r.split = j.at("split").get<std::string>();
  for (const auto& m : j.at("records"))
    r.records.push_back({m.at("sample_id").get<std::string>(), m.at("class").get<int>(), m.at("dsc").get<double>(),
                         m.at("jc").get<double>(), detail::read_optional(m.at("hd95")),
                         detail::read_optional(m.at("asd")), m.at("flags").get<std::vector<std::string>>()});
  for (const auto& s : j.at("summary").at("per_class")) r.per_class.push_back(detail::summary_from_json(s));
  r.mean = detail::summary_from_json(j.at("summary").at("mean"));
  for (const auto& e : j.at("errors"))
    r.errors.push_back({e.at("sample_id").get<std::string>(), e.at("message").get<std::string>()});
  r.run_config = j.at("run_config");
  return r;
}

// Structural check of a report document; returns the problems found.
inline std::vector<std::string> report_schema_errors(const json& j) {
  std::vector<std::string> out;
  if (!j.is_object()) return {"report must be an object"};
  if (j.value("schema", "") != "cpcsam.report") out.emplace_back("schema must be cpcsam.report");
  if (!j.contains("records") || !j["records"].is_array()) {
    out.emplace_back("records must be an array");
    return out;
  }
  for (std::size_t i = 0; i < j["records"].size(); ++i) {
    const auto& r = j["records"][i];
    const std::string at = "records[" + std::to_string(i) + "]";
    if (!r.is_object()) {
      out.push_back(at + " must be an object");
      continue;
    }
    if (!r.contains("sample_id") || !r["sample_id"].is_string()) out.push_back(at + ".sample_id must be a string");
    if (!r.contains("class") || !r["class"].is_number_integer()) out.push_back(at + ".class must be an integer");
    for (const char* k : {"dsc", "jc"})
      if (!r.contains(k) || !r[k].is_number() || r[k].get<double>() < 0.0 || r[k].get<double>() > 100.0)
        out.push_back(at + "." + k + " must be a number in [0, 100]");
    for (const char* k : {"hd95", "asd"})
      if (!r.contains(k) || !(r[k].is_null() || (r[k].is_number() && r[k].get<double>() >= 0.0)))
        out.push_back(at + "." + k + " must be null or a non-negative number");
    if (!r.contains("flags") || !r["flags"].is_array()) out.push_back(at + ".flags must be an array");
  }
  if (!j.contains("summary") || !j["summary"].is_object()) out.emplace_back("summary must be an object");
  return out;
}

inline void write_report(const EvaluationReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path.string());
  out << report_to_json(r).dump(2) << "\n";
}

inline EvaluationReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path.string());
  return report_from_json(json::parse(in));
}

inline std::string summary_table(const EvaluationReport& r) {
  auto opt = [](const std::optional<double>& v) {
    char buf[32];
    if (!v) return std::string("     n/a");
    std::snprintf(buf, sizeof buf, "%8.2f", *v);
    return std::string(buf);
  };
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %8s %8s %8s %8s %8s %9s\n", "class", "samples", "DSC", "JC", "HD95", "ASD",
                "excluded");
  os << line;
  auto row = [&](const std::string& name, const ClassSummary& s) {
    std::snprintf(line, sizeof line, "%-8s %8d %8.2f %8.2f %s %s %9d\n", name.c_str(), s.samples, s.dsc, s.jc,
                  opt(s.hd95).c_str(), opt(s.asd).c_str(), s.surface_excluded);
    os << line;
  };
  for (const auto& s : r.per_class) row(std::to_string(s.class_id), s);
  row("mean", r.mean);
  if (!r.errors.empty()) os << r.errors.size() << " sample(s) failed\n";
  return os.str();
}

}  // namespace cpcsam
