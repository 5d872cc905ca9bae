// Binary checkpoint archive.
//
// Layout (all integers little-endian):
//   8 bytes  magic "CPCSAMCK"
//   u32      format version
//   u64      header length in bytes
//   header   UTF-8 JSON: run config, tensor index, optional training state
//   payload  IEEE-754 binary64 values, little-endian, in index order
//
// The tensor index is split into sections: "base" (frozen encoder weights),
// "lora" (low-rank factors), "trainable" (prompt encoder and decoders) and,
// when training state is present, "optimizer" (first and second moments of
// every trainable tensor, named "<param>.m" / "<param>.v").
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcsam/config.hpp"
#include "cpcsam/model.hpp"

namespace cpcsam {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'P', 'C', 'S', 'A', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerMoments {
  long long steps = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

struct Checkpoint {
  RunConfig config;
  PromptableSegmenter model;
  std::optional<json> train_state;
  std::optional<OptimizerMoments> optimizer;
};

namespace detail {

inline std::string section_of(const Parameter& p) {
  switch (p.group) {
    case ParamGroup::encoder_base: return "base";
    case ParamGroup::lora: return "lora";
    default: return "trainable";
  }
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const PromptableSegmenter& model, const RunConfig& config,
                            const std::optional<json>& train_state = std::nullopt,
                            const std::optional<OptimizerMoments>& optimizer = std::nullopt) {
  std::vector<double> payload;
  json sections = {{"base", json::array()}, {"lora", json::array()}, {"trainable", json::array()}};
  auto push = [&](const std::string& section, const std::string& name, std::size_t rows, std::size_t cols,
                  std::span<const double> values, const std::string& group, bool trainable) {
    sections[section].push_back({{"name", name},
                                 {"rows", rows},
                                 {"cols", cols},
                                 {"offset", payload.size()},
                                 {"group", group},
                                 {"trainable", trainable}});
    payload.insert(payload.end(), values.begin(), values.end());
  };
  for (const auto& p : model.parameters())
    push(detail::section_of(p), p.name, p.var.rows(), p.var.cols(), p.var.value(), to_string(p.group), p.trainable);
  if (optimizer) {
    sections["optimizer"] = json::array();
    std::size_t slot = 0;
    for (const auto& p : model.parameters()) {
      if (!p.trainable) continue;
      push("optimizer", p.name + ".m", p.var.rows(), p.var.cols(), optimizer->m.at(slot), "optimizer", false);
      push("optimizer", p.name + ".v", p.var.rows(), p.var.cols(), optimizer->v.at(slot), "optimizer", false);
      ++slot;
    }
  }
  json header = {{"format", "cpcsam.checkpoint"},
                 {"version", kCheckpointVersion},
                 {"run_config", to_json(config)},
                 {"lora", model.lora() ? json{{"rank", model.lora()->rank},
                                              {"scaling", model.lora()->scaling},
                                              {"init_std", model.lora()->init_std}}
                                       : json(nullptr)},
                 {"num_decoders", model.num_decoders()},
                 {"payload_values", payload.size()},
                 {"sections", sections}};
  if (optimizer) header["optimizer_steps"] = optimizer->steps;
  if (train_state) header["train_state"] = *train_state;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + tmp.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(double)));
    out.flush();
    if (!out) throw CheckpointError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline json read_checkpoint_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError(path.string() + ": not a checkpoint");
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != kCheckpointVersion)
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1ull << 32)) throw CheckpointError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw CheckpointError(path.string() + ": truncated header");
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const json header = read_checkpoint_header(in, path);
  const std::size_t count = header.at("payload_values").get<std::size_t>();
  std::vector<double> payload(count);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw CheckpointError(path.string() + ": truncated payload");

  RunConfig config = run_config_from_json(header.at("run_config"));
  ModelConfig mc = config.effective_model();
  mc.num_decoders = header.at("num_decoders").get<int>();
  PromptableSegmenter model(mc);
  if (!header.at("lora").is_null()) {
    const auto& l = header.at("lora");
    model.apply_lora({l.at("rank").get<int>(), l.at("scaling").get<double>(), l.at("init_std").get<double>()});
  }

  std::map<std::string, json> index;
  for (const auto& [section, entries] : header.at("sections").items())
    for (const auto& e : entries) index[e.at("name").get<std::string>()] = e;
  auto fetch = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    const auto it = index.find(name);
    if (it == index.end()) throw CheckpointError(path.string() + ": missing tensor " + name);
    const auto& e = it->second;
    if (e.at("rows").get<std::size_t>() != rows || e.at("cols").get<std::size_t>() != cols)
      throw CheckpointError(path.string() + ": shape mismatch for " + name);
    const auto offset = e.at("offset").get<std::size_t>();
    if (offset + rows * cols > payload.size()) throw CheckpointError(path.string() + ": tensor " + name + " out of range");
    return std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(offset),
                               payload.begin() + static_cast<std::ptrdiff_t>(offset + rows * cols));
  };
  for (auto& p : model.parameters()) p.var.mutable_value() = fetch(p.name, p.var.rows(), p.var.cols());

  std::optional<OptimizerMoments> optimizer;
  if (header.at("sections").contains("optimizer")) {
    OptimizerMoments om;
    om.steps = header.at("optimizer_steps").get<long long>();
    for (const auto& p : model.parameters()) {
      if (!p.trainable) continue;
      om.m.push_back(fetch(p.name + ".m", p.var.rows(), p.var.cols()));
      om.v.push_back(fetch(p.name + ".v", p.var.rows(), p.var.cols()));
    }
    optimizer = std::move(om);
  }
  std::optional<json> train_state;
  if (header.contains("train_state")) train_state = header.at("train_state");
  return {std::move(config), std::move(model), std::move(train_state), std::move(optimizer)};
}

}  // namespace cpcsam
