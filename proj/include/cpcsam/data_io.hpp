// Dataset ingestion: samples, raster I/O, manifests, preprocessing, splitting
// and a synthetic blob/annulus generator for desk-scale experiments.
//
// On-disk layout of a dataset root:
//   images/<id>.pgm   8-bit binary PGM intensities
//   labels/<id>.pgm   8-bit binary PGM class indices
//   manifest.json     see Manifest below
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcsam/image.hpp"
#include "cpcsam/rng.hpp"

namespace cpcsam {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct Spacing {
  double row = 1.0;
  double col = 1.0;
  bool operator==(const Spacing&) const = default;
};

struct ImageSample {
  std::string id;
  Image image;
  std::optional<LabelMap> label;
  std::optional<Spacing> spacing;
  std::vector<std::string> flags;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// PGM raster I/O

struct Raster {
  int height = 0;
  int width = 0;
  int maxval = 255;
  std::vector<int> values;
};

inline Raster read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    return tok;
  };
  if (next_token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  Raster r;
  try {
    r.width = std::stoi(next_token());
    r.height = std::stoi(next_token());
    r.maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (r.width <= 0 || r.height <= 0 || r.maxval <= 0 || r.maxval > 65535)
    throw DataError(path.string() + ": invalid PGM dimensions");
  const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
  const std::size_t bytes_per = r.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(n * bytes_per);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw DataError(path.string() + ": truncated PGM data");
  r.values.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    r.values[i] = bytes_per == 1 ? buf[i] : (buf[2 * i] << 8) | buf[2 * i + 1];
  return r;
}

inline void write_pgm(const fs::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << r.width << " " << r.height << "\n" << r.maxval << "\n";
  for (int v : r.values) {
    if (v < 0 || v > r.maxval) throw DataError("write_pgm: value out of range");
    if (r.maxval > 255) out.put(static_cast<char>((v >> 8) & 0xFF));
    out.put(static_cast<char>(v & 0xFF));
  }
  if (!out) throw DataError("failed writing " + path.string());
}

// Intensities in [0,1] quantized to 8 bits.
inline void write_image_pgm(const fs::path& path, const Image& image) {
  Raster r{image.height, image.width, 255, {}};
  r.values.reserve(image.pixels.size());
  for (double v : image.pixels) r.values.push_back(static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  write_pgm(path, r);
}

inline Image read_image_pgm(const fs::path& path) {
  const Raster r = read_pgm(path);
  Image img(r.height, r.width);
  for (std::size_t i = 0; i < r.values.size(); ++i) img.pixels[i] = static_cast<double>(r.values[i]);
  return img;
}

inline void write_label_pgm(const fs::path& path, const LabelMap& label) {
  Raster r{label.height, label.width, 255, label.labels};
  write_pgm(path, r);
}

inline LabelMap read_label_pgm(const fs::path& path) {
  const Raster r = read_pgm(path);
  LabelMap lbl(r.height, r.width);
  lbl.labels = r.values;
  return lbl;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestEntry {
  std::string id;
  std::string image_path;
  std::optional<std::string> label_path;
  std::string group;    // e.g. patient id; empty means the entry is its own group
  std::string stratum;  // e.g. benign/malignant; empty means a single stratum
  std::optional<Spacing> spacing;
  bool operator==(const ManifestEntry&) const = default;
};

struct Split {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  bool operator==(const Split&) const = default;

  const std::vector<std::string>& by_name(const std::string& name) const {
    if (name == "labeled") return labeled_ids;
    if (name == "unlabeled") return unlabeled_ids;
    if (name == "val") return val_ids;
    if (name == "test") return test_ids;
    throw DataError("unknown split name '" + name + "' (expected labeled, unlabeled, val or test)");
  }
};

inline constexpr int kManifestVersion = 1;

struct Manifest {
  std::vector<ManifestEntry> entries;
  Split split;
  int num_classes = 2;
  std::uint64_t seed = 0;
  fs::path root;  // directory that relative paths resolve against; not serialized

  bool operator==(const Manifest& o) const {
    return entries == o.entries && split == o.split && num_classes == o.num_classes && seed == o.seed;
  }

  const ManifestEntry& entry(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return e;
    throw DataError("unknown sample id " + id);
  }
};

inline json manifest_to_json(const Manifest& m) {
  json j;
  j["schema"] = "cpcsam.manifest";
  j["version"] = kManifestVersion;
  j["num_classes"] = m.num_classes;
  j["seed"] = m.seed;
  j["entries"] = json::array();
  for (const auto& e : m.entries) {
    json je{{"id", e.id}, {"image_path", e.image_path}};
    je["label_path"] = e.label_path ? json(*e.label_path) : json(nullptr);
    if (!e.group.empty()) je["group"] = e.group;
    if (!e.stratum.empty()) je["stratum"] = e.stratum;
    if (e.spacing) je["spacing"] = {e.spacing->row, e.spacing->col};
    j["entries"].push_back(je);
  }
  j["split"] = {{"labeled_ids", m.split.labeled_ids},
                {"unlabeled_ids", m.split.unlabeled_ids},
                {"val_ids", m.split.val_ids},
                {"test_ids", m.split.test_ids}};
  return j;
}

// Throws DataError naming every offending entry.
inline Manifest manifest_from_json(const json& j) {
  std::vector<std::string> problems;
  Manifest m;
  try {
    if (j.value("schema", std::string{}) != "cpcsam.manifest") problems.push_back("schema: expected 'cpcsam.manifest'");
    if (j.value("version", 0) != kManifestVersion)
      problems.push_back("version: unsupported (expected " + std::to_string(kManifestVersion) + ")");
    m.num_classes = j.at("num_classes").get<int>();
    if (m.num_classes < 2) problems.push_back("num_classes: must be at least 2");
    m.seed = j.value("seed", std::uint64_t{0});
    std::set<std::string> ids;
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.id = je.at("id").get<std::string>();
      e.image_path = je.at("image_path").get<std::string>();
      if (je.contains("label_path") && !je["label_path"].is_null()) e.label_path = je["label_path"].get<std::string>();
      e.group = je.value("group", std::string{});
      e.stratum = je.value("stratum", std::string{});
      if (je.contains("spacing")) {
        const auto& s = je["spacing"];
        if (!s.is_array() || s.size() != 2) problems.push_back("entry " + e.id + ": spacing must be [row, col]");
        else e.spacing = Spacing{s[0].get<double>(), s[1].get<double>()};
      }
      if (e.id.empty()) problems.push_back("entry with empty id");
      if (!ids.insert(e.id).second) problems.push_back("entry " + e.id + ": duplicate id");
      m.entries.push_back(std::move(e));
    }
    const auto& js = j.at("split");
    m.split.labeled_ids = js.value("labeled_ids", std::vector<std::string>{});
    m.split.unlabeled_ids = js.value("unlabeled_ids", std::vector<std::string>{});
    m.split.val_ids = js.value("val_ids", std::vector<std::string>{});
    m.split.test_ids = js.value("test_ids", std::vector<std::string>{});

    std::map<std::string, std::string> owner;
    const std::pair<const char*, const std::vector<std::string>*> lists[] = {{"labeled_ids", &m.split.labeled_ids},
                                                                           {"unlabeled_ids", &m.split.unlabeled_ids},
                                                                           {"val_ids", &m.split.val_ids},
                                                                           {"test_ids", &m.split.test_ids}};
    for (const auto& [name, list] : lists)
      for (const auto& id : *list) {
        if (!ids.count(id)) problems.push_back(std::string(name) + ": unknown id " + id);
        auto [it, inserted] = owner.emplace(id, name);
        if (!inserted) problems.push_back("id " + id + " appears in both " + it->second + " and " + name);
      }
    for (const auto& id : m.split.labeled_ids)
      for (const auto& e : m.entries)
        if (e.id == id && !e.label_path) problems.push_back("labeled id " + id + " has no label_path");
  } catch (const json::exception& ex) {
    problems.push_back(std::string("malformed manifest: ") + ex.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid manifest:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw DataError(msg);
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw DataError("invalid manifest: " + std::string(ex.what()));
  }
  Manifest m = manifest_from_json(j);
  m.root = path.parent_path();
  return m;
}

inline void write_manifest(const Manifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << manifest_to_json(m).dump(2) << "\n";
}

inline ImageSample load_sample(const Manifest& m, const std::string& id) {
  const ManifestEntry& e = m.entry(id);
  ImageSample s;
  s.id = e.id;
  s.image = read_image_pgm(m.root / e.image_path);
  if (e.label_path) {
    s.label = read_label_pgm(m.root / *e.label_path);
    if (s.label->height != s.image.height || s.label->width != s.image.width)
      throw DataError("sample " + id + ": label not aligned with image");
    for (int v : s.label->labels)
      if (v >= m.num_classes) throw DataError("sample " + id + ": label value exceeds num_classes");
  }
  s.spacing = e.spacing;
  return s;
}

// ---------------------------------------------------------------------------
// Resampling and preprocessing

// Bilinear resize with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  Image out(height, width);
  const double sy = static_cast<double>(src.height) / height;
  const double sx = static_cast<double>(src.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      const double top = src.at(y0, x0) * (1 - wx) + src.at(y0, x1) * wx;
      const double bot = src.at(y1, x0) * (1 - wx) + src.at(y1, x1) * wx;
      out.at(y, x) = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

inline LabelMap resize_nearest(const LabelMap& src, int height, int width) {
  if (src.height == height && src.width == width) return src;
  LabelMap out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / width));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

inline constexpr const char* kConstantImageFlag = "constant_image";

// Resize to the model resolution and min-max normalize per image to [0,1].
inline ImageSample preprocess(const ImageSample& sample, int height = 512, int width = 512) {
  ImageSample out = sample;
  out.image = resize_bilinear(sample.image, height, width);
  if (sample.label) out.label = resize_nearest(*sample.label, height, width);
  const auto [lo, hi] = std::minmax_element(out.image.pixels.begin(), out.image.pixels.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) {
    std::fill(out.image.pixels.begin(), out.image.pixels.end(), 0.0);
    if (std::find(out.flags.begin(), out.flags.end(), kConstantImageFlag) == out.flags.end())
      out.flags.emplace_back(kConstantImageFlag);
  } else {
    const double range = mx - mn;
    for (auto& v : out.image.pixels) v = (v - mn) / range;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitOptions {
  int n_labeled = 0;  // counted in groups when entries carry a group key
  double val_frac = 0.0;
  double test_frac = 0.0;
  std::uint64_t seed = 0;
};

// Deterministic group-aware, stratum-proportional split. Validation and test
// groups are drawn per stratum (rounded fractions); labeled groups are spread
// over strata by largest remainder.
inline Split make_split(const std::vector<ManifestEntry>& entries, const SplitOptions& opt) {
  if (opt.val_frac < 0 || opt.test_frac < 0 || opt.val_frac + opt.test_frac > 1.0)
    throw DataError("make_split: fractions must be non-negative and sum to at most 1");
  if (opt.n_labeled < 0) throw DataError("make_split: n_labeled must be non-negative");

  std::map<std::string, std::string> group_stratum;
  std::map<std::string, std::vector<std::size_t>> group_members;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string key = entries[i].group.empty() ? "id:" + entries[i].id : "group:" + entries[i].group;
    group_stratum.emplace(key, entries[i].stratum);
    group_members[key].push_back(i);
  }
  std::map<std::string, std::vector<std::string>> strata;
  for (const auto& [g, s] : group_stratum) strata[s].push_back(g);

  std::mt19937_64 gen(stream_seed(opt.seed, "split"));
  std::map<std::string, std::vector<std::string>> train_groups;
  std::vector<std::string> val_groups, test_groups;
  for (auto& [stratum, groups] : strata) {
    std::shuffle(groups.begin(), groups.end(), gen);
    const auto n = static_cast<double>(groups.size());
    const std::size_t n_test = static_cast<std::size_t>(std::lround(opt.test_frac * n));
    const std::size_t n_val = std::min(groups.size() - n_test, static_cast<std::size_t>(std::lround(opt.val_frac * n)));
    test_groups.insert(test_groups.end(), groups.begin(), groups.begin() + n_test);
    val_groups.insert(val_groups.end(), groups.begin() + n_test, groups.begin() + n_test + n_val);
    train_groups[stratum].assign(groups.begin() + n_test + n_val, groups.end());
  }

  std::size_t n_train = 0;
  for (const auto& [s, g] : train_groups) n_train += g.size();
  if (static_cast<std::size_t>(opt.n_labeled) > n_train)
    throw DataError("make_split: n_labeled=" + std::to_string(opt.n_labeled) + " exceeds " + std::to_string(n_train) +
                    " training groups");

  std::map<std::string, std::size_t> quota;
  std::vector<std::pair<double, std::string>> remainders;
  std::size_t assigned = 0;
  for (const auto& [s, g] : train_groups) {
    const double exact = n_train ? static_cast<double>(opt.n_labeled) * g.size() / n_train : 0.0;
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[s];
    remainders.emplace_back(exact - std::floor(exact), s);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < static_cast<std::size_t>(opt.n_labeled) && i < remainders.size(); ++i) {
    if (quota[remainders[i].second] < train_groups[remainders[i].second].size()) {
      ++quota[remainders[i].second];
      ++assigned;
    }
  }

  std::map<std::string, int> role;  // 0 labeled, 1 unlabeled, 2 val, 3 test
  for (const auto& [s, g] : train_groups)
    for (std::size_t i = 0; i < g.size(); ++i) role[g[i]] = i < quota[s] ? 0 : 1;
  for (const auto& g : val_groups) role[g] = 2;
  for (const auto& g : test_groups) role[g] = 3;

  Split split;
  std::vector<std::string>* targets[] = {&split.labeled_ids, &split.unlabeled_ids, &split.val_ids, &split.test_ids};
  std::vector<std::pair<std::size_t, int>> ordered;
  for (const auto& [g, members] : group_members)
    for (std::size_t idx : members) ordered.emplace_back(idx, role[g]);
  std::sort(ordered.begin(), ordered.end());
  for (const auto& [idx, r] : ordered) targets[r]->push_back(entries[idx].id);
  for (const auto& id : split.labeled_ids)
    for (const auto& e : entries)
      if (e.id == id && !e.label_path) throw DataError("make_split: labeled entry " + id + " has no label");
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticOptions {
  int n_samples = 20;
  int resolution = 32;
  int num_classes = 2;
  std::uint64_t seed = 0;
  int max_distractors = 2;  // unlabeled bright blobs per image
  double noise = 0.06;
};

namespace detail {

struct Ellipse {
  double cy, cx, ry, rx, angle;
  // <= 1 inside.
  double level(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return u * u + v * v;
  }
  Ellipse grown(double t) const { return {cy, cx, ry + t, rx + t, angle}; }
  double extent() const { return std::max(ry, rx); }
};

}  // namespace detail

// Class 1 is a filled ellipse; class 2 (when present) an annulus enclosing it;
// further classes are separate ellipses. Distractors share class 1's intensity
// but stay unlabeled.
inline ImageSample generate_synthetic_sample(const SyntheticOptions& opt, int index) {
  const int res = opt.resolution;
  const double R = res;
  std::mt19937_64 gen(derive_seed(opt.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(gen); };

  for (int attempt = 0;; ++attempt) {
    if (attempt > 200) throw DataError("generate_synthetic: could not place shapes");
    std::vector<std::pair<int, detail::Ellipse>> shapes;  // (class, outer ellipse), painted in order
    const double ry = uni(0.10, 0.18) * R, rx = uni(0.10, 0.18) * R;
    const double ring = opt.num_classes >= 3 ? std::max(2.0, uni(0.05, 0.08) * R) : 0.0;
    const double outer = std::max(ry, rx) + ring;
    const double margin = outer + 2.0;
    if (2 * margin >= R) continue;
    const detail::Ellipse core{uni(margin, R - margin), uni(margin, R - margin), ry, rx, uni(0, std::numbers::pi)};
    std::vector<detail::Ellipse> occupied{core.grown(ring + 1.0)};
    auto free_spot = [&](const detail::Ellipse& e) {
      if (e.cy - e.extent() < 1 || e.cx - e.extent() < 1 || e.cy + e.extent() > R - 2 || e.cx + e.extent() > R - 2)
        return false;
      for (const auto& o : occupied) {
        const double d = std::hypot(e.cy - o.cy, e.cx - o.cx);
        if (d < e.extent() + o.extent() + 1.5) return false;
      }
      return true;
    };
    bool ok = true;
    std::vector<std::pair<int, detail::Ellipse>> extra;
    for (int k = 3; k < opt.num_classes && ok; ++k) {
      bool placed = false;
      for (int t = 0; t < 100 && !placed; ++t) {
        const detail::Ellipse e{uni(0, R), uni(0, R), uni(0.06, 0.12) * R, uni(0.06, 0.12) * R, uni(0, std::numbers::pi)};
        if (free_spot(e)) {
          extra.emplace_back(k, e);
          occupied.push_back(e);
          placed = true;
        }
      }
      ok = placed;
    }
    if (!ok) continue;
    std::vector<detail::Ellipse> distractors;
    const int n_distract = opt.max_distractors > 0
                               ? static_cast<int>(std::floor(U(gen) * (opt.max_distractors + 1)))
                               : 0;
    for (int d = 0; d < n_distract; ++d)
      for (int t = 0; t < 50; ++t) {
        const double r = uni(0.04, 0.07) * R;
        const detail::Ellipse e{uni(0, R), uni(0, R), r, r, 0.0};
        if (free_spot(e)) {
          distractors.push_back(e);
          occupied.push_back(e);
          break;
        }
      }

    std::vector<double> intensity(opt.num_classes + 1);
    const double bg = uni(0.15, 0.30);
    intensity[0] = bg;
    intensity[1] = uni(0.75, 0.95);
    if (opt.num_classes >= 3) intensity[2] = uni(0.45, 0.60);
    for (int k = 3; k < opt.num_classes; ++k) intensity[k] = uni(0.55, 0.85);
    const double distract_level = intensity[1] * uni(0.85, 1.0);
    const double gy = uni(-0.08, 0.08), gx = uni(-0.08, 0.08);

    auto class_at = [&](double y, double x) {
      for (const auto& [k, e] : extra)
        if (e.level(y, x) <= 1.0) return k;
      if (core.level(y, x) <= 1.0) return 1;
      if (opt.num_classes >= 3) {
        const detail::Ellipse outer_e{core.cy, core.cx, core.ry + ring, core.rx + ring, core.angle};
        if (outer_e.level(y, x) <= 1.0) return 2;
      }
      return 0;
    };
    auto distract_at = [&](double y, double x) {
      for (const auto& e : distractors)
        if (e.level(y, x) <= 1.0) return true;
      return false;
    };

    ImageSample s;
    s.id = "synth_" + std::to_string(index);
    s.image = Image(res, res);
    s.label = LabelMap(res, res);
    s.spacing = Spacing{};
    std::normal_distribution<double> noise(0.0, opt.noise);
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        s.label->at(y, x) = class_at(y, x);
        // 2x2 supersampling for soft edges.
        double v = 0.0;
        for (int sy = 0; sy < 2; ++sy)
          for (int sx = 0; sx < 2; ++sx) {
            const double py = y - 0.25 + 0.5 * sy, px = x - 0.25 + 0.5 * sx;
            const int k = class_at(py, px);
            v += (k == 0 && distract_at(py, px)) ? distract_level : intensity[k];
          }
        v *= 0.25;
        v += gy * (y / R - 0.5) + gx * (x / R - 0.5) + noise(gen);
        s.image.at(y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
      }
    std::vector<bool> present(opt.num_classes, false);
    for (int v : s.label->labels) present[v] = true;
    bool all = true;
    for (int k = 1; k < opt.num_classes; ++k) all = all && present[k];
    if (!all) continue;
    return s;
  }
}

inline std::vector<ImageSample> generate_synthetic(const SyntheticOptions& opt) {
  if (opt.n_samples < 0 || opt.resolution < 8 || opt.num_classes < 2)
    throw DataError("generate_synthetic: invalid options");
  std::vector<ImageSample> out;
  out.reserve(static_cast<std::size_t>(opt.n_samples));
  for (int i = 0; i < opt.n_samples; ++i) out.push_back(generate_synthetic_sample(opt, i));
  return out;
}

// Writes images/, labels/ and manifest.json under `root`; returns the manifest.
// Samples that land in the unlabeled split get no label file.
inline Manifest write_dataset(const fs::path& root, const std::vector<ImageSample>& samples, int num_classes,
                              const SplitOptions& split) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  Manifest m;
  m.num_classes = num_classes;
  m.seed = split.seed;
  m.root = root;
  for (const auto& s : samples) {
    ManifestEntry e;
    e.id = s.id;
    e.image_path = "images/" + s.id + ".pgm";
    if (s.label) e.label_path = "labels/" + s.id + ".pgm";
    e.spacing = s.spacing;
    m.entries.push_back(std::move(e));
  }
  m.split = make_split(m.entries, split);
  const std::set<std::string> unlabeled(m.split.unlabeled_ids.begin(), m.split.unlabeled_ids.end());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& e = m.entries[i];
    write_image_pgm(root / e.image_path, samples[i].image);
    if (unlabeled.count(e.id)) e.label_path.reset();
    if (e.label_path) write_label_pgm(root / *e.label_path, *samples[i].label);
  }
  write_manifest(m, root / "manifest.json");
  return m;
}

}  // namespace cpcsam
