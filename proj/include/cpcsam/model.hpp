// Dual-decoder promptable segmenter.
//
// Shared image encoder (patch embedding + transformer blocks, frozen apart from
// LoRA factors on the query/value projections), shared prompt encoder (random
// Fourier point encoding + one learned embedding per class + learned default
// dense embedding) and two structurally identical, independently initialized
// mask decoders with 2x transposed-convolution upsampling stages.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "cpcsam/autograd.hpp"
#include "cpcsam/image.hpp"
#include "cpcsam/prompt_geometry.hpp"
#include "cpcsam/rng.hpp"

namespace cpcsam {

enum class ParamGroup { encoder_base, lora, prompt_encoder, decoder };

inline std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder_base: return "encoder_base";
    case ParamGroup::lora: return "lora";
    case ParamGroup::prompt_encoder: return "prompt_encoder";
    case ParamGroup::decoder: return "decoder";
  }
  return "unknown";
}

struct Parameter {
  std::string name;
  Var var;
  ParamGroup group = ParamGroup::decoder;
  bool trainable = true;
};

struct ModelConfig {
  int num_classes = 2;
  int height = 32;
  int width = 32;
  int patch = 4;
  int channels = 3;
  int dim = 32;
  int depth = 2;
  int heads = 2;
  int mlp_ratio = 2;
  int min_decoder_dim = 8;
  int num_decoders = 2;
  std::uint64_t seed = 0;

  int grid_height() const { return height / patch; }
  int grid_width() const { return width / patch; }

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("model.num_classes must be at least 2");
    if (patch <= 0 || (patch & (patch - 1)) != 0) throw std::invalid_argument("model.patch must be a power of two");
    if (height <= 0 || width <= 0 || height % patch != 0 || width % patch != 0)
      throw std::invalid_argument("model resolution must be a positive multiple of the patch size");
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("model.dim must be positive and even");
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("model.heads must divide model.dim");
    if (depth < 1) throw std::invalid_argument("model.depth must be at least 1");
    if (channels < 1 || mlp_ratio < 1 || min_decoder_dim < 1) throw std::invalid_argument("model sizes must be positive");
    if (num_decoders != 1 && num_decoders != 2) throw std::invalid_argument("model.num_decoders must be 1 or 2");
  }
};

struct LoraConfig {
  int rank = 4;
  double scaling = 1.0;
  double init_std = 0.02;
};

// Output of the prompt encoder: sparse point tokens (possibly none) and the
// dense grid embedding.
struct PromptEmbedding {
  std::optional<Var> sparse;
  Var dense;
};

namespace detail {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : gen_(seed) {}
  std::vector<double> normal(std::size_t count, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> out(count);
    for (auto& x : out) x = dist(gen_);
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace detail

class PromptableSegmenter {
 public:
  explicit PromptableSegmenter(ModelConfig config) : config_(config) {
    config_.validate();
    build();
  }
  PromptableSegmenter(const PromptableSegmenter&) = delete;
  PromptableSegmenter& operator=(const PromptableSegmenter&) = delete;
  PromptableSegmenter(PromptableSegmenter&&) = default;
  PromptableSegmenter& operator=(PromptableSegmenter&&) = default;

  // Deep copy with independent parameter storage.
  PromptableSegmenter clone() const {
    PromptableSegmenter copy(config_);
    if (lora_) copy.apply_lora(*lora_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].var.value();
      copy.params_[i].var.mutable_value().assign(src.begin(), src.end());
    }
    return copy;
  }

  const ModelConfig& config() const { return config_; }
  const std::optional<LoraConfig>& lora() const { return lora_; }
  int num_classes() const { return config_.num_classes; }
  int num_decoders() const { return config_.num_decoders; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  const Parameter& parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    throw std::out_of_range("unknown parameter " + name);
  }

  std::size_t trainable_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.var.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Adds trainable rank-r factor pairs in parallel to every query and value
  // projection of the encoder. B starts at zero so outputs are unchanged.
  void apply_lora(const LoraConfig& cfg) {
    if (cfg.rank <= 0) throw std::invalid_argument("LoRA rank must be positive");
    if (!(cfg.scaling > 0.0)) throw std::invalid_argument("LoRA scaling must be positive");
    if (blocks_.empty()) throw std::invalid_argument("apply_lora: encoder has no attention block");
    if (lora_) throw std::logic_error("apply_lora: already applied");
    lora_ = cfg;
    detail::Initializer init(stream_seed(config_.seed, "lora"));
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    const std::size_t r = static_cast<std::size_t>(cfg.rank);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (auto* proj : {&blocks_[b].q, &blocks_[b].v}) {
        const std::string base = "encoder.block" + std::to_string(b) + "." + proj->name;
        proj->lora_a = add_param(base + ".lora_a", d, r, init.normal(d * r, cfg.init_std), ParamGroup::lora, true);
        proj->lora_b = add_param(base + ".lora_b", r, d, std::vector<double>(r * d, 0.0), ParamGroup::lora, true);
        proj->lora_scaling = cfg.scaling;
      }
    }
  }

  // Image encoder: (grid_h*grid_w x dim) feature embedding.
  Var encode(const Image& image) const {
    if (image.height != config_.height || image.width != config_.width)
      throw std::invalid_argument("encode: image resolution " + std::to_string(image.height) + "x" +
                                  std::to_string(image.width) + " does not match model input " +
                                  std::to_string(config_.height) + "x" + std::to_string(config_.width));
    const int p = config_.patch, gh = config_.grid_height(), gw = config_.grid_width();
    const std::size_t patch_len = static_cast<std::size_t>(p) * p * config_.channels;
    std::vector<double> patches(static_cast<std::size_t>(gh) * gw * patch_len);
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        double* dst = patches.data() + (static_cast<std::size_t>(gy) * gw + gx) * patch_len;
        std::size_t k = 0;
        for (int ch = 0; ch < config_.channels; ++ch)
          for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx) dst[k++] = image.at(gy * p + dy, gx * p + dx);
      }
    Var x = Var::constant(static_cast<std::size_t>(gh) * gw, patch_len, std::move(patches));
    x = ag::add(linear(x, patch_embed_), pos_embed_);
    for (const auto& block : blocks_) x = encoder_block(x, block);
    return ag::layer_norm(x, neck_gain_, neck_bias_);
  }

  // Positional + class embedding per point; none gives the default dense
  // embedding alone.
  PromptEmbedding prompt_encode(const PromptSet* prompts) const {
    PromptEmbedding out;
    out.dense = dense_default_;
    if (prompts == nullptr || prompts->empty()) return out;
    std::vector<double> pe;
    std::vector<std::size_t> classes;
    for (const auto& pt : prompts->points) {
      if (pt.row < 0 || pt.row >= config_.height || pt.col < 0 || pt.col >= config_.width)
        throw std::invalid_argument("prompt_encode: point out of bounds");
      if (pt.class_id < 0 || pt.class_id >= config_.num_classes)
        throw std::invalid_argument("prompt_encode: class id out of range");
      const auto enc = fourier((pt.col + 0.5) / config_.width, (pt.row + 0.5) / config_.height);
      pe.insert(pe.end(), enc.begin(), enc.end());
      classes.push_back(static_cast<std::size_t>(pt.class_id));
    }
    const std::size_t n = prompts->size();
    out.sparse = ag::add(Var::constant(n, static_cast<std::size_t>(config_.dim), std::move(pe)),
                         ag::gather_rows(class_embed_, classes));
    return out;
  }
  PromptEmbedding prompt_encode(const PromptSet& prompts) const { return prompt_encode(&prompts); }
  PromptEmbedding prompt_encode() const { return prompt_encode(nullptr); }

  // Probability map (height*width x num_classes) from decoder `branch` (1-based).
  Var decode(int branch, const Var& features, const PromptEmbedding& prompt) const {
    if (branch < 1 || branch > config_.num_decoders) throw std::invalid_argument("decode: unknown branch id");
    const Decoder& dec = decoders_[static_cast<std::size_t>(branch - 1)];
    Var x = ag::add(features, prompt.dense);
    Var tokens = prompt.sparse ? ag::concat_rows({dec.out_tokens, *prompt.sparse}) : dec.out_tokens;

    tokens = ag::layer_norm(ag::add(tokens, attention(tokens, tokens, tokens, dec.self_attn)), dec.ln1_g, dec.ln1_b);
    const Var keyed = ag::add(x, image_pe_);
    tokens = ag::layer_norm(ag::add(tokens, attention(tokens, keyed, x, dec.token_to_image)), dec.ln2_g, dec.ln2_b);
    x = ag::layer_norm(ag::add(x, attention(keyed, tokens, tokens, dec.image_to_token)), dec.ln3_g, dec.ln3_b);

    std::size_t h = static_cast<std::size_t>(config_.grid_height());
    std::size_t w = static_cast<std::size_t>(config_.grid_width());
    for (const auto& stage : dec.upsample) {
      x = ag::gelu(ag::pixel_shuffle2(linear(x, stage), h, w));
      h *= 2;
      w *= 2;
    }
    return ag::softmax_rows(linear(x, dec.head));
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& p : params_) names.push_back(p.name);
    return names;
  }

 private:
  struct Linear {
    std::string name;
    Var weight;  // in x out
    Var bias;    // 1 x out
    std::optional<Var> lora_a;  // in x r
    std::optional<Var> lora_b;  // r x out
    double lora_scaling = 1.0;
  };

  struct EncoderBlock {
    Var ln1_g, ln1_b, ln2_g, ln2_b;
    Linear q, k, v, o, fc1, fc2;
  };

  struct Attention {
    Linear q, k, v, o;
  };

  struct Decoder {
    Var out_tokens;
    Attention self_attn, token_to_image, image_to_token;
    Var ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    std::vector<Linear> upsample;
    Linear head;
  };

  Var add_param(const std::string& name, std::size_t rows, std::size_t cols, std::vector<double> values,
                ParamGroup group, bool trainable) {
    Var v = Var::constant(rows, cols, std::move(values));
    v.set_requires_grad(trainable);
    params_.push_back({name, v, group, trainable});
    return v;
  }

  Linear make_linear(const std::string& name, const std::string& local, std::size_t in, std::size_t out,
                     detail::Initializer& init, ParamGroup group, bool trainable) {
    Linear l;
    l.name = local;
    l.weight = add_param(name + ".weight", in, out, init.normal(in * out, 1.0 / std::sqrt(static_cast<double>(in))),
                         group, trainable);
    l.bias = add_param(name + ".bias", 1, out, std::vector<double>(out, 0.0), group, trainable);
    return l;
  }

  std::pair<Var, Var> make_norm(const std::string& name, std::size_t dim, ParamGroup group, bool trainable) {
    Var g = add_param(name + ".gain", 1, dim, std::vector<double>(dim, 1.0), group, trainable);
    Var b = add_param(name + ".bias", 1, dim, std::vector<double>(dim, 0.0), group, trainable);
    return {g, b};
  }

  Attention make_attention(const std::string& name, detail::Initializer& init) {
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    return {make_linear(name + ".q", "q", d, d, init, ParamGroup::decoder, true),
            make_linear(name + ".k", "k", d, d, init, ParamGroup::decoder, true),
            make_linear(name + ".v", "v", d, d, init, ParamGroup::decoder, true),
            make_linear(name + ".o", "o", d, d, init, ParamGroup::decoder, true)};
  }

  void build() {
    const std::size_t d = static_cast<std::size_t>(config_.dim);
    const std::size_t tokens = static_cast<std::size_t>(config_.grid_height()) * config_.grid_width();
    const std::size_t patch_len = static_cast<std::size_t>(config_.patch) * config_.patch * config_.channels;

    // Encoder: stand-in for pretrained weights, frozen.
    {
      detail::Initializer init(stream_seed(config_.seed, "encoder"));
      patch_embed_ = make_linear("encoder.patch_embed", "patch_embed", patch_len, d, init, ParamGroup::encoder_base,
                                 false);
      pos_embed_ = add_param("encoder.pos_embed", tokens, d, init.normal(tokens * d, 0.02), ParamGroup::encoder_base,
                             false);
      const std::size_t hidden = d * static_cast<std::size_t>(config_.mlp_ratio);
      for (int b = 0; b < config_.depth; ++b) {
        const std::string base = "encoder.block" + std::to_string(b);
        EncoderBlock blk;
        std::tie(blk.ln1_g, blk.ln1_b) = make_norm(base + ".ln1", d, ParamGroup::encoder_base, false);
        blk.q = make_linear(base + ".q", "q", d, d, init, ParamGroup::encoder_base, false);
        blk.k = make_linear(base + ".k", "k", d, d, init, ParamGroup::encoder_base, false);
        blk.v = make_linear(base + ".v", "v", d, d, init, ParamGroup::encoder_base, false);
        blk.o = make_linear(base + ".o", "o", d, d, init, ParamGroup::encoder_base, false);
        std::tie(blk.ln2_g, blk.ln2_b) = make_norm(base + ".ln2", d, ParamGroup::encoder_base, false);
        blk.fc1 = make_linear(base + ".fc1", "fc1", d, hidden, init, ParamGroup::encoder_base, false);
        blk.fc2 = make_linear(base + ".fc2", "fc2", hidden, d, init, ParamGroup::encoder_base, false);
        blocks_.push_back(std::move(blk));
      }
      std::tie(neck_gain_, neck_bias_) = make_norm("encoder.neck", d, ParamGroup::encoder_base, false);
    }

    // Prompt encoder. The Fourier projection is a fixed buffer, not a parameter.
    {
      detail::Initializer init(stream_seed(config_.seed, "prompt_encoder"));
      fourier_ = init.normal(d, 1.0);  // 2 x d/2
      class_embed_ = add_param("prompt.class_embed", static_cast<std::size_t>(config_.num_classes), d,
                               init.normal(static_cast<std::size_t>(config_.num_classes) * d, 1.0),
                               ParamGroup::prompt_encoder, true);
      dense_default_ = add_param("prompt.dense_default", tokens, d, init.normal(tokens * d, 0.02),
                                 ParamGroup::prompt_encoder, true);
      std::vector<double> pe;
      pe.reserve(tokens * d);
      for (int gy = 0; gy < config_.grid_height(); ++gy)
        for (int gx = 0; gx < config_.grid_width(); ++gx) {
          const auto enc = fourier((gx + 0.5) / config_.grid_width(), (gy + 0.5) / config_.grid_height());
          pe.insert(pe.end(), enc.begin(), enc.end());
        }
      image_pe_ = Var::constant(tokens, d, std::move(pe));
    }

    for (int b = 1; b <= config_.num_decoders; ++b) {
      detail::Initializer init(stream_seed(config_.seed, "decoder" + std::to_string(b)));
      const std::string base = "decoder" + std::to_string(b);
      Decoder dec;
      const std::size_t n_tokens = static_cast<std::size_t>(config_.num_classes);
      dec.out_tokens = add_param(base + ".out_tokens", n_tokens, d, init.normal(n_tokens * d, 1.0),
                                 ParamGroup::decoder, true);
      dec.self_attn = make_attention(base + ".self_attn", init);
      dec.token_to_image = make_attention(base + ".token_to_image", init);
      dec.image_to_token = make_attention(base + ".image_to_token", init);
      std::tie(dec.ln1_g, dec.ln1_b) = make_norm(base + ".ln1", d, ParamGroup::decoder, true);
      std::tie(dec.ln2_g, dec.ln2_b) = make_norm(base + ".ln2", d, ParamGroup::decoder, true);
      std::tie(dec.ln3_g, dec.ln3_b) = make_norm(base + ".ln3", d, ParamGroup::decoder, true);
      std::size_t in = d;
      int stage = 0;
      for (int scale = config_.patch; scale > 1; scale /= 2, ++stage) {
        const std::size_t out = std::max<std::size_t>(in / 2, static_cast<std::size_t>(config_.min_decoder_dim));
        dec.upsample.push_back(make_linear(base + ".up" + std::to_string(stage), "up", in, 4 * out, init,
                                           ParamGroup::decoder, true));
        in = out;
      }
      dec.head = make_linear(base + ".head", "head", in, static_cast<std::size_t>(config_.num_classes), init,
                             ParamGroup::decoder, true);
      decoders_.push_back(std::move(dec));
    }
  }

  // Coordinates in [0,1]; returns [sin, cos] of 2*pi*(2*coord-1) projected.
  std::vector<double> fourier(double x, double y) const {
    const std::size_t half = static_cast<std::size_t>(config_.dim) / 2;
    std::vector<double> out(2 * half);
    const double cx = 2.0 * x - 1.0, cy = 2.0 * y - 1.0;
    for (std::size_t j = 0; j < half; ++j) {
      const double a = 2.0 * std::numbers::pi * (cx * fourier_[j] + cy * fourier_[half + j]);
      out[j] = std::sin(a);
      out[half + j] = std::cos(a);
    }
    return out;
  }

  static Var linear(const Var& x, const Linear& l) {
    Var y = ag::add_row(ag::matmul(x, l.weight), l.bias);
    if (l.lora_a && l.lora_b)
      y = ag::add(y, ag::scale(ag::matmul(ag::matmul(x, *l.lora_a), *l.lora_b), l.lora_scaling));
    return y;
  }

  Var multi_head(const Var& q, const Var& k, const Var& v, int heads) const {
    const std::size_t dh = q.cols() / static_cast<std::size_t>(heads);
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    if (heads == 1) return ag::matmul(ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv)), v);
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dh;
      const Var qs = ag::slice_cols(q, off, dh), ks = ag::slice_cols(k, off, dh), vs = ag::slice_cols(v, off, dh);
      outs.push_back(ag::matmul(ag::softmax_rows(ag::scale(ag::matmul_nt(qs, ks), inv)), vs));
    }
    return ag::concat_cols(outs);
  }

  Var attention(const Var& queries, const Var& keys, const Var& values, const Attention& a) const {
    return linear(multi_head(linear(queries, a.q), linear(keys, a.k), linear(values, a.v), 1), a.o);
  }

  Var encoder_block(const Var& x, const EncoderBlock& b) const {
    const Var h = ag::layer_norm(x, b.ln1_g, b.ln1_b);
    const Var attn = linear(multi_head(linear(h, b.q), linear(h, b.k), linear(h, b.v), config_.heads), b.o);
    const Var y = ag::add(x, attn);
    const Var mlp = linear(ag::gelu(linear(ag::layer_norm(y, b.ln2_g, b.ln2_b), b.fc1)), b.fc2);
    return ag::add(y, mlp);
  }

  ModelConfig config_;
  std::optional<LoraConfig> lora_;
  std::vector<Parameter> params_;

  Linear patch_embed_;
  Var pos_embed_;
  std::vector<EncoderBlock> blocks_;
  Var neck_gain_, neck_bias_;

  std::vector<double> fourier_;
  Var class_embed_;
  Var dense_default_;
  Var image_pe_;

  std::vector<Decoder> decoders_;
};

// Smallest power-of-two patch (at least 4) that keeps the token grid within 16x16.
inline int toy_patch_size(int height, int width) {
  int patch = 4;
  while (height / patch > 16 || width / patch > 16) patch *= 2;
  return patch;
}

inline PromptableSegmenter build_toy_model(int num_classes, int height, int width, std::uint64_t seed,
                                           ModelConfig base = {}) {
  base.patch = toy_patch_size(height, width);
  base.num_classes = num_classes;
  base.height = height;
  base.width = width;
  base.seed = seed;
  return PromptableSegmenter(base);
}

}  // namespace cpcsam
