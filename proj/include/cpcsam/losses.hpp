// Segmentation losses: Dice, cross-entropy and the semi-supervised composites
// built from them. Every loss is a graph node whose gradient with respect to
// the prediction is computed analytically; targets enter as plain maps and so
// never receive gradient.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cpcsam/autograd.hpp"
#include "cpcsam/prob_map.hpp"

namespace cpcsam {

struct LossMix {
  double dice = 0.5;
  double ce = 0.5;
};

enum class PseudoLabel { hard, soft };

struct LossConfig {
  double lambda1 = 0.4;
  double lambda2 = 0.05;
  LossMix supervised_unprompted{0.8, 0.2};
  LossMix supervised_prompted{0.5, 0.5};
  LossMix unsupervised{0.5, 0.5};
  double dice_eps = 1e-5;
  PseudoLabel pseudo_label = PseudoLabel::hard;

  // Empty string when valid, otherwise the offending field and reason.
  std::string validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!finite_nonneg(lambda1)) return "loss.lambda1 must be a non-negative number";
    if (!finite_nonneg(lambda2)) return "loss.lambda2 must be a non-negative number";
    const std::pair<const char*, LossMix> mixes[] = {{"loss.supervised_unprompted", supervised_unprompted},
                                                     {"loss.supervised_prompted", supervised_prompted},
                                                     {"loss.unsupervised", unsupervised}};
    for (const auto& [name, mix] : mixes) {
      if (!finite_nonneg(mix.dice) || !finite_nonneg(mix.ce))
        return std::string(name) + " weights must be non-negative";
      if (std::abs(mix.dice + mix.ce - 1.0) > 1e-12) return std::string(name) + " weights must sum to 1";
    }
    if (!(dice_eps > 0.0) || !std::isfinite(dice_eps)) return "loss.dice_eps must be positive";
    return {};
  }
};

inline constexpr double kProbabilityFloor = 1e-7;

namespace detail {

inline void check_map_var(const Var& pred, const ProbMap& target, const char* op) {
  if (pred.rows() != target.pixels() || pred.cols() != static_cast<std::size_t>(target.classes))
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

inline Var as_var(const ProbMap& m, bool requires_grad = false) {
  std::vector<double> values = m.data;
  return requires_grad ? Var::leaf(m.pixels(), m.classes, std::move(values))
                       : Var::constant(m.pixels(), m.classes, std::move(values));
}

inline ProbMap as_map(const Var& v, int height, int width) {
  if (v.rows() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("as_map: shape mismatch");
  return ProbMap(height, width, static_cast<int>(v.cols()), std::vector<double>(v.value().begin(), v.value().end()));
}

// Harden (argmax one-hot) or copy a map into a detached supervision target.
inline ProbMap pseudo_target(const ProbMap& source, PseudoLabel mode = PseudoLabel::hard) {
  if (mode == PseudoLabel::soft) return source;
  const auto labels = source.argmax();
  return one_hot(labels, source.height, source.width, source.classes);
}

// 1 - mean over included foreground classes of (2*sum(p*t) + eps) / (sum p + sum t + eps).
// `include[k]` (when given) selects which classes enter the mean; background is
// never included. No included class gives 0.
inline Var dice_loss(const Var& pred, const ProbMap& target, double eps = 1e-5,
                     const std::vector<bool>& include = {}) {
  detail::check_map_var(pred, target, "dice_loss");
  const std::size_t n = target.pixels();
  const int c = target.classes;
  if (!include.empty() && include.size() != static_cast<std::size_t>(c))
    throw std::invalid_argument("dice_loss: class mask size mismatch");
  std::vector<int> classes;
  for (int k = 1; k < c; ++k)
    if (include.empty() || include[k]) classes.push_back(k);
  if (classes.empty()) return ag::detail::make_result(1, 1, {0.0}, {pred}, [](Node&) {});

  const auto p = pred.value();
  std::vector<double> inter(c, 0.0), psum(c, 0.0), tsum(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (int k : classes) {
      inter[k] += p[i * c + k] * target.data[i * c + k];
      psum[k] += p[i * c + k];
      tsum[k] += target.data[i * c + k];
    }
  double mean_score = 0.0;
  for (int k : classes) mean_score += (2.0 * inter[k] + eps) / (psum[k] + tsum[k] + eps);
  const double inv_k = 1.0 / static_cast<double>(classes.size());
  mean_score *= inv_k;

  return ag::detail::make_result(
      1, 1, {1.0 - mean_score}, {pred},
      [=, t = target.data, classes = std::move(classes)](Node& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double up = self.grad[0];
        for (int k : classes) {
          const double denom = psum[k] + tsum[k] + eps;
          const double num = 2.0 * inter[k] + eps;
          for (std::size_t i = 0; i < n; ++i) {
            const double d_score = (2.0 * t[i * c + k] * denom - num) / (denom * denom);
            g[i * c + k] -= up * inv_k * d_score;
          }
        }
      });
}

// Mean over pixels of -sum_k t*log(max(p, floor)).
inline Var ce_loss(const Var& pred, const ProbMap& target) {
  detail::check_map_var(pred, target, "ce_loss");
  const std::size_t n = target.pixels();
  const std::size_t total = n * target.classes;
  const auto p = pred.value();
  double loss = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    const double t = target.data[i];
    if (t != 0.0) loss -= t * std::log(std::max(p[i], kProbabilityFloor));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return ag::detail::make_result(1, 1, {loss * inv_n}, {pred}, [=, t = target.data](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    const auto& pv = self.parents[0]->value;
    for (std::size_t i = 0; i < total; ++i)
      if (t[i] != 0.0 && pv[i] > kProbabilityFloor) g[i] -= up * inv_n * t[i] / pv[i];
  });
}

inline Var mixed_loss(const Var& pred, const ProbMap& target, LossMix mix, double eps = 1e-5,
                      const std::vector<bool>& include = {}) {
  return ag::weighted_sum({dice_loss(pred, target, eps, include), ce_loss(pred, target)}, {mix.dice, mix.ce});
}

// Classes entering Dice for pseudo-supervised terms: present in the target or
// prompted. An empty `prompted` means every foreground class was prompted.
inline std::vector<bool> dice_classes(const ProbMap& target, const std::vector<bool>& prompted) {
  if (prompted.empty()) return {};
  std::vector<bool> include(target.classes, false);
  for (std::size_t i = 0; i < target.pixels(); ++i)
    for (int k = 1; k < target.classes; ++k)
      if (target.data[i * target.classes + k] > 0.0) include[k] = true;
  for (int k = 1; k < target.classes && k < static_cast<int>(prompted.size()); ++k)
    include[k] = include[k] || prompted[k];
  return include;
}

namespace detail {

inline Var pseudo_supervised(const Var& pred, const Var& source, int height, int width, const LossConfig& cfg,
                             const std::vector<bool>& prompted) {
  const ProbMap target = pseudo_target(as_map(source, height, width), cfg.pseudo_label);
  const auto include = dice_classes(target, prompted);
  return mixed_loss(pred, target, cfg.unsupervised, cfg.dice_eps, include);
}

inline Var zero_scalar(std::vector<Var> const& inputs) {
  return ag::detail::make_result(1, 1, {0.0}, inputs, [](Node&) {});
}

}  // namespace detail

struct MapShape {
  int height = 0;
  int width = 0;
};

// Symmetric cross-branch loss: each unprompted map is supervised by the other
// branch's (detached, hardened) prompted ensemble. The unsupervised mix already
// carries the 1/2 on dice and ce. A masked sample contributes 0.
inline Var cross_prompting_loss(const Var& p1, const Var& p2, const Var& e1, const Var& e2, MapShape shape,
                                bool masked, const LossConfig& cfg = {}, const std::vector<bool>& prompted1 = {},
                                const std::vector<bool>& prompted2 = {}) {
  ag::detail::require_same_shape(p1, p2, "cross_prompting_loss");
  ag::detail::require_same_shape(p1, e1, "cross_prompting_loss");
  ag::detail::require_same_shape(p1, e2, "cross_prompting_loss");
  if (masked) return detail::zero_scalar({p1, p2});
  // p1 is pulled toward branch 2's ensemble, whose prompts came from branch 1.
  return ag::weighted_sum({detail::pseudo_supervised(p1, e2, shape.height, shape.width, cfg, prompted2),
                           detail::pseudo_supervised(p2, e1, shape.height, shape.width, cfg, prompted1)},
                          {1.0, 1.0});
}

// Prompt consistency: every random-prompted map of a branch is pulled toward
// that branch's detached ensemble. Multiple random maps are averaged; none gives 0.
inline Var pcr_loss_multi(const std::vector<Var>& randoms1, const Var& e1, const std::vector<Var>& randoms2,
                          const Var& e2, MapShape shape, bool masked, const LossConfig& cfg = {},
                          const std::vector<bool>& prompted1 = {}, const std::vector<bool>& prompted2 = {}) {
  std::vector<Var> inputs(randoms1);
  inputs.insert(inputs.end(), randoms2.begin(), randoms2.end());
  if (masked || (randoms1.empty() && randoms2.empty())) return detail::zero_scalar(inputs);
  std::vector<Var> terms;
  std::vector<double> weights;
  auto add_branch = [&](const std::vector<Var>& randoms, const Var& ensemble, const std::vector<bool>& prompted) {
    for (const auto& r : randoms) {
      ag::detail::require_same_shape(r, ensemble, "pcr_loss");
      terms.push_back(detail::pseudo_supervised(r, ensemble, shape.height, shape.width, cfg, prompted));
      weights.push_back(1.0 / static_cast<double>(randoms.size()));
    }
  };
  add_branch(randoms1, e1, prompted1);
  add_branch(randoms2, e2, prompted2);
  return ag::weighted_sum(terms, weights);
}

inline Var pcr_loss(const Var& r1, const Var& e1, const Var& r2, const Var& e2, MapShape shape, bool masked,
                    const LossConfig& cfg = {}) {
  return pcr_loss_multi({r1}, e1, {r2}, e2, shape, masked, cfg);
}

// Supervised composite on labeled data: unprompted maps with the unprompted
// mix, prompted maps with the prompted mix. `prompted_scale` multiplies the
// prompted sum (1 for the one-center-one-random layout).
inline Var supervised_loss(const std::vector<Var>& unprompted, const std::vector<Var>& prompted, const ProbMap& y,
                           const LossConfig& cfg = {}, double prompted_scale = 1.0) {
  if (!is_one_hot(y)) throw std::invalid_argument("supervised_loss: target is not one-hot");
  std::vector<Var> terms;
  std::vector<double> weights;
  for (const auto& p : unprompted) {
    terms.push_back(mixed_loss(p, y, cfg.supervised_unprompted, cfg.dice_eps));
    weights.push_back(1.0);
  }
  for (const auto& p : prompted) {
    terms.push_back(mixed_loss(p, y, cfg.supervised_prompted, cfg.dice_eps));
    weights.push_back(prompted_scale);
  }
  if (terms.empty()) return Var::zeros(1, 1);
  return ag::weighted_sum(terms, weights);
}

// Six-map form: two unprompted, two center-prompted, two random-prompted.
inline Var supervised_loss(const Var& p1, const Var& p2, const Var& p1c, const Var& p2c, const Var& p1r,
                           const Var& p2r, const ProbMap& y, const LossConfig& cfg = {}) {
  return supervised_loss({p1, p2}, {p1c, p2c, p1r, p2r}, y, cfg);
}

inline double total_loss(double l_s, double l_cross, double l_c, const LossConfig& cfg = {}) {
  if (!std::isfinite(l_s) || !std::isfinite(l_cross) || !std::isfinite(l_c))
    throw std::domain_error("non-finite loss");
  return l_s + cfg.lambda1 * l_cross + cfg.lambda2 * l_c;
}

inline Var total_loss(const Var& l_s, const Var& l_cross, const Var& l_c, const LossConfig& cfg = {}) {
  total_loss(l_s.item(), l_cross.item(), l_c.item(), cfg);
  return ag::weighted_sum({l_s, l_cross, l_c}, {1.0, cfg.lambda1, cfg.lambda2});
}

}  // namespace cpcsam
