#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cpcsam/model.hpp"

namespace cpcsam {

struct ScheduleConfig {
  int total_iterations = 10000;
  int warmup_iterations = 5000;
  double max_lr = 1e-3;
  double final_lr_ratio = 0.01;  // lr(total) / max_lr
};

// Linear warmup from 0 to max_lr, then exponential decay reaching
// final_lr_ratio * max_lr at total_iterations.
inline double lr_schedule(int iteration, const ScheduleConfig& cfg) {
  if (iteration < 0 || iteration > cfg.total_iterations) throw std::out_of_range("lr_schedule: iteration out of range");
  if (iteration < cfg.warmup_iterations)
    return cfg.max_lr * static_cast<double>(iteration) / static_cast<double>(cfg.warmup_iterations);
  const int decay_span = cfg.total_iterations - cfg.warmup_iterations;
  if (decay_span <= 0) return cfg.max_lr;
  const double gamma = std::pow(cfg.final_lr_ratio, 1.0 / static_cast<double>(decay_span));
  return cfg.max_lr * std::pow(gamma, static_cast<double>(iteration - cfg.warmup_iterations));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay over the trainable parameters of a model.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const PromptableSegmenter& model, AdamWConfig cfg) : cfg_(cfg) {
    for (const auto& p : model.parameters())
      if (p.trainable) {
        m_.emplace_back(p.var.size(), 0.0);
        v_.emplace_back(p.var.size(), 0.0);
      }
  }

  void step(PromptableSegmenter& model, double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    std::size_t slot = 0;
    for (auto& p : model.parameters()) {
      if (!p.trainable) continue;
      auto& value = p.var.mutable_value();
      const auto grad = p.var.grad();
      auto& m = m_.at(slot);
      auto& v = v_.at(slot);
      ++slot;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad.empty() ? 0.0 : grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
        value[i] -= lr * (update + cfg_.weight_decay * value[i]);
      }
    }
  }

  long long steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  void restore(long long steps, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw std::invalid_argument("AdamW::restore: slot mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size())
        throw std::invalid_argument("AdamW::restore: size mismatch");
    step_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamWConfig cfg_;
  long long step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace cpcsam
