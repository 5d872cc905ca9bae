// Minimal reverse-mode automatic differentiation over row-major 2D matrices.
//
// Every value in the toy segmenter is a matrix: token sequences are
// (tokens x channels), spatial maps are (height*width x channels). A Var is a
// shared handle to a graph node; operations build a fresh graph per forward
// pass and `backward` walks it in reverse topological order. Parameters are
// leaf nodes that persist across passes and accumulate gradients.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cpcsam {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    if (values.size() != rows * cols) throw std::invalid_argument("Var: value count does not match shape");
    auto node = std::make_shared<Node>();
    node->rows = rows;
    node->cols = cols;
    node->value = std::move(values);
    return Var(std::move(node));
  }
  static Var zeros(std::size_t rows, std::size_t cols) {
    return constant(rows, cols, std::vector<double>(rows * cols, 0.0));
  }
  // Leaf that accumulates gradient.
  static Var leaf(std::size_t rows, std::size_t cols, std::vector<double> values) {
    Var v = constant(rows, cols, std::move(values));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  std::span<const double> value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    if (size() != 1) throw std::logic_error("Var::item on non-scalar");
    return node_->value[0];
  }

  // Empty span when no gradient reached this node.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace ag {

namespace detail {

inline Var make_result(std::size_t rows, std::size_t cols, std::vector<double> value,
                       std::vector<Var> const& inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.ptr());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// Runs reverse accumulation from a scalar root.
inline void backward(const Var& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

inline Var detach(const Var& a) {
  return Var::constant(a.rows(), a.cols(), std::vector<double>(a.value().begin(), a.value().end()));
}

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += s * brow[j];
    }
  }
  return detail::make_result(n, m, std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    const double* g = self.grad.data();
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* grow = g + i * m;
          const double* brow = B.value.data() + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double s = A.value[i * k + p];
          if (s == 0.0) continue;
          const double* grow = g + i * m;
          double* gbrow = gb.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += s * grow[j];
        }
    }
  });
}

// a * b^T without materializing the transpose.
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  std::vector<double> out(n * m, 0.0);
  const auto av = a.value();
  const auto bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      out[i * m + j] = acc;
    }
  return detail::make_result(n, m, std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    const double* g = self.grad.data();
    if (A.requires_grad) {
      auto& ga = A.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double s = g[i * m + j];
          if (s == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += s * B.value[j * k + p];
        }
    }
    if (B.requires_grad) {
      auto& gb = B.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double s = g[i * m + j];
          if (s == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += s * A.value[i * k + p];
        }
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    for (auto& parent : self.parents) {
      if (!parent->requires_grad) continue;
      auto& g = parent->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b}, [](Node& self) {
    Node& A = *self.parents[0];
    Node& B = *self.parents[1];
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  std::vector<double> out(a.value().begin(), a.value().end());
  for (auto& x : out) x *= s;
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// Adds a (1 x cols) row vector to every row.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias shape mismatch");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.value().begin(), a.value().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += row.value()[j];
  return detail::make_result(n, m, std::move(out), {a, row}, [n, m](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

// tanh approximation of GELU.
inline Var gelu(const Var& a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(a.size());
  std::vector<double> deriv(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value()[i];
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    out[i] = 0.5 * x * (1.0 + t);
    deriv[i] = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
  }
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a},
                             [deriv = std::move(deriv)](Node& self) {
                               auto& g = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv[i];
                             });
}

// Row-wise layer normalization with (1 x cols) gain and bias.
inline Var layer_norm(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5) {
  const std::size_t n = a.rows(), m = a.cols();
  if (gain.size() != m || bias.size() != m) throw std::invalid_argument("layer_norm: affine shape mismatch");
  std::vector<double> xhat(n * m), inv_std(n), out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.value().data() + i * m;
    double mean = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean += row[j];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat[i * m + j] = (row[j] - mean) * inv_std[i];
      out[i * m + j] = xhat[i * m + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_result(
      n, m, std::move(out), {a, gain, bias},
      [n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& A = *self.parents[0];
        Node& G = *self.parents[1];
        Node& B = *self.parents[2];
        if (G.requires_grad) {
          auto& gg = G.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gg[j] += self.grad[i * m + j] * xhat[i * m + j];
        }
        if (B.requires_grad) {
          auto& gb = B.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[i * m + j];
        }
        if (A.requires_grad) {
          auto& ga = A.grad_buffer();
          const double inv_m = 1.0 / static_cast<double>(m);
          for (std::size_t i = 0; i < n; ++i) {
            double sum_d = 0.0, sum_dx = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[i * m + j] * G.value[j];
              sum_d += d;
              sum_dx += d * xhat[i * m + j];
            }
            for (std::size_t j = 0; j < m; ++j) {
              const double d = self.grad[i * m + j] * G.value[j];
              ga[i * m + j] += inv_std[i] * (d - inv_m * sum_d - xhat[i * m + j] * inv_m * sum_dx);
            }
          }
        }
      });
}

inline Var softmax_rows(const Var& a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = a.value().data() + i * m;
    double mx = row[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = std::exp(row[j] - mx);
      total += out[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= total;
  }
  return detail::make_result(n, m, out, {a}, [n, m, y = out](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += self.grad[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += y[i * m + j] * (self.grad[i * m + j] - dot);
    }
  });
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.value()[i * m + start + j];
  return detail::make_result(n, count, std::move(out), {a}, [n, m, start, count](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * m + start + j] += self.grad[i * count + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<double> out(n * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * total + offset + j] = p.at(i, j);
    offset += p.cols();
  }
  return detail::make_result(n, total, std::move(out), parts, [n, total](Node& self) {
    std::size_t off = 0;
    for (auto& parent : self.parents) {
      const std::size_t c = parent->cols;
      if (parent->requires_grad) {
        auto& g = parent->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * total + off + j];
      }
      off += c;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t m = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != m) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * m);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return detail::make_result(total, m, std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (auto& parent : self.parents) {
      if (parent->requires_grad) {
        auto& g = parent->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += parent->value.size();
    }
  });
}

// Rearranges a (h*w x 4c) map into a (2h*2w x c) map; channel block
// s = 2*dy + dx lands at output pixel (2y+dy, 2x+dx).
inline Var pixel_shuffle2(const Var& a, std::size_t height, std::size_t width) {
  if (a.rows() != height * width || a.cols() % 4 != 0)
    throw std::invalid_argument("pixel_shuffle2: shape mismatch");
  const std::size_t c = a.cols() / 4;
  const std::size_t out_w = 2 * width;
  std::vector<double> out(a.size());
  auto index = [=](std::size_t y, std::size_t x, std::size_t s, std::size_t ch) {
    const std::size_t dy = s / 2, dx = s % 2;
    return ((2 * y + dy) * out_w + (2 * x + dx)) * c + ch;
  };
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t s = 0; s < 4; ++s)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[index(y, x, s, ch)] = a.value()[(y * width + x) * 4 * c + s * c + ch];
  return detail::make_result(4 * height * width, c, std::move(out), {a}, [=](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        for (std::size_t s = 0; s < 4; ++s)
          for (std::size_t ch = 0; ch < c; ++ch)
            g[(y * width + x) * 4 * c + s * c + ch] += self.grad[index(y, x, s, ch)];
  });
}

// Rows of `table` selected by index (repeats allowed).
inline Var gather_rows(const Var& table, const std::vector<std::size_t>& index) {
  const std::size_t m = table.cols();
  std::vector<double> out(index.size() * m);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= table.rows()) throw std::invalid_argument("gather_rows: index out of range");
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = table.at(index[i], j);
  }
  return detail::make_result(index.size(), m, std::move(out), {table}, [index, m](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) g[index[i] * m + j] += self.grad[i * m + j];
  });
}

inline Var sum(const Var& a) {
  double total = 0.0;
  for (double x : a.value()) total += x;
  return detail::make_result(1, 1, {total}, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& x : g) x += self.grad[0];
  });
}

// Weighted sum of scalars.
inline Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw std::invalid_argument("weighted_sum: non-scalar input");
    total += weights[i] * scalars[i].item();
  }
  return detail::make_result(1, 1, {total}, scalars, [weights](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (self.parents[i]->requires_grad) self.parents[i]->grad_buffer()[0] += weights[i] * self.grad[0];
  });
}

}  // namespace ag
}  // namespace cpcsam
