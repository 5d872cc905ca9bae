#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "cpcsam/autograd.hpp"
#include "oracles.hpp"

using cpcsam::Var;
namespace ag = cpcsam::ag;

namespace {

std::vector<double> randn(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Checks d(sum(w * f(x)))/dx against finite differences.
void check_unary(std::size_t rows, std::size_t cols, const std::function<Var(const Var&)>& f, unsigned seed = 1) {
  std::mt19937_64 rng(seed);
  const auto x0 = randn(rng, rows * cols);
  Var probe = f(Var::constant(rows, cols, x0));
  const auto w = randn(rng, probe.size());
  auto value = [&](const std::vector<double>& x) {
    Var y = f(Var::constant(rows, cols, x));
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y.value()[i];
    return s;
  };
  Var x = Var::leaf(rows, cols, x0);
  Var y = f(x);
  Var loss = ag::sum(ag::mul(y, Var::constant(y.rows(), y.cols(), w)));
  ag::backward(loss);
  const auto numeric = oracle::numeric_gradient(value, x0);
  EXPECT_LT(oracle::max_relative_error(numeric, x.grad(), 1e-4), 1e-5);
}

}  // namespace

TEST(Autograd, MatmulBothSides) {
  std::mt19937_64 rng(3);
  const auto b = randn(rng, 4 * 5);
  check_unary(3, 4, [&](const Var& a) { return ag::matmul(a, Var::constant(4, 5, b)); });
  const auto a = randn(rng, 2 * 3);
  check_unary(3, 4, [&](const Var& x) { return ag::matmul(Var::constant(2, 3, a), x); });
}

TEST(Autograd, MatmulTransposed) {
  std::mt19937_64 rng(4);
  const auto b = randn(rng, 5 * 4);
  check_unary(3, 4, [&](const Var& a) { return ag::matmul_nt(a, Var::constant(5, 4, b)); });
  const auto a = randn(rng, 3 * 4);
  check_unary(5, 4, [&](const Var& x) { return ag::matmul_nt(Var::constant(3, 4, a), x); });
}

TEST(Autograd, Elementwise) {
  std::mt19937_64 rng(5);
  const auto o = randn(rng, 12);
  check_unary(3, 4, [&](const Var& a) { return ag::add(a, Var::constant(3, 4, o)); });
  check_unary(3, 4, [&](const Var& a) { return ag::sub(Var::constant(3, 4, o), a); });
  check_unary(3, 4, [&](const Var& a) { return ag::mul(a, a); });
  check_unary(3, 4, [&](const Var& a) { return ag::scale(a, -2.5); });
  check_unary(3, 4, [&](const Var& a) { return ag::gelu(a); });
}

TEST(Autograd, BiasRow) {
  std::mt19937_64 rng(6);
  const auto x = randn(rng, 12);
  check_unary(1, 4, [&](const Var& b) { return ag::add_row(Var::constant(3, 4, x), b); });
  check_unary(3, 4, [&](const Var& a) { return ag::add_row(a, Var::constant(1, 4, {1, 2, 3, 4})); });
}

TEST(Autograd, LayerNormAllInputs) {
  std::mt19937_64 rng(7);
  const auto g = randn(rng, 6), b = randn(rng, 6), x = randn(rng, 18);
  check_unary(3, 6, [&](const Var& a) { return ag::layer_norm(a, Var::constant(1, 6, g), Var::constant(1, 6, b)); });
  check_unary(1, 6, [&](const Var& gain) { return ag::layer_norm(Var::constant(3, 6, x), gain, Var::constant(1, 6, b)); });
  check_unary(1, 6, [&](const Var& bias) { return ag::layer_norm(Var::constant(3, 6, x), Var::constant(1, 6, g), bias); });
}

TEST(Autograd, SoftmaxRows) {
  check_unary(4, 3, [](const Var& a) { return ag::softmax_rows(a); });
  Var y = ag::softmax_rows(Var::constant(2, 3, {1, 2, 3, -1, 0, 1000}));
  for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(y.at(r, 0) + y.at(r, 1) + y.at(r, 2), 1.0, 1e-12);
}

TEST(Autograd, SliceConcat) {
  std::mt19937_64 rng(8);
  const auto other = randn(rng, 6);
  check_unary(3, 5, [](const Var& a) { return ag::slice_cols(a, 1, 3); });
  check_unary(3, 2, [&](const Var& a) { return ag::concat_cols({a, Var::constant(3, 2, other), a}); });
  check_unary(2, 3, [&](const Var& a) { return ag::concat_rows({Var::constant(2, 3, other), a}); });
}

TEST(Autograd, PixelShuffleLayoutAndGradient) {
  // 1x1 grid, 4 channels -> 2x2 grid, 1 channel; block index s = 2*dy + dx.
  Var y = ag::pixel_shuffle2(Var::constant(1, 4, {10, 20, 30, 40}), 1, 1);
  ASSERT_EQ(y.rows(), 4u);
  EXPECT_EQ(y.at(0, 0), 10);
  EXPECT_EQ(y.at(1, 0), 20);
  EXPECT_EQ(y.at(2, 0), 30);
  EXPECT_EQ(y.at(3, 0), 40);
  check_unary(6, 8, [](const Var& a) { return ag::pixel_shuffle2(a, 2, 3); });
}

TEST(Autograd, GatherAndReductions) {
  check_unary(4, 3, [](const Var& t) { return ag::gather_rows(t, {2, 0, 2}); });
  check_unary(3, 3, [](const Var& t) { return ag::sum(t); });
  check_unary(1, 1, [](const Var& s) { return ag::weighted_sum({s, ag::mul(s, s)}, {0.3, -1.5}); });
}

TEST(Autograd, GradientAccumulatesOverReuse) {
  Var x = Var::leaf(1, 1, {3.0});
  Var y = ag::add(ag::mul(x, x), ag::scale(x, 2.0));  // x^2 + 2x
  ag::backward(y);
  ASSERT_EQ(x.grad().size(), 1u);
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Autograd, ConstantsReceiveNoGradient) {
  Var c = Var::constant(1, 2, {1, 2});
  Var x = Var::leaf(1, 2, {3, 4});
  ag::backward(ag::sum(ag::mul(c, x)));
  EXPECT_TRUE(c.grad().empty());
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 2.0);
}

TEST(Autograd, DetachBlocksGradient) {
  Var x = Var::leaf(1, 1, {2.0});
  Var y = ag::mul(x, ag::detach(x));
  ag::backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Autograd, ShapeMismatchThrows) {
  EXPECT_THROW(ag::add(Var::zeros(2, 2), Var::zeros(2, 3)), std::invalid_argument);
  EXPECT_THROW(ag::matmul(Var::zeros(2, 2), Var::zeros(3, 2)), std::invalid_argument);
}
