#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cpcsam/losses.hpp"
#include "oracles.hpp"

using namespace cpcsam;

namespace {

ProbMap random_map(std::mt19937_64& rng, int h, int w, int c) {
  return ProbMap(h, w, c, oracle::random_simplex(rng, static_cast<std::size_t>(h) * w, c));
}

ProbMap square_map(int h, int w, int r0, int c0, int size) {
  std::vector<int> labels(static_cast<std::size_t>(h) * w, 0);
  for (int r = r0; r < r0 + size; ++r)
    for (int c = c0; c < c0 + size; ++c) labels[static_cast<std::size_t>(r) * w + c] = 1;
  return one_hot(labels, h, w, 2);
}

bool all_zero(std::span<const double> g) {
  for (double x : g)
    if (x != 0.0) return false;
  return true;
}

// Gradient of f at a leaf holding `x0`, checked against central differences.
double gradient_error(const ProbMap& x0, const std::function<Var(const Var&)>& f) {
  Var x = as_var(x0, true);
  ag::backward(f(x));
  auto value = [&](const std::vector<double>& v) {
    return f(Var::constant(x0.pixels(), x0.classes, v)).item();
  };
  return oracle::max_relative_error(oracle::numeric_gradient(value, x0.data), x.grad(), 1e-3);
}

double oracle_pseudo(const ProbMap& pred, const ProbMap& source) {
  const auto t = oracle::harden(source.data, source.classes);
  return 0.5 * oracle::dice_loss(pred.data, t, pred.classes) + 0.5 * oracle::ce_loss(pred.data, t, pred.classes);
}

}  // namespace

TEST(DiceLoss, Examples) {
  const auto a = square_map(4, 4, 0, 0, 2);
  EXPECT_LT(dice_loss(as_var(a), a).item(), 1e-6);
  const auto far = square_map(4, 4, 2, 2, 2);
  EXPECT_NEAR(dice_loss(as_var(a), far).item(), 1.0, 1e-5);
  // Overlap of two pixels out of four each.
  const auto shifted = square_map(4, 4, 0, 1, 2);
  EXPECT_NEAR(dice_loss(as_var(a), shifted).item(), 0.5, 1e-6);
}

TEST(DiceLoss, ShapeMismatchThrows) {
  EXPECT_THROW(dice_loss(as_var(ProbMap(4, 4, 2)), ProbMap(4, 4, 3)), std::invalid_argument);
  EXPECT_THROW(ce_loss(as_var(ProbMap(4, 4, 2)), ProbMap(2, 4, 2)), std::invalid_argument);
}

TEST(DiceLoss, MatchesOracleAndStaysInRange) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + trial % 3;
    const auto p = random_map(rng, 5, 4, c);
    const auto t = (trial % 2) ? one_hot(oracle::random_labels(rng, 20, c), 5, 4, c) : random_map(rng, 5, 4, c);
    const double v = dice_loss(as_var(p), t).item();
    EXPECT_NEAR(v, oracle::dice_loss(p.data, t.data, c), 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_GE(ce_loss(as_var(p), t).item(), 0.0);
  }
}

TEST(CeLoss, Examples) {
  const auto target = one_hot(std::vector<int>{0, 1, 1, 0}, 2, 2, 2);
  EXPECT_LT(ce_loss(as_var(target), target).item(), 1e-6);
  ProbMap uniform(2, 2, 2, std::vector<double>(8, 0.5));
  EXPECT_NEAR(ce_loss(as_var(uniform), target).item(), std::log(2.0), 1e-12);
  ProbMap one(1, 1, 2, {0.8, 0.2});
  EXPECT_NEAR(ce_loss(as_var(one), one_hot(std::vector<int>{0}, 1, 1, 2)).item(), -std::log(0.8), 1e-12);
  EXPECT_NEAR(-std::log(0.8), 0.2231, 1e-4);
}

TEST(CeLoss, ClampsZeroProbability) {
  ProbMap p(1, 1, 2, {1.0, 0.0});
  const double v = ce_loss(as_var(p), one_hot(std::vector<int>{1}, 1, 1, 2)).item();
  EXPECT_NEAR(v, -std::log(kProbabilityFloor), 1e-9);
}

TEST(LossGradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(22);
  for (int c : {2, 4}) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto x0 = random_map(rng, 4, 4, c);
      const auto t = random_map(rng, 4, 4, c);
      const auto hard = one_hot(oracle::random_labels(rng, 16, c), 4, 4, c);
      const auto o1 = random_map(rng, 4, 4, c), o2 = random_map(rng, 4, 4, c), o3 = random_map(rng, 4, 4, c);
      const MapShape shape{4, 4};
      EXPECT_LT(gradient_error(x0, [&](const Var& x) { return dice_loss(x, t); }), 1e-4);
      EXPECT_LT(gradient_error(x0, [&](const Var& x) { return dice_loss(x, hard); }), 1e-4);
      EXPECT_LT(gradient_error(x0, [&](const Var& x) { return ce_loss(x, t); }), 1e-4);
      EXPECT_LT(gradient_error(x0, [&](const Var& x) {
                  return cross_prompting_loss(x, as_var(o1), as_var(o2), as_var(o3), shape, false);
                }),
                1e-4);
      EXPECT_LT(gradient_error(x0, [&](const Var& x) {
                  return pcr_loss(x, as_var(o1), as_var(o2), as_var(o3), shape, false);
                }),
                1e-4);
      EXPECT_LT(gradient_error(x0, [&](const Var& x) {
                  return supervised_loss(as_var(o1), x, x, as_var(o2), as_var(o3), x, hard);
                }),
                1e-4);
    }
  }
}

TEST(CrossPromptingLoss, PerfectAgreementIsZero) {
  std::mt19937_64 rng(23);
  const auto e1 = random_map(rng, 4, 4, 3), e2 = random_map(rng, 4, 4, 3);
  const auto p1 = pseudo_target(e2), p2 = pseudo_target(e1);
  EXPECT_LT(cross_prompting_loss(as_var(p1), as_var(p2), as_var(e1), as_var(e2), {4, 4}, false).item(), 1e-5);
}

TEST(CrossPromptingLoss, SymmetricAndCompositional) {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = trial % 2 ? 2 : 4;
    const auto p1 = random_map(rng, 4, 4, c), p2 = random_map(rng, 4, 4, c);
    const auto e1 = random_map(rng, 4, 4, c), e2 = random_map(rng, 4, 4, c);
    const double v = cross_prompting_loss(as_var(p1), as_var(p2), as_var(e1), as_var(e2), {4, 4}, false).item();
    const double swapped =
        cross_prompting_loss(as_var(p2), as_var(p1), as_var(e2), as_var(e1), {4, 4}, false).item();
    EXPECT_DOUBLE_EQ(v, swapped);
    EXPECT_NEAR(v, oracle_pseudo(p1, e2) + oracle_pseudo(p2, e1), 1e-10);
  }
}

TEST(PcrLoss, SymmetricAndCompositional) {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = trial % 2 ? 2 : 4;
    const auto r1 = random_map(rng, 4, 4, c), r2 = random_map(rng, 4, 4, c);
    const auto e1 = random_map(rng, 4, 4, c), e2 = random_map(rng, 4, 4, c);
    const double v = pcr_loss(as_var(r1), as_var(e1), as_var(r2), as_var(e2), {4, 4}, false).item();
    EXPECT_DOUBLE_EQ(v, pcr_loss(as_var(r2), as_var(e2), as_var(r1), as_var(e1), {4, 4}, false).item());
    EXPECT_NEAR(v, oracle_pseudo(r1, e1) + oracle_pseudo(r2, e2), 1e-10);
  }
}

TEST(PcrLoss, RandomEqualsCenterGivesZero) {
  // Random prompt landed on the center: p_r = p_c, ensemble = p_c, hardened.
  std::mt19937_64 rng(26);
  const auto pc1 = pseudo_target(random_map(rng, 4, 4, 2)), pc2 = pseudo_target(random_map(rng, 4, 4, 2));
  const auto e1 = mean_map(std::vector<ProbMap>{pc1, pc1}), e2 = mean_map(std::vector<ProbMap>{pc2, pc2});
  EXPECT_LT(pcr_loss(as_var(pc1), as_var(e1), as_var(pc2), as_var(e2), {4, 4}, false).item(), 1e-5);
}

TEST(TargetIsolation, NoGradientThroughTargets) {
  std::mt19937_64 rng(27);
  for (auto mode : {PseudoLabel::hard, PseudoLabel::soft}) {
    LossConfig cfg;
    cfg.pseudo_label = mode;
    const auto p1 = random_map(rng, 4, 4, 3), p2 = random_map(rng, 4, 4, 3);
    const auto c1 = random_map(rng, 4, 4, 3), c2 = random_map(rng, 4, 4, 3);
    // Ensembles built on the autograd tape from center maps.
    Var vc1 = as_var(c1, true), vc2 = as_var(c2, true), vp1 = as_var(p1, true), vp2 = as_var(p2, true);
    Var e1 = ag::scale(ag::add(vc1, vp1), 0.5), e2 = ag::scale(ag::add(vc2, vp2), 0.5);
    ag::backward(ag::add(cross_prompting_loss(vp1, vp2, e1, e2, {4, 4}, false, cfg),
                         pcr_loss(vp1, e1, vp2, e2, {4, 4}, false, cfg)));
    EXPECT_TRUE(all_zero(vc1.grad()));
    EXPECT_TRUE(all_zero(vc2.grad()));
    EXPECT_FALSE(all_zero(vp1.grad()));

    // The value itself still depends on the target side.
    auto value = [&](const ProbMap& center) {
      return pcr_loss(as_var(p1), as_var(center), as_var(p2), as_var(c2), {4, 4}, false, cfg).item();
    };
    ProbMap flipped = c1;
    for (std::size_t i = 0; i < flipped.pixels(); ++i) std::rotate(&flipped.data[i * 3], &flipped.data[i * 3 + 1], &flipped.data[i * 3 + 3]);
    EXPECT_NE(value(c1), value(flipped));
  }
}

TEST(DegenerateMasking, ZeroValueAndGradient) {
  std::mt19937_64 rng(28);
  const auto m = [&] { return as_var(random_map(rng, 4, 4, 2), true); };
  Var p1 = m(), p2 = m(), e1 = m(), e2 = m();
  Var cross = cross_prompting_loss(p1, p2, e1, e2, {4, 4}, true);
  Var pcr = pcr_loss(p1, e1, p2, e2, {4, 4}, true);
  EXPECT_EQ(cross.item(), 0.0);
  EXPECT_EQ(pcr.item(), 0.0);
  ag::backward(ag::add(cross, pcr));
  EXPECT_TRUE(all_zero(p1.grad()));
  EXPECT_TRUE(all_zero(p2.grad()));
}

TEST(SupervisedLoss, Examples) {
  std::mt19937_64 rng(29);
  const auto y = one_hot(oracle::random_labels(rng, 16, 3), 4, 4, 3);
  const Var yv = as_var(y);
  EXPECT_LT(supervised_loss(yv, yv, yv, yv, yv, yv, y).item(), 1e-5);
  const auto p = random_map(rng, 4, 4, 3);
  const double d = oracle::dice_loss(p.data, y.data, 3), c = oracle::ce_loss(p.data, y.data, 3);
  const double perfect = supervised_loss(yv, yv, yv, yv, yv, yv, y).item();
  EXPECT_NEAR(supervised_loss(as_var(p), yv, yv, yv, yv, yv, y).item() - perfect, 0.8 * d + 0.2 * c, 1e-10);
  EXPECT_NEAR(supervised_loss(yv, yv, yv, yv, as_var(p), yv, y).item() - perfect, 0.5 * d + 0.5 * c, 1e-10);
  EXPECT_THROW(supervised_loss(yv, yv, yv, yv, yv, yv, p), std::invalid_argument);
}

TEST(SupervisedLoss, CoefficientCensus) {
  // Feed maps whose dice and ce are known to recover the mixing weights.
  const auto y = one_hot(std::vector<int>{1, 0}, 1, 2, 2);
  const ProbMap wrong(1, 2, 2, {0.5, 0.5, 0.5, 0.5});
  const double d = dice_loss(as_var(wrong), y).item(), c = ce_loss(as_var(wrong), y).item();
  const Var yv = as_var(y), wv = as_var(wrong);
  const double base = supervised_loss(yv, yv, yv, yv, yv, yv, y).item();
  const double u = supervised_loss(wv, yv, yv, yv, yv, yv, y).item() - base;
  const double q = supervised_loss(yv, yv, wv, yv, yv, yv, y).item() - base;
  // Two unknowns each: solve with a second map of different dice/ce ratio.
  const ProbMap other(1, 2, 2, {0.9, 0.1, 0.9, 0.1});
  const double d2 = dice_loss(as_var(other), y).item(), c2 = ce_loss(as_var(other), y).item();
  const Var ov = as_var(other);
  const double u2 = supervised_loss(ov, yv, yv, yv, yv, yv, y).item() - base;
  const double q2 = supervised_loss(yv, yv, ov, yv, yv, yv, y).item() - base;
  const double det = d * c2 - d2 * c;
  EXPECT_NEAR((u * c2 - u2 * c) / det, 0.8, 1e-6);
  EXPECT_NEAR((d * u2 - d2 * u) / det, 0.2, 1e-6);
  EXPECT_NEAR((q * c2 - q2 * c) / det, 0.5, 1e-6);
  EXPECT_NEAR((d * q2 - d2 * q) / det, 0.5, 1e-6);
}

TEST(TotalLoss, Examples) {
  EXPECT_NEAR(total_loss(1.0, 0.5, 0.2), 1.21, 1e-12);
  LossConfig zero;
  zero.lambda1 = zero.lambda2 = 0.0;
  EXPECT_EQ(total_loss(0.7, 3.0, 9.0, zero), 0.7);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0), 0.0);
  try {
    total_loss(1.0, std::nan(""), 0.0);
    FAIL();
  } catch (const std::domain_error& e) {
    EXPECT_STREQ(e.what(), "non-finite loss");
  }
  EXPECT_THROW(total_loss(1.0, 0.0, INFINITY), std::domain_error);
}

TEST(LossConfigTest, Validation) {
  EXPECT_EQ(LossConfig{}.validate(), "");
  LossConfig c;
  c.supervised_prompted = {0.6, 0.5};
  EXPECT_NE(c.validate().find("loss.supervised_prompted"), std::string::npos);
  c = {};
  c.lambda1 = -1;
  EXPECT_NE(c.validate().find("loss.lambda1"), std::string::npos);
}
