#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cpcsam/cross_prompting.hpp"
#include "cpcsam/optim.hpp"
#include "oracles.hpp"

using namespace cpcsam;

namespace {

Image random_image(int h, int w, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(h, w);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Image with a bright disc so a trained-free model still has structure to see.
Image disc_image(int h, int w) {
  Image img(h, w, 0.1);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if ((r - h / 2) * (r - h / 2) + (c - w / 3) * (c - w / 3) < h * w / 16) img.at(r, c) = 0.9;
  return img;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double simplex_error(const Var& v) {
  double worst = 0;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    double s = 0;
    for (std::size_t k = 0; k < v.cols(); ++k) {
      if (v.at(r, k) < 0) return 1.0;
      s += v.at(r, k);
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

// Forces every pixel of branch `b`'s head toward background by biasing the head.
void silence_branch(PromptableSegmenter& m, int b) {
  for (auto& p : m.parameters())
    if (p.name == "decoder" + std::to_string(b) + ".head.bias") {
      p.var.mutable_value()[0] = 1e3;
    }
}

}  // namespace

TEST(ModelConfigTest, RejectsInvalid) {
  ModelConfig c;
  c.num_classes = 1;
  EXPECT_THROW(PromptableSegmenter{c}, std::invalid_argument);
  c = {};
  c.height = 30;
  EXPECT_THROW(PromptableSegmenter{c}, std::invalid_argument);
  c = {};
  c.num_decoders = 3;
  EXPECT_THROW(PromptableSegmenter{c}, std::invalid_argument);
  EXPECT_THROW(build_toy_model(2, 33, 32, 1), std::invalid_argument);
}

TEST(ToyModel, PatchSizeKeepsGridSmall) {
  EXPECT_EQ(toy_patch_size(32, 32), 4);
  EXPECT_EQ(toy_patch_size(64, 64), 4);
  EXPECT_EQ(toy_patch_size(128, 128), 8);
  EXPECT_EQ(toy_patch_size(512, 512), 32);
}

TEST(Encode, ShapeDeterminismAndSensitivity) {
  auto m = build_toy_model(2, 32, 32, 3);
  const Var a = m.encode(Image(32, 32, 0.0));
  const Var b = m.encode(Image(32, 32, 0.0));
  const Var c = m.encode(Image(32, 32, 1.0));
  EXPECT_EQ(a.rows(), 64u);
  EXPECT_EQ(a.cols(), 32u);
  EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
  EXPECT_GT(max_abs_diff(a.value(), c.value()), 0.0);
  EXPECT_THROW(m.encode(Image(16, 32)), std::invalid_argument);
}

TEST(Encode, LargeInputUsesSixteenBySixteenGrid) {
  auto m = build_toy_model(2, 512, 512, 3);
  const Var f = m.encode(random_image(512, 512, 1));
  EXPECT_EQ(f.rows(), 256u);
  EXPECT_EQ(f.cols(), 32u);
}

TEST(PromptEncode, DefaultClassAndBounds) {
  auto m = build_toy_model(3, 32, 32, 4);
  const auto none = m.prompt_encode();
  EXPECT_FALSE(none.sparse.has_value());
  const auto& dense = m.parameter("prompt.dense_default").var;
  EXPECT_TRUE(std::equal(none.dense.value().begin(), none.dense.value().end(), dense.value().begin()));

  PromptSet a, b;
  a.add({5, 7, 1, PromptMode::center, true});
  b.add({5, 7, 2, PromptMode::center, true});
  const auto ea = m.prompt_encode(a), eb = m.prompt_encode(b), ea2 = m.prompt_encode(a);
  EXPECT_GT(max_abs_diff(ea.sparse->value(), eb.sparse->value()), 0.0);
  EXPECT_EQ(max_abs_diff(ea.sparse->value(), ea2.sparse->value()), 0.0);

  PromptSet out;
  out.add({32, 0, 1, PromptMode::center, true});
  EXPECT_THROW(m.prompt_encode(out), std::invalid_argument);
  PromptSet bad_class;
  bad_class.add({0, 0, 3, PromptMode::center, true});
  EXPECT_THROW(m.prompt_encode(bad_class), std::invalid_argument);
}

TEST(Decode, ShapeNormalizationBranches) {
  auto m = build_toy_model(2, 64, 64, 5);
  const Var f = m.encode(random_image(64, 64, 2));
  const auto none = m.prompt_encode();
  const Var p1 = m.decode(1, f, none), p2 = m.decode(2, f, none), p1b = m.decode(1, f, none);
  EXPECT_EQ(p1.rows(), 64u * 64u);
  EXPECT_EQ(p1.cols(), 2u);
  EXPECT_LT(simplex_error(p1), 1e-5);
  EXPECT_LT(simplex_error(p2), 1e-5);
  EXPECT_GT(max_abs_diff(p1.value(), p2.value()), 0.0);
  EXPECT_EQ(max_abs_diff(p1.value(), p1b.value()), 0.0);
  EXPECT_THROW(m.decode(0, f, none), std::invalid_argument);
  EXPECT_THROW(m.decode(3, f, none), std::invalid_argument);
}

TEST(Model, DecoderParametersDisjointAndDifferent) {
  auto m = build_toy_model(2, 32, 32, 6);
  const auto& a = m.parameter("decoder1.head.weight").var;
  const auto& b = m.parameter("decoder2.head.weight").var;
  EXPECT_NE(a.value().data(), b.value().data());
  EXPECT_GT(max_abs_diff(a.value(), b.value()), 0.0);
}

TEST(Model, SeedFixesInitialWeights) {
  auto a = build_toy_model(2, 32, 32, 9), b = build_toy_model(2, 32, 32, 9), c = build_toy_model(2, 32, 32, 10);
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& pa = a.parameters()[i].var;
    all_same = all_same && max_abs_diff(pa.value(), b.parameters()[i].var.value()) == 0.0;
    any_diff = any_diff || max_abs_diff(pa.value(), c.parameters()[i].var.value()) > 0.0;
  }
  EXPECT_TRUE(all_same);
  EXPECT_TRUE(any_diff);
}

TEST(Model, EveryGroupHasTheRightTrainability) {
  auto m = build_toy_model(2, 32, 32, 7);
  m.apply_lora({});
  for (const auto& p : m.parameters()) {
    if (p.group == ParamGroup::encoder_base) EXPECT_FALSE(p.trainable) << p.name;
    else EXPECT_TRUE(p.trainable) << p.name;
  }
}

TEST(Lora, NoOpAtInitAndCensus) {
  auto m = build_toy_model(2, 32, 32, 8);
  const Image img = random_image(32, 32, 3);
  const auto before = forward_all(m, img, {}, 5);
  const std::size_t trainable = m.trainable_parameter_count();
  m.apply_lora({4, 1.0, 0.02});
  const auto after = forward_all(m, img, {}, 5);
  for (int b = 0; b < 2; ++b) {
    EXPECT_EQ(max_abs_diff(before[b].unprompted.value(), after[b].unprompted.value()), 0.0);
    EXPECT_EQ(max_abs_diff(before[b].ensemble.value(), after[b].ensemble.value()), 0.0);
  }
  const std::size_t d = 32, r = 4, blocks = 2, projections = 2;
  EXPECT_EQ(m.trainable_parameter_count() - trainable, blocks * projections * r * (d + d));

  auto small = build_toy_model(2, 32, 32, 8);
  EXPECT_THROW(small.apply_lora({0, 1.0, 0.02}), std::invalid_argument);
  small.apply_lora({2, 1.0, 0.02});
  EXPECT_THROW(small.apply_lora({2, 1.0, 0.02}), std::logic_error);
}

TEST(Lora, OptimizerStepMovesOnlyAdapters) {
  auto m = build_toy_model(2, 32, 32, 11);
  m.apply_lora({});
  const auto snapshot = m.clone();
  const Image img = random_image(32, 32, 4);
  std::mt19937_64 rng(1);
  const auto y = one_hot(oracle::random_labels(rng, 1024, 2), 32, 32, 2);
  m.zero_grad();
  const Var loss = dice_loss(m.decode(1, m.encode(img), m.prompt_encode()), y);
  ag::backward(loss);
  AdamW opt(m, {});
  opt.step(m, 1e-3);
  bool lora_b_moved = false;
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    const auto& p = m.parameters()[i];
    const double diff = max_abs_diff(p.var.value(), snapshot.parameters()[i].var.value());
    if (p.group == ParamGroup::encoder_base) EXPECT_EQ(diff, 0.0) << p.name;
    if (p.name.find("lora_b") != std::string::npos && diff > 0) lora_b_moved = true;
  }
  EXPECT_TRUE(lora_b_moved);
}

TEST(Model, CloneIsIndependent) {
  auto m = build_toy_model(2, 32, 32, 12);
  m.apply_lora({});
  auto c = m.clone();
  ASSERT_EQ(c.parameter_names(), m.parameter_names());
  c.parameters()[0].var.mutable_value()[0] += 1.0;
  EXPECT_NE(c.parameters()[0].var.value()[0], m.parameters()[0].var.value()[0]);
}

TEST(ForwardAll, ContractAndEnsembleIdentity) {
  auto m = build_toy_model(2, 32, 32, 13);
  const Image img = disc_image(32, 32);
  const auto out = forward_all(m, img, {}, 42);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& b : out) {
    ASSERT_EQ(b.prompted.size(), 2u);
    for (const Var* v : {&b.unprompted, &b.center(), &b.random(), &b.ensemble}) EXPECT_LT(simplex_error(*v), 1e-5);
    for (std::size_t i = 0; i < b.ensemble.size(); ++i)
      EXPECT_EQ(b.ensemble.value()[i], (b.center().value()[i] + b.random().value()[i]) * 0.5);
  }
  EXPECT_EQ(out[0].prompts.front().source_branch, 2);
  EXPECT_EQ(out[1].prompts.front().source_branch, 1);
}

TEST(ForwardAll, PromptsComeFromTheOtherBranch) {
  auto m = build_toy_model(3, 32, 32, 14);
  const Image img = disc_image(32, 32);
  const auto out = forward_all(m, img, {}, 43);
  for (int t = 0; t < 2; ++t) {
    const ProbMap source = as_map(out[1 - t].unprompted, 32, 32);
    const auto expected = multi_point_prompts(source, 1, 1, direction_seed(43, 2 - t));
    ASSERT_EQ(out[t].prompts.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_EQ(out[t].prompts[i].points, expected[i].points);
  }
}

TEST(ForwardAll, BitwiseReproducible) {
  auto m = build_toy_model(2, 32, 32, 15);
  const Image img = disc_image(32, 32);
  const auto a = forward_all(m, img, {}, 7), b = forward_all(m, img, {}, 7);
  for (int t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < a[t].prompted.size(); ++i)
      EXPECT_EQ(max_abs_diff(a[t].prompted[i].value(), b[t].prompted[i].value()), 0.0);
}

TEST(ForwardAll, DegenerateSourceFallsBack) {
  auto m = build_toy_model(2, 32, 32, 16);
  silence_branch(m, 1);
  const auto out = forward_all(m, disc_image(32, 32), {}, 8);
  // Branch 1 predicts background only, so branch 2 gets no prompts.
  EXPECT_TRUE(out[1].degenerate);
  for (const auto& p : out[1].prompted) EXPECT_EQ(max_abs_diff(p.value(), out[1].unprompted.value()), 0.0);
}

TEST(ForwardAll, BudgetShapes) {
  auto m = build_toy_model(2, 32, 32, 17);
  const Image img = disc_image(32, 32);
  EXPECT_EQ(forward_all(m, img, {0, 2}, 1)[0].prompted.size(), 2u);
  EXPECT_EQ(forward_all(m, img, {1, 5}, 1)[0].prompted.size(), 6u);
  EXPECT_THROW(forward_all(m, img, {0, 0}, 1), std::invalid_argument);
  EXPECT_THROW(forward_all(m, img, {2, 1}, 1), std::invalid_argument);
}

TEST(ForwardAll, SingleBranchPromptsItself) {
  ModelConfig c;
  c.num_decoders = 1;
  PromptableSegmenter m(c);
  const auto out = forward_all(m, disc_image(32, 32), {}, 3);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].prompts.front().source_branch, 1);
}
