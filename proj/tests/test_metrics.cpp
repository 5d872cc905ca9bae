#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "cpcsam/evaluation.hpp"
#include "cpcsam/optim.hpp"
#include "oracles.hpp"

using namespace cpcsam;

namespace {

BinaryMask mask_from(int h, int w, std::initializer_list<std::pair<int, int>> on) {
  BinaryMask m(h, w);
  for (auto [r, c] : on) m.set(r, c);
  return m;
}

BinaryMask shifted(const BinaryMask& m, int dr, int dc, int h, int w) {
  BinaryMask out(h, w);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c)
      if (m.at(r, c)) out.set(r + dr, c + dc);
  return out;
}

}  // namespace

TEST(Overlap, Examples) {
  const auto a = mask_from(4, 4, {{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  const auto b = mask_from(4, 4, {{0, 1}, {0, 2}, {1, 1}, {1, 2}});
  EXPECT_DOUBLE_EQ(dsc(a, a), 100.0);
  EXPECT_DOUBLE_EQ(dsc(BinaryMask(4, 4), BinaryMask(4, 4)), 100.0);
  EXPECT_DOUBLE_EQ(dsc(a, BinaryMask(4, 4)), 0.0);
  EXPECT_DOUBLE_EQ(dsc(a, b), 50.0);
  EXPECT_DOUBLE_EQ(jaccard(a, a), 100.0);
  EXPECT_NEAR(jaccard(a, b), 100.0 * 2.0 / 6.0, 1e-12);
  EXPECT_DOUBLE_EQ(jaccard(a, mask_from(4, 4, {{3, 3}})), 0.0);
  EXPECT_DOUBLE_EQ(jaccard(BinaryMask(4, 4), BinaryMask(4, 4)), 100.0);
  EXPECT_THROW(dsc(a, BinaryMask(4, 5)), std::invalid_argument);
  EXPECT_THROW(jaccard(a, BinaryMask(3, 4)), std::invalid_argument);
}

TEST(Surface, Examples) {
  const auto a = mask_from(5, 5, {{0, 0}});
  const auto b = mask_from(5, 5, {{3, 4}});
  EXPECT_DOUBLE_EQ(*hd95(a, b), 5.0);
  EXPECT_DOUBLE_EQ(*asd(a, b), 5.0);
  BinaryMask blob(6, 6);
  for (int r = 1; r < 5; ++r)
    for (int c = 1; c < 4; ++c) blob.set(r, c);
  EXPECT_DOUBLE_EQ(*hd95(blob, blob), 0.0);
  EXPECT_DOUBLE_EQ(*asd(blob, blob), 0.0);
  EXPECT_FALSE(hd95(blob, BinaryMask(6, 6)).has_value());
  EXPECT_FALSE(asd(BinaryMask(6, 6), blob).has_value());
}

TEST(Surface, BoundaryIsFourAdjacentToBackground) {
  BinaryMask m(5, 5);
  for (int r = 1; r < 4; ++r)
    for (int c = 0; c < 3; ++c) m.set(r, c);
  // Interior pixel (2,1) is the only non-boundary one; column 0 touches the border.
  const auto b = boundary_pixels(m);
  EXPECT_EQ(b.size(), 8u);
  for (auto i : b) EXPECT_NE(i, 2u * 5 + 1);
}

TEST(Metrics, MatchOraclesOnRandomPairs) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + rng() % 32, w = 1 + rng() % 32;
    const auto a = trial % 2 ? oracle::random_blobs(rng, h, w) : oracle::random_mask(rng, h, w, 0.3);
    const auto b = oracle::random_blobs(rng, h, w);
    EXPECT_DOUBLE_EQ(dsc(a, b), oracle::dice_percent(a, b));
    EXPECT_DOUBLE_EQ(jaccard(a, b), oracle::jaccard_percent(a, b));
    const auto d = oracle::surface_distances(a, b);
    const auto hd = hd95(a, b), as = asd(a, b);
    ASSERT_EQ(hd.has_value(), !d.empty());
    if (d.empty()) continue;
    EXPECT_EQ(*hd, oracle::percentile(d, 0.95));
    EXPECT_NEAR(*as, oracle::mean(d), 1e-9);
  }
}

TEST(Metrics, SymmetryTranslationScaling) {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = oracle::random_blobs(rng, 12, 12), b = oracle::random_blobs(rng, 12, 12);
    EXPECT_DOUBLE_EQ(dsc(a, b), dsc(b, a));
    EXPECT_DOUBLE_EQ(jaccard(a, b), jaccard(b, a));
    const auto hd = hd95(a, b);
    if (!hd) continue;
    EXPECT_DOUBLE_EQ(*hd, *hd95(b, a));
    EXPECT_NEAR(*asd(a, b), *asd(b, a), 1e-12);
    EXPECT_LE(jaccard(a, b), dsc(a, b) + 1e-12);

    // Shift both by the same offset inside a larger canvas.
    const auto sa = shifted(a, 5, 3, 20, 20), sb = shifted(b, 5, 3, 20, 20);
    const auto pa = shifted(a, 0, 0, 20, 20), pb = shifted(b, 0, 0, 20, 20);
    EXPECT_DOUBLE_EQ(dsc(sa, sb), dsc(pa, pb));
    EXPECT_DOUBLE_EQ(jaccard(sa, sb), jaccard(pa, pb));
    EXPECT_DOUBLE_EQ(*hd95(sa, sb), *hd95(pa, pb));
    EXPECT_NEAR(*asd(sa, sb), *asd(pa, pb), 1e-12);

    EXPECT_DOUBLE_EQ(*hd95(a, b, {2.0, 2.0}), 2.0 * *hd);
    EXPECT_NEAR(*asd(a, b, {2.0, 2.0}), 2.0 * *asd(a, b), 1e-12);
  }
}

TEST(Metrics, AnisotropicSpacingMatchesOracle) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = oracle::random_blobs(rng, 10, 14), b = oracle::random_blobs(rng, 10, 14);
    const auto d = oracle::surface_distances(a, b, 1.5, 0.7);
    if (d.empty()) continue;
    EXPECT_NEAR(*hd95(a, b, {1.5, 0.7}), oracle::percentile(d, 0.95), 1e-12);
    EXPECT_NEAR(*asd(a, b, {1.5, 0.7}), oracle::mean(d), 1e-9);
  }
}

TEST(Percentile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({0, 10}, 0.95), 9.5);
  EXPECT_DOUBLE_EQ(percentile({3}, 0.95), 3.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_THROW(percentile({}, 0.5), std::invalid_argument);
}

TEST(Inference, EnsembleIsTheMean) {
  const Var a = Var::constant(1, 2, {0.4, 0.6}), b = Var::constant(1, 2, {0.2, 0.8});
  const Var e = ensemble_of({a, b});
  EXPECT_NEAR(e.at(0, 1), 0.7, 1e-15);
  const Var same = ensemble_of({a, a});
  EXPECT_EQ(same.at(0, 0), a.at(0, 0));
  EXPECT_EQ(same.at(0, 1), a.at(0, 1));
}

TEST(Inference, TiesGoToLowestClass) {
  const ProbMap m(1, 3, 3, {0.5, 0.5, 0.0, 0.2, 0.4, 0.4, 1 / 3.0, 1 / 3.0, 1 / 3.0});
  EXPECT_EQ(argmax_labels(m).labels, (std::vector<int>{0, 1, 0}));
}

TEST(Inference, InferAveragesBothBranches) {
  auto m = build_toy_model(3, 32, 32, 5);
  Image img(32, 32, 0.3);
  const Var f = m.encode(img);
  const auto none = m.prompt_encode();
  const Var p1 = m.decode(1, f, none), p2 = m.decode(2, f, none);
  const ProbMap mean = infer_probabilities(m, img);
  for (std::size_t i = 0; i < mean.data.size(); ++i)
    EXPECT_EQ(mean.data[i], (p1.value()[i] + p2.value()[i]) * 0.5);
  EXPECT_EQ(infer(m, img).labels, mean.argmax());
}

TEST(GtPromptEval, EmptyGroundTruthFallsBack) {
  auto m = build_toy_model(2, 32, 32, 6);
  Image img(32, 32, 0.5);
  img.at(3, 4) = 1.0;
  const LabelMap empty(32, 32);
  const LabelMap a = gt_prompt_eval(m, img, empty);
  EXPECT_EQ(a, infer(m, img));
  EXPECT_EQ(a.height, 32);
  EXPECT_EQ(a.width, 32);
  EXPECT_THROW(gt_prompt_eval(m, img, LabelMap(16, 16)), std::invalid_argument);
}

TEST(GtPromptEval, OverfitModelBenefitsFromPrompts) {
  SyntheticOptions opt;
  opt.n_samples = 1;
  opt.resolution = 32;
  opt.num_classes = 2;
  opt.seed = 5;
  const ImageSample s = preprocess(generate_synthetic(opt)[0], 32, 32);
  auto m = build_toy_model(2, 32, 32, 7);
  m.apply_lora({});
  AdamW opt_w(m, {});
  const ProbMap y = one_hot(s.label->labels, 32, 32, 2);
  const PromptSet prompts = prompts_from_labels(s.label->labels, 32, 32, 2, {true, false}, 0);
  for (int step = 0; step < 150; ++step) {
    m.zero_grad();
    const Var f = m.encode(s.image);
    const auto unprompted = unprompted_all(m, f);
    std::vector<Var> prompted;
    for (int b = 1; b <= 2; ++b) prompted.push_back(m.decode(b, f, m.prompt_encode(prompts)));
    ag::backward(supervised_loss(unprompted, prompted, y));
    opt_w.step(m, 3e-3);
  }
  const auto score = [&](const LabelMap& pred) { return sample_metrics("x", pred, *s.label, 2)[0].dsc; };
  const double plain = score(infer(m, s.image)), prompted = score(gt_prompt_eval(m, s.image, *s.label));
  EXPECT_GT(plain, 80.0);
  EXPECT_GE(prompted, plain);
}

TEST(Report, PerfectPredictionsSummary) {
  SyntheticOptions opt;
  opt.n_samples = 5;
  opt.resolution = 32;
  opt.num_classes = 3;
  EvaluationReport r;
  for (const auto& s : generate_synthetic(opt)) {
    auto recs = sample_metrics(s.id, *s.label, *s.label, 3);
    r.records.insert(r.records.end(), recs.begin(), recs.end());
  }
  summarize(r, 3);
  EXPECT_EQ(r.mean.class_id, 0);
  EXPECT_DOUBLE_EQ(r.mean.dsc, 100.0);
  EXPECT_DOUBLE_EQ(r.mean.jc, 100.0);
  EXPECT_DOUBLE_EQ(*r.mean.hd95, 0.0);
  EXPECT_DOUBLE_EQ(*r.mean.asd, 0.0);
}

TEST(Report, SummaryMeansAreHandAverages) {
  EvaluationReport r;
  r.records = {{"a", 1, 80, 60, 2.0, 1.0, {}},  {"b", 1, 40, 30, std::nullopt, std::nullopt, {"surface_undefined"}},
               {"a", 2, 90, 70, 4.0, 3.0, {}},  {"b", 2, 70, 50, 6.0, 5.0, {}}};
  summarize(r, 3);
  ASSERT_EQ(r.per_class.size(), 2u);
  EXPECT_DOUBLE_EQ(r.per_class[0].dsc, 60.0);
  EXPECT_DOUBLE_EQ(r.per_class[0].jc, 45.0);
  EXPECT_DOUBLE_EQ(*r.per_class[0].hd95, 2.0);
  EXPECT_EQ(r.per_class[0].surface_excluded, 1);
  EXPECT_DOUBLE_EQ(r.per_class[1].dsc, 80.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1].asd, 4.0);
  EXPECT_DOUBLE_EQ(r.mean.dsc, 70.0);
  EXPECT_DOUBLE_EQ(*r.mean.hd95, 3.5);
  EXPECT_EQ(r.mean.surface_excluded, 1);
  EXPECT_NE(summary_table(r).find("mean"), std::string::npos);
}

TEST(Report, RoundTripsThroughFile) {
  EvaluationReport r;
  r.mode = "gt_prompt";
  r.split = "test";
  r.records = {{"a", 1, 100.0 / 3.0, 0.1 + 0.2, 1.0 / 7.0, std::nullopt, {"x", "y"}}};
  r.errors = {{"b", "ground truth required for sample b"}};
  r.run_config = {{"seed", 3}};
  summarize(r, 2);
  const auto path = std::filesystem::temp_directory_path() / "cpcsam_report_roundtrip.json";
  write_report(r, path);
  EXPECT_EQ(read_report(path), r);
  EXPECT_TRUE(report_schema_errors(report_to_json(r)).empty());
  std::filesystem::remove(path);

  json bad = report_to_json(r);
  bad["records"][0]["dsc"] = 120.0;
  bad["records"][0].erase("flags");
  EXPECT_EQ(report_schema_errors(bad).size(), 2u);
  EXPECT_THROW(report_from_json(json{{"schema", "other"}}), DataError);
}

TEST(Evaluate, MissingLabelsAreReportedPerSample) {
  auto m = build_toy_model(2, 32, 32, 8);
  SyntheticOptions opt;
  opt.n_samples = 3;
  opt.resolution = 32;
  auto samples = generate_synthetic(opt);
  samples[1].label.reset();
  const auto r = evaluate_dataset(m, samples, EvalMode::unprompted, "test");
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_EQ(r.errors[0].sample_id, samples[1].id);
  EXPECT_EQ(r.records.size(), 2u);
  EXPECT_THROW(evaluate_dataset(m, {}, EvalMode::unprompted), std::invalid_argument);
  EXPECT_THROW(eval_mode_from_string("center"), std::invalid_argument);
}
