#include "sde/eval.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "eval_oracle.hpp"
#include "test_util.hpp"

namespace sde {
namespace {

namespace oracle = sde::testing::oracle;
using sde::testing::oracle::random_image_set;

TEST(IouTest, IdenticalBoxes) {
  BBox b{0.1, 0.2, 0.5, 0.8};
  EXPECT_DOUBLE_EQ(iou(b, b), 1.0);
}

TEST(IouTest, DisjointBoxes) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0);
}

TEST(IouTest, OneSeventhOverlap) {
  const double v = iou({0, 0, 2, 2}, {1, 1, 3, 3});
  EXPECT_NEAR(v, 1.0 / 7.0, 1e-12);
  EXPECT_NEAR(v, 0.142857, 1e-6);
  EXPECT_DOUBLE_EQ(v, oracle::box_iou({0, 0, 2, 2}, {1, 1, 3, 3}));
}

TEST(IouTest, DegenerateUnionIsZero) {
  EXPECT_DOUBLE_EQ(iou({1, 1, 1, 1}, {1, 1, 1, 1}), 0.0);
}

TEST(IouTest, InvalidBoxRejected) {
  EXPECT_THROW(iou({2, 0, 1, 1}, {0, 0, 1, 1}), ConfigError);
}

TEST(IouTest, SymmetricBoundedProperty) {
  SplitMix64 rng(1);
  for (int i = 0; i < 200; ++i) {
    auto rand_box = [&] {
      const double x = rng.uniform(), y = rng.uniform();
      return BBox{x, y, x + rng.uniform(), y + rng.uniform()};
    };
    const BBox a = rand_box(), b = rand_box();
    const double ab = iou(a, b), ba = iou(b, a);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    EXPECT_DOUBLE_EQ(ab, oracle::box_iou(a, b));
  }
  // strictly below 1 for any proper shift
  EXPECT_LT(iou({0, 0, 1, 1}, {0.01, 0, 1.01, 1}), 1.0);
}

TEST(MatchTest, SingleOverlapAboveThreshold) {
  std::vector<ScoredBox> dets{{{0, 0, 1, 1}, 0.9, 0}};
  std::vector<BBox> gts{{0, 0.25, 1, 1.25}};  // IoU = 0.75/1.25 = 0.6
  auto m = match_detections(dets, gts, 0.5);
  EXPECT_TRUE(m.is_tp[0]);
  EXPECT_EQ(m.fn, 0);
}

TEST(MatchTest, OverlapBelowThreshold) {
  std::vector<ScoredBox> dets{{{0, 0, 1, 1}, 0.9, 0}};
  std::vector<BBox> gts{{0, 0.75, 1, 1.75}};  // IoU = 0.25/1.75 < 0.5
  auto m = match_detections(dets, gts, 0.5);
  EXPECT_FALSE(m.is_tp[0]);
  EXPECT_EQ(m.fn, 1);
}

TEST(MatchTest, GreedyOneToOne) {
  std::vector<ScoredBox> dets{{{0, 0, 1, 1}, 0.9, 0}, {{0, 0, 1, 1}, 0.8, 0}};
  std::vector<BBox> gts{{0, 0, 1, 1}};
  auto m = match_detections(dets, gts, 0.5);
  EXPECT_TRUE(m.is_tp[0]);
  EXPECT_FALSE(m.is_tp[1]);
  EXPECT_EQ(m.fn, 0);
}

TEST(MatchTest, CountsConservationProperty) {
  SplitMix64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto images = random_image_set(1000 + trial, 1);
    const auto& im = images[0];
    std::vector<BBox> gts;
    for (const auto& g : im.gts) gts.push_back(g.box);
    auto m = match_detections(im.dets, gts, 0.5);
    int64_t tp = std::count(m.is_tp.begin(), m.is_tp.end(), true);
    int64_t fp = int64_t(m.is_tp.size()) - tp;
    EXPECT_EQ(tp + fp, int64_t(im.dets.size()));
    EXPECT_EQ(tp + m.fn, int64_t(gts.size()));
  }
}

TEST(PrecisionRecallTest, Cases) {
  auto pr = precision_recall({8, 2, 2});
  EXPECT_DOUBLE_EQ(pr.precision, 0.8);
  EXPECT_DOUBLE_EQ(pr.recall, 0.8);
  EXPECT_FALSE(pr.degenerate);

  auto none = precision_recall({0, 0, 3});
  EXPECT_DOUBLE_EQ(none.precision, 0.0);
  EXPECT_TRUE(none.degenerate);

  auto perfect = precision_recall({5, 0, 0});
  EXPECT_DOUBLE_EQ(perfect.precision, 1.0);
  EXPECT_DOUBLE_EQ(perfect.recall, 1.0);
}

TEST(PrCurveTest, AllTruePositives) {
  std::vector<std::pair<double, bool>> ranked{{0.9, true}, {0.8, true},
                                              {0.7, true}};
  auto c = pr_curve_from_flags(ranked, 3);
  for (const auto& p : c.points) EXPECT_DOUBLE_EQ(p.precision, 1.0);
  EXPECT_DOUBLE_EQ(c.points.back().recall, 1.0);
}

TEST(PrCurveTest, AllFalsePositives) {
  std::vector<std::pair<double, bool>> ranked{{0.9, false}, {0.8, false}};
  auto c = pr_curve_from_flags(ranked, 2);
  for (const auto& p : c.points) {
    EXPECT_DOUBLE_EQ(p.precision, 0.0);
    EXPECT_DOUBLE_EQ(p.recall, 0.0);
  }
}

TEST(PrCurveTest, CumulativePoints) {
  std::vector<std::pair<double, bool>> ranked{{0.9, true}, {0.8, false},
                                              {0.7, true}};
  auto c = pr_curve_from_flags(ranked, 2);
  ASSERT_EQ(c.points.size(), 3u);
  EXPECT_DOUBLE_EQ(c.points[0].recall, 0.5);
  EXPECT_DOUBLE_EQ(c.points[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(c.points[1].recall, 0.5);
  EXPECT_DOUBLE_EQ(c.points[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(c.points[2].recall, 1.0);
  EXPECT_NEAR(c.points[2].precision, 2.0 / 3.0, 1e-12);
}

TEST(PrCurveTest, RecallMonotoneInvariant) {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::pair<double, bool>> ranked;
    const int n = 1 + int(rng.next() % 20);
    int tps = 0;
    for (int i = 0; i < n; ++i) {
      const bool tp = rng.uniform() < 0.5 && tps < 10;
      if (tp) ++tps;
      ranked.emplace_back(1.0 - 0.01 * i, tp);
    }
    auto c = pr_curve_from_flags(ranked, 10);
    for (size_t i = 1; i < c.points.size(); ++i)
      EXPECT_GE(c.points[i].recall, c.points[i - 1].recall);
    for (const auto& p : c.points) {
      EXPECT_GE(p.precision, 0.0);
      EXPECT_LE(p.precision, 1.0);
      EXPECT_GE(p.recall, 0.0);
      EXPECT_LE(p.recall, 1.0);
    }
  }
}

TEST(AveragePrecisionTest, PerfectCurve) {
  std::vector<std::pair<double, bool>> ranked{{0.9, true}, {0.8, true}};
  EXPECT_DOUBLE_EQ(average_precision(pr_curve_from_flags(ranked, 2)), 1.0);
}

TEST(AveragePrecisionTest, EmptyCurveIsZero) {
  EXPECT_DOUBLE_EQ(average_precision(PRCurve{}), 0.0);
}

TEST(AveragePrecisionTest, ExampleCurve) {
  std::vector<std::pair<double, bool>> ranked{{0.9, true}, {0.8, false},
                                              {0.7, true}};
  const double ap = average_precision(pr_curve_from_flags(ranked, 2));
  EXPECT_NEAR(ap, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 1e-12);
  EXPECT_NEAR(ap, 0.8333, 1e-4);
}

TEST(AveragePrecisionTest, EnvelopeNonIncreasing) {
  SplitMix64 rng(4);
  std::vector<std::pair<double, bool>> ranked;
  for (int i = 0; i < 40; ++i)
    ranked.emplace_back(1.0 - 0.01 * i, rng.uniform() < 0.4);
  auto curve = pr_curve_from_flags(ranked, 20);
  // recompute the envelope and check monotonicity across recall
  double prev_env = 1e9;
  for (size_t i = 0; i < curve.points.size(); ++i) {
    double env = 0;
    for (size_t j = i; j < curve.points.size(); ++j)
      env = std::max(env, curve.points[j].precision);
    EXPECT_LE(env, prev_env + 1e-15);
    prev_env = env;
  }
}

TEST(AveragePrecisionTest, AddingTruePositiveNeverDecreasesAp) {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::pair<double, bool>> ranked;
    const int n = 1 + int(rng.next() % 15);
    int64_t gts = 1 + int(rng.next() % 10);
    int64_t tps = 0;
    for (int i = 0; i < n; ++i) {
      bool tp = rng.uniform() < 0.4 && tps < gts;
      if (tp) ++tps;
      ranked.emplace_back(rng.uniform(), tp);
    }
    std::sort(ranked.begin(), ranked.end(),
              [](auto& a, auto& b) { return a.first > b.first; });
    const double before = average_precision(pr_curve_from_flags(ranked, gts));
    if (tps >= gts) continue;
    auto extended = ranked;
    extended.emplace_back(rng.uniform(), true);
    std::sort(extended.begin(), extended.end(),
              [](auto& a, auto& b) { return a.first > b.first; });
    const double after =
        average_precision(pr_curve_from_flags(extended, gts));
    EXPECT_GE(after, before - 1e-12);
  }
}

TEST(AveragePrecisionTest, RankOnlyDependenceOnScores) {
  SplitMix64 rng(6);
  std::vector<std::pair<double, bool>> ranked;
  for (int i = 0; i < 25; ++i)
    ranked.emplace_back(rng.uniform(), rng.uniform() < 0.5);
  std::sort(ranked.begin(), ranked.end(),
            [](auto& a, auto& b) { return a.first > b.first; });
  const double base = average_precision(pr_curve_from_flags(ranked, 12));
  auto rescaled = ranked;
  for (auto& [s, tp] : rescaled) s = 1.0 / (1.0 + std::exp(-5.0 * s));
  const double after = average_precision(pr_curve_from_flags(rescaled, 12));
  EXPECT_DOUBLE_EQ(base, after);
}

TEST(MeanApTest, Cases) {
  EXPECT_DOUBLE_EQ(mean_ap({0.37}), 0.37);
  EXPECT_DOUBLE_EQ(mean_ap({0.5, 0.5, 0.5}), 0.5);
  EXPECT_DOUBLE_EQ(mean_ap({0.8, 0.6}), 0.7);
}

TEST(MapRangeTest, PerfectDetections) {
  std::vector<ImageEval> images(1);
  images[0].name = "a";
  images[0].gts = {{{0.1, 0.1, 0.4, 0.4}, 0}, {{0.5, 0.5, 0.9, 0.9}, 0}};
  for (const auto& g : images[0].gts)
    images[0].dets.push_back({g.box, 1.0, 0});
  auto r = evaluate_samples(images);
  for (double ap : r.ap_per_threshold) EXPECT_DOUBLE_EQ(ap, 1.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 1.0);
}

TEST(MapRangeTest, MidThresholdCutoff) {
  // IoU exactly 9/16 = 0.5625: counted at 0.50 and 0.55, rejected above
  std::vector<ImageEval> images(1);
  images[0].name = "a";
  images[0].gts = {{{0, 0, 1, 1}, 0}};
  images[0].dets = {{{0, 0, 0.5625, 1}, 0.9, 0}};
  auto r = evaluate_samples(images);
  EXPECT_DOUBLE_EQ(r.ap_per_threshold[0], 1.0);
  EXPECT_DOUBLE_EQ(r.ap_per_threshold[1], 1.0);
  for (int i = 2; i < 10; ++i) EXPECT_DOUBLE_EQ(r.ap_per_threshold[i], 0.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 0.2);
}

TEST(MapRangeTest, NoDetections) {
  std::vector<ImageEval> images(1);
  images[0].name = "a";
  images[0].gts = {{{0, 0, 1, 1}, 0}};
  auto r = evaluate_samples(images);
  EXPECT_DOUBLE_EQ(r.map50_95, 0.0);
  EXPECT_DOUBLE_EQ(r.recall, 0.0);
}

TEST(F1Test, Cases) {
  EXPECT_DOUBLE_EQ(f1_score(0.6, 0.6), 0.6);
  EXPECT_DOUBLE_EQ(f1_score(1.0, 0.0), 0.0);
  EXPECT_NEAR(f1_score(0.883, 0.771), 0.823, 5e-4);
}

TEST(F1Test, PublishedOperatingPointPrintsExpectedF1) {
  EvalReport r;
  r.precision = 0.883;
  r.recall = 0.771;
  r.f1 = f1_score(r.precision, r.recall);
  const std::string json = eval_report_json(r);
  EXPECT_NE(json.find("\"f1\":0.823"), std::string::npos) << json;
}

TEST(F1Test, MinMaxBoundProperty) {
  SplitMix64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const double p = 0.01 + 0.99 * rng.uniform();
    const double r = 0.01 + 0.99 * rng.uniform();
    const double f = f1_score(p, r);
    EXPECT_GE(f, std::min(p, r) - 1e-12);
    EXPECT_LE(f, std::max(p, r) + 1e-12);
  }
}

TEST(EvaluateSamplesTest, PerfectPredictionsScoreOneEverywhere) {
  auto images = random_image_set(8, 6);
  for (auto& im : images) {
    im.dets.clear();
    for (const auto& g : im.gts) im.dets.push_back({g.box, 1.0, g.class_id});
  }
  auto r = evaluate_samples(images);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);
  EXPECT_DOUBLE_EQ(r.recall, 1.0);
  EXPECT_DOUBLE_EQ(r.f1, 1.0);
  EXPECT_DOUBLE_EQ(r.map50, 1.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 1.0);
}

TEST(EvaluateSamplesTest, EmptyPredictions) {
  auto images = random_image_set(9, 4);
  for (auto& im : images) im.dets.clear();
  auto r = evaluate_samples(images);
  EXPECT_DOUBLE_EQ(r.recall, 0.0);
  EXPECT_DOUBLE_EQ(r.map50, 0.0);
  EXPECT_DOUBLE_EQ(r.map50_95, 0.0);
  EXPECT_TRUE(r.degenerate_precision);
}

TEST(EvaluateSamplesTest, MatchesBruteForceOracleExactly) {
  for (uint64_t seed = 100; seed < 110; ++seed) {
    auto images = random_image_set(seed, 20);
    EvalConfig cfg;
    auto got = evaluate_samples(images, cfg);
    auto want = oracle::report(images, cfg);
    EXPECT_NEAR(got.precision, want.precision, 1e-9);
    EXPECT_NEAR(got.recall, want.recall, 1e-9);
    EXPECT_NEAR(got.f1, want.f1, 1e-9);
    EXPECT_NEAR(got.map50, want.map50, 1e-9);
    EXPECT_NEAR(got.map50_95, want.map50_95, 1e-9);
    for (int i = 0; i < 10; ++i)
      EXPECT_NEAR(got.ap_per_threshold[i], want.ap_per_threshold[i], 1e-9);
  }
}

TEST(EvaluateDatasetTest, FileBasedRoundTrip) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(::testing::TempDir()) / "eval_ds";
  fs::remove_all(root);
  fs::create_directories(root / "gt");
  fs::create_directories(root / "pred");
  {
    std::ofstream g(root / "gt" / "a.txt");
    g << "0 0.5 0.5 0.2 0.2\n";
    std::ofstream p(root / "pred" / "a.txt");
    p << "0 0.95 0.5 0.5 0.2 0.2\n";
  }
  auto r = evaluate_dataset((root / "pred").string(), (root / "gt").string());
  EXPECT_DOUBLE_EQ(r.map50, 1.0);
  EXPECT_DOUBLE_EQ(r.precision, 1.0);

  const std::string json = eval_report_json(r);
  for (const char* key : {"precision", "recall", "f1", "map50", "map50_95",
                          "ap_per_threshold"})
    EXPECT_NE(json.find(key), std::string::npos) << json;
}

TEST(EvaluateDatasetTest, MissingFileNamed) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(::testing::TempDir()) / "eval_missing";
  fs::remove_all(root);
  fs::create_directories(root / "gt");
  fs::create_directories(root / "pred");
  std::ofstream(root / "gt" / "only.txt") << "0 0.5 0.5 0.2 0.2\n";
  try {
    evaluate_dataset((root / "pred").string(), (root / "gt").string());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("only.txt"), std::string::npos)
        << e.what();
  }
}

TEST(EvaluateDatasetTest, MalformedLineNamesLineNumber) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(::testing::TempDir()) / "eval_bad";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "bad.txt") << "0 0.5 0.5 0.2 0.2\n0 x 0.5 0.2 0.2\n";
  try {
    read_gt_file((root / "bad.txt").string());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace sde
