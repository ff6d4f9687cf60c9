#include <gtest/gtest.h>

#include "gfm/metrics.hpp"
#include "metrics_oracle.hpp"

using namespace gfm;
using gfm::testing::evaluate_oracle;
using gfm::testing::random_instance;

namespace {

InstanceAnnotation gt_box(std::int64_t id, std::int64_t image, std::int64_t cls, Box b,
                          std::int64_t size = 128) {
  InstanceAnnotation g;
  g.id = id;
  g.image_id = image;
  g.class_id = cls;
  g.box = b;
  g.mask = BinaryMask(size, size);
  for (auto r = static_cast<std::int64_t>(b.y1); r < static_cast<std::int64_t>(b.y2); ++r)
    for (auto c = static_cast<std::int64_t>(b.x1); c < static_cast<std::int64_t>(b.x2); ++c)
      g.mask.at(r, c) = 1;
  return g;
}

Detection det_from(const InstanceAnnotation& g, std::int64_t id, double score) {
  return {id, g.image_id, g.class_id, g.box, score, g.mask};
}

std::vector<std::optional<double>> all_values(const EvalReport& r) {
  std::vector<std::optional<double>> v;
  for (const auto& s : r.strata) {
    v.insert(v.end(), s.per_threshold.begin(), s.per_threshold.end());
    v.push_back(s.mean);
  }
  return v;
}

}  // namespace

TEST(Iou, BoxExamples) {
  const Box a{0, 0, 10, 10}, b{5, 5, 15, 15};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{20, 20, 30, 30}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 25.0 / 175.0);
  EXPECT_NEAR(iou(a, b), 0.142857, 1e-6);
}

TEST(Iou, MaskExamples) {
  BinaryMask a(4, 4), b(4, 4), e(4, 4);
  a.at(0, 0) = a.at(0, 1) = 1;
  b.at(0, 1) = b.at(1, 1) = b.at(2, 1) = b.at(3, 1) = 1;
  EXPECT_DOUBLE_EQ(mask_iou(a, b), 0.2);
  EXPECT_DOUBLE_EQ(mask_iou(a, a), 1.0);
  BinaryMask c(4, 4);
  c.at(3, 3) = 1;
  EXPECT_DOUBLE_EQ(mask_iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(mask_iou(a, e), 0.0);
  EXPECT_THROW(mask_iou(e, e), UndefinedIouError);
  EXPECT_THROW(mask_iou(a, BinaryMask(4, 5)), DimensionError);
}

TEST(Match, GreedyProtocol) {
  auto r = match_detections({{0.6}}, {false}, 0.5);
  EXPECT_EQ(r.flags[0], kTruePositive);
  r = match_detections({{0.9}, {0.8}}, {false}, 0.5);
  EXPECT_EQ(r.flags, (std::vector<std::int8_t>{kTruePositive, kFalsePositive}));
  r = match_detections({{}, {}}, {}, 0.5);
  EXPECT_EQ(r.flags, (std::vector<std::int8_t>{kFalsePositive, kFalsePositive}));
  // highest-IoU unmatched gt wins, then the next detection takes the other
  r = match_detections({{0.6, 0.7}, {0.9, 0.95}}, {false, false}, 0.5);
  EXPECT_EQ(r.matched_gt, (std::vector<std::int64_t>{1, 0}));
  // non-ignored gts are preferred; overlap with an ignored gt only ignores
  r = match_detections({{0.6, 0.9}, {0.0, 0.9}}, {false, true}, 0.5);
  EXPECT_EQ(r.flags, (std::vector<std::int8_t>{kTruePositive, kIgnored}));
}

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(*average_precision({kTruePositive}, 1), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision({}, 3), 0.0);
  const double ap = *average_precision({kTruePositive, kFalsePositive, kTruePositive}, 2);
  EXPECT_NEAR(ap, (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-12);
  EXPECT_NEAR(ap, 0.8349, 1e-4);
  EXPECT_DOUBLE_EQ(*average_precision({kFalsePositive}, 0), 0.0);
  EXPECT_FALSE(average_precision({}, 0).has_value());
}

TEST(Evaluate, StrataBoundaries) {
  EvalConfig c;
  EXPECT_EQ(c.stratum_of(1024), Stratum::Small);
  EXPECT_EQ(c.stratum_of(1025), Stratum::Medium);
  EXPECT_EQ(c.stratum_of(9216), Stratum::Medium);
  EXPECT_EQ(c.stratum_of(9217), Stratum::Large);

  // box areas 1024, 1025 and 9217 land in S, M and L
  std::vector<InstanceAnnotation> gts{gt_box(1, 0, 1, {0, 0, 32, 32}),
                                      gt_box(2, 1, 1, {0, 0, 41, 25}),
                                      gt_box(3, 2, 1, {0, 0, 13, 709}, 720)};
  EXPECT_EQ(gts[1].box.area(), 1025);
  EXPECT_EQ(gts[2].box.area(), 9217);
  auto r = evaluate({det_from(gts[0], 1, 0.9)}, gts, c);
  EXPECT_EQ(r.strata[1].num_gt, 1);
  EXPECT_EQ(r.strata[2].num_gt, 1);
  EXPECT_EQ(r.strata[3].num_gt, 1);
  EXPECT_DOUBLE_EQ(*r.map_s(), 1.0);
  EXPECT_DOUBLE_EQ(*r.map_m(), 0.0);
  EXPECT_DOUBLE_EQ(*r.map_l(), 0.0);
}

TEST(Evaluate, PerfectDetectorAndNotApplicable) {
  std::vector<InstanceAnnotation> gts;
  std::vector<Detection> dets;
  for (int i = 0; i < 6; ++i) {
    gts.push_back(gt_box(i + 1, i / 2, 1 + i % 2, {4.0 * i, 2, 4.0 * i + 20 + 10 * i, 50}));
    dets.push_back(det_from(gts.back(), i + 1, 1.0));
  }
  for (auto kind : {IouKind::Box, IouKind::Mask}) {
    EvalConfig c;
    c.iou_kind = kind;
    auto r = evaluate(dets, gts, c);
    EXPECT_DOUBLE_EQ(*r.map50(), 1.0);
    EXPECT_DOUBLE_EQ(*r.map(), 1.0);
    EXPECT_DOUBLE_EQ(*r.map_s(), 1.0);
    EXPECT_DOUBLE_EQ(*r.map_m(), 1.0);
    EXPECT_FALSE(r.map_l().has_value());
    EXPECT_EQ(format_metric(r.map_l()), "N/A");
  }
  auto empty = evaluate({}, {}, EvalConfig{});
  for (const auto& v : all_values(empty)) EXPECT_FALSE(v.has_value());
}

TEST(Evaluate, RejectsDuplicateIdsAndBadConfig) {
  auto g = gt_box(1, 0, 1, {0, 0, 10, 10});
  EXPECT_THROW(evaluate({det_from(g, 3, 0.5), det_from(g, 3, 0.4)}, {g}, EvalConfig{}), InputError);
  EvalConfig bad;
  bad.iou_thresholds = {0.5, 0.5};
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.iou_thresholds = {0.0};
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Evaluate, TiesBrokenByDetectionId) {
  auto g = gt_box(1, 0, 1, {0, 0, 20, 20});
  auto d1 = det_from(g, 1, 0.5), d2 = det_from(g, 2, 0.5);
  d2.box = {1, 1, 20, 20};  // lower IoU; whichever comes first takes the gt
  auto r = evaluate({d2, d1}, {g}, EvalConfig{});
  // d1 has the smaller id, so it is ranked first and is the TP
  EXPECT_DOUBLE_EQ(*r.map50(), 1.0);
  EXPECT_DOUBLE_EQ(*r.map(), 1.0);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  Rng rng(41);
  for (int n = 0; n < 50; ++n) {
    auto inst = random_instance(rng);
    for (auto kind : {IouKind::Box, IouKind::Mask}) {
      EvalConfig c;
      c.iou_kind = kind;
      EXPECT_EQ(all_values(evaluate(inst.dets, inst.gts, c, 1)),
                all_values(evaluate(inst.dets, inst.gts, c, 4)));
    }
  }
}

TEST(Evaluate, AgreesExactlyWithOracle) {
  Rng rng(2024);
  for (int n = 0; n < 500; ++n) {
    auto inst = random_instance(rng);
    for (auto kind : {IouKind::Box, IouKind::Mask}) {
      EvalConfig c;
      c.iou_kind = kind;
      const auto r = evaluate(inst.dets, inst.gts, c);
      const auto o = evaluate_oracle(inst.dets, inst.gts, c);
      for (int s = 0; s < 4; ++s) {
        ASSERT_EQ(r.strata[s].per_threshold, o.per_threshold[s]) << "instance " << n << " stratum " << s;
        ASSERT_EQ(r.strata[s].mean, o.mean[s]) << "instance " << n << " stratum " << s;
      }
    }
  }
}

TEST(Oracle, SmallCasesAndRefusal) {
  auto g = gt_box(1, 0, 1, {0, 0, 10, 10});
  auto o = evaluate_oracle({det_from(g, 1, 0.7)}, {g}, EvalConfig{});
  EXPECT_DOUBLE_EQ(*o.mean[0], 1.0);
  auto e = evaluate_oracle({}, {}, EvalConfig{});
  for (const auto& m : e.mean) EXPECT_FALSE(m.has_value());
  std::vector<Detection> many;
  for (int i = 0; i < 21; ++i) many.push_back(det_from(g, i, 0.5));
  EXPECT_THROW(evaluate_oracle(many, {g}, EvalConfig{}), UsageError);
}

TEST(EvaluateProperty, AddingUnclaimedTruePositiveNeverLowersAp) {
  Rng rng(77);
  int checked = 0;
  for (int n = 0; n < 300; ++n) {
    auto inst = random_instance(rng);
    if (inst.gts.empty()) continue;
    // pick a gt no same-class detection overlaps, and add an exact copy of it
    for (const auto& g : inst.gts) {
      bool touched = false;
      for (const auto& d : inst.dets)
        touched |= d.image_id == g.image_id && d.class_id == g.class_id && iou(d.box, g.box) > 0;
      if (touched) continue;
      const auto before = evaluate(inst.dets, inst.gts, EvalConfig{});
      auto dets = inst.dets;
      dets.push_back(det_from(g, 1000, static_cast<double>(rng.below(17)) / 16.0));
      const auto after = evaluate(dets, inst.gts, EvalConfig{});
      for (int s = 0; s < 4; ++s)
        for (std::size_t t = 0; t < before.thresholds.size(); ++t)
          if (before.strata[s].per_threshold[t]) {
            ASSERT_GE(*after.strata[s].per_threshold[t], *before.strata[s].per_threshold[t]);
          }
      ++checked;
      break;
    }
  }
  EXPECT_GT(checked, 50);
}

TEST(EvaluateProperty, LowestScoredFalsePositiveNeverRaisesAp) {
  Rng rng(78);
  for (int n = 0; n < 300; ++n) {
    auto inst = random_instance(rng);
    const auto before = evaluate(inst.dets, inst.gts, EvalConfig{});
    auto dets = inst.dets;
    // on an image without ground truth, so it cannot match anything
    Detection fp{1000, 999, 1, {0, 0, 40, 40}, 0.0, {}};
    dets.push_back(fp);
    const auto after = evaluate(dets, inst.gts, EvalConfig{});
    for (int s = 0; s < 4; ++s)
      for (std::size_t t = 0; t < before.thresholds.size(); ++t)
        if (before.strata[s].per_threshold[t]) {
          ASSERT_LE(*after.strata[s].per_threshold[t], *before.strata[s].per_threshold[t]);
        }
  }
}

TEST(EvaluateProperty, ScoreScalingInvariance) {
  Rng rng(79);
  for (int n = 0; n < 200; ++n) {
    auto inst = random_instance(rng);
    auto scaled = inst.dets;
    for (auto& d : scaled) d.score *= 0.37;
    for (auto kind : {IouKind::Box, IouKind::Mask}) {
      EvalConfig c;
      c.iou_kind = kind;
      ASSERT_EQ(all_values(evaluate(inst.dets, inst.gts, c)), all_values(evaluate(scaled, inst.gts, c)));
    }
  }
}

TEST(EvaluateProperty, StrictThresholdsNeverBeatMap50) {
  Rng rng(80);
  for (int n = 0; n < 300; ++n) {
    auto inst = random_instance(rng);
    for (auto kind : {IouKind::Box, IouKind::Mask}) {
      EvalConfig c;
      c.iou_kind = kind;
      const auto r = evaluate(inst.dets, inst.gts, c);
      if (!r.map50()) continue;
      // per-threshold dominance is exact; the mean of ten equal values may round up
      for (std::size_t t = 1; t < r.thresholds.size(); ++t)
        ASSERT_LE(*r.strata[0].per_threshold[t], *r.map50());
      ASSERT_LE(*r.map(), *r.map50() + 1e-12);
    }
  }
}

TEST(DetectionJson, RoundTrip) {
  auto g = gt_box(1, 3, 2, {2, 3, 9, 12}, 16);
  auto d = det_from(g, 5, 0.25);
  auto back = detection_from_json(detection_json(d));
  EXPECT_EQ(back.id, 5);
  EXPECT_EQ(back.image_id, 3);
  EXPECT_EQ(back.class_id, 2);
  EXPECT_EQ(back.box, d.box);
  EXPECT_EQ(back.score, 0.25);
  EXPECT_EQ(back.mask, d.mask);
  EXPECT_THROW(detection_from_json({{"id", 1}}), FormatError);
}
