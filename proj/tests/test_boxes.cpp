#include <gtest/gtest.h>

#include <cmath>

#include "affkit/boxes.hpp"
#include "affkit/model.hpp"
#include "affkit/proposals.hpp"
#include "oracles.hpp"

using namespace affkit;

TEST(Iou, PointValues) {
  const Box a{0, 0, 10, 10};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, Box{20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou(a, Box{5, 0, 15, 10}), 1.0 / 3.0, 1e-15);
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Box a = oracle::random_box(rng, 50), b = oracle::random_box(rng, 50);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, oracle::box_iou(a, b), 1e-12);
  }
}

TEST(Offsets, HandEvaluation) {
  const Box anchor{5, 5, 15, 15}, box{5, 5, 25, 15};
  const auto t = encode_offsets(box, anchor);
  EXPECT_NEAR(t.tx, 0.5, 1e-15);
  EXPECT_NEAR(t.ty, 0.0, 1e-15);
  EXPECT_NEAR(t.tw, std::log(2.0), 1e-15);
  EXPECT_NEAR(t.th, 0.0, 1e-15);
  const auto z = encode_offsets(anchor, anchor);
  EXPECT_EQ(z.tx, 0);
  EXPECT_EQ(z.tw, 0);
}

TEST(Offsets, RoundTripBothDirections) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const Box a = oracle::random_box(rng, 100), b = oracle::random_box(rng, 100);
    const Box back = decode_offsets(encode_offsets(b, a), a);
    EXPECT_NEAR(back.x1, b.x1, 1e-9);
    EXPECT_NEAR(back.y1, b.y1, 1e-9);
    EXPECT_NEAR(back.x2, b.x2, 1e-9);
    EXPECT_NEAR(back.y2, b.y2, 1e-9);
    const BoxOffset t{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const auto t2 = encode_offsets(decode_offsets(t, a), a);
    EXPECT_NEAR(t2.tx, t.tx, 1e-9);
    EXPECT_NEAR(t2.th, t.th, 1e-9);
  }
}

TEST(Anchors, FifteenPerCellAreaPreserving) {
  AnchorConfig c;
  c.scales = {32, 64, 128, 256, 512};
  const auto a = generate_anchors(c, 1, 1);
  ASSERT_EQ(a.size(), 15u);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t s = 0; s < 5; ++s) {
      const Box& b = a[r * 5 + s];
      EXPECT_NEAR(b.width() * b.height(), c.scales[s] * c.scales[s], 1e-6);
    }
  AnchorConfig sq;
  sq.scales = {32};
  sq.ratios = {1.0};
  const Box b = generate_anchors(sq, 1, 1)[0];
  EXPECT_NEAR(b.width(), 32, 1e-12);
  EXPECT_NEAR(b.center_x(), 2, 1e-12);
  EXPECT_NEAR(b.center_y(), 2, 1e-12);
}

TEST(Nms, SmallCases) {
  const std::vector<Box> one{{0, 0, 5, 5}};
  const std::vector<double> s1{0.3};
  EXPECT_EQ(nms(one, s1, 0.5), std::vector<std::size_t>{0});
  const std::vector<Box> two{{0, 0, 5, 5}, {0, 0, 5, 5}};
  const std::vector<double> s2{0.8, 0.9};
  EXPECT_EQ(nms(two, s2, 0.5), std::vector<std::size_t>{1});
}

TEST(Nms, MatchesQuadraticOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < 300; ++i) {
      boxes.push_back(oracle::random_box(rng, 200, 2));
      scores.push_back(std::round(rng.uniform() * 50) / 50);
    }
    const auto keep = nms(boxes, scores, 0.5);
    EXPECT_EQ(keep, oracle::nms(boxes, scores, 0.5));
    for (std::size_t i = 1; i < keep.size(); ++i) EXPECT_GE(scores[keep[i - 1]], scores[keep[i]]);
  }
}

TEST(Clip, Clamps) {
  EXPECT_EQ(clip_box({1, 2, 3, 4}, 10, 10), (Box{1, 2, 3, 4}));
  EXPECT_EQ(clip_box({-5, -5, 20, 20}, 10, 10), (Box{0, 0, 10, 10}));
  const Box out = clip_box({12, 12, 20, 20}, 10, 10);
  EXPECT_EQ(out.area(), 0.0);
}

TEST(RpnTargets, LabelRules) {
  const std::vector<Box> gt{{0, 0, 10, 10}};
  const std::vector<Box> anchors{{0, 0, 10, 10}, {0, 0, 10, 16.6666666667}, {0, 0, 1, 10}};
  EXPECT_NEAR(iou(anchors[1], gt[0]), 0.6, 1e-9);
  EXPECT_NEAR(iou(anchors[2], gt[0]), 0.1, 1e-12);
  const auto t = assign_rpn_targets(anchors, gt, {}, 1);
  EXPECT_EQ(t.labels[0], AnchorLabel::positive);
  EXPECT_EQ(t.labels[1], AnchorLabel::ignore);
  EXPECT_EQ(t.labels[2], AnchorLabel::negative);
  const std::vector<Box> far{{50, 50, 60, 60}};
  EXPECT_EQ(assign_rpn_targets(far, gt, {}, 1).labels[0], AnchorLabel::negative);
}

TEST(RoiSampling, RatioAndLabels) {
  std::vector<Proposal> props;
  const std::vector<GroundTruthObject> gt{{{0, 0, 10, 10}, 2}};
  props.push_back({{0, 0, 10, 10}, 0.9});
  props.push_back({{0, 0, 10, 12}, 0.8});
  for (int i = 0; i < 8; ++i) props.push_back({{30.0 + i, 30, 40.0 + i, 40}, 0.5});
  const auto s = sample_rois(props, gt, {}, 7);
  std::size_t pos = 0, neg = 0;
  for (const auto& r : s) {
    if (r.label >= 1) {
      ++pos;
      EXPECT_EQ(r.label, 2u);
      EXPECT_GE(r.max_iou, 0.5);
      ASSERT_TRUE(r.matched_gt.has_value());
    } else {
      ++neg;
      EXPECT_LT(r.max_iou, 0.5);
      EXPECT_FALSE(r.matched_gt.has_value());
    }
  }
  EXPECT_EQ(pos, 2u);
  EXPECT_EQ(neg, 6u);
  EXPECT_EQ(RoiSamplingConfig{}.k_train, 2000u);
}

TEST(RoiSampling, IgnoreBandBetweenBackgroundAndForeground) {
  const std::vector<GroundTruthObject> gt{{{0, 0, 10, 10}, 1}};
  // IoUs 1.0, 0.8, 0.75 and 0.
  const std::vector<Proposal> props{{{0, 0, 10, 10}, 0.9},
                                    {{0, 0, 10, 12.5}, 0.8},
                                    {{0, 0, 10, 40.0 / 3}, 0.7},
                                    {{30, 30, 40, 40}, 0.6}};
  RoiSamplingConfig c;
  c.fg_iou = 0.9;
  c.bg_iou = 0.7;
  c.negatives_per_positive = 1;
  c.batch_size = 4;
  const auto s = sample_rois(props, gt, c, 1);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].label, 1u);
  EXPECT_EQ(s[0].max_iou, 1.0);
  EXPECT_EQ(s[1].label, 0u);
  EXPECT_EQ(s[1].max_iou, 0.0);
  c.bg_iou = 0.95;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(RoiSampling, DeterministicAndRatioBounded) {
  Rng rng(4);
  std::vector<Proposal> props;
  for (int i = 0; i < 400; ++i) props.push_back({oracle::random_box(rng, 100, 4), rng.uniform()});
  std::vector<GroundTruthObject> gt{{{10, 10, 40, 40}, 1}, {{50, 50, 90, 80}, 2}};
  for (const auto& g : gt) props.push_back({g.box, 1.0});
  const auto a = sample_rois(props, gt, {}, 99), b = sample_rois(props, gt, {}, 99);
  ASSERT_EQ(a.size(), b.size());
  std::size_t pos = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].roi.box, b[i].roi.box);
    pos += a[i].label >= 1;
  }
  EXPECT_LE(pos * 3, a.size() - pos);
}

TEST(InferenceRois, TopKByScore) {
  const std::vector<Proposal> p{{{0, 0, 1, 1}, 0.1}, {{0, 0, 1, 1}, 0.9}, {{0, 0, 1, 1}, 0.5}};
  EXPECT_EQ(select_inference_rois(p, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_inference_rois(p, 10).size(), 3u);
  EXPECT_EQ(InferConfig{}.k_infer, 1000u);
}
