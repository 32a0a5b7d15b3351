#include <gtest/gtest.h>

#include <cmath>

#include "affkit/losses.hpp"
#include "affkit/rng.hpp"

using namespace affkit;

namespace {

Tensor<double> uniform_mask(std::size_t classes, std::size_t h, std::size_t w) {
  return Tensor<double>({classes, h, w}, 1.0 / double(classes));
}

}  // namespace

TEST(ClassificationLoss, ClosedForms) {
  const std::vector<double> perfect{0, 1, 0}, half{0.5, 0.5};
  EXPECT_EQ(classification_loss<double>(perfect, 1), 0.0);
  EXPECT_NEAR(classification_loss<double>(half, 0), std::log(2.0), 1e-12);
  const std::vector<double> ten(10, 0.1);
  EXPECT_NEAR(classification_loss<double>(ten, 7), std::log(10.0), 1e-12);
}

TEST(SmoothL1, BranchValuesAndContinuity) {
  EXPECT_EQ(smooth_l1(0.0), 0.0);
  EXPECT_NEAR(smooth_l1(0.5), 0.125, 1e-12);
  EXPECT_NEAR(smooth_l1(2.0), 1.5, 1e-12);
  EXPECT_NEAR(smooth_l1(-2.0), 1.5, 1e-12);
  const double e = 1e-9;
  for (double s : {1.0, -1.0}) {
    EXPECT_NEAR(smooth_l1(s - e), 0.5, 1e-8);
    EXPECT_NEAR(smooth_l1(s + e), 0.5, 1e-8);
    EXPECT_NEAR(smooth_l1_grad(s - e), s, 1e-8);
    EXPECT_NEAR(smooth_l1_grad(s + e), s, 1e-8);
  }
}

TEST(BoxRegressionLoss, HandValues) {
  const BoxOffset z{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(box_regression_loss(z, z), 0.0);
  EXPECT_NEAR(box_regression_loss({0.5, 0, 0, 0}, {0, 0, 0, 0}), 0.125, 1e-12);
  EXPECT_NEAR(box_regression_loss({2, 2, 2, 2}, {0, 0, 0, 0}), 6.0, 1e-12);
}

TEST(AffordanceLoss, ClosedForms) {
  LabelMask s(3, 2, std::vector<std::uint8_t>{0, 1, 2, 3, 4, 1});
  Tensor<double> onehot({5, 2, 3});
  for (std::size_t i = 0; i < 6; ++i) onehot[s.labels()[i] * 6 + i] = 1;
  EXPECT_EQ(affordance_loss(onehot, s), 0.0);
  EXPECT_NEAR(affordance_loss(uniform_mask(5, 2, 3), s), std::log(5.0), 1e-12);
}

TEST(AffordanceLoss, TwoByTwoByHand) {
  LabelMask s(2, 2, std::vector<std::uint8_t>{0, 1, 1, 0});
  Tensor<double> m({2, 2, 2}, std::vector<double>{0.9, 0.4, 0.3, 0.2, 0.1, 0.6, 0.7, 0.8});
  const double expected = -(std::log(0.9) + std::log(0.6) + std::log(0.7) + std::log(0.2)) / 4;
  EXPECT_NEAR(affordance_loss(m, s), expected, 1e-12);
}

TEST(MultiTaskLoss, BackgroundIsClassificationOnly) {
  HeadPrediction<double> p{{0.7, 0.2, 0.1}, {{1, 1, 1, 1}, {2, 2, 2, 2}, {3, 3, 3, 3}}, uniform_mask(5, 4, 4)};
  DetectionTarget t{0, {0, 0, 0, 0}, LabelMask(4, 4, 1)};
  const auto parts = multi_task_loss(p, t);
  EXPECT_EQ(parts.total, parts.cls);
  EXPECT_EQ(parts.loc, 0.0);
  EXPECT_EQ(parts.aff, 0.0);
  const auto g = multi_task_loss_backward(p, t);
  for (const auto& o : g.t) EXPECT_EQ(o.tx == 0 && o.ty == 0 && o.tw == 0 && o.th == 0, true);
  EXPECT_TRUE(g.m.empty());
}

TEST(MultiTaskLoss, PerfectForegroundIsZero) {
  LabelMask s(2, 2, std::vector<std::uint8_t>{1, 2, 3, 4});
  Tensor<double> m({5, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) m[s.labels()[i] * 4 + i] = 1;
  const BoxOffset v{0.1, -0.2, 0.3, 0.0};
  HeadPrediction<double> p{{0, 1, 0}, {{}, v, {}}, m};
  EXPECT_EQ(multi_task_loss(p, DetectionTarget{1, v, s}).total, 0.0);
}

TEST(MultiTaskLoss, SumOfTerms) {
  HeadPrediction<double> p{{0.25, 0.25, 0.5}, {{}, {}, {0.5, 0, 0, 0}}, uniform_mask(5, 3, 3)};
  DetectionTarget t{2, {0, 0, 0, 0}, LabelMask(3, 3, 2)};
  EXPECT_NEAR(multi_task_loss(p, t).total, std::log(2.0) + 0.125 + std::log(5.0), 1e-12);
}

TEST(Losses, NonNegative) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(4);
    double s = 0;
    for (auto& v : p) s += (v = rng.uniform(0.01, 1));
    for (auto& v : p) v /= s;
    EXPECT_GE(classification_loss<double>(p, std::size_t(i % 4)), 0.0);
    EXPECT_GE(smooth_l1(rng.uniform(-5, 5)), 0.0);
  }
}
