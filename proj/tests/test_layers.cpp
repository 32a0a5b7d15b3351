#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "affkit/gradcheck.hpp"
#include "affkit/layers.hpp"
#include "oracles.hpp"

using namespace affkit;

namespace {

double inner(const Tensor<double>& a, const Tensor<double>& b) {
  return std::inner_product(a.values().begin(), a.values().end(), b.values().begin(), 0.0);
}

}  // namespace

TEST(Conv2d, IdentityKernelCopiesInput) {
  Rng rng(1);
  auto x = oracle::random_tensor({1, 3, 5, 6}, rng);
  Tensor<double> w({3, 3, 1, 1}), b({3});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1;
  const auto y = conv2d(x, w, b, {1, 0});
  ASSERT_EQ(y.dims(), x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, ZeroWeightsGiveBias) {
  Rng rng(2);
  auto x = oracle::random_tensor({2, 2, 4, 4}, rng);
  Tensor<double> w({3, 2, 3, 3}), b({3}, std::vector<double>{0.5, -1, 2});
  const auto y = conv2d(x, w, b, {1, 1});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y[(n * 3 + o) * 16 + i], b[o]);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t stride = 1 + trial % 2, pad = trial % 3;
    auto x = oracle::random_tensor({2, 3, 7 + std::size_t(trial % 4), 6}, rng);
    auto w = oracle::random_tensor({4, 3, 3, 3}, rng);
    auto b = oracle::random_tensor({4}, rng);
    const auto y = conv2d(x, w, b, {stride, pad});
    const auto ref = oracle::conv2d(x, w, b, long(stride), long(pad));
    ASSERT_EQ(y.dims(), ref.dims());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-10);
  }
}

TEST(Deconv2d, OutputSizeArithmetic) {
  EXPECT_EQ((DeconvSpec{8, 4, 1}.output_size(7)), 30u);
  EXPECT_EQ((DeconvSpec{8, 4, 1}.output_size(30)), 122u);
  EXPECT_EQ((DeconvSpec{4, 2, 1}.output_size(122)), 244u);
  EXPECT_EQ((DeconvSpec{4, 2, 1}.output_size(7)), 14u);
  EXPECT_THROW((DeconvSpec{1, 1, 5}.output_size(3)), ValidationError);
}

TEST(Deconv2d, IsAdjointOfConvWithSameWeights) {
  Rng rng(4);
  const std::vector<DeconvSpec> specs{{8, 4, 1, 3, 2}, {4, 2, 1, 2, 3}, {3, 1, 1, 2, 2}, {5, 3, 0, 1, 2}};
  for (const auto& base : specs)
    for (int trial = 0; trial < 5; ++trial) {
      const std::size_t si = 3 + std::size_t(trial);
      const std::size_t so = base.output_size(si);
      auto w = oracle::random_tensor({base.in_channels, base.out_channels, base.kernel_size, base.kernel_size}, rng);
      Tensor<double> zero_big({base.in_channels}), zero_small({base.out_channels});
      auto x = oracle::random_tensor({2, base.out_channels, so, so}, rng);
      auto y = oracle::random_tensor({2, base.in_channels, si, si}, rng);
      const auto cx = conv2d(x, w, zero_big, {base.stride, base.padding});
      ASSERT_EQ(cx.dims(), y.dims());
      const auto dy = deconv2d(y, base, w, zero_small);
      ASSERT_EQ(dy.dims(), x.dims());
      EXPECT_NEAR(inner(cx, y), inner(x, dy), 1e-8 * std::max(1.0, std::abs(inner(cx, y))));
    }
}

TEST(Activations, ReluPointValues) {
  Tensor<double> x({2}, std::vector<double>{-1, 2});
  const auto y = relu(x);
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 2);
}

TEST(Activations, SoftmaxClosedForms) {
  Tensor<double> u({1, 5, 1, 1}, 0.3);
  for (double v : softmax(u, 1).values()) EXPECT_NEAR(v, 0.2, 1e-15);
  Tensor<double> x({2}, std::vector<double>{0, std::log(3.0)});
  const auto y = softmax(x, 0);
  EXPECT_NEAR(y[0], 0.25, 1e-15);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
}

TEST(Activations, SoftmaxRowsArePositiveAndSumToOne) {
  Rng rng(5);
  auto x = oracle::random_tensor({3, 6, 4, 5}, rng, -30, 30);
  const auto y = softmax(x, 1);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 20; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        const double v = y[(n * 6 + c) * 20 + i];
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(MaxPool, PicksWindowMaximum) {
  Tensor<double> x({1, 1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 8, 7});
  const auto r = maxpool2d(x, 2, 2);
  EXPECT_EQ(r.output[0], 5);
  EXPECT_EQ(r.output[1], 8);
}

TEST(RoiAlign, ConstantMapGivesConstant) {
  Tensor<double> f({1, 2, 9, 11}, 4.25);
  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto out = roi_align(f, RoI{oracle::random_box(rng, 40, 0.5)}, 7, 7, 0.25);
    for (double v : out.values()) EXPECT_NEAR(v, 4.25, 1e-12);
  }
}

// Each 2x2-pixel bin puts its quarter-point samples on pixel centres, so the
// bin value is the max of those four pixels.
TEST(RoiAlign, AlignedRegionReducesToPixelMaxima) {
  Rng rng(7);
  auto f = oracle::random_tensor({1, 3, 12, 12}, rng);
  const RoI roi{{2, 4, 10, 12}, 0};
  const auto out = roi_align(f, roi, 4, 4, 1.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double best = -1e300;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) best = std::max(best, f.at(0, c, 4 + 2 * i + dy, 2 + 2 * j + dx));
        EXPECT_DOUBLE_EQ(out.at(c, i, j), best);
      }
}

TEST(RoiAlign, MatchesBruteForceSampler) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t H = 3 + std::size_t(rng.uniform_int(0, 12)), W = 3 + std::size_t(rng.uniform_int(0, 12));
    auto f = oracle::random_tensor({2, 2, H, W}, rng);
    const double scale = trial % 2 ? 0.25 : 1.0;
    const Box b = oracle::random_box(rng, double(std::max(H, W)) / scale, 0.3);
    const std::size_t batch = std::size_t(trial % 2);
    const auto out = roi_align(f, RoI{b, batch}, 7, 5, scale);
    const auto ref = oracle::roi_align(f, b, batch, 7, 5, scale);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(RoiAlign, IgnoresContentOutsideBilinearSupport) {
  Rng rng(9);
  auto f = oracle::random_tensor({1, 1, 20, 20}, rng);
  const RoI roi{{4, 4, 9, 10}, 0};
  const auto before = roi_align(f, roi, 7, 7, 1.0);
  for (std::size_t y = 0; y < 20; ++y)
    for (std::size_t x = 0; x < 20; ++x)
      if (x < 3 || x > 9 || y < 3 || y > 10) f.at(0, 0, y, x) = 1e6;
  const auto after = roi_align(f, roi, 7, 7, 1.0);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(GradCheck, EveryOpPassesAtDoublePrecision) {
  for (const auto& o : gradcheck::run("all", 11, 20)) {
    EXPECT_TRUE(o.passed) << o.op << " max rel err " << o.max_rel_error;
    EXPECT_LT(o.max_rel_error, 1e-4) << o.op;
  }
  EXPECT_THROW(gradcheck::run("no_such_op", 1), ValidationError);
}
