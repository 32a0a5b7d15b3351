#include <gtest/gtest.h>

#include <filesystem>

#include "affkit/checkpoint.hpp"
#include "affkit/model.hpp"
#include "affkit/pipeline.hpp"

using namespace affkit;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.backbone_widths = {8, 8, 8, 8};
  c.rpn_width = 8;
  c.fc_width = 32;
  c.mask_head = {{4, 2, 1}};
  c.mask_width = 4;
  c.infer.k_infer = 50;
  c.train.roi_sampling.batch_size = 8;
  c.train.rpn_targets.batch_size = 32;
  return c;
}

TrainingExample small_example() {
  SceneSpec spec;
  spec.image_w = spec.image_h = 48;
  spec.max_objects = 1;
  spec.templates = {{"tool", TemplateKind::tool, 1, 1, 2, {10, 14}, {3, 4}, {5, 6}, {8, 10}}};
  const auto s = generate_scene(spec, 0);
  TrainingExample ex;
  ex.image = image_to_tensor(s.image);
  for (std::size_t k = 0; k < s.boxes.size(); ++k) {
    ex.objects.push_back({s.boxes[k], s.object_classes[k]});
    ex.masks.push_back(s.object_masks[k]);
  }
  return ex;
}

bool same_result(const InferenceResult& a, const InferenceResult& b) {
  if (a.detections.size() != b.detections.size() || !(a.merged == b.merged)) return false;
  for (std::size_t i = 0; i < a.detections.size(); ++i)
    if (!(a.detections[i].box == b.detections[i].box) || a.detections[i].score != b.detections[i].score ||
        !(a.detections[i].mask == b.detections[i].mask))
      return false;
  return true;
}

}  // namespace

TEST(MaskHead, DefaultChainIs7_30_122_244) {
  ModelConfig c;
  EXPECT_EQ(c.mask_size_chain(), (std::vector<std::size_t>{7, 30, 122, 244}));
  EXPECT_EQ(c.mask_output_size(), 244u);
  c.mask_head = {{4, 2, 1}};
  EXPECT_EQ(c.mask_output_size(), 14u);
}

TEST(MaskHead, RealizedLogitsMatchChain) {
  for (std::size_t size : {14, 28, 56, 112, 244}) {
    ModelConfig c = small_config();
    c.mask_head = ablation_mask_head(size);
    EXPECT_EQ(c.mask_output_size(), size);
    Model m(c, 1);
    const auto ex = small_example();
    const auto out = m.forward(ex.image, ForwardMode::infer);
    ASSERT_FALSE(out.heads.empty());
    EXPECT_EQ(out.heads[0].m.dims(), (Shape{5, size, size}));
  }
}

TEST(Model, ForwardIsDeterministic) {
  Model a(small_config(), 3), b(small_config(), 3);
  const auto ex = small_example();
  EXPECT_TRUE(same_result(a.infer(ex.image), b.infer(ex.image)));
  EXPECT_TRUE(same_result(a.infer(ex.image), a.infer(ex.image)));
}

TEST(Model, ZeroLearningRateLeavesParameters) {
  ModelConfig c = small_config();
  c.train.lr = 0;
  Model m(c, 2);
  std::vector<Tensor<float>> before;
  for (const auto& p : m.params()) before.push_back(p.value);
  m.train_step(small_example(), 5);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& now = m.params()[i].value;
    for (std::size_t k = 0; k < now.size(); ++k) ASSERT_EQ(now[k], before[i][k]) << m.params()[i].name;
  }
}

TEST(Model, TrainingTrajectoryIsReproducible) {
  const auto ex = small_example();
  Model a(small_config(), 4), b(small_config(), 4);
  for (int i = 0; i < 3; ++i) {
    const auto ra = a.train_step(ex, derive_seed(9, std::uint64_t(i)));
    const auto rb = b.train_step(ex, derive_seed(9, std::uint64_t(i)));
    EXPECT_EQ(ra.total, rb.total);
    EXPECT_EQ(ra.aff, rb.aff);
  }
}

TEST(Model, LearningRateSchedule) {
  TrainConfig t;
  EXPECT_EQ(t.lr, 0.001);
  EXPECT_NEAR(t.lr_at(t.decay_iteration()), 0.0001, 1e-15);
  EXPECT_EQ(t.lr_at(0), 0.001);
}

TEST(ScoreGate, FallbackAndGate) {
  auto det = [](double s) { return Detection{{0, 0, 1, 1}, 1, s, {}}; };
  const auto low = apply_score_gate({det(0.4), det(0.7), det(0.2)}, 0.9, 50);
  ASSERT_EQ(low.size(), 1u);
  EXPECT_EQ(low[0].score, 0.7);
  const auto high = apply_score_gate({det(0.95), det(0.92), det(0.3)}, 0.9, 50);
  ASSERT_EQ(high.size(), 2u);
  EXPECT_EQ(high[0].score, 0.95);
  EXPECT_TRUE(apply_score_gate({}, 0.9, 50).empty());
}

TEST(ScoreGate, UntrainedClassifierYieldsOneDetection) {
  Model m(small_config(), 1);
  auto* w = m.find_param("det.cls.weight");
  ASSERT_NE(w, nullptr);
  w->value.fill(0.0f);
  const auto r = m.infer(small_example().image);
  ASSERT_EQ(r.detections.size(), 1u);
  EXPECT_NEAR(r.detections[0].score, 1.0 / 3.0, 1e-6);
}

TEST(Model, ConfigValidation) {
  ModelConfig c = small_config();
  c.mask_head = {{1, 1, 5}};
  EXPECT_THROW(Model(c, 1), ValidationError);
  c = small_config();
  c.anchors.stride = 8;
  EXPECT_THROW(c.validate(), ValidationError);
}
