#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/layers.hpp"
#include "affkit/losses.hpp"
#include "affkit/maskops.hpp"
#include "affkit/proposals.hpp"
#include "affkit/rng.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

struct TrainConfig {
  double lr = 0.001;
  double lr_factor = 0.1;       // applied once at lr_step
  std::size_t lr_step = 0;      // 0: three quarters of `iterations`
  std::size_t iterations = 3000;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 0;         // 0 disables global gradient-norm clipping
  double mask_lr_mult = 1.0;    // learning-rate multiplier for mask-head parameters
  RpnTargetConfig rpn_targets;
  RoiSamplingConfig roi_sampling{.k_train = 2000, .batch_size = 16};
  std::size_t rpn_pre_nms_top_n = 1000;
  double rpn_nms_iou = 0.7;
  double rpn_min_size = 2;
  bool gt_as_proposals = true;
  LossWeights weights;
  double rpn_weight = 1.0;

  std::size_t decay_iteration() const { return lr_step > 0 ? lr_step : iterations * 3 / 4; }
  double lr_at(std::size_t iteration) const {
    return iteration < decay_iteration() ? lr : lr * lr_factor;
  }
};

struct InferConfig {
  std::size_t k_infer = 1000;
  std::size_t rpn_pre_nms_top_n = 1000;
  double rpn_nms_iou = 0.7;
  double nms_iou = 0.3;
  double score_gate = 0.9;
  std::size_t max_detections = 50;
  AffordancePriority priority{{1, 2, 3, 4}, false};
};

/// Toy-scale architecture: a four-block conv backbone (stride 4), an RPN,
/// a two-FC detection head and a conv/deconv affordance head on 7x7 RoIAlign features.
struct ModelConfig {
  std::size_t num_object_classes = 2;       // K
  std::size_t num_affordance_classes = 4;   // C
  std::vector<std::size_t> backbone_widths{32, 32, 32, 32};
  std::size_t rpn_width = 32;
  std::size_t fc_width = 256;
  std::size_t roi_size = 7;
  std::vector<DeconvSpec> mask_head{{8, 4, 1, 0, 0}, {8, 4, 1, 0, 0}, {4, 2, 1, 0, 0}};
  std::size_t mask_width = 8;
  std::size_t mask_conv_kernel = 3;
  double mask_alpha = 0.005;
  AnchorConfig anchors;
  TrainConfig train;
  InferConfig infer;

  static constexpr std::size_t kFeatureStride = 4;

  /// Deconv stages with channel counts filled in.
  std::vector<DeconvSpec> resolved_mask_head() const {
    std::vector<DeconvSpec> out = mask_head;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i].in_channels = mask_width;
      out[i].out_channels = i + 1 == out.size() ? num_affordance_classes + 1 : mask_width;
    }
    return out;
  }

  /// Spatial size after every stage, starting with roi_size.
  std::vector<std::size_t> mask_size_chain() const {
    std::vector<std::size_t> sizes{roi_size};
    for (const auto& s : resolved_mask_head()) sizes.push_back(s.output_size(sizes.back()));
    return sizes;
  }

  std::size_t mask_output_size() const { return mask_size_chain().back(); }

  void validate() const {
    detail::require(num_object_classes >= 1, "model: need at least one object class");
    detail::require(num_affordance_classes >= 1 && num_affordance_classes <= 254,
                    "model: affordance classes must lie in 1..254");
    detail::require(backbone_widths.size() == 4, "model: backbone needs exactly 4 widths");
    for (auto w : backbone_widths) detail::require(w >= 1, "model: backbone widths must be positive");
    detail::require(rpn_width >= 1 && fc_width >= 1 && mask_width >= 1, "model: widths must be positive");
    detail::require(roi_size >= 1, "model: roi size must be positive");
    detail::require(!mask_head.empty(), "model: mask head needs at least one stage");
    detail::require(mask_conv_kernel % 2 == 1, "model: mask conv kernel must be odd");
    detail::require(mask_alpha > 0 && mask_alpha < 0.5, "model: mask alpha must lie in (0, 0.5)");
    detail::require(anchors.stride == kFeatureStride, "model: anchor stride must equal the backbone stride (4)");
    anchors.validate();
    mask_size_chain();
    detail::require(infer.score_gate > 0 && infer.score_gate < 1, "model: score gate must lie in (0,1)");
    detail::require(infer.k_infer >= 1, "model: k_infer must be positive");
    detail::require(train.lr >= 0 && train.momentum >= 0 && train.weight_decay >= 0 && train.mask_lr_mult >= 0,
                    "model: learning rate, momentum and weight decay must be non-negative");
    train.rpn_targets.validate();
    train.roi_sampling.validate();
    infer.priority.validate();
  }
};

struct Param {
  std::string name;
  Tensor<float> value;
  Tensor<float> grad;
  Tensor<float> velocity;
};

/// Groundtruth for one training image. masks[k] is object k's full-image label mask.
struct TrainingExample {
  Tensor<float> image;  // (1, 3, H, W)
  std::vector<GroundTruthObject> objects;
  std::vector<LabelMask> masks;
};

struct LossReport {
  double total = 0, cls = 0, loc = 0, aff = 0, rpn = 0, lr = 0;
  std::size_t rois = 0, positives = 0;
};

struct Detection {
  Box box;
  std::size_t object_class = 0;
  double score = 0;
  LabelMask mask;  // box-sized
};

struct InferenceResult {
  std::vector<Detection> detections;
  LabelMask merged;
};

enum class ForwardMode { train, infer };

struct ForwardOutput {
  std::vector<Proposal> proposals;
  std::vector<RoI> rois;
  std::vector<HeadPrediction<float>> heads;
};

/// Detections scoring above `gate`, best first; when none pass, the single
/// best-scoring candidate.
inline std::vector<Detection> apply_score_gate(std::vector<Detection> candidates, double gate,
                                               std::size_t max_detections) {
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> out;
  for (auto& d : candidates)
    if (d.score > gate) out.push_back(d);
  if (out.empty() && !candidates.empty()) out.push_back(candidates.front());
  if (out.size() > max_detections) out.resize(max_detections);
  return out;
}

class Model {
 public:
  explicit Model(ModelConfig config, std::uint64_t init_seed = 1) : config_(std::move(config)) {
    config_.validate();
    build(init_seed);
  }

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::size_t iteration() const { return iteration_; }
  void set_iteration(std::size_t it) { iteration_ = it; }

  Param* find_param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  /// Backbone, RPN and heads on the top-k proposals (k_train or k_infer by
  /// mode). Mask probabilities are computed when `with_masks` is set.
  ForwardOutput forward(const Tensor<float>& image, ForwardMode mode, bool with_masks = true) const {
    check_image(image);
    const Tensor<float> features = backbone_forward(image, nullptr);
    RpnOutput rpn = rpn_forward(features, nullptr);
    const bool train = mode == ForwardMode::train;
    ForwardOutput out;
    out.proposals = make_proposals(rpn, image.dim(3), image.dim(2),
                                   train ? config_.train.rpn_pre_nms_top_n : config_.infer.rpn_pre_nms_top_n,
                                   train ? config_.train.rpn_nms_iou : config_.infer.rpn_nms_iou);
    const auto top = select_inference_rois(out.proposals,
                                           train ? config_.train.roi_sampling.k_train : config_.infer.k_infer);
    for (auto i : top) out.rois.push_back({out.proposals[i].box, 0});
    if (out.rois.empty()) return out;
    HeadOutput head = detection_head_forward(features, out.rois, nullptr);
    Tensor<float> masks;
    if (with_masks) masks = softmax(mask_head_forward(head.roi_features, nullptr), 1);
    const std::size_t K1 = config_.num_object_classes + 1;
    const std::size_t C1 = config_.num_affordance_classes + 1, S = config_.mask_output_size();
    for (std::size_t r = 0; r < out.rois.size(); ++r) {
      HeadPrediction<float> hp;
      hp.p.assign(head.probs.data() + r * K1, head.probs.data() + (r + 1) * K1);
      for (std::size_t k = 0; k < K1; ++k) hp.t.push_back(offset_at(head.bbox, r, k));
      if (with_masks) {
        hp.m = Tensor<float>({C1, S, S});
        std::copy_n(masks.data() + r * C1 * S * S, C1 * S * S, hp.m.data());
      }
      out.heads.push_back(std::move(hp));
    }
    return out;
  }

  /// Top-k proposals through the detection head, per-class NMS, score gate
  /// (falling back to the single best box), then masks for the survivors,
  /// projected to box size and merged by affordance priority.
  InferenceResult infer(const Tensor<float>& image) const {
    check_image(image);
    const std::size_t W = image.dim(3), H = image.dim(2);
    const Tensor<float> features = backbone_forward(image, nullptr);
    RpnOutput rpn = rpn_forward(features, nullptr);
    const auto proposals = make_proposals(rpn, W, H, config_.infer.rpn_pre_nms_top_n, config_.infer.rpn_nms_iou);
    InferenceResult result;
    result.merged = LabelMask(W, H);
    const auto top = select_inference_rois(proposals, config_.infer.k_infer);
    if (top.empty()) return result;
    std::vector<RoI> rois;
    for (auto i : top) rois.push_back({proposals[i].box, 0});
    const HeadOutput head = detection_head_forward(features, rois, nullptr);
    const std::size_t K1 = config_.num_object_classes + 1;

    std::vector<Detection> candidates;
    for (std::size_t c = 1; c < K1; ++c) {
      std::vector<Box> boxes;
      std::vector<double> scores;
      for (std::size_t r = 0; r < rois.size(); ++r) {
        Box b = clip_box(decode_offsets(clamp_offset(offset_at(head.bbox, r, c)), rois[r].box), double(W), double(H));
        boxes.push_back(b);
        scores.push_back(head.probs[r * K1 + c]);
      }
      for (auto i : nms(boxes, scores, config_.infer.nms_iou)) {
        if (!(boxes[i].width() > 0 && boxes[i].height() > 0)) continue;
        candidates.push_back({boxes[i], c, scores[i], {}});
      }
    }
    result.detections = apply_score_gate(std::move(candidates), config_.infer.score_gate,
                                         config_.infer.max_detections);
    if (result.detections.empty()) return result;

    std::vector<RoI> det_rois;
    for (const auto& d : result.detections) det_rois.push_back({d.box, 0});
    const auto aligned = roi_align(features, std::span<const RoI>(det_rois), config_.roi_size,
                                   config_.roi_size, 1.0 / double(ModelConfig::kFeatureStride));
    const Tensor<float> probs = softmax(mask_head_forward(aligned.output, nullptr), 1);
    const std::size_t C1 = config_.num_affordance_classes + 1, S = config_.mask_output_size();
    MaskResizeSpec spec{S, S, config_.mask_alpha};
    std::vector<PlacedMask> placed;
    for (std::size_t i = 0; i < result.detections.size(); ++i) {
      Tensor<float> m({C1, S, S});
      std::copy_n(probs.data() + i * C1 * S * S, C1 * S * S, m.data());
      result.detections[i].mask = project_mask_to_box(m, result.detections[i].box, spec);
      placed.push_back({result.detections[i].box, result.detections[i].mask});
    }
    result.merged = merge_overlaps_by_priority(placed, config_.infer.priority, W, H);
    return result;
  }

  /// One forward/backward/SGD update. The learning rate follows the step schedule.
  LossReport train_step(const TrainingExample& ex, std::uint64_t rng_seed) {
    check_image(ex.image);
    if (ex.masks.size() != ex.objects.size())
      throw ValidationError("train_step: need one mask per groundtruth object");
    const std::size_t W = ex.image.dim(3), H = ex.image.dim(2);
    const TrainConfig& tc = config_.train;
    for (auto& p : params_) p.grad.fill(0.0f);

    BackboneCache bcache;
    const Tensor<float> features = backbone_forward(ex.image, &bcache);
    RpnCache rcache;
    RpnOutput rpn = rpn_forward(features, &rcache);
    LossReport report;

    // RPN loss
    std::vector<Box> gt_boxes;
    for (const auto& o : ex.objects) gt_boxes.push_back(o.box);
    const auto& anchors = anchors_for(features.dim(2), features.dim(3));
    const RpnTargets targets = assign_rpn_targets(anchors, gt_boxes, tc.rpn_targets, derive_seed(rng_seed, 1));
    Tensor<float> d_rpn_cls(rpn.cls.dims()), d_rpn_bbox(rpn.bbox.dims());
    {
      const std::size_t A = config_.anchors.per_cell(), Hf = features.dim(2), Wf = features.dim(3);
      const std::size_t plane = Hf * Wf;
      const double sampled = double(std::max<std::size_t>(1, targets.num_positive + targets.num_negative));
      double cls_sum = 0, loc_sum = 0;
      for (std::size_t i = 0; i < anchors.size(); ++i) {
        if (targets.labels[i] == AnchorLabel::ignore) continue;
        const std::size_t a = i % A, cell = i / A;
        const std::size_t k0 = (2 * a) * plane + cell, k1 = (2 * a + 1) * plane + cell;
        const double l0 = rpn.cls[k0], l1 = rpn.cls[k1];
        const double mx = std::max(l0, l1);
        const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
        const double p1 = e1 / (e0 + e1);
        const bool pos = targets.labels[i] == AnchorLabel::positive;
        cls_sum -= std::log(std::max(pos ? p1 : 1 - p1, kProbabilityFloor));
        const double g = tc.rpn_weight / sampled;
        d_rpn_cls[k0] = static_cast<float>(g * ((1 - p1) - (pos ? 0.0 : 1.0)));
        d_rpn_cls[k1] = static_cast<float>(g * (p1 - (pos ? 1.0 : 0.0)));
        if (pos) {
          const auto tgt = offset_components(targets.offsets[i]);
          for (std::size_t k = 0; k < 4; ++k) {
            const std::size_t idx = (4 * a + k) * plane + cell;
            const double diff = rpn.bbox[idx] - tgt[k];
            loc_sum += smooth_l1(diff);
            d_rpn_bbox[idx] = static_cast<float>(g * smooth_l1_grad(diff));
          }
        }
      }
      report.rpn = (cls_sum + loc_sum) / sampled;
    }

    // Head sampling
    auto proposals = make_proposals(rpn, W, H, tc.rpn_pre_nms_top_n, tc.rpn_nms_iou);
    if (proposals.size() > tc.roi_sampling.k_train) proposals.resize(tc.roi_sampling.k_train);
    if (tc.gt_as_proposals)
      for (const auto& b : gt_boxes) proposals.push_back({b, 1.0});
    auto samples = sample_rois(proposals, ex.objects, tc.roi_sampling, derive_seed(rng_seed, 2));
    Tensor<float> d_features(features.dims());
    if (!samples.empty()) {
      std::vector<RoI> rois;
      for (const auto& s : samples) rois.push_back(s.roi);
      HeadCache hcache;
      HeadOutput head = detection_head_forward(features, rois, &hcache);
      const std::size_t R = rois.size(), K1 = config_.num_object_classes + 1;
      const double inv_r = 1.0 / double(R);
      Tensor<float> d_cls({R, K1}), d_bbox(head.bbox.dims());
      double cls_sum = 0, loc_sum = 0, aff_sum = 0;
      std::vector<std::size_t> positives;
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t u = samples[r].label;
        std::span<const float> p(head.probs.data() + r * K1, K1);
        cls_sum += classification_loss(p, u);
        for (std::size_t k = 0; k < K1; ++k)
          d_cls[r * K1 + k] = static_cast<float>(tc.weights.cls * inv_r * (p[k] - (k == u ? 1.0 : 0.0)));
        if (u >= 1) {
          positives.push_back(r);
          const BoxOffset v = encode_offsets(ex.objects[*samples[r].matched_gt].box, rois[r].box);
          const BoxOffset t = offset_at(head.bbox, r, u);
          loc_sum += box_regression_loss(t, v);
          const BoxOffset g = box_regression_loss_grad(t, v);
          const double s = tc.weights.loc * inv_r;
          d_bbox[r * 4 * K1 + 4 * u + 0] = static_cast<float>(s * g.tx);
          d_bbox[r * 4 * K1 + 4 * u + 1] = static_cast<float>(s * g.ty);
          d_bbox[r * 4 * K1 + 4 * u + 2] = static_cast<float>(s * g.tw);
          d_bbox[r * 4 * K1 + 4 * u + 3] = static_cast<float>(s * g.th);
        }
      }
      Tensor<float> d_roi_features = detection_head_backward(hcache, d_cls, d_bbox);

      if (!positives.empty()) {
        const std::size_t P = positives.size(), Cf = features.dim(1), Rs = config_.roi_size;
        const std::size_t per_roi = Cf * Rs * Rs;
        Tensor<float> mask_in({P, Cf, Rs, Rs});
        for (std::size_t i = 0; i < P; ++i)
          std::copy_n(head.roi_features.data() + positives[i] * per_roi, per_roi, mask_in.data() + i * per_roi);
        MaskCache mcache;
        const Tensor<float> logits = mask_head_forward(mask_in, &mcache);
        const Tensor<float> probs = softmax(logits, 1);
        const std::size_t C1 = config_.num_affordance_classes + 1, S = config_.mask_output_size();
        const std::size_t plane = S * S;
        const MaskResizeSpec spec{S, S, config_.mask_alpha};
        const double inv_p = 1.0 / double(P);
        Tensor<float> d_logits(logits.dims());
        for (std::size_t i = 0; i < P; ++i) {
          const RoISample& s = samples[positives[i]];
          const LabelMask target = build_target_mask(s.roi.box, ex.masks[*s.matched_gt], spec);
          const auto labels = target.labels();
          const float* pr = probs.data() + i * C1 * plane;
          double l = 0;
          for (std::size_t px = 0; px < plane; ++px)
            l -= std::log(std::max<double>(pr[labels[px] * plane + px], kProbabilityFloor));
          aff_sum += l / double(plane) * inv_p;
          softmax_xent_logit_grad<float>(std::span<const float>(pr, C1 * plane), labels, C1,
                                         static_cast<float>(tc.weights.aff * inv_p / double(plane)),
                                         std::span<float>(d_logits.data() + i * C1 * plane, C1 * plane));
        }
        const Tensor<float> d_mask_in = mask_head_backward(mcache, d_logits);
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t j = 0; j < per_roi; ++j)
            d_roi_features[positives[i] * per_roi + j] += d_mask_in[i * per_roi + j];
      }
      d_features = roi_align_backward(hcache.aligned, d_roi_features);
      report.cls = cls_sum * inv_r;
      report.loc = loc_sum * inv_r;
      report.aff = aff_sum;
      report.rois = R;
      report.positives = positives.size();
    }
    report.total = tc.weights.cls * report.cls + tc.weights.loc * report.loc +
                   tc.weights.aff * report.aff + tc.rpn_weight * report.rpn;
    for (auto [name, v] : {std::pair{"total", report.total}, {"cls", report.cls}, {"loc", report.loc},
                           {"aff", report.aff}, {"rpn", report.rpn}})
      if (!std::isfinite(v))
        throw NumericError(std::string("train_step: non-finite ") + name + " loss at iteration " +
                           std::to_string(iteration_));

    const Tensor<float> d_rpn_features = rpn_backward(rcache, d_rpn_cls, d_rpn_bbox);
    for (std::size_t i = 0; i < d_features.size(); ++i) d_features[i] += d_rpn_features[i];
    backbone_backward(bcache, d_features);

    if (tc.clip_norm > 0) {
      double sq = 0;
      for (const auto& p : params_)
        for (float g : p.grad.values()) sq += double(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > tc.clip_norm) {
        const auto s = static_cast<float>(tc.clip_norm / norm);
        for (auto& p : params_)
          for (float& g : p.grad.values()) g *= s;
      }
    }
    report.lr = tc.lr_at(iteration_);
    const SgdOptions opt{report.lr, tc.momentum, tc.weight_decay};
    const SgdOptions mask_opt{report.lr * tc.mask_lr_mult, tc.momentum, tc.weight_decay};
    for (std::size_t i = 0; i < params_.size(); ++i)
      sgd_momentum_step(params_[i].value, params_[i].grad, params_[i].velocity,
                        i >= first_mask_param_ ? mask_opt : opt);
    ++iteration_;
    return report;
  }

 private:
  struct LayerRef {
    std::size_t weight = 0, bias = 0;
  };

  struct BackboneCache {
    std::vector<Tensor<float>> inputs, outputs;
    std::vector<std::optional<MaxPoolResult<float>>> pools;
  };
  struct RpnOutput {
    Tensor<float> cls, bbox;
  };
  struct RpnCache {
    Tensor<float> features, hidden;
  };
  struct HeadOutput {
    Tensor<float> roi_features;  // (R, C, s, s)
    Tensor<float> probs;         // (R, K+1)
    Tensor<float> bbox;          // (R, 4(K+1))
  };
  struct HeadCache {
    RoiAlignResult<float> aligned;
    Tensor<float> h6, h7;
  };
  struct MaskCache {
    std::vector<Tensor<float>> conv_in, conv_out, deconv_in;
  };

  static bool pooled_after(std::size_t block) { return block < 2; }

  void check_image(const Tensor<float>& image) const {
    if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
      throw ValidationError("model: image must be a (1, 3, H, W) tensor");
    if (image.dim(2) < ModelConfig::kFeatureStride || image.dim(3) < ModelConfig::kFeatureStride)
      throw ValidationError("model: image smaller than the backbone stride");
  }

  std::size_t add_param(const std::string& name, Shape dims, double stddev, Rng& rng) {
    Param p{name, Tensor<float>(dims), Tensor<float>(dims), Tensor<float>(dims)};
    if (stddev > 0)
      for (auto& v : p.value.values()) v = static_cast<float>(rng.normal(0.0, stddev));
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  LayerRef add_conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, double stddev,
                    Rng& rng) {
    LayerRef ref;
    ref.weight = add_param(name + ".weight", {cout, cin, k, k}, stddev, rng);
    ref.bias = add_param(name + ".bias", {cout}, 0, rng);
    return ref;
  }

  void build(std::uint64_t seed) {
    Rng rng(seed);
    std::size_t cin = 3;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t w = config_.backbone_widths[i];
      backbone_.push_back(add_conv("backbone.conv" + std::to_string(i + 1), w, cin, 3,
                                   std::sqrt(2.0 / double(cin * 9)), rng));
      cin = w;
    }
    const std::size_t feat = cin, A = config_.anchors.per_cell();
    rpn_conv_ = add_conv("rpn.conv", config_.rpn_width, feat, 3, std::sqrt(2.0 / double(feat * 9)), rng);
    rpn_cls_ = add_conv("rpn.cls", 2 * A, config_.rpn_width, 1, 0.01, rng);
    rpn_bbox_ = add_conv("rpn.bbox", 4 * A, config_.rpn_width, 1, 0.01, rng);

    const std::size_t roi_feat = feat * config_.roi_size * config_.roi_size, F = config_.fc_width;
    const std::size_t K1 = config_.num_object_classes + 1;
    auto add_fc = [&](const std::string& name, std::size_t out, std::size_t in, double stddev) {
      LayerRef ref;
      ref.weight = add_param(name + ".weight", {out, in}, stddev, rng);
      ref.bias = add_param(name + ".bias", {out}, 0, rng);
      return ref;
    };
    fc6_ = add_fc("det.fc6", F, roi_feat, std::sqrt(2.0 / double(roi_feat)));
    fc7_ = add_fc("det.fc7", F, F, std::sqrt(2.0 / double(F)));
    cls_ = add_fc("det.cls", K1, F, 0.01);
    bbox_ = add_fc("det.bbox", 4 * K1, F, 0.001);

    const auto stages = config_.resolved_mask_head();
    first_mask_param_ = params_.size();
    std::size_t mcin = feat;
    const std::size_t mk = config_.mask_conv_kernel;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      mask_conv_.push_back(add_conv("mask.conv" + std::to_string(i + 1), config_.mask_width, mcin, mk,
                                    std::sqrt(2.0 / double(mcin * mk * mk)), rng));
      const double taps = double(s.in_channels) * double(s.kernel_size * s.kernel_size) / double(s.stride * s.stride);
      const bool last = i + 1 == stages.size();
      LayerRef ref;
      ref.weight = add_param("mask.deconv" + std::to_string(i + 1) + ".weight",
                             {s.in_channels, s.out_channels, s.kernel_size, s.kernel_size},
                             std::sqrt((last ? 1.0 : 2.0) / taps), rng);
      ref.bias = add_param("mask.deconv" + std::to_string(i + 1) + ".bias", {s.out_channels}, 0, rng);
      if (!last) init_bilinear(params_[ref.weight].value, s.kernel_size, s.stride);
      mask_deconv_.push_back(ref);
      mcin = config_.mask_width;
    }
  }

  /// Channel-diagonal bilinear upsampling kernel added on top of the random init.
  static void init_bilinear(Tensor<float>& weight, std::size_t k, std::size_t stride) {
    const double factor = double(std::min(k, 2 * stride)) / 2.0;
    const double center = (double(k) - 1.0) / 2.0;
    const std::size_t channels = std::min(weight.dim(0), weight.dim(1));
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double wi = std::max(0.0, 1.0 - std::abs(double(i) - center) / factor);
          const double wj = std::max(0.0, 1.0 - std::abs(double(j) - center) / factor);
          weight.at(c, c, i, j) += static_cast<float>(wi * wj);
        }
  }

  const Tensor<float>& w(const LayerRef& r) const { return params_[r.weight].value; }
  const Tensor<float>& b(const LayerRef& r) const { return params_[r.bias].value; }

  void accumulate(std::size_t idx, const Tensor<float>& g) {
    auto dst = params_[idx].grad.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  }
  void accumulate(const LayerRef& r, const Tensor<float>& dw, const Tensor<float>& db) {
    accumulate(r.weight, dw);
    accumulate(r.bias, db);
  }

  Tensor<float> backbone_forward(const Tensor<float>& image, BackboneCache* cache) const {
    Tensor<float> x = image;
    for (std::size_t i = 0; i < backbone_.size(); ++i) {
      Tensor<float> y = conv2d(x, w(backbone_[i]), b(backbone_[i]), {1, 1});
      relu_inplace(y);
      if (cache) cache->inputs.push_back(std::move(x));
      if (pooled_after(i)) {
        auto pooled = maxpool2d(y, 2, 2);
        x = pooled.output;
        if (cache) {
          cache->outputs.push_back(std::move(y));
          cache->pools.push_back(std::move(pooled));
        }
      } else {
        if (cache) {
          cache->outputs.push_back(y);
          cache->pools.push_back(std::nullopt);
        }
        x = std::move(y);
      }
    }
    return x;
  }

  void backbone_backward(BackboneCache& cache, Tensor<float> grad) {
    for (std::size_t i = backbone_.size(); i-- > 0;) {
      if (cache.pools[i]) grad = maxpool2d_backward(*cache.pools[i], grad);
      grad = relu_backward(cache.outputs[i], grad);
      auto g = conv2d_backward(cache.inputs[i], w(backbone_[i]), grad, {1, 1});
      accumulate(backbone_[i], g.weights, g.bias);
      if (i > 0) grad = std::move(g.input);
    }
  }

  RpnOutput rpn_forward(const Tensor<float>& features, RpnCache* cache) const {
    Tensor<float> hidden = conv2d(features, w(rpn_conv_), b(rpn_conv_), {1, 1});
    relu_inplace(hidden);
    RpnOutput out{conv2d(hidden, w(rpn_cls_), b(rpn_cls_)), conv2d(hidden, w(rpn_bbox_), b(rpn_bbox_))};
    if (cache) {
      cache->features = features;
      cache->hidden = std::move(hidden);
    }
    return out;
  }

  Tensor<float> rpn_backward(RpnCache& cache, const Tensor<float>& d_cls, const Tensor<float>& d_bbox) {
    auto gc = conv2d_backward(cache.hidden, w(rpn_cls_), d_cls);
    auto gb = conv2d_backward(cache.hidden, w(rpn_bbox_), d_bbox);
    accumulate(rpn_cls_, gc.weights, gc.bias);
    accumulate(rpn_bbox_, gb.weights, gb.bias);
    Tensor<float> dh = gc.input;
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += gb.input[i];
    dh = relu_backward(cache.hidden, dh);
    auto g = conv2d_backward(cache.features, w(rpn_conv_), dh, {1, 1});
    accumulate(rpn_conv_, g.weights, g.bias);
    return g.input;
  }

  static BoxOffset clamp_offset(BoxOffset t) {
    const double limit = std::log(1000.0 / 16.0);
    t.tw = std::min(t.tw, limit);
    t.th = std::min(t.th, limit);
    return t;
  }

  std::vector<Box> anchors_for(std::size_t fh, std::size_t fw) const {
    return generate_anchors(config_.anchors, fh, fw);
  }

  std::vector<Proposal> make_proposals(const RpnOutput& rpn, std::size_t W, std::size_t H, std::size_t pre_nms,
                                       double nms_iou) const {
    const std::size_t A = config_.anchors.per_cell(), Hf = rpn.cls.dim(2), Wf = rpn.cls.dim(3);
    const std::size_t plane = Hf * Wf;
    const auto& anchors = anchors_for(Hf, Wf);
    std::vector<double> scores(anchors.size());
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const std::size_t a = i % A, cell = i / A;
      const double d = double(rpn.cls[(2 * a + 1) * plane + cell]) - double(rpn.cls[(2 * a) * plane + cell]);
      scores[i] = 1.0 / (1.0 + std::exp(-d));
    }
    auto order = argsort_descending(scores);
    std::vector<Box> boxes;
    std::vector<double> kept_scores;
    for (auto i : order) {
      if (boxes.size() >= pre_nms) break;
      const std::size_t a = i % A, cell = i / A;
      BoxOffset t{rpn.bbox[(4 * a + 0) * plane + cell], rpn.bbox[(4 * a + 1) * plane + cell],
                  rpn.bbox[(4 * a + 2) * plane + cell], rpn.bbox[(4 * a + 3) * plane + cell]};
      const Box b = clip_box(decode_offsets(clamp_offset(t), anchors[i]), double(W), double(H));
      if (b.width() < config_.train.rpn_min_size || b.height() < config_.train.rpn_min_size) continue;
      boxes.push_back(b);
      kept_scores.push_back(scores[i]);
    }
    std::vector<Proposal> out;
    for (auto i : nms(boxes, kept_scores, nms_iou)) out.push_back({boxes[i], kept_scores[i]});
    return out;
  }

  static BoxOffset offset_at(const Tensor<float>& bbox, std::size_t r, std::size_t k) {
    const std::size_t stride = bbox.dim(1);
    const float* p = bbox.data() + r * stride + 4 * k;
    return {p[0], p[1], p[2], p[3]};
  }

  HeadOutput detection_head_forward(const Tensor<float>& features, const std::vector<RoI>& rois,
                                    HeadCache* cache) const {
    auto aligned = roi_align(features, std::span<const RoI>(rois), config_.roi_size, config_.roi_size,
                             1.0 / double(ModelConfig::kFeatureStride));
    Tensor<float> h6 = fully_connected(aligned.output, w(fc6_), b(fc6_));
    relu_inplace(h6);
    Tensor<float> h7 = fully_connected(h6, w(fc7_), b(fc7_));
    relu_inplace(h7);
    HeadOutput out{aligned.output, softmax(fully_connected(h7, w(cls_), b(cls_)), 1),
                   fully_connected(h7, w(bbox_), b(bbox_))};
    if (cache) {
      cache->aligned = std::move(aligned);
      cache->h6 = std::move(h6);
      cache->h7 = std::move(h7);
    }
    return out;
  }

  /// Takes logit gradients; returns the gradient w.r.t. the pooled RoI features.
  Tensor<float> detection_head_backward(HeadCache& cache, const Tensor<float>& d_cls_logits,
                                        const Tensor<float>& d_bbox) {
    auto gc = fully_connected_backward(cache.h7, w(cls_), d_cls_logits);
    auto gb = fully_connected_backward(cache.h7, w(bbox_), d_bbox);
    accumulate(cls_, gc.weights, gc.bias);
    accumulate(bbox_, gb.weights, gb.bias);
    Tensor<float> d7 = gc.input;
    for (std::size_t i = 0; i < d7.size(); ++i) d7[i] += gb.input[i];
    d7 = relu_backward(cache.h7, d7);
    auto g7 = fully_connected_backward(cache.h6, w(fc7_), d7);
    accumulate(fc7_, g7.weights, g7.bias);
    Tensor<float> d6 = relu_backward(cache.h6, g7.input);
    auto g6 = fully_connected_backward(cache.aligned.output, w(fc6_), d6);
    accumulate(fc6_, g6.weights, g6.bias);
    return g6.input.reshaped(cache.aligned.output.dims());
  }

  Tensor<float> mask_head_forward(const Tensor<float>& roi_features, MaskCache* cache) const {
    const auto stages = config_.resolved_mask_head();
    const std::size_t pad = config_.mask_conv_kernel / 2;
    Tensor<float> x = roi_features;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      Tensor<float> h = conv2d(x, w(mask_conv_[i]), b(mask_conv_[i]), {1, pad});
      relu_inplace(h);
      Tensor<float> y = deconv2d(h, stages[i], w(mask_deconv_[i]), b(mask_deconv_[i]));
      if (cache) {
        cache->conv_in.push_back(std::move(x));
        cache->conv_out.push_back(std::move(h));
      }
      x = std::move(y);
    }
    return x;
  }

  Tensor<float> mask_head_backward(MaskCache& cache, Tensor<float> grad) {
    const auto stages = config_.resolved_mask_head();
    const std::size_t pad = config_.mask_conv_kernel / 2;
    for (std::size_t i = stages.size(); i-- > 0;) {
      auto gd = deconv2d_backward(cache.conv_out[i], stages[i], w(mask_deconv_[i]), grad);
      accumulate(mask_deconv_[i], gd.weights, gd.bias);
      Tensor<float> dh = relu_backward(cache.conv_out[i], gd.input);
      auto gc = conv2d_backward(cache.conv_in[i], w(mask_conv_[i]), dh, {1, pad});
      accumulate(mask_conv_[i], gc.weights, gc.bias);
      grad = std::move(gc.input);
    }
    return grad;
  }

  ModelConfig config_;
  std::vector<Param> params_;
  std::vector<LayerRef> backbone_;
  LayerRef rpn_conv_, rpn_cls_, rpn_bbox_;
  LayerRef fc6_, fc7_, cls_, bbox_;
  std::vector<LayerRef> mask_conv_, mask_deconv_;
  std::size_t first_mask_param_ = 0;
  std::size_t iteration_ = 0;
};

}  // namespace affkit
