#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/layers.hpp"
#include "affkit/rng.hpp"

namespace affkit {

enum class AnchorLabel : std::int8_t { negative = 0, positive = 1, ignore = -1 };

struct RpnTargetConfig {
  double pos_iou = 0.7;
  double neg_iou = 0.3;
  std::size_t batch_size = 256;
  double pos_fraction = 0.5;

  void validate() const {
    detail::require(0 <= neg_iou && neg_iou <= pos_iou && pos_iou <= 1,
                    "rpn targets: need 0 <= neg_iou <= pos_iou <= 1");
    detail::require(batch_size > 0, "rpn targets: batch size must be positive");
    detail::require(pos_fraction >= 0 && pos_fraction <= 1, "rpn targets: pos_fraction in [0,1]");
  }
};

struct RpnTargets {
  std::vector<AnchorLabel> labels;  // per anchor, after sampling
  std::vector<BoxOffset> offsets;   // per anchor; meaningful for positives only
  std::size_t num_positive = 0;
  std::size_t num_negative = 0;
};

/// Objectness labels: positive at IoU >= pos_iou or when the anchor is a GT's
/// best match, negative below neg_iou, otherwise ignored. Then subsampled to
/// batch_size with at most pos_fraction positives; extra anchors become ignored.
inline RpnTargets assign_rpn_targets(std::span<const Box> anchors, std::span<const Box> gt_boxes,
                                     const RpnTargetConfig& config, std::uint64_t rng_seed) {
  config.validate();
  const std::size_t A = anchors.size(), G = gt_boxes.size();
  RpnTargets out{std::vector<AnchorLabel>(A, AnchorLabel::ignore), std::vector<BoxOffset>(A), 0, 0};
  std::vector<double> best_iou(A, 0.0);
  std::vector<std::size_t> best_gt(A, 0);
  std::vector<double> gt_best(G, 0.0);
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t g = 0; g < G; ++g) {
      const double o = iou(anchors[a], gt_boxes[g]);
      if (o > best_iou[a]) {
        best_iou[a] = o;
        best_gt[a] = g;
      }
      gt_best[g] = std::max(gt_best[g], o);
    }
  }
  for (std::size_t a = 0; a < A; ++a) {
    if (best_iou[a] < config.neg_iou) out.labels[a] = AnchorLabel::negative;
    if (G > 0 && best_iou[a] >= config.pos_iou) out.labels[a] = AnchorLabel::positive;
  }
  for (std::size_t g = 0; g < G; ++g) {
    if (gt_best[g] <= 0) continue;
    for (std::size_t a = 0; a < A; ++a) {
      if (iou(anchors[a], gt_boxes[g]) == gt_best[g]) {
        out.labels[a] = AnchorLabel::positive;
        best_gt[a] = g;
      }
    }
  }

  std::vector<std::size_t> pos, neg;
  for (std::size_t a = 0; a < A; ++a) {
    if (out.labels[a] == AnchorLabel::positive) pos.push_back(a);
    else if (out.labels[a] == AnchorLabel::negative) neg.push_back(a);
  }
  Rng rng(rng_seed);
  const auto max_pos = static_cast<std::size_t>(static_cast<double>(config.batch_size) * config.pos_fraction);
  if (pos.size() > max_pos) {
    rng.shuffle(pos);
    for (std::size_t i = max_pos; i < pos.size(); ++i) out.labels[pos[i]] = AnchorLabel::ignore;
    pos.resize(max_pos);
  }
  const std::size_t max_neg = config.batch_size - pos.size();
  if (neg.size() > max_neg) {
    rng.shuffle(neg);
    for (std::size_t i = max_neg; i < neg.size(); ++i) out.labels[neg[i]] = AnchorLabel::ignore;
    neg.resize(max_neg);
  }
  for (auto a : pos) out.offsets[a] = encode_offsets(gt_boxes[best_gt[a]], anchors[a]);
  out.num_positive = pos.size();
  out.num_negative = neg.size();
  return out;
}

struct Proposal {
  Box box;
  double score = 0;
};

struct GroundTruthObject {
  Box box;
  std::size_t object_class = 1;  // 1..K
};

/// u = label; matched_gt is set exactly when label >= 1.
struct RoISample {
  RoI roi;
  std::size_t label = 0;
  std::optional<std::size_t> matched_gt;
  double max_iou = 0;
};

struct RoiSamplingConfig {
  std::size_t k_train = 2000;
  std::size_t batch_size = 128;
  double fg_iou = 0.5;
  double bg_iou = 0.5;
  std::size_t negatives_per_positive = 3;

  void validate() const {
    detail::require(k_train > 0, "roi sampling: k_train must be positive");
    detail::require(batch_size > 0, "roi sampling: batch size must be positive");
    detail::require(fg_iou > 0 && fg_iou <= 1, "roi sampling: fg_iou must lie in (0,1]");
    detail::require(bg_iou > 0 && bg_iou <= fg_iou, "roi sampling: bg_iou must lie in (0, fg_iou]");
    detail::require(negatives_per_positive >= 1, "roi sampling: negatives_per_positive >= 1");
  }
};

/// Indices of the top-k proposals by score, descending, ties to the lower index.
inline std::vector<std::size_t> select_inference_rois(std::span<const Proposal> proposals,
                                                      std::size_t k_infer = 1000) {
  std::vector<double> scores(proposals.size());
  for (std::size_t i = 0; i < proposals.size(); ++i) scores[i] = proposals[i].score;
  auto order = argsort_descending(scores);
  if (order.size() > k_infer) order.resize(k_infer);
  return order;
}

/// Keeps the top k_train proposals, labels each by its best-matching GT
/// (positive iff IoU >= fg_iou, negative iff IoU < bg_iou, otherwise
/// unused), and draws positives and negatives at
/// 1 : negatives_per_positive. Positives are capped at a quarter of the
/// batch for the default ratio. With no positives the sample is
/// all-negative, up to the batch's negative share.
inline std::vector<RoISample> sample_rois(std::span<const Proposal> proposals,
                                          std::span<const GroundTruthObject> gt,
                                          const RoiSamplingConfig& config,
                                          std::uint64_t rng_seed) {
  config.validate();
  const auto top = select_inference_rois(proposals, config.k_train);
  std::vector<RoISample> pos, neg;
  for (auto idx : top) {
    RoISample s;
    s.roi.box = proposals[idx].box;
    double best = 0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double o = iou(s.roi.box, gt[g].box);
      if (o > best) {
        best = o;
        best_g = g;
      }
    }
    s.max_iou = best;
    if (!gt.empty() && best >= config.fg_iou) {
      s.label = gt[best_g].object_class;
      s.matched_gt = best_g;
      pos.push_back(s);
    } else if (best < config.bg_iou) {
      neg.push_back(s);
    }
  }
  Rng rng(rng_seed);
  const std::size_t ratio = config.negatives_per_positive;
  const std::size_t pos_cap = config.batch_size / (ratio + 1);
  rng.shuffle(pos);
  if (pos.size() > pos_cap) pos.resize(pos_cap);
  const std::size_t neg_cap = pos.empty() ? config.batch_size - pos_cap : pos.size() * ratio;
  rng.shuffle(neg);
  if (neg.size() > neg_cap) neg.resize(neg_cap);
  std::vector<RoISample> out = std::move(pos);
  out.insert(out.end(), neg.begin(), neg.end());
  return out;
}

}  // namespace affkit
