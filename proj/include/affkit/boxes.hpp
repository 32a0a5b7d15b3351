#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "affkit/error.hpp"

namespace affkit {

/// Axis-aligned rectangle in continuous pixel coordinates, origin at the
/// image top-left. Area uses max(0, x2 - x1) * max(0, y2 - y1); there is no
/// +1 pixel convention.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return std::max(0.0, x2 - x1); }
  double height() const { return std::max(0.0, y2 - y1); }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  friend bool operator==(const Box&, const Box&) = default;
};

struct BoxOffset {
  double tx = 0, ty = 0, tw = 0, th = 0;

  friend bool operator==(const BoxOffset&, const BoxOffset&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Center/size offsets of `box` relative to `anchor`.
inline BoxOffset encode_offsets(const Box& box, const Box& anchor) {
  const double wa = anchor.x2 - anchor.x1, ha = anchor.y2 - anchor.y1;
  const double w = box.x2 - box.x1, h = box.y2 - box.y1;
  if (!(wa > 0 && ha > 0)) throw ValidationError("encode_offsets: anchor must have positive size");
  if (!(w > 0 && h > 0)) throw ValidationError("encode_offsets: box must have positive size");
  return {(box.center_x() - anchor.center_x()) / wa, (box.center_y() - anchor.center_y()) / ha,
          std::log(w / wa), std::log(h / ha)};
}

inline Box decode_offsets(const BoxOffset& t, const Box& anchor) {
  const double wa = anchor.x2 - anchor.x1, ha = anchor.y2 - anchor.y1;
  if (!(wa > 0 && ha > 0)) throw ValidationError("decode_offsets: anchor must have positive size");
  const double cx = anchor.center_x() + t.tx * wa;
  const double cy = anchor.center_y() + t.ty * ha;
  const double w = wa * std::exp(t.tw);
  const double h = ha * std::exp(t.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

inline Box clip_box(const Box& b, double image_w, double image_h) {
  auto clamp = [](double v, double hi) { return std::clamp(v, 0.0, hi); };
  return {clamp(b.x1, image_w), clamp(b.y1, image_h), clamp(b.x2, image_w), clamp(b.y2, image_h)};
}

struct AnchorConfig {
  std::vector<double> scales{16, 24, 32, 48, 64};
  std::vector<double> ratios{0.5, 1.0, 2.0};  // height / width
  double stride = 4;

  std::size_t per_cell() const { return scales.size() * ratios.size(); }

  void validate() const {
    detail::require(!scales.empty() && !ratios.empty(), "anchors: scales and ratios must be non-empty");
    for (double s : scales) detail::require(s > 0, "anchors: scales must be positive");
    for (double r : ratios) detail::require(r > 0, "anchors: ratios must be positive");
    detail::require(stride > 0, "anchors: stride must be positive");
  }
};

/// Anchors in (row, column, ratio, scale) order, centred on each feature cell.
/// For scale s and ratio r: w = s / sqrt(r), h = s * sqrt(r), so w * h = s^2.
inline std::vector<Box> generate_anchors(const AnchorConfig& config, std::size_t feature_h,
                                         std::size_t feature_w) {
  config.validate();
  std::vector<Box> out;
  out.reserve(feature_h * feature_w * config.per_cell());
  for (std::size_t y = 0; y < feature_h; ++y) {
    for (std::size_t x = 0; x < feature_w; ++x) {
      const double cx = (static_cast<double>(x) + 0.5) * config.stride;
      const double cy = (static_cast<double>(y) + 0.5) * config.stride;
      for (double r : config.ratios) {
        for (double s : config.scales) {
          const double w = s / std::sqrt(r);
          const double h = s * std::sqrt(r);
          out.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  return out;
}

/// Indices ordered by descending score; equal scores keep the lower index first.
inline std::vector<std::size_t> argsort_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Greedy non-maximum suppression. Returns kept indices by descending score.
inline std::vector<std::size_t> nms(std::span<const Box> boxes, std::span<const double> scores,
                                    double iou_threshold) {
  if (boxes.size() != scores.size()) throw ValidationError("nms: boxes and scores differ in length");
  const auto order = argsort_descending(scores);
  std::vector<char> suppressed(boxes.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    keep.push_back(i);
    const Box& bi = boxes[i];
    const double area_i = bi.area();
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (suppressed[j]) continue;
      const Box& bj = boxes[j];
      const double iw = std::min(bi.x2, bj.x2) - std::max(bi.x1, bj.x1);
      if (iw <= 0) continue;
      const double ih = std::min(bi.y2, bj.y2) - std::max(bi.y1, bj.y1);
      if (ih <= 0) continue;
      const double inter = iw * ih;
      const double uni = area_i + bj.area() - inter;
      if (uni > 0 && inter / uni > iou_threshold) suppressed[j] = 1;
    }
  }
  return keep;
}

}  // namespace affkit
