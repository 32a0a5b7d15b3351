#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

/// Grid of affordance labels, row-major, 0 = background.
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(std::size_t width, std::size_t height, std::uint8_t fill = 0)
      : width_(width), height_(height), labels_(width * height, fill) {}
  LabelMask(std::size_t width, std::size_t height, std::vector<std::uint8_t> labels)
      : width_(width), height_(height), labels_(std::move(labels)) {
    if (labels_.size() != width_ * height_)
      throw ValidationError("LabelMask: label count does not match width * height");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  bool empty() const noexcept { return labels_.empty(); }
  std::span<const std::uint8_t> labels() const& noexcept { return labels_; }
  std::span<std::uint8_t> labels() & noexcept { return labels_; }
  std::vector<std::uint8_t> labels() && noexcept { return std::move(labels_); }

  std::uint8_t at(std::size_t x, std::size_t y) const { return labels_[y * width_ + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return labels_[y * width_ + x]; }

  std::uint8_t max_label() const {
    return labels_.empty() ? 0 : *std::max_element(labels_.begin(), labels_.end());
  }

  /// Sorted distinct labels.
  std::vector<std::uint8_t> unique_labels() const {
    std::array<bool, 256> seen{};
    for (auto v : labels_) seen[v] = true;
    std::vector<std::uint8_t> out;
    for (int v = 0; v < 256; ++v)
      if (seen[static_cast<std::size_t>(v)]) out.push_back(static_cast<std::uint8_t>(v));
    return out;
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;

 private:
  std::size_t width_ = 0, height_ = 0;
  std::vector<std::uint8_t> labels_;
};

struct MaskResizeSpec {
  std::size_t target_h = 244;
  std::size_t target_w = 244;
  double alpha = 0.005;

  void validate() const {
    detail::require(target_h > 0 && target_w > 0, "mask resize: target size must be positive");
    detail::require(alpha > 0 && alpha < 0.5, "mask resize: alpha must lie in (0, 0.5)");
  }
};

/// Bilinear resampling of a real-valued grid with half-pixel centres and
/// edge clamping. Same-size resampling is exact.
inline std::vector<double> bilinear_resize(std::span<const double> src, std::size_t src_w,
                                           std::size_t src_h, std::size_t dst_w,
                                           std::size_t dst_h) {
  std::vector<double> out(dst_w * dst_h);
  const double sx = static_cast<double>(src_w) / static_cast<double>(dst_w);
  const double sy = static_cast<double>(src_h) / static_cast<double>(dst_h);
  std::vector<std::size_t> x0(dst_w), x1(dst_w);
  std::vector<double> lx(dst_w);
  for (std::size_t x = 0; x < dst_w; ++x) {
    const double u = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                static_cast<double>(src_w - 1));
    x0[x] = static_cast<std::size_t>(std::floor(u));
    x1[x] = std::min(x0[x] + 1, src_w - 1);
    lx[x] = u - static_cast<double>(x0[x]);
  }
  for (std::size_t y = 0; y < dst_h; ++y) {
    const double v = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                static_cast<double>(src_h - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(v));
    const std::size_t y1 = std::min(y0 + 1, src_h - 1);
    const double ly = v - static_cast<double>(y0);
    const double* r0 = src.data() + y0 * src_w;
    const double* r1 = src.data() + y1 * src_w;
    for (std::size_t x = 0; x < dst_w; ++x) {
      const double top = r0[x0[x]] + (r0[x1[x]] - r0[x0[x]]) * lx[x];
      const double bot = r1[x0[x]] + (r1[x1[x]] - r1[x0[x]]) * lx[x];
      out[y * dst_w + x] = top + (bot - top) * ly;
    }
  }
  return out;
}

/// Multiclass-safe resize. Labels are mapped order-preservingly onto 0..n-1,
/// the index grid is bilinearly resized, every pixel within +-alpha of an
/// integer index takes that index, and the rest become background (0).
/// Indices are then mapped back, so no label outside the input set (plus 0)
/// can appear.
inline LabelMask resize_multiclass_mask(const LabelMask& mask, const MaskResizeSpec& spec) {
  spec.validate();
  if (mask.empty()) throw ValidationError("resize_multiclass_mask: empty mask");
  const auto present = mask.unique_labels();
  std::array<double, 256> to_index{};
  for (std::size_t i = 0; i < present.size(); ++i) to_index[present[i]] = static_cast<double>(i);

  std::vector<double> converted(mask.labels().size());
  const auto labels = mask.labels();
  for (std::size_t i = 0; i < converted.size(); ++i) converted[i] = to_index[labels[i]];

  const auto resized =
      bilinear_resize(converted, mask.width(), mask.height(), spec.target_w, spec.target_h);
  const double top = static_cast<double>(present.size() - 1);
  LabelMask out(spec.target_w, spec.target_h);
  auto dst = out.labels();
  for (std::size_t i = 0; i < resized.size(); ++i) {
    const double rho = resized[i];
    const double nearest = std::clamp(std::round(rho), 0.0, top);
    dst[i] = std::abs(rho - nearest) <= spec.alpha ? present[static_cast<std::size_t>(nearest)] : 0;
  }
  return out;
}

inline long round_half_up(double v) { return static_cast<long>(std::floor(v + 0.5)); }

/// Integer pixel rectangle covered by a box after round-half-up of its corners;
/// at least one pixel wide and tall.
struct PixelRect {
  long x0, y0, width, height;
};

inline PixelRect pixel_rect(const Box& box) {
  const long x0 = round_half_up(box.x1), y0 = round_half_up(box.y1);
  const long x1 = round_half_up(box.x2), y1 = round_half_up(box.y2);
  return {x0, y0, std::max(1L, x1 - x0), std::max(1L, y1 - y0)};
}

/// Training target for one RoI: the object's mask cropped to the RoI at 1:1
/// scale (pixels outside the object or the image are background), then
/// resized with resize_multiclass_mask.
inline LabelMask crop_to_box(const LabelMask& gt_mask, const Box& roi) {
  const PixelRect r = pixel_rect(roi);
  LabelMask crop(static_cast<std::size_t>(r.width), static_cast<std::size_t>(r.height));
  for (long y = 0; y < r.height; ++y) {
    const long iy = r.y0 + y;
    if (iy < 0 || iy >= static_cast<long>(gt_mask.height())) continue;
    for (long x = 0; x < r.width; ++x) {
      const long ix = r.x0 + x;
      if (ix < 0 || ix >= static_cast<long>(gt_mask.width())) continue;
      crop.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) =
          gt_mask.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy));
    }
  }
  return crop;
}

inline LabelMask build_target_mask(const Box& roi, const LabelMask& gt_mask,
                                   const MaskResizeSpec& spec) {
  if (!(roi.x2 > roi.x1 && roi.y2 > roi.y1)) throw ValidationError("build_target_mask: invalid RoI");
  return resize_multiclass_mask(crop_to_box(gt_mask, roi), spec);
}

/// Per-pixel argmax over the class axis of (C+1, H, W); ties go to the lower class.
template <typename T>
LabelMask argmax_labels(const Tensor<T>& probs) {
  if (probs.rank() != 3) throw ValidationError("argmax_labels: expected (C+1, H, W)");
  const std::size_t classes = probs.dim(0), h = probs.dim(1), w = probs.dim(2), plane = h * w;
  if (classes > 256) throw ValidationError("argmax_labels: too many classes");
  LabelMask out(w, h);
  auto dst = out.labels();
  for (std::size_t i = 0; i < plane; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
      if (probs[c * plane + i] > probs[best * plane + i]) best = c;
    dst[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Argmax then resize to the box's rounded pixel size. A box with no extent
/// yields an empty mask.
template <typename T>
LabelMask project_mask_to_box(const Tensor<T>& probs, const Box& box, const MaskResizeSpec& spec) {
  if (!(box.x2 > box.x1 && box.y2 > box.y1)) return {};
  const PixelRect r = pixel_rect(box);
  MaskResizeSpec to_box = spec;
  to_box.target_w = static_cast<std::size_t>(r.width);
  to_box.target_h = static_cast<std::size_t>(r.height);
  return resize_multiclass_mask(argmax_labels(probs), to_box);
}

/// Label ordering for overlap resolution, listed from high to low priority.
/// Labels not listed rank below every listed one unless `unlisted_first`.
/// Ties among unlisted labels go to the smaller label value.
struct AffordancePriority {
  std::vector<std::uint8_t> order;
  bool unlisted_first = false;

  void validate() const {
    std::array<bool, 256> seen{};
    for (auto l : order) {
      detail::require(l != 0, "affordance priority: background cannot be ranked");
      detail::require(!seen[l], "affordance priority: label " + std::to_string(l) + " listed twice");
      seen[l] = true;
    }
  }

  /// Smaller is stronger.
  std::size_t rank(std::uint8_t label) const {
    const std::size_t listed_offset = unlisted_first ? 256 : 0;
    const std::size_t unlisted_offset = unlisted_first ? 0 : 256;
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] == label) return listed_offset + i;
    return unlisted_offset + label;
  }

  bool outranks(std::uint8_t a, std::uint8_t b) const { return rank(a) < rank(b); }
};

struct PlacedMask {
  Box box;
  LabelMask mask;  // box-sized, pasted at the box's rounded top-left corner
};

/// Pastes each object mask into a full-image canvas. Background never
/// overwrites a label; colliding labels resolve by priority, so the result
/// does not depend on input order.
inline LabelMask merge_overlaps_by_priority(std::span<const PlacedMask> masks,
                                            const AffordancePriority& priority,
                                            std::size_t image_w, std::size_t image_h) {
  priority.validate();
  LabelMask canvas(image_w, image_h);
  for (const auto& pm : masks) {
    if (pm.mask.empty()) continue;
    const long x0 = round_half_up(pm.box.x1), y0 = round_half_up(pm.box.y1);
    for (std::size_t y = 0; y < pm.mask.height(); ++y) {
      const long cy = y0 + static_cast<long>(y);
      if (cy < 0 || cy >= static_cast<long>(image_h)) continue;
      for (std::size_t x = 0; x < pm.mask.width(); ++x) {
        const long cx = x0 + static_cast<long>(x);
        if (cx < 0 || cx >= static_cast<long>(image_w)) continue;
        const std::uint8_t incoming = pm.mask.at(x, y);
        if (incoming == 0) continue;
        std::uint8_t& dst = canvas.at(static_cast<std::size_t>(cx), static_cast<std::size_t>(cy));
        if (dst == 0 || priority.outranks(incoming, dst)) dst = incoming;
      }
    }
  }
  return canvas;
}

}  // namespace affkit
