#pragma once

// Reference implementations written from textbook definitions, sharing no
// code with the library beyond its plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/layers.hpp"
#include "affkit/maskops.hpp"
#include "affkit/rng.hpp"
#include "affkit/tensor.hpp"

namespace oracle {

using affkit::Box;
using affkit::Tensor;

/// Direct 6-loop convolution (cross-correlation) with zero padding.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                             long stride, long pad) {
  const long N = long(x.dim(0)), C = long(x.dim(1)), H = long(x.dim(2)), W = long(x.dim(3));
  const long O = long(w.dim(0)), K = long(w.dim(2));
  const long OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({std::size_t(N), std::size_t(O), std::size_t(OH), std::size_t(OW)});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox) {
          double acc = b[std::size_t(o)];
          for (long c = 0; c < C; ++c)
            for (long ky = 0; ky < K; ++ky)
              for (long kx = 0; kx < K; ++kx) {
                const long iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at(std::size_t(n), std::size_t(c), std::size_t(iy), std::size_t(ix)) *
                       w.at(std::size_t(o), std::size_t(c), std::size_t(ky), std::size_t(kx));
              }
          y.at(std::size_t(n), std::size_t(o), std::size_t(oy), std::size_t(ox)) = acc;
        }
  return y;
}

/// Bilinear value of a single plane at continuous coordinate (fx, fy), pixel
/// centres at i + 0.5, coordinates clamped to the outermost centres.
inline double bilinear(const double* plane, std::size_t H, std::size_t W, double fx, double fy) {
  double u = fx - 0.5, v = fy - 0.5;
  u = std::min(std::max(u, 0.0), double(W - 1));
  v = std::min(std::max(v, 0.0), double(H - 1));
  const double x0 = std::floor(u), y0 = std::floor(v);
  const double ax = u - x0, ay = v - y0;
  auto px = [&](double xx, double yy) {
    const auto cx = std::min(std::size_t(xx), W - 1), cy = std::min(std::size_t(yy), H - 1);
    return plane[cy * W + cx];
  };
  return (1 - ay) * ((1 - ax) * px(x0, y0) + ax * px(x0 + 1, y0)) +
         ay * ((1 - ax) * px(x0, y0 + 1) + ax * px(x0 + 1, y0 + 1));
}

/// RoIAlign: per bin, the max over the 2x2 quarter-point bilinear samples.
inline Tensor<double> roi_align(const Tensor<double>& f, const Box& roi, std::size_t batch, std::size_t oh,
                                std::size_t ow, double scale) {
  const std::size_t C = f.dim(1), H = f.dim(2), W = f.dim(3);
  Tensor<double> out({C, oh, ow});
  const double x1 = roi.x1 * scale, y1 = roi.y1 * scale;
  const double bw = (roi.x2 * scale - x1) / double(ow), bh = (roi.y2 * scale - y1) / double(oh);
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = f.data() + (batch * C + c) * H * W;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -1e300;
        for (double qy : {0.25, 0.75})
          for (double qx : {0.25, 0.75})
            best = std::max(best, bilinear(plane, H, W, x1 + (double(j) + qx) * bw, y1 + (double(i) + qy) * bh));
        out.at(c, i, j) = best;
      }
  }
  return out;
}

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double u = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return u > 0 ? inter / u : 0.0;
}

/// O(n^2) greedy NMS: repeatedly take the best unsuppressed box (ties to the
/// lower index) and drop everything overlapping it above the threshold.
inline std::vector<std::size_t> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double thr) {
  std::vector<bool> alive(boxes.size(), true);
  std::vector<std::size_t> keep;
  for (;;) {
    std::size_t best = boxes.size();
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (alive[i] && (best == boxes.size() || scores[i] > scores[best])) best = i;
    if (best == boxes.size()) break;
    keep.push_back(best);
    alive[best] = false;
    for (std::size_t i = 0; i < boxes.size(); ++i)
      if (alive[i] && box_iou(boxes[best], boxes[i]) > thr) alive[i] = false;
  }
  return keep;
}

/// Half-pixel bilinear resize of one real plane with edge clamping.
inline std::vector<double> resize_plane(const std::vector<double>& src, std::size_t sw, std::size_t sh,
                                        std::size_t dw, std::size_t dh) {
  std::vector<double> out(dw * dh);
  const double sx = double(sw) / double(dw), sy = double(sh) / double(dh);
  for (std::size_t y = 0; y < dh; ++y)
    for (std::size_t x = 0; x < dw; ++x)
      out[y * dw + x] = bilinear(src.data(), sh, sw, (double(x) + 0.5) * sx, (double(y) + 0.5) * sy);
  return out;
}

/// One-vs-rest resize: each label's indicator is resized separately; a pixel
/// takes label l when that indicator stays within alpha of 1, else background.
inline affkit::LabelMask one_vs_rest_resize(const affkit::LabelMask& m, std::size_t dw, std::size_t dh,
                                            double alpha) {
  affkit::LabelMask out(dw, dh);
  for (auto l : m.unique_labels()) {
    if (l == 0) continue;
    std::vector<double> ind(m.labels().size());
    for (std::size_t i = 0; i < ind.size(); ++i) ind[i] = m.labels()[i] == l ? 1.0 : 0.0;
    const auto r = resize_plane(ind, m.width(), m.height(), dw, dh);
    for (std::size_t i = 0; i < r.size(); ++i)
      if (r[i] >= 1.0 - alpha) out.labels()[i] = l;
  }
  return out;
}

/// True when every source pixel that contributes to destination pixel i carries one label.
inline bool pure_support(const affkit::LabelMask& m, std::size_t dw, std::size_t dh, std::size_t x, std::size_t y,
                         std::uint8_t& label) {
  const double sx = double(m.width()) / double(dw), sy = double(m.height()) / double(dh);
  double u = (double(x) + 0.5) * sx - 0.5, v = (double(y) + 0.5) * sy - 0.5;
  u = std::min(std::max(u, 0.0), double(m.width() - 1));
  v = std::min(std::max(v, 0.0), double(m.height() - 1));
  const std::size_t x0 = std::size_t(std::floor(u)), y0 = std::size_t(std::floor(v));
  const std::size_t x1 = std::min(x0 + 1, m.width() - 1), y1 = std::min(y0 + 1, m.height() - 1);
  label = m.at(x0, y0);
  for (auto [xx, yy] : {std::pair{x1, y0}, std::pair{x0, y1}, std::pair{x1, y1}})
    if (m.at(xx, yy) != label) return false;
  return true;
}

inline Tensor<double> random_tensor(affkit::Shape dims, affkit::Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Box random_box(affkit::Rng& rng, double extent, double min_size = 1.0) {
  const double w = rng.uniform(min_size, extent / 2), h = rng.uniform(min_size, extent / 2);
  const double x = rng.uniform(0, extent - w), y = rng.uniform(0, extent - h);
  return {x, y, x + w, y + h};
}

}  // namespace oracle
