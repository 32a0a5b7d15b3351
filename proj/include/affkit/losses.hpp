#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/maskops.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

/// Probabilities below this are clamped before taking the log.
inline constexpr double kProbabilityFloor = 1e-12;

template <typename T>
T classification_loss(std::span<const T> p, std::size_t u) {
  if (u >= p.size()) throw ValidationError("classification_loss: class index out of range");
  return -std::log(std::max(p[u], static_cast<T>(kProbabilityFloor)));
}

/// dL/dp; zero below the floor, where the clamped loss is flat.
template <typename T>
std::vector<T> classification_loss_grad(std::span<const T> p, std::size_t u) {
  if (u >= p.size()) throw ValidationError("classification_loss: class index out of range");
  std::vector<T> g(p.size(), T{});
  if (p[u] > static_cast<T>(kProbabilityFloor)) g[u] = -T{1} / p[u];
  return g;
}

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
template <typename T>
T smooth_l1(T x) {
  const T a = std::abs(x);
  return a < T{1} ? T{0.5} * x * x : a - T{0.5};
}

template <typename T>
T smooth_l1_grad(T x) {
  if (std::abs(x) < T{1}) return x;
  return x > T{} ? T{1} : T{-1};
}

inline std::array<double, 4> offset_components(const BoxOffset& o) { return {o.tx, o.ty, o.tw, o.th}; }

inline double box_regression_loss(const BoxOffset& t_u, const BoxOffset& v) {
  const auto a = offset_components(t_u), b = offset_components(v);
  double s = 0;
  for (int i = 0; i < 4; ++i) s += smooth_l1(a[i] - b[i]);
  return s;
}

/// dL/dt_u.
inline BoxOffset box_regression_loss_grad(const BoxOffset& t_u, const BoxOffset& v) {
  return {smooth_l1_grad(t_u.tx - v.tx), smooth_l1_grad(t_u.ty - v.ty),
          smooth_l1_grad(t_u.tw - v.tw), smooth_l1_grad(t_u.th - v.th)};
}

namespace detail {

template <typename T>
void check_mask_pair(const Tensor<T>& m, const LabelMask& s) {
  if (m.rank() != 3) throw ValidationError("affordance_loss: m must be (C+1, H, W)");
  if (m.dim(1) != s.height() || m.dim(2) != s.width())
    throw ValidationError("affordance_loss: probability map and target mask differ in size");
  for (auto label : s.labels())
    if (label >= m.dim(0)) throw ValidationError("affordance_loss: target label exceeds class count");
}

}  // namespace detail

/// Mean over pixels of -log m[s_i, i].
template <typename T>
T affordance_loss(const Tensor<T>& m, const LabelMask& s) {
  detail::check_mask_pair(m, s);
  const std::size_t plane = s.width() * s.height();
  const auto labels = s.labels();
  double sum = 0;
  for (std::size_t i = 0; i < plane; ++i)
    sum -= std::log(std::max<double>(m[labels[i] * plane + i], kProbabilityFloor));
  return static_cast<T>(sum / static_cast<double>(plane));
}

template <typename T>
Tensor<T> affordance_loss_grad(const Tensor<T>& m, const LabelMask& s) {
  detail::check_mask_pair(m, s);
  const std::size_t plane = s.width() * s.height();
  const auto labels = s.labels();
  Tensor<T> g(m.dims());
  const T inv_n = T{1} / static_cast<T>(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const std::size_t k = labels[i] * plane + i;
    if (m[k] > static_cast<T>(kProbabilityFloor)) g[k] = -inv_n / m[k];
  }
  return g;
}

/// Per-RoI supervision: class u (0 = background), box offset v and target mask s.
struct DetectionTarget {
  std::size_t u = 0;
  BoxOffset v;
  LabelMask s;
};

/// p over K+1 classes, one BoxOffset per class, per-pixel probabilities m (C+1, H, W).
/// m may be left empty for background RoIs.
template <typename T>
struct HeadPrediction {
  std::vector<T> p;
  std::vector<BoxOffset> t;
  Tensor<T> m;
};

struct LossWeights {
  double cls = 1.0;
  double loc = 1.0;
  double aff = 1.0;
};

struct LossParts {
  double total = 0, cls = 0, loc = 0, aff = 0;
};

template <typename T>
struct HeadGradients {
  std::vector<T> p;
  std::vector<BoxOffset> t;
  Tensor<T> m;  // empty when u = 0
};

/// L = L_cls + [u >= 1] L_loc + [u >= 1] L_aff, regression on t^u.
template <typename T>
LossParts multi_task_loss(const HeadPrediction<T>& pred, const DetectionTarget& target,
                          const LossWeights& w = {}) {
  if (pred.t.size() != pred.p.size())
    throw ValidationError("multi_task_loss: need one box offset per class");
  LossParts parts;
  parts.cls = classification_loss<T>(pred.p, target.u);
  if (target.u >= 1) {
    parts.loc = box_regression_loss(pred.t[target.u], target.v);
    parts.aff = affordance_loss(pred.m, target.s);
  }
  parts.total = w.cls * parts.cls + w.loc * parts.loc + w.aff * parts.aff;
  return parts;
}

template <typename T>
HeadGradients<T> multi_task_loss_backward(const HeadPrediction<T>& pred,
                                          const DetectionTarget& target, const LossWeights& w = {}) {
  HeadGradients<T> g;
  g.p = classification_loss_grad<T>(pred.p, target.u);
  for (auto& v : g.p) v *= static_cast<T>(w.cls);
  g.t.assign(pred.t.size(), BoxOffset{});
  if (target.u >= 1) {
    auto d = box_regression_loss_grad(pred.t[target.u], target.v);
    g.t[target.u] = {w.loc * d.tx, w.loc * d.ty, w.loc * d.tw, w.loc * d.th};
    g.m = affordance_loss_grad(pred.m, target.s);
    for (auto& v : g.m.values()) v *= static_cast<T>(w.aff);
  }
  return g;
}

/// Fused softmax + cross-entropy gradient w.r.t. logits along the class axis
/// (axis 0 of a (C, plane) layout): (softmax - onehot) * scale. Matches the
/// composition of softmax_backward and the loss gradient above when no
/// probability sits below the floor.
template <typename T>
void softmax_xent_logit_grad(std::span<const T> probs, std::span<const std::uint8_t> labels,
                             std::size_t classes, T scale, std::span<T> grad) {
  const std::size_t plane = labels.size();
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < plane; ++i) grad[c * plane + i] = probs[c * plane + i] * scale;
  for (std::size_t i = 0; i < plane; ++i) grad[labels[i] * plane + i] -= scale;
}

}  // namespace affkit
