#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "affkit/error.hpp"
#include "affkit/layers.hpp"
#include "affkit/losses.hpp"
#include "affkit/rng.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

/// Finite-difference checks in double precision. Each check draws a random
/// problem from `seed`, contracts the op output with a random upstream
/// gradient and compares the analytic gradient of every input against
/// central differences.
namespace gradcheck {

inline constexpr double kEpsilon = 1e-6;

struct Outcome {
  std::string op;
  double max_rel_error = 0;
  std::size_t seeds = 0;
  bool passed = false;
};

inline Tensor<double> random_tensor(Shape dims, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Values with |v| >= margin, so kinks at zero cannot be crossed by the probe.
inline Tensor<double> away_from_zero(Shape dims, Rng& rng, double margin = 0.05) {
  Tensor<double> t(std::move(dims));
  for (auto& v : t.values()) {
    const double mag = rng.uniform(margin, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Distinct values on a shuffled lattice, so max-style selections have clear winners.
inline Tensor<double> distinct_values(Shape dims, Rng& rng) {
  Tensor<double> t(std::move(dims));
  std::vector<std::size_t> order(t.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i)
    t[order[i]] = -1.0 + 2.0 * (static_cast<double>(i) + rng.uniform(0.3, 0.7)) / static_cast<double>(t.size());
  return t;
}

/// max relative error between `analytic` and the central-difference gradient of f at x.
template <typename F>
double compare(F&& f, const Tensor<double>& x, const Tensor<double>& analytic) {
  const Tensor<double> numeric = finite_diff_gradient<double>(f, x, kEpsilon);
  return max_relative_error<double>(analytic.values(), numeric.values());
}

inline double conv2d_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = rng.uniform_int(1, 2), cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
  const std::size_t k = rng.uniform_int(1, 3), stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
  const std::size_t h = rng.uniform_int(k + 1, 6), w = rng.uniform_int(k + 1, 6);
  const Conv2dSpec spec{stride, pad};
  auto x = random_tensor({n, cin, h, w}, rng), wt = random_tensor({cout, cin, k, k}, rng), b = random_tensor({cout}, rng);
  const auto y0 = conv2d(x, wt, b, spec);
  const auto g = random_tensor(y0.dims(), rng);
  const auto grads = conv2d_backward(x, wt, g, spec);
  double e = compare([&](const Tensor<double>& v) { return dot(conv2d(v, wt, b, spec), g); }, x, grads.input);
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(conv2d(x, v, b, spec), g); }, wt, grads.weights));
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(conv2d(x, wt, v, spec), g); }, b, grads.bias));
  return e;
}

inline double deconv2d_case(std::uint64_t seed) {
  Rng rng(seed);
  DeconvSpec spec;
  spec.in_channels = rng.uniform_int(1, 3);
  spec.out_channels = rng.uniform_int(1, 3);
  spec.kernel_size = rng.uniform_int(2, 4);
  spec.stride = rng.uniform_int(1, 3);
  spec.padding = rng.uniform_int(0, 1);
  const std::size_t n = rng.uniform_int(1, 2), h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
  auto x = random_tensor({n, spec.in_channels, h, w}, rng);
  auto wt = random_tensor({spec.in_channels, spec.out_channels, spec.kernel_size, spec.kernel_size}, rng);
  auto b = random_tensor({spec.out_channels}, rng);
  const auto y0 = deconv2d(x, spec, wt, b);
  const auto g = random_tensor(y0.dims(), rng);
  const auto grads = deconv2d_backward(x, spec, wt, g);
  double e = compare([&](const Tensor<double>& v) { return dot(deconv2d(v, spec, wt, b), g); }, x, grads.input);
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(deconv2d(x, spec, v, b), g); }, wt, grads.weights));
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(deconv2d(x, spec, wt, v), g); }, b, grads.bias));
  return e;
}

inline double relu_case(std::uint64_t seed) {
  Rng rng(seed);
  auto x = away_from_zero({2, 3, 4, 4}, rng);
  const auto y = relu(x);
  const auto g = random_tensor(y.dims(), rng);
  return compare([&](const Tensor<double>& v) { return dot(relu(v), g); }, x, relu_backward(y, g));
}

inline double maxpool_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t h = rng.uniform_int(2, 7), w = rng.uniform_int(2, 7);
  auto x = distinct_values({1, 2, h, w}, rng);
  const auto r = maxpool2d(x, 2, 2);
  const auto g = random_tensor(r.output.dims(), rng);
  return compare([&](const Tensor<double>& v) { return dot(maxpool2d(v, 2, 2).output, g); }, x,
                 maxpool2d_backward(r, g));
}

inline double fc_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = rng.uniform_int(1, 4), in = rng.uniform_int(1, 8), out = rng.uniform_int(1, 6);
  auto x = random_tensor({n, in}, rng), wt = random_tensor({out, in}, rng), b = random_tensor({out}, rng);
  const auto g = random_tensor({n, out}, rng);
  const auto grads = fully_connected_backward(x, wt, g);
  double e = compare([&](const Tensor<double>& v) { return dot(fully_connected(v, wt, b), g); }, x, grads.input);
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(fully_connected(x, v, b), g); }, wt, grads.weights));
  e = std::max(e, compare([&](const Tensor<double>& v) { return dot(fully_connected(x, wt, v), g); }, b, grads.bias));
  return e;
}

inline double softmax_case(std::uint64_t seed) {
  Rng rng(seed);
  auto x = random_tensor({2, 5, 3}, rng, -3, 3);
  const std::size_t axis = rng.uniform_int(0, 2);
  const auto y = softmax(x, axis);
  const auto g = random_tensor(y.dims(), rng);
  return compare([&](const Tensor<double>& v) { return dot(softmax(v, axis), g); }, x, softmax_backward(y, g, axis));
}

inline double roi_align_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t H = rng.uniform_int(4, 9), W = rng.uniform_int(4, 9);
  auto f = distinct_values({2, 2, H, W}, rng);
  const double scale = rng.uniform() < 0.5 ? 1.0 : 0.5;
  std::vector<RoI> rois;
  for (int i = 0; i < 3; ++i) {
    const double x1 = rng.uniform(0, W / scale * 0.6), y1 = rng.uniform(0, H / scale * 0.6);
    rois.push_back({{x1, y1, x1 + rng.uniform(1.0, W / scale * 0.5), y1 + rng.uniform(1.0, H / scale * 0.5)},
                    static_cast<std::size_t>(rng.uniform_int(0, 1))});
  }
  const std::size_t out = rng.uniform_int(2, 4);
  const auto r = roi_align(f, std::span<const RoI>(rois), out, out, scale);
  const auto g = random_tensor(r.output.dims(), rng);
  return compare(
      [&](const Tensor<double>& v) { return dot(roi_align(v, std::span<const RoI>(rois), out, out, scale).output, g); },
      f, roi_align_backward(r, g));
}

inline std::vector<double> random_distribution(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double s = 0;
  for (auto& v : p) s += (v = rng.uniform(0.1, 1.0));
  for (auto& v : p) v /= s;
  return p;
}

inline double classification_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = rng.uniform_int(2, 6), u = rng.uniform_int(0, static_cast<long>(n) - 1);
  Tensor<double> p({n}, random_distribution(n, rng));
  const auto grad = classification_loss_grad<double>(p.values(), u);
  return compare([&](const Tensor<double>& v) { return classification_loss<double>(v.values(), u); }, p,
                 Tensor<double>({n}, grad));
}

inline double smooth_l1_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> x({8});
  for (auto& v : x.values()) {
    do v = rng.uniform(-3, 3);
    while (std::abs(std::abs(v) - 1.0) < 0.05);
  }
  Tensor<double> grad({8});
  for (std::size_t i = 0; i < 8; ++i) grad[i] = smooth_l1_grad(x[i]);
  return compare(
      [&](const Tensor<double>& v) {
        double s = 0;
        for (double e : v.values()) s += smooth_l1(e);
        return s;
      },
      x, grad);
}

inline BoxOffset to_offset(const Tensor<double>& t) { return {t[0], t[1], t[2], t[3]}; }

inline double box_regression_case(std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t({4}), v({4});
  for (std::size_t i = 0; i < 4; ++i) {
    v[i] = rng.uniform(-1, 1);
    do t[i] = v[i] + rng.uniform(-2.5, 2.5);
    while (std::abs(std::abs(t[i] - v[i]) - 1.0) < 0.05);
  }
  const BoxOffset g = box_regression_loss_grad(to_offset(t), to_offset(v));
  return compare([&](const Tensor<double>& x) { return box_regression_loss(to_offset(x), to_offset(v)); }, t,
                 Tensor<double>({4}, {g.tx, g.ty, g.tw, g.th}));
}

inline LabelMask random_labels(std::size_t w, std::size_t h, std::size_t classes, Rng& rng) {
  LabelMask s(w, h);
  for (auto& l : s.labels()) l = static_cast<std::uint8_t>(rng.uniform_int(0, static_cast<long>(classes) - 1));
  return s;
}

inline Tensor<double> random_probabilities(std::size_t classes, std::size_t h, std::size_t w, Rng& rng) {
  auto logits = random_tensor({classes, h, w}, rng, -2, 2);
  return softmax(logits, 0);
}

inline double affordance_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t C1 = rng.uniform_int(2, 5), h = rng.uniform_int(2, 5), w = rng.uniform_int(2, 5);
  const auto m = random_probabilities(C1, h, w, rng);
  const auto s = random_labels(w, h, C1, rng);
  return compare([&](const Tensor<double>& v) { return affordance_loss(v, s); }, m, affordance_loss_grad(m, s));
}

inline double multi_task_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t K1 = rng.uniform_int(2, 4), C1 = rng.uniform_int(2, 4), S = rng.uniform_int(2, 4);
  HeadPrediction<double> pred;
  pred.p = random_distribution(K1, rng);
  for (std::size_t k = 0; k < K1; ++k)
    pred.t.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  pred.m = random_probabilities(C1, S, S, rng);
  DetectionTarget target;
  target.u = rng.uniform_int(0, static_cast<long>(K1) - 1);
  target.v = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  target.s = random_labels(S, S, C1, rng);
  const LossWeights lw{rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)};
  const auto g = multi_task_loss_backward(pred, target, lw);

  Tensor<double> p({K1}, pred.p);
  double e = compare(
      [&](const Tensor<double>& v) {
        auto q = pred;
        q.p.assign(v.values().begin(), v.values().end());
        return multi_task_loss(q, target, lw).total;
      },
      p, Tensor<double>({K1}, g.p));
  Tensor<double> t({K1, 4}), gt({K1, 4});
  for (std::size_t k = 0; k < K1; ++k) {
    const auto a = offset_components(pred.t[k]), b = offset_components(g.t[k]);
    for (std::size_t i = 0; i < 4; ++i) {
      t[k * 4 + i] = a[i];
      gt[k * 4 + i] = b[i];
    }
  }
  e = std::max(e, compare(
                      [&](const Tensor<double>& v) {
                        auto q = pred;
                        for (std::size_t k = 0; k < K1; ++k)
                          q.t[k] = {v[k * 4], v[k * 4 + 1], v[k * 4 + 2], v[k * 4 + 3]};
                        return multi_task_loss(q, target, lw).total;
                      },
                      t, gt));
  const Tensor<double> gm = target.u >= 1 ? g.m : Tensor<double>(pred.m.dims());
  e = std::max(e, compare(
                      [&](const Tensor<double>& v) {
                        auto q = pred;
                        q.m = v;
                        return multi_task_loss(q, target, lw).total;
                      },
                      pred.m, gm));
  return e;
}

struct Op {
  std::string name;
  double (*run)(std::uint64_t);
};

inline const std::vector<Op>& ops() {
  static const std::vector<Op> all{
      {"conv2d", conv2d_case},
      {"deconv2d", deconv2d_case},
      {"relu", relu_case},
      {"maxpool2d", maxpool_case},
      {"fully_connected", fc_case},
      {"softmax", softmax_case},
      {"roi_align", roi_align_case},
      {"classification_loss", classification_case},
      {"smooth_l1", smooth_l1_case},
      {"box_regression_loss", box_regression_case},
      {"affordance_loss", affordance_case},
      {"multi_task_loss", multi_task_case},
  };
  return all;
}

/// Runs `name` (or every op for "all") over `seeds` seeds derived from `base_seed`.
inline std::vector<Outcome> run(const std::string& name, std::uint64_t base_seed, std::size_t seeds = 20,
                                double tolerance = 1e-4) {
  std::vector<Outcome> out;
  for (const auto& op : ops()) {
    if (name != "all" && name != op.name) continue;
    Outcome o{op.name, 0, seeds, false};
    for (std::size_t s = 0; s < seeds; ++s) o.max_rel_error = std::max(o.max_rel_error, op.run(derive_seed(base_seed, s)));
    o.passed = o.max_rel_error < tolerance;
    out.push_back(o);
  }
  if (out.empty()) throw ValidationError("gradcheck: unknown op '" + name + "'");
  return out;
}

}  // namespace gradcheck
}  // namespace affkit
