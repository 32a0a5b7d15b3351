#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "affkit/error.hpp"

namespace affkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Rank-4 tensors are (batch, channel, height, width).
/// The gradient buffer is allocated on demand and always matches the data length.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape dims, T fill = T{}) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(shape_size(dims_), fill);
  }

  Tensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), data_(std::move(values)) {
    check_dims();
    if (data_.size() != shape_size(dims_))
      throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                            " does not match dims " + shape_string(dims_));
  }

  const Shape& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() & noexcept { return data_; }
  std::span<const T> values() const& noexcept { return data_; }
  std::vector<T> values() && noexcept { return std::move(data_); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  T& at(std::size_t c, std::size_t h, std::size_t w) {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }
  const T& at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * dims_[1] + h) * dims_[2] + w];
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w];
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  void enable_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{});
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{}); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape dims) const {
    Tensor out(std::move(dims), std::vector<T>(data_));
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : dims_)
      if (d == 0) throw ValidationError("tensor dims must be positive, got " + shape_string(dims_));
  }

  Shape dims_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

template <typename T>
void require_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.dims() != b.dims())
    throw ValidationError(std::string(what) + ": dimension mismatch " + shape_string(a.dims()) +
                          " vs " + shape_string(b.dims()));
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_dims(a, b, "dot");
  T sum{};
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

/// Central-difference gradient of a scalar functional. Each coordinate is
/// perturbed in turn; a non-finite evaluation names the coordinate.
template <typename T, typename F>
Tensor<T> finite_diff_gradient(F&& f, const Tensor<T>& x, T epsilon) {
  if (!(epsilon > T{})) throw ValidationError("finite_diff_gradient: epsilon must be positive");
  Tensor<T> probe = x;
  Tensor<T> g(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = original + epsilon;
    const T plus = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
    probe[i] = original - epsilon;
    const T minus = static_cast<T>(f(static_cast<const Tensor<T>&>(probe)));
    probe[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus))
      throw NumericError("finite_diff_gradient: non-finite function value when perturbing index " +
                         std::to_string(i));
    g[i] = (plus - minus) / (T{2} * epsilon);
  }
  return g;
}

/// Largest elementwise |a - b| / max(|a|, |b|, floor).
template <typename T>
double max_relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-4) {
  if (a.size() != b.size()) throw ValidationError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

struct SgdOptions {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

/// Classical momentum with weight decay folded into the gradient:
///   v <- momentum * v - lr * (grad + weight_decay * param);  param <- param + v
template <typename T>
void sgd_momentum_step(std::span<T> param, std::span<const T> grad, std::span<T> velocity,
                       const SgdOptions& opt) {
  if (param.size() != grad.size() || param.size() != velocity.size())
    throw ValidationError("sgd_momentum_step: dimension mismatch");
  if (opt.lr < 0.0) throw ValidationError("sgd_momentum_step: learning rate must be non-negative");
  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = mu * velocity[i] - lr * (grad[i] + wd * param[i]);
    param[i] += velocity[i];
  }
}

template <typename T>
void sgd_momentum_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity,
                       const SgdOptions& opt) {
  require_same_dims(param, grad, "sgd_momentum_step");
  require_same_dims(param, velocity, "sgd_momentum_step");
  sgd_momentum_step<T>(param.values(), grad.values(), velocity.values(), opt);
}

}  // namespace affkit
