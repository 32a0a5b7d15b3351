#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "affkit/blas.hpp"
#include "affkit/boxes.hpp"
#include "affkit/error.hpp"
#include "affkit/tensor.hpp"

namespace affkit {

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;

  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::size_t col_cols() const { return out_h * out_w; }
};

inline long conv_out_size(long in, long kernel, long stride, long padding) {
  const long span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

/// col is (C*kh*kw) x (out_h*out_w).
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + g.out_w, T{});
            continue;
          }
          const T* src = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
            dst[ox] = (ix >= 0 && ix < W) ? src[ix] : T{};
          }
        }
      }
    }
  }
}

/// Accumulates col back into image (adjoint of im2col).
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding), stride = static_cast<long>(g.stride);
  const std::size_t cols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ky);
          if (iy < 0 || iy >= H) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - pad + static_cast<long>(kx);
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

inline int as_int(std::size_t v) { return static_cast<int>(v); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct Conv2dGrads {
  Tensor<T> input, weights, bias;
};

namespace detail {

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                           const Conv2dSpec& spec) {
  if (input.rank() != 4) throw ValidationError("conv2d: input must be rank 4 (N,C,H,W)");
  if (weights.rank() != 4) throw ValidationError("conv2d: weights must be rank 4 (Cout,Cin,kh,kw)");
  if (weights.dim(1) != input.dim(1))
    throw ValidationError("conv2d: weights expect " + std::to_string(weights.dim(1)) +
                          " input channels, input has " + std::to_string(input.dim(1)));
  if (bias.size() != weights.dim(0)) throw ValidationError("conv2d: bias length must equal Cout");
  if (spec.stride == 0) throw ValidationError("conv2d: stride must be positive");
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weights.dim(2), weights.dim(3),
                 spec.stride, spec.padding, 0, 0};
  const long oh = conv_out_size(static_cast<long>(g.height), static_cast<long>(g.kernel_h),
                                static_cast<long>(g.stride), static_cast<long>(g.padding));
  const long ow = conv_out_size(static_cast<long>(g.width), static_cast<long>(g.kernel_w),
                                static_cast<long>(g.stride), static_cast<long>(g.padding));
  if (oh <= 0 || ow <= 0) throw ValidationError("conv2d: non-positive output size");
  g.out_h = static_cast<std::size_t>(oh);
  g.out_w = static_cast<std::size_t>(ow);
  return g;
}

}  // namespace detail

/// Cross-correlation. weights (Cout, Cin, kh, kw), bias (Cout).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 const Conv2dSpec& spec = {}) {
  const auto g = detail::conv_geometry(input, weights, bias, spec);
  const std::size_t n_batch = input.dim(0), cout = weights.dim(0);
  Tensor<T> out({n_batch, cout, g.out_h, g.out_w});
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = cout * g.col_cols();
  for (std::size_t n = 0; n < n_batch; ++n) {
    T* y = out.data() + n * out_stride;
    for (std::size_t o = 0; o < cout; ++o)
      std::fill(y + o * g.col_cols(), y + (o + 1) * g.col_cols(), bias[o]);
    detail::im2col(input.data() + n * in_stride, g, col.data());
    blas::gemm(false, false, detail::as_int(cout), detail::as_int(g.col_cols()),
               detail::as_int(g.col_rows()), T{1}, weights.data(), detail::as_int(g.col_rows()),
               col.data(), detail::as_int(g.col_cols()), T{1}, y, detail::as_int(g.col_cols()));
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights,
                               const Tensor<T>& grad_output, const Conv2dSpec& spec = {}) {
  Tensor<T> bias_probe({weights.dim(0)});
  const auto g = detail::conv_geometry(input, weights, bias_probe, spec);
  const std::size_t n_batch = input.dim(0), cout = weights.dim(0);
  if (grad_output.dims() != Shape{n_batch, cout, g.out_h, g.out_w})
    throw ValidationError("conv2d_backward: grad_output has dims " +
                          shape_string(grad_output.dims()));
  Conv2dGrads<T> grads{Tensor<T>(input.dims()), Tensor<T>(weights.dims()), Tensor<T>({cout})};
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = cout * g.col_cols();
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* dy = grad_output.data() + n * out_stride;
    for (std::size_t o = 0; o < cout; ++o) {
      T s{};
      for (std::size_t i = 0; i < g.col_cols(); ++i) s += dy[o * g.col_cols() + i];
      grads.bias[o] += s;
    }
    detail::im2col(input.data() + n * in_stride, g, col.data());
    // dW += dy * col^T
    blas::gemm(false, true, detail::as_int(cout), detail::as_int(g.col_rows()),
               detail::as_int(g.col_cols()), T{1}, dy, detail::as_int(g.col_cols()), col.data(),
               detail::as_int(g.col_cols()), T{1}, grads.weights.data(),
               detail::as_int(g.col_rows()));
    // dcol = W^T * dy
    blas::gemm(true, false, detail::as_int(g.col_rows()), detail::as_int(g.col_cols()),
               detail::as_int(cout), T{1}, weights.data(), detail::as_int(g.col_rows()), dy,
               detail::as_int(g.col_cols()), T{0}, col.data(), detail::as_int(g.col_cols()));
    detail::col2im(col.data(), g, grads.input.data() + n * in_stride);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Deconvolution (transposed convolution)
// ---------------------------------------------------------------------------

/// Transposed convolution with a square kernel. Output size per axis is
/// stride * (input - 1) + kernel_size - 2 * padding.
struct DeconvSpec {
  std::size_t kernel_size = 4;
  std::size_t stride = 2;
  std::size_t padding = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  void validate() const {
    detail::require(kernel_size >= 1, "deconv: kernel size must be >= 1");
    detail::require(stride >= 1, "deconv: stride must be >= 1");
    detail::require(in_channels >= 1 && out_channels >= 1, "deconv: channel counts must be >= 1");
  }

  long output_size_signed(std::size_t input_size) const {
    return static_cast<long>(stride) * (static_cast<long>(input_size) - 1) +
           static_cast<long>(kernel_size) - 2 * static_cast<long>(padding);
  }

  /// Throws when the result would be non-positive.
  std::size_t output_size(std::size_t input_size) const {
    validate();
    if (input_size == 0) throw ValidationError("deconv: input size must be >= 1");
    const long so = output_size_signed(input_size);
    if (so <= 0)
      throw ValidationError("deconv: output size " + std::to_string(so) + " is not positive");
    return static_cast<std::size_t>(so);
  }
};

namespace detail {

/// The deconv output plays the role of the conv input in the adjoint conv.
template <typename T>
ConvGeometry deconv_geometry(const Tensor<T>& input, const DeconvSpec& spec,
                             const Tensor<T>& weights) {
  if (input.rank() != 4) throw ValidationError("deconv2d: input must be rank 4 (N,C,H,W)");
  if (input.dim(1) != spec.in_channels)
    throw ValidationError("deconv2d: input has " + std::to_string(input.dim(1)) +
                          " channels, spec expects " + std::to_string(spec.in_channels));
  if (weights.dims() != Shape{spec.in_channels, spec.out_channels, spec.kernel_size, spec.kernel_size})
    throw ValidationError("deconv2d: weights must be (Cin,Cout,k,k), got " +
                          shape_string(weights.dims()));
  const std::size_t oh = spec.output_size(input.dim(2));
  const std::size_t ow = spec.output_size(input.dim(3));
  return {spec.out_channels, oh, ow, spec.kernel_size, spec.kernel_size, spec.stride,
          spec.padding, input.dim(2), input.dim(3)};
}

}  // namespace detail

/// weights (Cin, Cout, k, k), bias (Cout). Forward equals the input-gradient of
/// the conv2d that maps the output shape back to the input shape with the same weights.
template <typename T>
Tensor<T> deconv2d(const Tensor<T>& input, const DeconvSpec& spec, const Tensor<T>& weights,
                   const Tensor<T>& bias) {
  const auto g = detail::deconv_geometry(input, spec, weights);
  if (bias.size() != spec.out_channels) throw ValidationError("deconv2d: bias length must equal Cout");
  const std::size_t n_batch = input.dim(0), cin = spec.in_channels;
  Tensor<T> out({n_batch, spec.out_channels, g.height, g.width});
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t in_stride = cin * g.col_cols();
  const std::size_t out_plane = g.height * g.width;
  for (std::size_t n = 0; n < n_batch; ++n) {
    // col (Cout*k*k x HiWi) = W^T (Cout*k*k x Cin) * x (Cin x HiWi)
    blas::gemm(true, false, detail::as_int(g.col_rows()), detail::as_int(g.col_cols()),
               detail::as_int(cin), T{1}, weights.data(), detail::as_int(g.col_rows()),
               input.data() + n * in_stride, detail::as_int(g.col_cols()), T{0}, col.data(),
               detail::as_int(g.col_cols()));
    T* y = out.data() + n * spec.out_channels * out_plane;
    detail::col2im(col.data(), g, y);
    for (std::size_t o = 0; o < spec.out_channels; ++o)
      for (std::size_t i = 0; i < out_plane; ++i) y[o * out_plane + i] += bias[o];
  }
  return out;
}

template <typename T>
Conv2dGrads<T> deconv2d_backward(const Tensor<T>& input, const DeconvSpec& spec,
                                 const Tensor<T>& weights, const Tensor<T>& grad_output) {
  const auto g = detail::deconv_geometry(input, spec, weights);
  const std::size_t n_batch = input.dim(0), cin = spec.in_channels;
  if (grad_output.dims() != Shape{n_batch, spec.out_channels, g.height, g.width})
    throw ValidationError("deconv2d_backward: grad_output has dims " +
                          shape_string(grad_output.dims()));
  Conv2dGrads<T> grads{Tensor<T>(input.dims()), Tensor<T>(weights.dims()),
                       Tensor<T>({spec.out_channels})};
  std::vector<T> col(g.col_rows() * g.col_cols());
  const std::size_t in_stride = cin * g.col_cols();
  const std::size_t out_plane = g.height * g.width;
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* dy = grad_output.data() + n * spec.out_channels * out_plane;
    for (std::size_t o = 0; o < spec.out_channels; ++o) {
      T s{};
      for (std::size_t i = 0; i < out_plane; ++i) s += dy[o * out_plane + i];
      grads.bias[o] += s;
    }
    detail::im2col(dy, g, col.data());
    // dx = W (Cin x Cout*k*k) * col
    blas::gemm(false, false, detail::as_int(cin), detail::as_int(g.col_cols()),
               detail::as_int(g.col_rows()), T{1}, weights.data(), detail::as_int(g.col_rows()),
               col.data(), detail::as_int(g.col_cols()), T{0}, grads.input.data() + n * in_stride,
               detail::as_int(g.col_cols()));
    // dW += x (Cin x HiWi) * col^T
    blas::gemm(false, true, detail::as_int(cin), detail::as_int(g.col_rows()),
               detail::as_int(g.col_cols()), T{1}, input.data() + n * in_stride,
               detail::as_int(g.col_cols()), col.data(), detail::as_int(g.col_cols()), T{1},
               grads.weights.data(), detail::as_int(g.col_rows()));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise, pooling, affine, softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.values()) v = v > T{} ? v : T{};
  return out;
}

/// Gradient gated by the forward input (or output; both share the sign pattern).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& forward_value, const Tensor<T>& grad_output) {
  require_same_dims(forward_value, grad_output, "relu_backward");
  Tensor<T> dx(grad_output.dims());
  for (std::size_t i = 0; i < dx.size(); ++i)
    dx[i] = forward_value[i] > T{} ? grad_output[i] : T{};
  return dx;
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T{} ? v : T{};
}

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input index per output element
  Shape input_dims;
};

template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor<T>& input, std::size_t kernel = 2, std::size_t stride = 2) {
  if (input.rank() != 4) throw ValidationError("maxpool2d: input must be rank 4");
  if (kernel == 0 || stride == 0) throw ValidationError("maxpool2d: kernel and stride must be positive");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H < kernel || W < kernel) throw ValidationError("maxpool2d: input smaller than the window");
  const std::size_t oh = (H - kernel) / stride + 1, ow = (W - kernel) / stride + 1;
  MaxPoolResult<T> r{Tensor<T>({N, C, oh, ow}), std::vector<std::uint32_t>(N * C * oh * ow),
                     input.dims()};
  std::size_t o = 0;
  for (std::size_t p = 0; p < N * C; ++p) {
    const std::size_t base = p * H * W;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        std::size_t best = base + y * stride * W + x * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + (y * stride + ky) * W + x * stride + kx;
            if (input[idx] > input[best]) best = idx;
          }
        r.output[o] = input[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const MaxPoolResult<T>& forward, const Tensor<T>& grad_output) {
  require_same_dims(forward.output, grad_output, "maxpool2d_backward");
  Tensor<T> dx(forward.input_dims);
  for (std::size_t i = 0; i < grad_output.size(); ++i) dx[forward.argmax[i]] += grad_output[i];
  return dx;
}

/// y = x W^T + b with x viewed as (N, in), W (out, in), b (out).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (weights.rank() != 2) throw ValidationError("fully_connected: weights must be (out, in)");
  const std::size_t N = input.dim(0), in = input.size() / N, out = weights.dim(0);
  if (weights.dim(1) != in)
    throw ValidationError("fully_connected: input has " + std::to_string(in) +
                          " features, weights expect " + std::to_string(weights.dim(1)));
  if (bias.size() != out) throw ValidationError("fully_connected: bias length must equal out");
  Tensor<T> y({N, out});
  for (std::size_t n = 0; n < N; ++n) std::copy(bias.data(), bias.data() + out, y.data() + n * out);
  blas::gemm(false, true, detail::as_int(N), detail::as_int(out), detail::as_int(in), T{1},
             input.data(), detail::as_int(in), weights.data(), detail::as_int(in), T{1}, y.data(),
             detail::as_int(out));
  return y;
}

template <typename T>
struct LinearGrads {
  Tensor<T> input, weights, bias;
};

template <typename T>
LinearGrads<T> fully_connected_backward(const Tensor<T>& input, const Tensor<T>& weights,
                                        const Tensor<T>& grad_output) {
  const std::size_t N = input.dim(0), in = input.size() / N, out = weights.dim(0);
  if (grad_output.dims() != Shape{N, out})
    throw ValidationError("fully_connected_backward: grad_output has dims " +
                          shape_string(grad_output.dims()));
  LinearGrads<T> g{Tensor<T>(input.dims()), Tensor<T>(weights.dims()), Tensor<T>({out})};
  blas::gemm(false, false, detail::as_int(N), detail::as_int(in), detail::as_int(out), T{1},
             grad_output.data(), detail::as_int(out), weights.data(), detail::as_int(in), T{0},
             g.input.data(), detail::as_int(in));
  blas::gemm(true, false, detail::as_int(out), detail::as_int(in), detail::as_int(N), T{1},
             grad_output.data(), detail::as_int(out), input.data(), detail::as_int(in), T{0},
             g.weights.data(), detail::as_int(in));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_output[n * out + o];
  return g;
}

namespace detail {

inline void softmax_extents(const Shape& dims, std::size_t axis, std::size_t& outer,
                            std::size_t& classes, std::size_t& inner) {
  if (axis >= dims.size()) throw ValidationError("softmax: axis out of range");
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= dims[i];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) inner *= dims[i];
  classes = dims[axis];
}

}  // namespace detail

/// Softmax along `axis` (the class axis), max-shifted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input, std::size_t axis) {
  std::size_t outer, classes, inner;
  detail::softmax_extents(input.dims(), axis, outer, classes, inner);
  Tensor<T> out(input.dims());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * classes * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      T mx = input[base + i];
      for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, input[base + c * inner + i]);
      T sum{};
      for (std::size_t c = 0; c < classes; ++c) {
        const T e = std::exp(input[base + c * inner + i] - mx);
        out[base + c * inner + i] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < classes; ++c) out[base + c * inner + i] /= sum;
    }
  }
  return out;
}

/// dx = y * (dy - sum_c dy_c y_c) along the class axis.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& output, const Tensor<T>& grad_output, std::size_t axis) {
  require_same_dims(output, grad_output, "softmax_backward");
  std::size_t outer, classes, inner;
  detail::softmax_extents(output.dims(), axis, outer, classes, inner);
  Tensor<T> dx(output.dims());
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * classes * inner;
    for (std::size_t i = 0; i < inner; ++i) {
      T s{};
      for (std::size_t c = 0; c < classes; ++c)
        s += grad_output[base + c * inner + i] * output[base + c * inner + i];
      for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t k = base + c * inner + i;
        dx[k] = output[k] * (grad_output[k] - s);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// RoIAlign
// ---------------------------------------------------------------------------

/// Region in input-image pixels; never quantized.
struct RoI {
  Box box;
  std::size_t batch_index = 0;
};

/// One bilinear sample: the four neighbouring feature pixels (plane offsets) and weights.
struct BilinearTap {
  std::uint32_t index[4];
  double weight[4];
};

/// Bilinear tap at continuous feature coordinate (fx, fy). Pixel i covers
/// [i, i+1) so its centre sits at i + 0.5; coordinates beyond the outermost
/// centres clamp to the border.
inline BilinearTap bilinear_tap(double fx, double fy, std::size_t height, std::size_t width) {
  const double u = std::clamp(fx - 0.5, 0.0, static_cast<double>(width - 1));
  const double v = std::clamp(fy - 0.5, 0.0, static_cast<double>(height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(u));
  const auto y0 = static_cast<std::size_t>(std::floor(v));
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const double lx = u - static_cast<double>(x0), ly = v - static_cast<double>(y0);
  BilinearTap t{};
  t.index[0] = static_cast<std::uint32_t>(y0 * width + x0);
  t.index[1] = static_cast<std::uint32_t>(y0 * width + x1);
  t.index[2] = static_cast<std::uint32_t>(y1 * width + x0);
  t.index[3] = static_cast<std::uint32_t>(y1 * width + x1);
  t.weight[0] = (1 - ly) * (1 - lx);
  t.weight[1] = (1 - ly) * lx;
  t.weight[2] = ly * (1 - lx);
  t.weight[3] = ly * lx;
  return t;
}

template <typename T>
struct RoiAlignResult {
  Tensor<T> output;                   // (R, C, out_h, out_w)
  std::vector<BilinearTap> taps;      // (R, out_h, out_w, 4 samples)
  std::vector<std::uint8_t> chosen;   // argmax sample per output element
  std::vector<std::size_t> batch_of;  // batch index per RoI
  Shape feature_dims;
};

/// Each RoI bin is sampled at its 2x2 quarter-point grid; the bin value is
/// the maximum of the four bilinear samples.
template <typename T>
RoiAlignResult<T> roi_align(const Tensor<T>& features, std::span<const RoI> rois,
                            std::size_t out_h, std::size_t out_w, double spatial_scale) {
  if (features.rank() != 4) throw ValidationError("roi_align: features must be rank 4");
  if (rois.empty()) throw ValidationError("roi_align: no RoIs");
  if (out_h == 0 || out_w == 0) throw ValidationError("roi_align: output size must be positive");
  if (!(spatial_scale > 0)) throw ValidationError("roi_align: spatial_scale must be positive");
  const std::size_t N = features.dim(0), C = features.dim(1), H = features.dim(2), W = features.dim(3);
  const std::size_t R = rois.size(), bins = out_h * out_w;
  RoiAlignResult<T> r{Tensor<T>({R, C, out_h, out_w}), std::vector<BilinearTap>(R * bins * 4),
                      std::vector<std::uint8_t>(R * C * bins), std::vector<std::size_t>(R),
                      features.dims()};
  for (std::size_t ri = 0; ri < R; ++ri) {
    const RoI& roi = rois[ri];
    if (roi.batch_index >= N) throw ValidationError("roi_align: batch index out of range");
    const double x1 = roi.box.x1 * spatial_scale, y1 = roi.box.y1 * spatial_scale;
    const double x2 = roi.box.x2 * spatial_scale, y2 = roi.box.y2 * spatial_scale;
    if (!(x2 > x1 && y2 > y1))
      throw ValidationError("roi_align: degenerate RoI with zero area after scaling");
    r.batch_of[ri] = roi.batch_index;
    const double bw = (x2 - x1) / static_cast<double>(out_w);
    const double bh = (y2 - y1) / static_cast<double>(out_h);
    BilinearTap* taps = r.taps.data() + ri * bins * 4;
    for (std::size_t by = 0; by < out_h; ++by)
      for (std::size_t bx = 0; bx < out_w; ++bx)
        for (std::size_t s = 0; s < 4; ++s) {
          const double fy = y1 + (static_cast<double>(by) + (s < 2 ? 0.25 : 0.75)) * bh;
          const double fx = x1 + (static_cast<double>(bx) + (s % 2 == 0 ? 0.25 : 0.75)) * bw;
          taps[(by * out_w + bx) * 4 + s] = bilinear_tap(fx, fy, H, W);
        }
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = features.data() + (roi.batch_index * C + c) * H * W;
      T* out = r.output.data() + (ri * C + c) * bins;
      std::uint8_t* chosen = r.chosen.data() + (ri * C + c) * bins;
      for (std::size_t b = 0; b < bins; ++b) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint8_t arg = 0;
        for (std::uint8_t s = 0; s < 4; ++s) {
          const BilinearTap& t = taps[b * 4 + s];
          const T v = static_cast<T>(t.weight[0]) * plane[t.index[0]] +
                      static_cast<T>(t.weight[1]) * plane[t.index[1]] +
                      static_cast<T>(t.weight[2]) * plane[t.index[2]] +
                      static_cast<T>(t.weight[3]) * plane[t.index[3]];
          if (v > best) {
            best = v;
            arg = s;
          }
        }
        out[b] = best;
        chosen[b] = arg;
      }
    }
  }
  return r;
}

/// Single-RoI form returning (C, out_h, out_w).
template <typename T>
Tensor<T> roi_align(const Tensor<T>& features, const RoI& roi, std::size_t out_h, std::size_t out_w,
                    double spatial_scale) {
  auto r = roi_align(features, std::span<const RoI>(&roi, 1), out_h, out_w, spatial_scale);
  return r.output.reshaped({features.dim(1), out_h, out_w});
}

/// Scatters each output gradient through the bilinear weights of its argmax sample.
template <typename T>
Tensor<T> roi_align_backward(const RoiAlignResult<T>& forward, const Tensor<T>& grad_output) {
  require_same_dims(forward.output, grad_output, "roi_align_backward");
  const std::size_t C = forward.feature_dims[1], H = forward.feature_dims[2],
                    W = forward.feature_dims[3];
  const std::size_t R = grad_output.dim(0), bins = grad_output.dim(2) * grad_output.dim(3);
  Tensor<T> dx(forward.feature_dims);
  for (std::size_t ri = 0; ri < R; ++ri) {
    const BilinearTap* taps = forward.taps.data() + ri * bins * 4;
    for (std::size_t c = 0; c < C; ++c) {
      T* plane = dx.data() + (forward.batch_of[ri] * C + c) * H * W;
      const T* dy = grad_output.data() + (ri * C + c) * bins;
      const std::uint8_t* chosen = forward.chosen.data() + (ri * C + c) * bins;
      for (std::size_t b = 0; b < bins; ++b) {
        const BilinearTap& t = taps[b * 4 + chosen[b]];
        for (int k = 0; k < 4; ++k) plane[t.index[k]] += static_cast<T>(t.weight[k]) * dy[b];
      }
    }
  }
  return dx;
}

}  // namespace affkit
