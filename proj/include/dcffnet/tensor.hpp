#pragma once

// Dense channels-first tensors plus the handful of numeric kernels the whole
// network is composed from. Kernels are pure functions; accumulation order is
// fixed (channels outermost, kernel rows, then kernel columns) so that naive
// reference implementations can be compared bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <vector>

#include "dcffnet/base.hpp"
#include "dcffnet/rng.hpp"

namespace dcff {

inline int64_t checked_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    DCFF_CHECK(e >= 1, "tensor extent must be >= 1, got shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

template <typename T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires f32 or f64");

  std::vector<int64_t> shape;
  std::vector<T> data;  // row-major, contiguous

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(checked_numel(shape)), T(0));
  }
  Tensor(std::vector<int64_t> s, T fill) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(checked_numel(shape)), fill);
  }
  Tensor(std::vector<int64_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    DCFF_CHECK(static_cast<int64_t>(data.size()) == checked_numel(shape),
               "tensor data length " + std::to_string(data.size()) +
                   " does not match shape " + shape_str(shape));
  }

  bool empty() const { return data.empty(); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  // (c, y, x) accessor for rank-3 feature maps.
  T& at(int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
  }
  T at(int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((c * shape[1] + y) * shape[2] + x)];
  }
  // (o, c, y, x) accessor for rank-4 conv weights.
  T& at4(int64_t o, int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>(((o * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }
  T at4(int64_t o, int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>(((o * shape[1] + c) * shape[2] + y) * shape[3] + x)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const {
    T m = std::numeric_limits<T>::max();
    for (T v : data) m = std::min(m, v);
    return m;
  }
  T max_value() const {
    T m = std::numeric_limits<T>::lowest();
    for (T v : data) m = std::max(m, v);
    return m;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
  for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, stddev));
}

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  int in_channels = 1;
  int out_channels = 1;
};

inline void validate_conv_spec(const ConvSpec& s) {
  DCFF_CHECK(s.kernel_h >= 1 && s.kernel_h % 2 == 1, "conv kernel_h must be odd positive");
  DCFF_CHECK(s.kernel_w >= 1 && s.kernel_w % 2 == 1, "conv kernel_w must be odd positive");
  DCFF_CHECK(s.stride >= 1, "conv stride must be positive");
  DCFF_CHECK(s.padding >= 0, "conv padding must be non-negative");
  DCFF_CHECK(s.in_channels >= 1 && s.out_channels >= 1, "conv channels must be positive");
}

inline int64_t conv_out_extent(int64_t in, int kernel, int stride, int padding) {
  return (in + 2 * static_cast<int64_t>(padding) - kernel) / stride + 1;
}

// Sliding-window cross-correlation (tracking convention: the kernel is not
// flipped). Zero padding. Accumulation runs channels -> kernel row -> kernel
// column; out-of-bounds taps are skipped, never added as literal zeros.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvSpec& spec) {
  validate_conv_spec(spec);
  DCFF_CHECK(input.rank() == 3, "conv2d: input must be CxHxW, got " + shape_str(input.shape));
  DCFF_CHECK(weight.rank() == 4, "conv2d: weight must be OxCxKhxKw, got " + shape_str(weight.shape));
  const int64_t C = input.shape[0], H = input.shape[1], W = input.shape[2];
  const int64_t O = weight.shape[0];
  DCFF_CHECK(weight.shape[1] == C,
             "conv2d: input channels " + shape_str(input.shape) + " do not match weight " +
                 shape_str(weight.shape));
  DCFF_CHECK(weight.shape[2] == spec.kernel_h && weight.shape[3] == spec.kernel_w &&
                 spec.in_channels == C && spec.out_channels == O,
             "conv2d: spec disagrees with weight " + shape_str(weight.shape));
  DCFF_CHECK(bias.empty() || (bias.rank() == 1 && bias.shape[0] == O),
             "conv2d: bias must have one entry per output channel, got " + shape_str(bias.shape));

  const int64_t Ho = conv_out_extent(H, spec.kernel_h, spec.stride, spec.padding);
  const int64_t Wo = conv_out_extent(W, spec.kernel_w, spec.stride, spec.padding);
  DCFF_CHECK(Ho >= 1 && Wo >= 1,
             "conv2d: output extent < 1 for input " + shape_str(input.shape) + " weight " +
                 shape_str(weight.shape) + " stride " + std::to_string(spec.stride) +
                 " padding " + std::to_string(spec.padding));

  Tensor<T> out({O, Ho, Wo});
  const int64_t s = spec.stride, p = spec.padding;
  const int64_t kh = spec.kernel_h, kw = spec.kernel_w;
  for (int64_t o = 0; o < O; ++o) {
    for (int64_t oy = 0; oy < Ho; ++oy) {
      for (int64_t ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * s - p + ky;
            if (iy < 0 || iy >= H) continue;
            const int64_t kx_lo = std::max<int64_t>(0, p - ox * s);
            const int64_t kx_hi = std::min<int64_t>(kw, W + p - ox * s);
            const T* xrow = &input.data[static_cast<size_t>((c * H + iy) * W + ox * s - p)];
            const T* wrow = &weight.data[static_cast<size_t>(((o * C + c) * kh + ky) * kw)];
            for (int64_t kx = kx_lo; kx < kx_hi; ++kx) acc += wrow[kx] * xrow[kx];
          }
        }
        if (!bias.empty()) acc += bias.data[static_cast<size_t>(o)];
        out.at(o, oy, ox) = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Depthwise cross-correlation

// Valid per-channel correlation of `search` with `templ`. Parameter-free,
// channel count preserved. Accumulation runs kernel row -> kernel column.
template <typename T>
Tensor<T> depthwise_xcorr(const Tensor<T>& search, const Tensor<T>& templ) {
  DCFF_CHECK(search.rank() == 3 && templ.rank() == 3,
             "depthwise_xcorr: operands must be CxHxW, got " + shape_str(search.shape) + " and " +
                 shape_str(templ.shape));
  const int64_t C = search.shape[0], Hs = search.shape[1], Ws = search.shape[2];
  const int64_t Ht = templ.shape[1], Wt = templ.shape[2];
  DCFF_CHECK(templ.shape[0] == C, "depthwise_xcorr: channel mismatch between search " +
                                      shape_str(search.shape) + " and template " +
                                      shape_str(templ.shape));
  DCFF_CHECK(Ht <= Hs && Wt <= Ws, "depthwise_xcorr: template " + shape_str(templ.shape) +
                                       " larger than search " + shape_str(search.shape));

  const int64_t Ho = Hs - Ht + 1, Wo = Ws - Wt + 1;
  Tensor<T> out({C, Ho, Wo});
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t oy = 0; oy < Ho; ++oy) {
      for (int64_t ox = 0; ox < Wo; ++ox) {
        T acc = 0;
        for (int64_t ky = 0; ky < Ht; ++ky) {
          const T* srow = &search.data[static_cast<size_t>((c * Hs + oy + ky) * Ws + ox)];
          const T* trow = &templ.data[static_cast<size_t>((c * Ht + ky) * Wt)];
          for (int64_t kx = 0; kx < Wt; ++kx) acc += srow[kx] * trow[kx];
        }
        out.at(c, oy, ox) = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trilinear resize

// Per-axis align-corners stencil: out index -> (lo, hi, fraction).
struct AxisStencil {
  int64_t lo, hi;
  double frac;
};

inline std::vector<AxisStencil> resize_stencil(int64_t in, int64_t out) {
  std::vector<AxisStencil> st(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    double src = (out == 1) ? 0.0
                            : static_cast<double>(i) * static_cast<double>(in - 1) /
                                  static_cast<double>(out - 1);
    int64_t lo = static_cast<int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    int64_t hi = std::min<int64_t>(lo + 1, in - 1);
    st[static_cast<size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return st;
}

// Linear interpolation along all three axes, align-corners convention. With
// an unchanged channel extent this degenerates to per-channel bilinear.
template <typename T>
Tensor<T> resize_trilinear(const Tensor<T>& input, const std::vector<int64_t>& target_shape) {
  DCFF_CHECK(input.rank() == 3, "resize_trilinear: input must be CxHxW, got " + shape_str(input.shape));
  DCFF_CHECK(target_shape.size() == 3, "resize_trilinear: target shape must have rank 3");
  for (int64_t e : target_shape)
    DCFF_CHECK(e >= 1, "resize_trilinear: target extents must be >= 1, got " + shape_str(target_shape));

  if (target_shape == input.shape) return input;  // bitwise identity

  const auto sc = resize_stencil(input.shape[0], target_shape[0]);
  const auto sy = resize_stencil(input.shape[1], target_shape[1]);
  const auto sx = resize_stencil(input.shape[2], target_shape[2]);

  Tensor<T> out(target_shape);
  for (int64_t c = 0; c < target_shape[0]; ++c) {
    const auto& ac = sc[static_cast<size_t>(c)];
    for (int64_t y = 0; y < target_shape[1]; ++y) {
      const auto& ay = sy[static_cast<size_t>(y)];
      for (int64_t x = 0; x < target_shape[2]; ++x) {
        const auto& ax = sx[static_cast<size_t>(x)];
        double v = 0.0;
        double corner_min = std::numeric_limits<double>::max();
        double corner_max = std::numeric_limits<double>::lowest();
        for (int dc = 0; dc < 2; ++dc) {
          const double wc = dc ? ac.frac : 1.0 - ac.frac;
          if (wc == 0.0) continue;
          const int64_t ic = dc ? ac.hi : ac.lo;
          for (int dy = 0; dy < 2; ++dy) {
            const double wy = dy ? ay.frac : 1.0 - ay.frac;
            if (wy == 0.0) continue;
            const int64_t iy = dy ? ay.hi : ay.lo;
            for (int dx = 0; dx < 2; ++dx) {
              const double wx = dx ? ax.frac : 1.0 - ax.frac;
              if (wx == 0.0) continue;
              const int64_t ix = dx ? ax.hi : ax.lo;
              const double corner = static_cast<double>(input.at(ic, iy, ix));
              v += wc * wy * wx * corner;
              corner_min = std::min(corner_min, corner);
              corner_max = std::max(corner_max, corner);
            }
          }
        }
        // clamp away blend round-off so constants survive exactly and the
        // output never leaves the input range
        out.at(c, y, x) = static_cast<T>(std::min(std::max(v, corner_min), corner_max));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  DCFF_CHECK(a.same_shape(b),
             "add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = a;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return out;
}

// Per-channel affine gamma[c]*x + beta[c]. Stands in for inference-mode batch
// normalization with learnable scale/shift.
template <typename T>
Tensor<T> scale_shift(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  DCFF_CHECK(x.rank() == 3, "scale_shift: input must be CxHxW, got " + shape_str(x.shape));
  const int64_t C = x.shape[0], HW = x.shape[1] * x.shape[2];
  DCFF_CHECK(gamma.rank() == 1 && gamma.shape[0] == C && beta.rank() == 1 && beta.shape[0] == C,
             "scale_shift: gamma/beta " + shape_str(gamma.shape) + "/" + shape_str(beta.shape) +
                 " must match channel count of " + shape_str(x.shape));
  Tensor<T> out = x;
  for (int64_t c = 0; c < C; ++c) {
    const T g = gamma.data[static_cast<size_t>(c)], b = beta.data[static_cast<size_t>(c)];
    T* row = &out.data[static_cast<size_t>(c * HW)];
    for (int64_t i = 0; i < HW; ++i) row[i] = g * row[i] + b;
  }
  return out;
}

}  // namespace dcff
