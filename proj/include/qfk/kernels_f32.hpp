/* Copyright 2026 The qfk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "qfk/graph.hpp"
#include "qfk/simd.hpp"
#include "qfk/tensor.hpp"

// Single-precision layer kernels. Layout is NCHW throughout.
namespace qfk::kernels {

/// Output columns [lo, hi) whose tap kx lands inside a row of width w.
inline std::pair<std::int64_t, std::int64_t> valid_span(std::int64_t wo, std::int64_t w, std::int64_t stride,
                                                        std::int64_t padding, std::int64_t kx) {
  std::int64_t lo = 0;
  while (lo < wo && lo * stride - padding + kx < 0) ++lo;
  std::int64_t hi = wo;
  while (hi > lo && (hi - 1) * stride - padding + kx >= w) --hi;
  return {lo, hi};
}

/// Unrolls padded input patches into a [K][P] matrix, K = C*kh*kw, P = Ho*Wo.
inline void im2col_f32(const float* in, std::int64_t c, std::int64_t h, std::int64_t w,
                       const op::Conv2D& a, std::int64_t ho, std::int64_t wo, float* col) {
  const std::int64_t p_count = ho * wo;
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t ky = 0; ky < a.kernel_h; ++ky)
      for (std::int64_t kx = 0; kx < a.kernel_w; ++kx) {
        float* row = col + ((ci * a.kernel_h + ky) * a.kernel_w + kx) * p_count;
        const auto [lo, hi] = valid_span(wo, w, a.stride, a.padding, kx);
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * a.stride - a.padding + ky;
          float* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0f);
            continue;
          }
          const float* src = in + (ci * h + iy) * w - a.padding + kx;
          std::fill(dst, dst + lo, 0.0f);
          if (a.stride == 1)
            std::copy(src + lo, src + hi, dst + lo);
          else
            for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * a.stride];
          std::fill(dst + hi, dst + wo, 0.0f);
        }
      }
}

/// Portable axpy-form kernel over pixels [p_begin, p_count).
inline void gemm_f32_range(const float* weight, const float* bias, const float* col, std::int64_t out_c,
                           std::int64_t k_count, std::int64_t p_count, std::int64_t p_begin, float* out) {
  constexpr std::int64_t kTile = 128;
  alignas(64) float acc[4][kTile];
  for (std::int64_t p0 = p_begin; p0 < p_count; p0 += kTile) {
    const std::int64_t len = std::min(kTile, p_count - p0);
    std::int64_t o = 0;
    for (; o + 4 <= out_c; o += 4) {
      for (int r = 0; r < 4; ++r) std::fill(acc[r], acc[r] + len, bias ? bias[o + r] : 0.0f);
      const float* w0 = weight + (o + 0) * k_count;
      const float* w1 = weight + (o + 1) * k_count;
      const float* w2 = weight + (o + 2) * k_count;
      const float* w3 = weight + (o + 3) * k_count;
      for (std::int64_t k = 0; k < k_count; ++k) {
        const float* c = col + k * p_count + p0;
        const float a0 = w0[k], a1 = w1[k], a2 = w2[k], a3 = w3[k];
        for (std::int64_t j = 0; j < len; ++j) {
          const float v = c[j];
          acc[0][j] += a0 * v;
          acc[1][j] += a1 * v;
          acc[2][j] += a2 * v;
          acc[3][j] += a3 * v;
        }
      }
      for (int r = 0; r < 4; ++r) std::copy(acc[r], acc[r] + len, out + (o + r) * p_count + p0);
    }
    for (; o < out_c; ++o) {
      std::fill(acc[0], acc[0] + len, bias ? bias[o] : 0.0f);
      const float* wr = weight + o * k_count;
      for (std::int64_t k = 0; k < k_count; ++k) {
        const float* c = col + k * p_count + p0;
        const float a0 = wr[k];
        for (std::int64_t j = 0; j < len; ++j) acc[0][j] += a0 * c[j];
      }
      std::copy(acc[0], acc[0] + len, out + o * p_count + p0);
    }
  }
}

/// out[O][P] = weight[O][K] * col[K][P] + bias.
inline void gemm_f32(const float* weight, const float* bias, const float* col, std::int64_t out_c,
                     std::int64_t k_count, std::int64_t p_count, float* out) {
  const std::int64_t done = simd::gemm_f32_blocks(weight, bias, col, out_c, k_count, p_count, out);
  gemm_f32_range(weight, bias, col, out_c, k_count, p_count, done, out);
}

inline TensorF32 conv2d(const TensorF32& x, const op::Conv2D& a, const TensorF32& weight,
                        const TensorF32* bias) {
  const auto& s = x.shape();
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::int64_t ho = (h + 2 * a.padding - a.kernel_h) / a.stride + 1;
  const std::int64_t wo = (w + 2 * a.padding - a.kernel_w) / a.stride + 1;
  const std::int64_t k_count = c * a.kernel_h * a.kernel_w;
  const std::int64_t p_count = ho * wo;
  TensorF32 out(Shape{n, a.out_channels, ho, wo});
  const bool direct = a.kernel_h == 1 && a.kernel_w == 1 && a.stride == 1 && a.padding == 0;
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(k_count * p_count));
  for (std::int64_t b = 0; b < n; ++b) {
    const float* in = x.data() + b * c * h * w;
    if (!direct) im2col_f32(in, c, h, w, a, ho, wo, col.data());
    gemm_f32(weight.data(), bias ? bias->data() : nullptr, direct ? in : col.data(), a.out_channels,
             k_count, p_count, out.data() + b * a.out_channels * p_count);
  }
  return out;
}

inline TensorF32 batchnorm(const TensorF32& x, const WeightMap& w, double eps) {
  const auto& s = x.shape();
  const std::int64_t plane = s[2] * s[3];
  TensorF32 out(s);
  const auto& gamma = w.at("gamma");
  const auto& beta = w.at("beta");
  const auto& mean = w.at("mean");
  const auto& var = w.at("var");
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t c = 0; c < s[1]; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(var[c]) + eps);
      const float mul = static_cast<float>(gamma[c] * inv);
      const float add = static_cast<float>(beta[c] - mean[c] * gamma[c] * inv);
      const float* src = x.data() + (b * s[1] + c) * plane;
      float* dst = out.data() + (b * s[1] + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] * mul + add;
    }
  return out;
}

inline TensorF32 relu(TensorF32 x) {
  for (auto& v : x.values()) v = std::max(v, 0.0f);
  return x;
}

inline float sigmoid_value(double v) { return static_cast<float>(1.0 / (1.0 + std::exp(-v))); }

inline TensorF32 sigmoid(TensorF32 x) {
  for (auto& v : x.values()) v = sigmoid_value(v);
  return x;
}

inline TensorF32 maxpool(const TensorF32& x, const op::MaxPool2D& a) {
  const auto& s = x.shape();
  const std::int64_t ho = (s[2] - a.kernel) / a.stride + 1;
  const std::int64_t wo = (s[3] - a.kernel) / a.stride + 1;
  TensorF32 out(Shape{s[0], s[1], ho, wo});
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t c = 0; c < s[1]; ++c)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          float m = -std::numeric_limits<float>::infinity();
          for (std::int64_t ky = 0; ky < a.kernel; ++ky)
            for (std::int64_t kx = 0; kx < a.kernel; ++kx)
              m = std::max(m, x.at(b, c, oy * a.stride + ky, ox * a.stride + kx));
          out.at(b, c, oy, ox) = m;
        }
  return out;
}

template <class T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  const auto& s = x.shape();
  const std::int64_t h = s[2], w = s[3];
  Tensor<T> out(Shape{s[0], s[1], h * 2, w * 2});
  for (std::int64_t plane = 0; plane < s[0] * s[1]; ++plane) {
    const T* src = x.data() + plane * h * w;
    T* dst = out.data() + plane * h * w * 4;
    for (std::int64_t y = 0; y < h * 2; ++y) {
      const T* row = src + (y / 2) * w;
      T* d = dst + y * w * 2;
      for (std::int64_t xx = 0; xx < w * 2; ++xx) d[xx] = row[xx / 2];
    }
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const std::int64_t plane = sa[2] * sa[3];
  Tensor<T> out(Shape{sa[0], sa[1] + sb[1], sa[2], sa[3]});
  for (std::int64_t n = 0; n < sa[0]; ++n) {
    T* dst = out.data() + n * (sa[1] + sb[1]) * plane;
    std::copy_n(a.data() + n * sa[1] * plane, sa[1] * plane, dst);
    std::copy_n(b.data() + n * sb[1] * plane, sb[1] * plane, dst + sa[1] * plane);
  }
  return out;
}

inline TensorF32 global_avg_pool(const TensorF32& x) {
  const auto& s = x.shape();
  const std::int64_t plane = s[2] * s[3];
  TensorF32 out(Shape{s[0], s[1], 1, 1});
  for (std::int64_t i = 0; i < s[0] * s[1]; ++i) {
    double sum = 0;
    for (std::int64_t j = 0; j < plane; ++j) sum += x[static_cast<std::size_t>(i * plane + j)];
    out[static_cast<std::size_t>(i)] = static_cast<float>(sum / static_cast<double>(plane));
  }
  return out;
}

inline TensorF32 dense(const TensorF32& x, const TensorF32& weight, const TensorF32* bias) {
  const std::int64_t n = x.shape()[0];
  const std::int64_t in_f = x.shape().volume() / n;
  const std::int64_t out_f = weight.shape()[0];
  TensorF32 out(Shape{n, out_f});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t o = 0; o < out_f; ++o) {
      double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
      for (std::int64_t i = 0; i < in_f; ++i)
        acc += static_cast<double>(weight[static_cast<std::size_t>(o * in_f + i)]) * x[static_cast<std::size_t>(b * in_f + i)];
      out[static_cast<std::size_t>(b * out_f + o)] = static_cast<float>(acc);
    }
  return out;
}

/// Softmax across the channel axis, independently at every pixel.
inline TensorF32 softmax_channels(const TensorF32& x) {
  const auto& s = x.shape();
  const std::int64_t c = s[1], plane = s[2] * s[3];
  TensorF32 out(s);
  std::vector<double> e(static_cast<std::size_t>(c));
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t p = 0; p < plane; ++p) {
      const float* src = x.data() + b * c * plane + p;
      float* dst = out.data() + b * c * plane + p;
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < c; ++k) m = std::max(m, static_cast<double>(src[k * plane]));
      double sum = 0;
      for (std::int64_t k = 0; k < c; ++k) sum += e[static_cast<std::size_t>(k)] = std::exp(src[k * plane] - m);
      for (std::int64_t k = 0; k < c; ++k) dst[k * plane] = static_cast<float>(e[static_cast<std::size_t>(k)] / sum);
    }
  return out;
}

}  // namespace qfk::kernels
