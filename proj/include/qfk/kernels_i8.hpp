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
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "qfk/graph.hpp"
#include "qfk/kernels_f32.hpp"
#include "qfk/tensor.hpp"

// INT8 operator semantics shared by the node-by-node interpreter and the
// compiled plan executor, plus the packed kernels the executor runs.
namespace qfk::kernels {

using SigmoidTable = std::array<std::int8_t, 256>;

inline SigmoidTable sigmoid_table(const QuantParams& in, const QuantParams& out) {
  SigmoidTable t{};
  for (int q = -128; q <= 127; ++q)
    t[static_cast<std::size_t>(q + 128)] = quantize_value(sigmoid_value(dequantize_value(static_cast<std::int8_t>(q), in)), out);
  return t;
}

inline std::int8_t lookup(const SigmoidTable& t, std::int8_t q) { return t[static_cast<std::size_t>(q + 128)]; }

/// Accumulator multiplier for conv/dense: input_scale * weight_scale / output_scale.
inline FixedPointMultiplier accumulator_multiplier(const QuantParams& in, double w_scale, const QuantParams& out) {
  return FixedPointMultiplier::from_real(in.scale * w_scale / out.scale);
}

/// Multiplier for moving codes between two activation parameter sets.
inline FixedPointMultiplier rescale_multiplier(const QuantParams& in, const QuantParams& out) {
  return FixedPointMultiplier::from_real(in.scale / out.scale);
}

inline FixedPointMultiplier average_multiplier(const QuantParams& in, std::int64_t count, const QuantParams& out) {
  return FixedPointMultiplier::from_real(in.scale / (static_cast<double>(count) * out.scale));
}

inline std::int8_t rescale_code(std::int8_t q, const QuantParams& in, const FixedPointMultiplier& m,
                                const QuantParams& out) {
  return requantize_fixed(static_cast<std::int64_t>(q) - in.zero_point, m, out.zero_point);
}

/// Softmax over `channels` codes spaced `stride` apart.
inline void softmax_pixel_i8(const std::int8_t* in, std::int64_t stride, std::int64_t channels,
                             const QuantParams& in_qp, const QuantParams& out_qp, std::int8_t* out) {
  std::int32_t top = -128;
  for (std::int64_t c = 0; c < channels; ++c) top = std::max<std::int32_t>(top, in[c * stride]);
  double e[16];
  std::vector<double> big;
  double* ex = e;
  if (channels > 16) {
    big.resize(static_cast<std::size_t>(channels));
    ex = big.data();
  }
  double sum = 0;
  for (std::int64_t c = 0; c < channels; ++c) sum += ex[c] = std::exp(in_qp.scale * (in[c * stride] - top));
  for (std::int64_t c = 0; c < channels; ++c) out[c * stride] = quantize_value(ex[c] / sum, out_qp);
}

// --- Packed kernels ---------------------------------------------------------

/// Unrolls input patches into pair-interleaved int16 rows [K2][P][2] with
/// K = C*kh*kw, K2 = ceil(K/2), P = Ho*Wo. Padding takes the input zero point;
/// the filler half of an odd last pair is 0.
inline void im2row_i8(const std::int8_t* in, std::int64_t c, std::int64_t h, std::int64_t w,
                      const op::Conv2D& a, std::int64_t ho, std::int64_t wo, std::int8_t pad,
                      std::int16_t* rows) {
  const std::int64_t p_count = ho * wo;
  const std::int64_t k_count = c * a.kernel_h * a.kernel_w;
  const std::int64_t taps = a.kernel_h * a.kernel_w;
  std::vector<std::int8_t> line(static_cast<std::size_t>(2 * p_count));
  auto fill_line = [&](std::int64_t k, std::int8_t* dst_line) {
    const std::int64_t ci = k / taps, ky = k % taps / a.kernel_w, kx = k % a.kernel_w;
    const auto [lo, hi] = valid_span(wo, w, a.stride, a.padding, kx);
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      std::int8_t* dst = dst_line + oy * wo;
      const std::int64_t iy = oy * a.stride - a.padding + ky;
      if (iy < 0 || iy >= h) {
        std::fill(dst, dst + wo, pad);
        continue;
      }
      const std::int8_t* src = in + (ci * h + iy) * w - a.padding + kx;
      std::fill(dst, dst + lo, pad);
      if (a.stride == 1)
        std::copy(src + lo, src + hi, dst + lo);
      else
        for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * a.stride];
      std::fill(dst + hi, dst + wo, pad);
    }
  };
  std::int8_t* first = line.data();
  std::int8_t* second = line.data() + p_count;
  for (std::int64_t k = 0; k < k_count; k += 2) {
    fill_line(k, first);
    if (k + 1 < k_count)
      fill_line(k + 1, second);
    else
      std::fill(second, second + p_count, std::int8_t{0});
    std::int16_t* dst = rows + k * p_count;
    for (std::int64_t p = 0; p < p_count; ++p) {
      dst[2 * p] = first[p];
      dst[2 * p + 1] = second[p];
    }
  }
}

template <class A, class B>
std::int32_t dot_i8(const A* a, const B* b, std::int64_t n) {
  std::int32_t acc = 0;
  for (std::int64_t i = 0; i < n; ++i) acc += static_cast<std::int32_t>(a[i]) * static_cast<std::int32_t>(b[i]);
  return acc;
}

/// Per-output-channel constants folded out of the inner loop.
struct PackedLinear {
  std::vector<std::int16_t> weight;  // [O][k_stride], int8 values widened, zero padded
  std::vector<std::int32_t> bias_minus_zp;  // bias[o] - zp_in * sum_k w[o][k]
  std::int64_t out_channels = 0;
  std::int64_t k_count = 0;
  std::int64_t k_stride = 0;  // k_count rounded up to even
  FixedPointMultiplier multiplier;
  std::int32_t out_zero_point = 0;
  std::int8_t floor_code = -128;  // zero point when a ReLU is fused, else -128
  bool vector_requant = false;     // accumulator + bias provably fits int32 and shift >= 32

  static PackedLinear make(const TensorI8& w, const std::vector<std::int32_t>& bias, const QuantParams& in,
                           const QuantParams& out, bool relu) {
    PackedLinear p;
    p.out_channels = w.shape()[0];
    p.k_count = w.shape().volume() / p.out_channels;
    p.k_stride = p.k_count + p.k_count % 2;
    p.weight.assign(static_cast<std::size_t>(p.out_channels * p.k_stride), 0);
    p.bias_minus_zp.resize(static_cast<std::size_t>(p.out_channels));
    const auto src = w.q.values();
    for (std::int64_t o = 0; o < p.out_channels; ++o) {
      std::int64_t sum = 0;
      for (std::int64_t k = 0; k < p.k_count; ++k) {
        const std::int8_t v = src[static_cast<std::size_t>(o * p.k_count + k)];
        p.weight[static_cast<std::size_t>(o * p.k_stride + k)] = v;
        sum += v;
      }
      p.bias_minus_zp[static_cast<std::size_t>(o)] =
          static_cast<std::int32_t>(bias[static_cast<std::size_t>(o)] - in.zero_point * sum);
    }
    p.multiplier = accumulator_multiplier(in, w.qp.scale, out);
    p.out_zero_point = out.zero_point;
    p.floor_code = relu ? static_cast<std::int8_t>(out.zero_point) : std::int8_t{-128};
    std::int64_t bias_bound = 0;
    for (std::int32_t b : p.bias_minus_zp) bias_bound = std::max<std::int64_t>(bias_bound, std::abs(std::int64_t{b}));
    const std::int64_t dot_bound = p.k_count * 128 * 127;
    p.vector_requant = p.multiplier.shift >= 32 && p.multiplier.shift < 62 &&
                       dot_bound + bias_bound < (std::int64_t{1} << 31);
    return p;
  }

  std::int8_t finish(std::int32_t dot, std::int64_t o) const {
    const std::int8_t q = requantize_fixed(static_cast<std::int64_t>(dot) + bias_minus_zp[static_cast<std::size_t>(o)],
                                           multiplier, out_zero_point);
    return std::max(q, floor_code);
  }
};

/// rows: im2row_i8 layout; acc: scratch [O][P]; out: [O][P].
inline void gemm_rows_i8(const PackedLinear& p, const std::int16_t* rows, std::int64_t p_count,
                         std::int32_t* acc, std::int8_t* out) {
  const std::int64_t k2 = p.k_stride / 2;
  const std::int64_t done = simd::gemm_pairs_blocks(p.weight.data(), rows, p.out_channels, k2, p_count, acc);
  for (std::int64_t o = 0; o < p.out_channels; ++o) {
    const std::int16_t* wr = p.weight.data() + o * p.k_stride;
    std::int32_t* a = acc + o * p_count;
    std::fill(a + done, a + p_count, 0);
    for (std::int64_t k = 0; k < k2; ++k) {
      const std::int32_t w0 = wr[2 * k], w1 = wr[2 * k + 1];
      const std::int16_t* r = rows + k * p_count * 2;
      for (std::int64_t px = done; px < p_count; ++px) a[px] += r[2 * px] * w0 + r[2 * px + 1] * w1;
    }
    std::int64_t px = 0;
    if (p.vector_requant)
      px = simd::requant_blocks(acc + o * p_count, p_count, p.bias_minus_zp[static_cast<std::size_t>(o)],
                                p.multiplier.multiplier, p.multiplier.shift, p.out_zero_point, p.floor_code,
                                out + o * p_count);
    for (; px < p_count; ++px) out[o * p_count + px] = p.finish(acc[o * p_count + px], o);
  }
}

}  // namespace qfk::kernels
