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

#include <functional>
#include <vector>

#include "qfk/kernels_i8.hpp"
#include "qfk/quantizer.hpp"

namespace qfk {

namespace detail {

using I8 = Tensor<std::int8_t>;

// Direct loops, no packing: the yardstick the compiled plan is checked against.
inline I8 conv_i8_naive(const I8& x, const QuantParams& in_qp, const op::Conv2D& a, const QNode& n, bool relu) {
  const auto& s = x.shape();
  const auto& w = n.weight->q;
  const std::int64_t ho = (s[2] + 2 * a.padding - a.kernel_h) / a.stride + 1;
  const std::int64_t wo = (s[3] + 2 * a.padding - a.kernel_w) / a.stride + 1;
  const auto m = kernels::accumulator_multiplier(in_qp, n.weight->qp.scale, n.out_qp);
  I8 out(Shape{s[0], a.out_channels, ho, wo});
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t o = 0; o < a.out_channels; ++o)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          std::int64_t acc = n.bias[static_cast<std::size_t>(o)];
          for (std::int64_t c = 0; c < s[1]; ++c)
            for (std::int64_t ky = 0; ky < a.kernel_h; ++ky)
              for (std::int64_t kx = 0; kx < a.kernel_w; ++kx) {
                const std::int64_t iy = oy * a.stride - a.padding + ky;
                const std::int64_t ix = ox * a.stride - a.padding + kx;
                if (iy < 0 || iy >= s[2] || ix < 0 || ix >= s[3]) continue;
                acc += static_cast<std::int64_t>(w.at(o, c, ky, kx)) * (x.at(b, c, iy, ix) - in_qp.zero_point);
              }
          std::int8_t q = requantize_fixed(acc, m, n.out_qp.zero_point);
          if (relu) q = std::max<std::int8_t>(q, static_cast<std::int8_t>(n.out_qp.zero_point));
          out.at(b, o, oy, ox) = q;
        }
  return out;
}

inline I8 dense_i8_naive(const I8& x, const QuantParams& in_qp, const QNode& n, bool sigmoid,
                         const QuantParams& dense_qp) {
  const std::int64_t batch = x.shape()[0];
  const std::int64_t in_f = x.shape().volume() / batch;
  const std::int64_t out_f = n.weight->shape()[0];
  const auto m = kernels::accumulator_multiplier(in_qp, n.weight->qp.scale, dense_qp);
  const auto table = kernels::sigmoid_table(dense_qp, n.out_qp);
  I8 out(Shape{batch, out_f});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t o = 0; o < out_f; ++o) {
      std::int64_t acc = n.bias[static_cast<std::size_t>(o)];
      for (std::int64_t i = 0; i < in_f; ++i)
        acc += static_cast<std::int64_t>(n.weight->q[static_cast<std::size_t>(o * in_f + i)]) *
               (x[static_cast<std::size_t>(b * in_f + i)] - in_qp.zero_point);
      std::int8_t q = requantize_fixed(acc, m, dense_qp.zero_point);
      if (sigmoid) q = kernels::lookup(table, q);
      out[static_cast<std::size_t>(b * out_f + o)] = q;
    }
  return out;
}

inline I8 maxpool_i8(const I8& x, const op::MaxPool2D& a) {
  const auto& s = x.shape();
  const std::int64_t ho = (s[2] - a.kernel) / a.stride + 1;
  const std::int64_t wo = (s[3] - a.kernel) / a.stride + 1;
  I8 out(Shape{s[0], s[1], ho, wo});
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t c = 0; c < s[1]; ++c)
      for (std::int64_t oy = 0; oy < ho; ++oy)
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          std::int8_t m = -128;
          for (std::int64_t ky = 0; ky < a.kernel; ++ky)
            for (std::int64_t kx = 0; kx < a.kernel; ++kx)
              m = std::max(m, x.at(b, c, oy * a.stride + ky, ox * a.stride + kx));
          out.at(b, c, oy, ox) = m;
        }
  return out;
}

inline I8 concat_i8(const I8& a, const QuantParams& qa, const I8& b, const QuantParams& qb, const QuantParams& out_qp) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const auto ma = kernels::rescale_multiplier(qa, out_qp);
  const auto mb = kernels::rescale_multiplier(qb, out_qp);
  I8 out(Shape{sa[0], sa[1] + sb[1], sa[2], sa[3]});
  for (std::int64_t n = 0; n < sa[0]; ++n)
    for (std::int64_t c = 0; c < sa[1] + sb[1]; ++c)
      for (std::int64_t y = 0; y < sa[2]; ++y)
        for (std::int64_t x = 0; x < sa[3]; ++x)
          out.at(n, c, y, x) = c < sa[1] ? kernels::rescale_code(a.at(n, c, y, x), qa, ma, out_qp)
                                         : kernels::rescale_code(b.at(n, c - sa[1], y, x), qb, mb, out_qp);
  return out;
}

inline I8 gap_i8(const I8& x, const QuantParams& in_qp, const QuantParams& out_qp) {
  const auto& s = x.shape();
  const std::int64_t plane = s[2] * s[3];
  const auto m = kernels::average_multiplier(in_qp, plane, out_qp);
  I8 out(Shape{s[0], s[1], 1, 1});
  for (std::int64_t i = 0; i < s[0] * s[1]; ++i) {
    std::int64_t acc = 0;
    for (std::int64_t j = 0; j < plane; ++j) acc += x[static_cast<std::size_t>(i * plane + j)] - in_qp.zero_point;
    out[static_cast<std::size_t>(i)] = requantize_fixed(acc, m, out_qp.zero_point);
  }
  return out;
}

inline I8 softmax_i8(const I8& x, const QuantParams& in_qp, const QuantParams& out_qp) {
  const auto& s = x.shape();
  const std::int64_t plane = s[2] * s[3];
  I8 out(s);
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t p = 0; p < plane; ++p)
      kernels::softmax_pixel_i8(x.data() + b * s[1] * plane + p, plane, s[1], in_qp, out_qp,
                                out.data() + b * s[1] * plane + p);
  return out;
}

}  // namespace detail

using QuantizedObserver = std::function<void(int node_id, const TensorI8& value)>;

/// Executes a quantized graph node by node with straightforward loops.
/// Returns outputs in output_ids order.
inline std::vector<TensorI8> run_quantized_reference(const QuantizedGraph& qg, const TensorI8& batch,
                                                     const QuantizedObserver& observe = {}) {
  check(batch.qp == qg.input_qparams(), Errc::kInvalidArgument, "input quant params do not match the graph input");
  infer_shapes(structure_of(qg), batch.shape());
  std::vector<detail::I8> values(qg.size());
  for (const auto& n : qg.nodes) {
    const auto id = static_cast<std::size_t>(n.id);
    auto in = [&](std::size_t i) -> const detail::I8& { return values[static_cast<std::size_t>(n.inputs[i])]; };
    auto in_qp = [&](std::size_t i) -> const QuantParams& { return qg.node(n.inputs[i]).out_qp; };
    values[id] = std::visit(
        overloaded{
            [&](const op::Input&) { return batch.q; },
            [&](const op::Conv2D& c) { return detail::conv_i8_naive(in(0), in_qp(0), c, n, false); },
            [&](const op::ConvBiasReLU& c) { return detail::conv_i8_naive(in(0), in_qp(0), c.conv, n, true); },
            [&](const op::ReLU&) {
              auto v = in(0);
              for (auto& q : v.values()) q = std::max<std::int8_t>(q, static_cast<std::int8_t>(n.out_qp.zero_point));
              return v;
            },
            [&](const op::MaxPool2D& p) { return detail::maxpool_i8(in(0), p); },
            [&](const op::Upsample2xNearest&) { return kernels::upsample2x(in(0)); },
            [&](const op::Concat&) { return detail::concat_i8(in(0), in_qp(0), in(1), in_qp(1), n.out_qp); },
            [&](const op::GlobalAvgPool&) { return detail::gap_i8(in(0), in_qp(0), n.out_qp); },
            [&](const op::Dense&) { return detail::dense_i8_naive(in(0), in_qp(0), n, false, n.out_qp); },
            [&](const op::DenseSigmoid&) {
              check(n.inner_qp.has_value(), Errc::kInvalidArgument, "DenseSigmoid without inner quant params");
              return detail::dense_i8_naive(in(0), in_qp(0), n, true, *n.inner_qp);
            },
            [&](const op::Sigmoid&) {
              auto v = in(0);
              const auto t = kernels::sigmoid_table(in_qp(0), n.out_qp);
              for (auto& q : v.values()) q = kernels::lookup(t, q);
              return v;
            },
            [&](const op::SoftmaxPerPixel&) { return detail::softmax_i8(in(0), in_qp(0), n.out_qp); },
            [&](const op::BatchNorm&) -> detail::I8 { fail(Errc::kInvalidArgument, "BatchNorm in a quantized graph"); },
        },
        n.kind);
    if (observe) observe(n.id, TensorI8{values[id], n.out_qp});
  }
  std::vector<TensorI8> out;
  for (int o : qg.output_ids) out.push_back(TensorI8{values[static_cast<std::size_t>(o)], qg.node(o).out_qp});
  return out;
}

}  // namespace qfk
