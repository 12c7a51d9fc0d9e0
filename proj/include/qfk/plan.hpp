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

#include <atomic>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include "qfk/kernels_i8.hpp"
#include "qfk/quantizer.hpp"

namespace qfk {

/// Images per plan execution.
inline constexpr std::int64_t kPlanBatch = 8;

/// One fused operation of a compiled plan. Shapes include the batch dimension.
struct Instruction {
  std::string op;  // e.g. "ConvBiasReLU-INT8"
  int node_id = 0;
  NodeKind kind;
  std::vector<int> inputs;  // buffer ids
  int output = 0;           // buffer id
  int stage = 0;
  std::vector<Shape> in_shapes;
  Shape out_shape;
  std::vector<QuantParams> in_qps;
  QuantParams out_qp;
  // Main requantization step (accumulator or rescale); identity for pure data movement.
  FixedPointMultiplier requant;
  std::vector<FixedPointMultiplier> input_rescale;  // Concat only
  kernels::PackedLinear linear;                     // Conv / Dense
  kernels::SigmoidTable table{};                    // Sigmoid / DenseSigmoid
  QuantParams inner_qp;                             // DenseSigmoid intermediate
};

struct Plan {
  std::vector<Instruction> instructions;  // ordered by stage
  std::vector<std::int64_t> buffer_bytes;  // buffer id -> bytes
  std::int64_t peak_memory = 0;            // max bytes simultaneously live
  std::int64_t total_value_bytes = 0;      // bytes if every value had its own buffer
  int stages = 0;
  int input_buffer = 0;
  Shape input_shape;  // (8,C,H,W)
  QuantParams input_qp;
  std::vector<int> output_buffers;
  std::vector<Shape> output_shapes;
  std::vector<QuantParams> output_qps;
  std::vector<std::string> output_kinds;
};

namespace detail {

inline void exec_instruction(const Instruction& ins, std::vector<std::vector<std::int8_t>>& buffers) {
  const std::int8_t* in0 = buffers[static_cast<std::size_t>(ins.inputs.at(0))].data();
  std::int8_t* out = buffers[static_cast<std::size_t>(ins.output)].data();
  const Shape& is = ins.in_shapes[0];
  const Shape& os = ins.out_shape;
  const std::int64_t batch = is[0];

  auto conv = [&](const op::Conv2D& a) {
    const std::int64_t c = is[1], h = is[2], w = is[3];
    const std::int64_t ho = os[2], wo = os[3];
    const std::int64_t k_count = c * a.kernel_h * a.kernel_w;
    std::vector<std::int16_t> rows(static_cast<std::size_t>(ho * wo * (k_count + k_count % 2)));
    std::vector<std::int32_t> acc(static_cast<std::size_t>(os[1] * ho * wo));
    const auto pad = static_cast<std::int8_t>(ins.in_qps[0].zero_point);
    for (std::int64_t b = 0; b < batch; ++b) {
      kernels::im2row_i8(in0 + b * c * h * w, c, h, w, a, ho, wo, pad, rows.data());
      kernels::gemm_rows_i8(ins.linear, rows.data(), ho * wo, acc.data(), out + b * os[1] * ho * wo);
    }
  };
  auto dense = [&](bool sigmoid) {
    const std::int64_t in_f = is.volume() / batch;
    const std::int64_t out_f = os[1];
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t o = 0; o < out_f; ++o) {
        std::int8_t q = ins.linear.finish(kernels::dot_i8(ins.linear.weight.data() + o * ins.linear.k_stride, in0 + b * in_f, in_f), o);
        out[b * out_f + o] = sigmoid ? kernels::lookup(ins.table, q) : q;
      }
  };

  std::visit(
      overloaded{
          [&](const op::Conv2D& a) { conv(a); },
          [&](const op::ConvBiasReLU& a) { conv(a.conv); },
          [&](const op::Dense&) { dense(false); },
          [&](const op::DenseSigmoid&) { dense(true); },
          [&](const op::ReLU&) {
            const auto floor = static_cast<std::int8_t>(ins.out_qp.zero_point);
            for (std::int64_t i = 0; i < is.volume(); ++i) out[i] = std::max(in0[i], floor);
          },
          [&](const op::Sigmoid&) {
            for (std::int64_t i = 0; i < is.volume(); ++i) out[i] = kernels::lookup(ins.table, in0[i]);
          },
          [&](const op::MaxPool2D& a) {
            const std::int64_t h = is[2], w = is[3], ho = os[2], wo = os[3];
            for (std::int64_t plane = 0; plane < is[0] * is[1]; ++plane) {
              const std::int8_t* src = in0 + plane * h * w;
              std::int8_t* dst = out + plane * ho * wo;
              for (std::int64_t oy = 0; oy < ho; ++oy)
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                  std::int8_t m = -128;
                  for (std::int64_t ky = 0; ky < a.kernel; ++ky) {
                    const std::int8_t* row = src + (oy * a.stride + ky) * w + ox * a.stride;
                    for (std::int64_t kx = 0; kx < a.kernel; ++kx) m = std::max(m, row[kx]);
                  }
                  dst[oy * wo + ox] = m;
                }
            }
          },
          [&](const op::Upsample2xNearest&) {
            const std::int64_t h = is[2], w = is[3];
            for (std::int64_t plane = 0; plane < is[0] * is[1]; ++plane) {
              const std::int8_t* src = in0 + plane * h * w;
              std::int8_t* dst = out + plane * h * w * 4;
              for (std::int64_t y = 0; y < h; ++y) {
                std::int8_t* d0 = dst + (2 * y) * (2 * w);
                const std::int8_t* s = src + y * w;
                for (std::int64_t x = 0; x < w; ++x) d0[2 * x] = d0[2 * x + 1] = s[x];
                std::copy_n(d0, 2 * w, d0 + 2 * w);
              }
            }
          },
          [&](const op::Concat&) {
            const std::int8_t* in1 = buffers[static_cast<std::size_t>(ins.inputs.at(1))].data();
            const Shape& s1 = ins.in_shapes[1];
            const std::int64_t plane = is[2] * is[3];
            const std::int64_t n0 = is[1] * plane, n1 = s1[1] * plane;
            auto move = [&](const std::int8_t* src, std::int8_t* dst, std::int64_t count, std::size_t which) {
              const auto& qi = ins.in_qps[which];
              if (qi == ins.out_qp) {
                std::copy_n(src, count, dst);
                return;
              }
              const auto& m = ins.input_rescale[which];
              for (std::int64_t i = 0; i < count; ++i) dst[i] = kernels::rescale_code(src[i], qi, m, ins.out_qp);
            };
            for (std::int64_t b = 0; b < batch; ++b) {
              move(in0 + b * n0, out + b * (n0 + n1), n0, 0);
              move(in1 + b * n1, out + b * (n0 + n1) + n0, n1, 1);
            }
          },
          [&](const op::GlobalAvgPool&) {
            const std::int64_t plane = is[2] * is[3];
            const std::int64_t zp = ins.in_qps[0].zero_point;
            for (std::int64_t i = 0; i < is[0] * is[1]; ++i) {
              std::int64_t acc = 0;
              for (std::int64_t j = 0; j < plane; ++j) acc += in0[i * plane + j];
              out[i] = requantize_fixed(acc - zp * plane, ins.requant, ins.out_qp.zero_point);
            }
          },
          [&](const op::SoftmaxPerPixel&) {
            const std::int64_t plane = is[2] * is[3];
            for (std::int64_t b = 0; b < batch; ++b)
              for (std::int64_t p = 0; p < plane; ++p)
                kernels::softmax_pixel_i8(in0 + b * is[1] * plane + p, plane, is[1], ins.in_qps[0], ins.out_qp,
                                          out + b * is[1] * plane + p);
          },
          [&](const op::Input&) { fail(Errc::kInternal, "Input compiled as an instruction"); },
          [&](const op::BatchNorm&) { fail(Errc::kInternal, "BatchNorm compiled as an instruction"); },
      },
      ins.kind);
}

}  // namespace detail

/// Runs a compiled plan. Holds the buffer arena, so one executor per thread
/// of callers; the plan itself is shared read-only.
class Executor {
 public:
  /// `reverse_within_stage` runs same-stage instructions last to first; any
  /// order gives identical results.
  explicit Executor(const Plan& plan, int threads = 1, bool reverse_within_stage = false)
      : plan_(plan), threads_(std::max(1, threads)), reverse_(reverse_within_stage) {
    for (auto bytes : plan_.buffer_bytes) buffers_.emplace_back(static_cast<std::size_t>(bytes));
    std::size_t begin = 0;
    while (begin < plan_.instructions.size()) {
      std::size_t end = begin;
      while (end < plan_.instructions.size() && plan_.instructions[end].stage == plan_.instructions[begin].stage) ++end;
      stage_ranges_.emplace_back(begin, end);
      begin = end;
    }
  }

  /// `batch` must be (8,C,H,W) with the plan's input parameters. Returns the
  /// outputs in graph output order.
  std::vector<TensorI8> run(const TensorI8& batch) {
    check(batch.shape() == plan_.input_shape, Errc::kShapeMismatch,
          "plan expects input " + plan_.input_shape.to_string() + ", got " + batch.shape().to_string());
    check(batch.qp == plan_.input_qp, Errc::kInvalidArgument, "input quant params do not match the plan input");
    auto& in = buffers_[static_cast<std::size_t>(plan_.input_buffer)];
    std::copy(batch.q.values().begin(), batch.q.values().end(), in.begin());
    for (auto [b, e] : stage_ranges_) run_stage(b, e);
    std::vector<TensorI8> outs;
    for (std::size_t i = 0; i < plan_.output_buffers.size(); ++i) {
      const auto& buf = buffers_[static_cast<std::size_t>(plan_.output_buffers[i])];
      const auto& shape = plan_.output_shapes[i];
      outs.push_back(TensorI8{Tensor<std::int8_t>(shape, std::vector<std::int8_t>(buf.begin(), buf.begin() + shape.volume())),
                              plan_.output_qps[i]});
    }
    return outs;
  }

  const Plan& plan() const { return plan_; }

 private:
  void run_stage(std::size_t begin, std::size_t end) {
    const std::size_t count = end - begin;
    if (threads_ == 1 || count == 1) {
      if (reverse_)
        for (std::size_t i = end; i-- > begin;) detail::exec_instruction(plan_.instructions[i], buffers_);
      else
        for (std::size_t i = begin; i < end; ++i) detail::exec_instruction(plan_.instructions[i], buffers_);
      return;
    }
    std::atomic<std::size_t> next{begin};
    auto worker = [&] {
      for (std::size_t i = next++; i < end; i = next++) detail::exec_instruction(plan_.instructions[i], buffers_);
    };
    std::vector<std::jthread> pool;
    const std::size_t extra = std::min<std::size_t>(count, static_cast<std::size_t>(threads_)) - 1;
    for (std::size_t t = 0; t < extra; ++t) pool.emplace_back(worker);
    worker();
  }

  const Plan& plan_;
  int threads_;
  bool reverse_;
  std::vector<std::vector<std::int8_t>> buffers_;
  std::vector<std::pair<std::size_t, std::size_t>> stage_ranges_;
};

}  // namespace qfk
