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
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfk/graph.hpp"
#include "qfk/plan.hpp"
#include "qfk/quantizer.hpp"

namespace qfk {

/// Folds every BatchNorm into the Conv2D feeding it:
///   w' = w * gamma / sqrt(var + eps),  b' = (b - mean) * gamma / sqrt(var + eps) + beta
inline Graph fold_batchnorm(const Graph& g) {
  require_valid(g);
  const auto users = consumers(g);
  Graph work = g;
  std::vector<char> drop(g.size(), 0);
  std::vector<int> redirect(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) redirect[i] = static_cast<int>(i);

  for (const auto& n : g.nodes) {
    const auto* bn = std::get_if<op::BatchNorm>(&n.kind);
    if (!bn) continue;
    const int conv_id = n.inputs[0];
    const Node& producer = g.node(conv_id);
    check(is<op::Conv2D>(producer.kind), Errc::kInvalidArgument,
          "BatchNorm node " + std::to_string(n.id) + " is not preceded by a Conv2D (found " +
              kind_name(producer.kind) + ")");
    check(users[static_cast<std::size_t>(conv_id)].size() == 1 &&
              std::find(g.output_ids.begin(), g.output_ids.end(), conv_id) == g.output_ids.end(),
          Errc::kInvalidArgument,
          "Conv2D node " + std::to_string(conv_id) + " feeds more than its BatchNorm; cannot fold");
    Node& conv = work.node(conv_id);
    auto& w = conv.weights.at("weight");
    const std::int64_t out_c = w.shape()[0];
    const std::int64_t per = w.shape().volume() / out_c;
    if (!conv.weights.count("bias")) conv.weights["bias"] = TensorF32(Shape{out_c}, 0.0f);
    auto& b = conv.weights.at("bias");
    const auto& gamma = n.weights.at("gamma");
    const auto& beta = n.weights.at("beta");
    const auto& mean = n.weights.at("mean");
    const auto& var = n.weights.at("var");
    for (std::int64_t o = 0; o < out_c; ++o) {
      const auto c = static_cast<std::size_t>(o);
      const double factor = gamma[c] / std::sqrt(static_cast<double>(var[c]) + bn->eps);
      for (std::int64_t k = 0; k < per; ++k) {
        auto& v = w[static_cast<std::size_t>(o * per + k)];
        v = static_cast<float>(v * factor);
      }
      b[c] = static_cast<float>((static_cast<double>(b[c]) - mean[c]) * factor + beta[c]);
    }
    drop[static_cast<std::size_t>(n.id)] = 1;
    redirect[static_cast<std::size_t>(n.id)] = conv_id;
  }
  return compact(work, drop, redirect);
}

namespace detail {

inline QuantizedGraph compact(const QuantizedGraph& g, const std::vector<char>& drop, const std::vector<int>& redirect) {
  auto resolve = [&](int id) {
    while (redirect[static_cast<std::size_t>(id)] != id) id = redirect[static_cast<std::size_t>(id)];
    return id;
  };
  std::vector<int> new_id(g.size(), -1);
  QuantizedGraph out;
  out.input_shape = g.input_shape;
  for (const auto& n : g.nodes) {
    if (drop[static_cast<std::size_t>(n.id)]) continue;
    QNode q = n;
    q.id = static_cast<int>(out.nodes.size());
    q.inputs.clear();
    for (int i : n.inputs) q.inputs.push_back(new_id[static_cast<std::size_t>(resolve(i))]);
    new_id[static_cast<std::size_t>(n.id)] = q.id;
    out.nodes.push_back(std::move(q));
  }
  out.input_id = new_id[static_cast<std::size_t>(resolve(g.input_id))];
  for (int o : g.output_ids) out.output_ids.push_back(new_id[static_cast<std::size_t>(resolve(o))]);
  return out;
}

}  // namespace detail

/// Collapses Conv2D -> ReLU into ConvBiasReLU and Dense -> Sigmoid into
/// DenseSigmoid when the first node's only consumer is the second. Integer
/// results are unchanged: ReLU becomes a floor at the output zero point and
/// the sigmoid table is applied to the same intermediate codes.
inline QuantizedGraph fuse(const QuantizedGraph& qg) {
  Graph structure = structure_of(qg);
  require_valid(structure);
  const auto users = consumers(structure);
  QuantizedGraph work = qg;
  std::vector<char> drop(qg.size(), 0);
  std::vector<int> redirect(qg.size());
  for (std::size_t i = 0; i < qg.size(); ++i) redirect[i] = static_cast<int>(i);
  auto is_output = [&](int id) {
    return std::find(qg.output_ids.begin(), qg.output_ids.end(), id) != qg.output_ids.end();
  };

  for (const auto& n : qg.nodes) {
    const bool relu = is<op::ReLU>(n.kind);
    const bool sigmoid = is<op::Sigmoid>(n.kind);
    if (!relu && !sigmoid) continue;
    const int pid = n.inputs[0];
    const QNode& producer = qg.node(pid);
    if (users[static_cast<std::size_t>(pid)].size() != 1 || is_output(pid) || drop[static_cast<std::size_t>(pid)]) continue;
    QNode& target = work.nodes[static_cast<std::size_t>(pid)];
    if (relu) {
      const auto* conv = std::get_if<op::Conv2D>(&producer.kind);
      if (!conv || producer.out_qp != n.out_qp) continue;
      target.kind = op::ConvBiasReLU{*conv};
    } else {
      const auto* dense = std::get_if<op::Dense>(&producer.kind);
      if (!dense) continue;
      target.kind = op::DenseSigmoid{*dense};
      target.inner_qp = producer.out_qp;
      target.out_qp = n.out_qp;
    }
    drop[static_cast<std::size_t>(n.id)] = 1;
    redirect[static_cast<std::size_t>(n.id)] = pid;
  }
  return detail::compact(work, drop, redirect);
}

inline std::string instruction_op_name(const NodeKind& k) {
  return std::visit(
      overloaded{
          [](const op::Conv2D&) -> std::string { return "Conv-INT8"; },
          [](const op::ConvBiasReLU&) -> std::string { return "ConvBiasReLU-INT8"; },
          [](const op::ReLU&) -> std::string { return "ReLU-INT8"; },
          [](const op::MaxPool2D&) -> std::string { return "MaxPool-INT8"; },
          [](const op::Upsample2xNearest&) -> std::string { return "Upsample"; },
          [](const op::Concat&) -> std::string { return "Concat"; },
          [](const op::GlobalAvgPool&) -> std::string { return "GlobalAvgPool-INT8"; },
          [](const op::Dense&) -> std::string { return "Dense-INT8"; },
          [](const op::DenseSigmoid&) -> std::string { return "DenseSigmoid"; },
          [](const op::Sigmoid&) -> std::string { return "Sigmoid-LUT"; },
          [](const op::SoftmaxPerPixel&) -> std::string { return "Softmax-INT8"; },
          [](const auto& other) -> std::string { return kind_name(NodeKind{other}); },
      },
      k);
}

/// Lowers a quantized graph to an executable plan for batches of eight:
/// fusion, wave scheduling (an instruction's stage is one past its latest
/// producer), and buffer reuse by greedy first-fit over stage lifetimes.
inline Plan compile(const QuantizedGraph& input) {
  const QuantizedGraph qg = fuse(input);
  check(qg.input_shape.rank() == 4, Errc::kInvalidArgument, "quantized graph has no input shape");
  const Graph structure = structure_of(qg);
  const auto shapes = infer_shapes(structure, qg.input_shape.with_batch(kPlanBatch));
  const auto users = consumers(structure);
  const std::size_t n = qg.size();

  // Stage assignment; the graph input is ready before stage 0.
  std::vector<int> stage(n, -1);
  for (const auto& node : qg.nodes) {
    if (is<op::Input>(node.kind)) continue;
    int s = 0;
    for (int i : node.inputs) s = std::max(s, stage[static_cast<std::size_t>(i)] + 1);
    stage[static_cast<std::size_t>(node.id)] = s;
  }
  int stages = 0;
  for (int s : stage) stages = std::max(stages, s + 1);

  // Lifetimes [def, last] in stages; outputs live to the end.
  std::vector<int> last(n);
  for (std::size_t v = 0; v < n; ++v) {
    last[v] = stage[v];
    for (int u : users[v]) last[v] = std::max(last[v], stage[static_cast<std::size_t>(u)]);
  }
  for (int o : qg.output_ids) last[static_cast<std::size_t>(o)] = stages;
  std::vector<std::int64_t> bytes(n);
  for (std::size_t v = 0; v < n; ++v) bytes[v] = shapes[v].volume();

  std::vector<std::size_t> order(n);
  for (std::size_t v = 0; v < n; ++v) order[v] = v;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return stage[a] < stage[b]; });

  Plan plan;
  std::vector<int> buffer_of(n, -1);
  std::vector<int> buffer_free_after;  // last stage of the buffer's current occupant
  for (std::size_t v : order) {
    int chosen = -1;
    for (std::size_t b = 0; b < buffer_free_after.size(); ++b)
      if (buffer_free_after[b] < stage[v]) {
        chosen = static_cast<int>(b);
        break;
      }
    if (chosen < 0) {
      chosen = static_cast<int>(buffer_free_after.size());
      buffer_free_after.push_back(0);
      plan.buffer_bytes.push_back(0);
    }
    buffer_free_after[static_cast<std::size_t>(chosen)] = last[v];
    auto& size = plan.buffer_bytes[static_cast<std::size_t>(chosen)];
    size = std::max(size, bytes[v]);
    buffer_of[v] = chosen;
  }
  for (int t = -1; t <= stages; ++t) {
    std::int64_t live = 0;
    for (std::size_t v = 0; v < n; ++v)
      if (stage[v] <= t && t <= last[v]) live += bytes[v];
    plan.peak_memory = std::max(plan.peak_memory, live);
  }
  for (auto b : bytes) plan.total_value_bytes += b;

  for (std::size_t v : order) {
    const QNode& node = qg.nodes[v];
    if (is<op::Input>(node.kind)) continue;
    Instruction ins;
    ins.op = instruction_op_name(node.kind);
    ins.node_id = node.id;
    ins.kind = node.kind;
    ins.stage = stage[v];
    ins.output = buffer_of[v];
    ins.out_shape = shapes[v];
    ins.out_qp = node.out_qp;
    for (int i : node.inputs) {
      ins.inputs.push_back(buffer_of[static_cast<std::size_t>(i)]);
      ins.in_shapes.push_back(shapes[static_cast<std::size_t>(i)]);
      ins.in_qps.push_back(qg.node(i).out_qp);
    }
    const QuantParams& in_qp = ins.in_qps[0];
    std::visit(
        overloaded{
            [&](const op::Conv2D&) { ins.linear = kernels::PackedLinear::make(*node.weight, node.bias, in_qp, node.out_qp, false); },
            [&](const op::ConvBiasReLU&) { ins.linear = kernels::PackedLinear::make(*node.weight, node.bias, in_qp, node.out_qp, true); },
            [&](const op::Dense&) { ins.linear = kernels::PackedLinear::make(*node.weight, node.bias, in_qp, node.out_qp, false); },
            [&](const op::DenseSigmoid&) {
              ins.inner_qp = node.inner_qp.value();
              ins.linear = kernels::PackedLinear::make(*node.weight, node.bias, in_qp, ins.inner_qp, false);
              ins.table = kernels::sigmoid_table(ins.inner_qp, node.out_qp);
            },
            [&](const op::Sigmoid&) { ins.table = kernels::sigmoid_table(in_qp, node.out_qp); },
            [&](const op::GlobalAvgPool&) {
              ins.requant = kernels::average_multiplier(in_qp, ins.in_shapes[0][2] * ins.in_shapes[0][3], node.out_qp);
            },
            [&](const op::Concat&) {
              for (const auto& q : ins.in_qps) ins.input_rescale.push_back(kernels::rescale_multiplier(q, node.out_qp));
            },
            [&](const auto&) {},
        },
        node.kind);
    if (ins.linear.out_channels > 0) ins.requant = ins.linear.multiplier;
    plan.instructions.push_back(std::move(ins));
  }

  plan.stages = stages;
  plan.input_buffer = buffer_of[static_cast<std::size_t>(qg.input_id)];
  plan.input_shape = shapes[static_cast<std::size_t>(qg.input_id)];
  plan.input_qp = qg.input_qparams();
  for (int o : qg.output_ids) {
    plan.output_buffers.push_back(buffer_of[static_cast<std::size_t>(o)]);
    plan.output_shapes.push_back(shapes[static_cast<std::size_t>(o)]);
    plan.output_qps.push_back(qg.node(o).out_qp);
    plan.output_kinds.push_back(kind_name(qg.node(o).kind));
  }
  return plan;
}

inline nlohmann::ordered_json plan_to_json(const Plan& plan) {
  using nlohmann::ordered_json;
  auto qp_json = [](const QuantParams& q) { return ordered_json{{"scale", q.scale}, {"zero_point", q.zero_point}}; };
  ordered_json j;
  j["batch"] = kPlanBatch;
  j["stages"] = plan.stages;
  j["peak_memory"] = plan.peak_memory;
  j["total_value_bytes"] = plan.total_value_bytes;
  j["input"] = {{"buffer", plan.input_buffer}, {"shape", plan.input_shape.dims()}, {"qparams", qp_json(plan.input_qp)}};
  ordered_json outs = ordered_json::array();
  for (std::size_t i = 0; i < plan.output_buffers.size(); ++i)
    outs.push_back({{"buffer", plan.output_buffers[i]}, {"kind", plan.output_kinds[i]},
                    {"shape", plan.output_shapes[i].dims()}, {"qparams", qp_json(plan.output_qps[i])}});
  j["outputs"] = outs;
  ordered_json buffers = ordered_json::array();
  for (std::size_t b = 0; b < plan.buffer_bytes.size(); ++b) buffers.push_back({{"id", b}, {"bytes", plan.buffer_bytes[b]}});
  j["buffers"] = buffers;
  ordered_json list = ordered_json::array();
  for (const auto& ins : plan.instructions) {
    list.push_back({{"op", ins.op},
                    {"node", ins.node_id},
                    {"stage", ins.stage},
                    {"inputs", ins.inputs},
                    {"output", ins.output},
                    {"out_shape", ins.out_shape.dims()},
                    {"out_qparams", qp_json(ins.out_qp)},
                    {"requant", {{"multiplier", ins.requant.multiplier}, {"shift", ins.requant.shift}, {"real", ins.requant.real}}}});
  }
  j["instructions"] = list;
  return j;
}

}  // namespace qfk
