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
#include <utility>
#include <vector>

#include "qfk/graph.hpp"
#include "qfk/kernels_f32.hpp"

namespace qfk {

/// Called with every node's output as soon as it is computed.
using NodeObserver = std::function<void(int node_id, const TensorF32& value)>;

namespace detail {

inline const TensorF32* optional_weight(const Node& n, const char* name) {
  auto it = n.weights.find(name);
  return it == n.weights.end() ? nullptr : &it->second;
}

inline TensorF32 eval_node_f32(const Node& n, const std::vector<const TensorF32*>& in) {
  namespace k = kernels;
  return std::visit(
      overloaded{
          [&](const op::Input&) -> TensorF32 { fail(Errc::kInternal, "Input evaluated as a layer"); },
          [&](const op::Conv2D& c) { return k::conv2d(*in[0], c, n.weights.at("weight"), optional_weight(n, "bias")); },
          [&](const op::ConvBiasReLU& c) {
            return k::relu(k::conv2d(*in[0], c.conv, n.weights.at("weight"), optional_weight(n, "bias")));
          },
          [&](const op::BatchNorm& b) { return k::batchnorm(*in[0], n.weights, b.eps); },
          [&](const op::ReLU&) { return k::relu(*in[0]); },
          [&](const op::Sigmoid&) { return k::sigmoid(*in[0]); },
          [&](const op::MaxPool2D& p) { return k::maxpool(*in[0], p); },
          [&](const op::Upsample2xNearest&) { return k::upsample2x(*in[0]); },
          [&](const op::Concat&) { return k::concat_channels(*in[0], *in[1]); },
          [&](const op::GlobalAvgPool&) { return k::global_avg_pool(*in[0]); },
          [&](const op::Dense&) { return k::dense(*in[0], n.weights.at("weight"), optional_weight(n, "bias")); },
          [&](const op::DenseSigmoid&) {
            return k::sigmoid(k::dense(*in[0], n.weights.at("weight"), optional_weight(n, "bias")));
          },
          [&](const op::SoftmaxPerPixel&) { return k::softmax_channels(*in[0]); },
      },
      n.kind);
}

}  // namespace detail

/// Single-precision reference execution. Returns the graph outputs in
/// output_ids order. Intermediate values are released after their last use.
inline std::vector<TensorF32> forward_f32(const Graph& g, const TensorF32& batch,
                                          const NodeObserver& observe = {}) {
  const auto shapes = infer_shapes(g, batch.shape());
  (void)shapes;
  const auto users = consumers(g);
  std::vector<int> remaining(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) remaining[i] = static_cast<int>(users[i].size());
  for (int o : g.output_ids) ++remaining[static_cast<std::size_t>(o)];

  std::vector<TensorF32> values(g.size());
  for (const auto& node : g.nodes) {
    const auto id = static_cast<std::size_t>(node.id);
    if (is<op::Input>(node.kind)) {
      values[id] = batch;
    } else {
      std::vector<const TensorF32*> in;
      for (int i : node.inputs) in.push_back(&values[static_cast<std::size_t>(i)]);
      values[id] = detail::eval_node_f32(node, in);
      for (int i : node.inputs)
        if (--remaining[static_cast<std::size_t>(i)] == 0) values[static_cast<std::size_t>(i)] = TensorF32();
    }
    if (observe) observe(node.id, values[id]);
  }
  std::vector<TensorF32> out;
  for (int o : g.output_ids) out.push_back(values[static_cast<std::size_t>(o)]);
  return out;
}

struct F32Outputs {
  TensorF32 mask_probs;  // (N,2,H,W)
  TensorF32 scores;      // (N,1); empty for segmentation-only graphs
};

inline F32Outputs run_graph_f32(const Graph& g, const TensorF32& batch) {
  auto outs = forward_f32(g, batch);
  F32Outputs r;
  r.mask_probs = std::move(outs.at(0));
  if (outs.size() > 1) r.scores = std::move(outs[1]);
  return r;
}

}  // namespace qfk
