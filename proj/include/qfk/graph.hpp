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

#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "qfk/error.hpp"
#include "qfk/tensor.hpp"

namespace qfk {

// Operator kinds. Each carries only its static attributes; learned
// parameters live in Node::weights.
namespace op {
struct Input {
  friend bool operator==(const Input&, const Input&) = default;
};
struct Conv2D {
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};
struct BatchNorm {
  double eps = 1e-5;
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};
struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};
struct MaxPool2D {
  std::int64_t kernel = 2;
  std::int64_t stride = 2;
  friend bool operator==(const MaxPool2D&, const MaxPool2D&) = default;
};
struct Upsample2xNearest {
  friend bool operator==(const Upsample2xNearest&, const Upsample2xNearest&) = default;
};
struct Concat {
  friend bool operator==(const Concat&, const Concat&) = default;
};
struct GlobalAvgPool {
  friend bool operator==(const GlobalAvgPool&, const GlobalAvgPool&) = default;
};
struct Dense {
  std::int64_t out_features = 1;
  friend bool operator==(const Dense&, const Dense&) = default;
};
struct Sigmoid {
  friend bool operator==(const Sigmoid&, const Sigmoid&) = default;
};
struct SoftmaxPerPixel {
  friend bool operator==(const SoftmaxPerPixel&, const SoftmaxPerPixel&) = default;
};
// Produced only by the compiler's fusion pass.
struct ConvBiasReLU {
  Conv2D conv;
  friend bool operator==(const ConvBiasReLU&, const ConvBiasReLU&) = default;
};
struct DenseSigmoid {
  Dense dense;
  friend bool operator==(const DenseSigmoid&, const DenseSigmoid&) = default;
};
}  // namespace op

using NodeKind =
    std::variant<op::Input, op::Conv2D, op::BatchNorm, op::ReLU, op::MaxPool2D,
                 op::Upsample2xNearest, op::Concat, op::GlobalAvgPool, op::Dense, op::Sigmoid,
                 op::SoftmaxPerPixel, op::ConvBiasReLU, op::DenseSigmoid>;

template <class... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

template <class K>
bool is(const NodeKind& k) {
  return std::holds_alternative<K>(k);
}

inline std::string kind_name(const NodeKind& k) {
  return std::visit(
      overloaded{
          [](const op::Input&) { return "Input"; },
          [](const op::Conv2D&) { return "Conv2D"; },
          [](const op::BatchNorm&) { return "BatchNorm"; },
          [](const op::ReLU&) { return "ReLU"; },
          [](const op::MaxPool2D&) { return "MaxPool2D"; },
          [](const op::Upsample2xNearest&) { return "Upsample2xNearest"; },
          [](const op::Concat&) { return "Concat"; },
          [](const op::GlobalAvgPool&) { return "GlobalAvgPool"; },
          [](const op::Dense&) { return "Dense"; },
          [](const op::Sigmoid&) { return "Sigmoid"; },
          [](const op::SoftmaxPerPixel&) { return "SoftmaxPerPixel"; },
          [](const op::ConvBiasReLU&) { return "ConvBiasReLU"; },
          [](const op::DenseSigmoid&) { return "DenseSigmoid"; },
      },
      k);
}

inline std::size_t expected_arity(const NodeKind& k) {
  if (is<op::Input>(k)) return 0;
  if (is<op::Concat>(k)) return 2;
  return 1;
}

/// Weight names: Conv2D/Dense use "weight" and "bias"; BatchNorm uses
/// "gamma", "beta", "mean" and "var".
using WeightMap = std::map<std::string, TensorF32>;

struct Node {
  int id = 0;
  NodeKind kind;
  std::vector<int> inputs;
  WeightMap weights;

  friend bool operator==(const Node&, const Node&) = default;
};

/// Topologically ordered network. Node ids equal their position in `nodes`.
/// U-YNet graphs have two outputs (mask probabilities, class score); other
/// graphs may have one.
struct Graph {
  std::vector<Node> nodes;
  int input_id = 0;
  std::vector<int> output_ids;
  /// Per-image input geometry (1,C,H,W) when known; rank 0 otherwise.
  Shape input_shape;

  const Node& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
  Node& node(int id) { return nodes.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes.size(); }

  /// Appends a node and returns its id.
  int add(NodeKind kind, std::vector<int> inputs, WeightMap weights = {}) {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back(Node{id, std::move(kind), std::move(inputs), std::move(weights)});
    return id;
  }

  friend bool operator==(const Graph&, const Graph&) = default;
};

/// Consumers of every node, in ascending id order.
inline std::vector<std::vector<int>> consumers(const Graph& g) {
  std::vector<std::vector<int>> out(g.size());
  for (const auto& n : g.nodes)
    for (int in : n.inputs)
      if (in >= 0 && static_cast<std::size_t>(in) < g.size()) out[static_cast<std::size_t>(in)].push_back(n.id);
  return out;
}

struct Violation {
  int node_id = -1;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  std::string to_string() const {
    std::string s;
    for (const auto& v : violations) s += "node " + std::to_string(v.node_id) + ": " + v.message + "\n";
    return s;
  }
};

/// Structural checks: id ordering, reference ordering, arity, single input,
/// outputs present, reachability. Shape consistency is checked by infer_shapes.
inline ValidationReport validate(const Graph& g) {
  ValidationReport r;
  auto add = [&](int id, std::string msg) { r.violations.push_back({id, std::move(msg)}); };
  const int n = static_cast<int>(g.size());
  if (n == 0) {
    add(-1, "empty graph");
    return r;
  }
  int inputs_seen = 0;
  for (int i = 0; i < n; ++i) {
    const Node& node = g.nodes[static_cast<std::size_t>(i)];
    if (node.id != i) add(node.id, "id does not match position " + std::to_string(i));
    if (is<op::Input>(node.kind)) ++inputs_seen;
    if (node.inputs.size() != expected_arity(node.kind))
      add(node.id, kind_name(node.kind) + " expects " + std::to_string(expected_arity(node.kind)) +
                       " inputs, has " + std::to_string(node.inputs.size()));
    for (int in : node.inputs) {
      if (in < 0 || in >= n) add(node.id, "dangling reference to " + std::to_string(in));
      else if (in >= i) add(node.id, "forward reference to " + std::to_string(in));
    }
  }
  if (inputs_seen != 1) add(-1, "expected exactly one Input node, found " + std::to_string(inputs_seen));
  if (g.input_id < 0 || g.input_id >= n || !is<op::Input>(g.nodes[static_cast<std::size_t>(g.input_id)].kind))
    add(g.input_id, "input_id does not name an Input node");
  if (g.output_ids.empty() || g.output_ids.size() > 2) add(-1, "graph must have one or two outputs");
  for (int o : g.output_ids)
    if (o < 0 || o >= n) add(o, "output id out of range");
  if (!r.ok()) return r;

  // Forward reachability from the input.
  std::vector<char> reach(static_cast<std::size_t>(n), 0);
  reach[static_cast<std::size_t>(g.input_id)] = 1;
  for (const auto& node : g.nodes)
    for (int in : node.inputs)
      if (reach[static_cast<std::size_t>(in)]) reach[static_cast<std::size_t>(node.id)] = 1;
  for (const auto& node : g.nodes)
    if (!reach[static_cast<std::size_t>(node.id)]) add(node.id, "unreachable from input");
  return r;
}

inline void require_valid(const Graph& g) {
  auto r = validate(g);
  check(r.ok(), Errc::kInvalidArgument, "invalid graph: " + r.to_string());
}

namespace detail {

inline std::string mismatch(int id, const std::string& what, const Shape& a, const Shape& b) {
  return "shape mismatch at node " + std::to_string(id) + " (" + what + "): " + a.to_string() +
         " vs " + b.to_string();
}

inline std::int64_t conv_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) {
  return (in + 2 * p - k) / s + 1;
}

inline Shape conv_shape(int id, const op::Conv2D& c, const Shape& in, const WeightMap& w) {
  check(in.rank() == 4, Errc::kShapeMismatch, "node " + std::to_string(id) + ": Conv2D needs a rank-4 input, got " + in.to_string());
  check(c.out_channels >= 1 && c.kernel_h >= 1 && c.kernel_w >= 1 && c.stride >= 1 && c.padding >= 0,
        Errc::kInvalidArgument, "node " + std::to_string(id) + ": bad Conv2D attributes");
  check(in[2] + 2 * c.padding >= c.kernel_h && in[3] + 2 * c.padding >= c.kernel_w, Errc::kShapeMismatch,
        "shape mismatch at node " + std::to_string(id) + ": kernel larger than padded input " + in.to_string());
  if (auto it = w.find("weight"); it != w.end()) {
    Shape expect{c.out_channels, in[1], c.kernel_h, c.kernel_w};
    check(it->second.shape() == expect, Errc::kShapeMismatch, mismatch(id, "conv weight", it->second.shape(), expect));
  }
  if (auto it = w.find("bias"); it != w.end()) {
    Shape expect{c.out_channels};
    check(it->second.shape() == expect, Errc::kShapeMismatch, mismatch(id, "conv bias", it->second.shape(), expect));
  }
  return Shape{in[0], c.out_channels, conv_out(in[2], c.kernel_h, c.stride, c.padding),
               conv_out(in[3], c.kernel_w, c.stride, c.padding)};
}

inline Shape dense_shape(int id, const op::Dense& d, const Shape& in, const WeightMap& w) {
  check(d.out_features >= 1, Errc::kInvalidArgument, "node " + std::to_string(id) + ": bad Dense attributes");
  const std::int64_t features = in.volume() / in[0];
  if (auto it = w.find("weight"); it != w.end()) {
    Shape expect{d.out_features, features};
    check(it->second.shape() == expect, Errc::kShapeMismatch, mismatch(id, "dense weight", it->second.shape(), expect));
  }
  return Shape{in[0], d.out_features};
}

}  // namespace detail

/// Output shape of one node given its input shapes.
inline Shape node_output_shape(const Node& node, const std::vector<Shape>& in) {
  const int id = node.id;
  auto rank4 = [&](const Shape& s) {
    check(s.rank() == 4, Errc::kShapeMismatch,
          "node " + std::to_string(id) + ": " + kind_name(node.kind) + " needs a rank-4 input, got " + s.to_string());
  };
  return std::visit(
      overloaded{
          [&](const op::Input&) -> Shape { fail(Errc::kInternal, "Input shape is supplied by the caller"); },
          [&](const op::Conv2D& c) { return detail::conv_shape(id, c, in[0], node.weights); },
          [&](const op::ConvBiasReLU& c) { return detail::conv_shape(id, c.conv, in[0], node.weights); },
          [&](const op::BatchNorm&) {
            rank4(in[0]);
            for (const auto& [name, t] : node.weights) {
              Shape expect{in[0][1]};
              check(t.shape() == expect, Errc::kShapeMismatch, detail::mismatch(id, "batchnorm " + name, t.shape(), expect));
            }
            return in[0];
          },
          [&](const op::ReLU&) { return in[0]; },
          [&](const op::Sigmoid&) { return in[0]; },
          [&](const op::MaxPool2D& p) {
            rank4(in[0]);
            check(p.kernel >= 1 && p.stride >= 1, Errc::kInvalidArgument, "node " + std::to_string(id) + ": bad MaxPool2D attributes");
            check(in[0][2] >= p.kernel && in[0][3] >= p.kernel, Errc::kShapeMismatch,
                  "shape mismatch at node " + std::to_string(id) + ": pool window larger than input " + in[0].to_string());
            return Shape{in[0][0], in[0][1], (in[0][2] - p.kernel) / p.stride + 1, (in[0][3] - p.kernel) / p.stride + 1};
          },
          [&](const op::Upsample2xNearest&) {
            rank4(in[0]);
            return Shape{in[0][0], in[0][1], in[0][2] * 2, in[0][3] * 2};
          },
          [&](const op::Concat&) {
            rank4(in[0]);
            rank4(in[1]);
            const auto& a = in[0];
            const auto& b = in[1];
            check(a[0] == b[0] && a[2] == b[2] && a[3] == b[3], Errc::kShapeMismatch,
                  detail::mismatch(id, "concat inputs", a, b));
            return Shape{a[0], a[1] + b[1], a[2], a[3]};
          },
          [&](const op::GlobalAvgPool&) {
            rank4(in[0]);
            return Shape{in[0][0], in[0][1], 1, 1};
          },
          [&](const op::Dense& d) { return detail::dense_shape(id, d, in[0], node.weights); },
          [&](const op::DenseSigmoid& d) { return detail::dense_shape(id, d.dense, in[0], node.weights); },
          [&](const op::SoftmaxPerPixel&) {
            rank4(in[0]);
            return in[0];
          },
      },
      node.kind);
}

/// Shape of every node output, indexed by node id.
inline std::vector<Shape> infer_shapes(const Graph& g, const Shape& input_shape) {
  require_valid(g);
  std::vector<Shape> shapes(g.size());
  for (const auto& node : g.nodes) {
    if (is<op::Input>(node.kind)) {
      shapes[static_cast<std::size_t>(node.id)] = input_shape;
      continue;
    }
    std::vector<Shape> in;
    for (int i : node.inputs) in.push_back(shapes[static_cast<std::size_t>(i)]);
    shapes[static_cast<std::size_t>(node.id)] = node_output_shape(node, in);
  }
  return shapes;
}

/// Rebuilds the graph without the nodes flagged in `drop`, rewiring every
/// reference through `redirect` first. Ids are renumbered densely.
inline Graph compact(const Graph& g, const std::vector<char>& drop, const std::vector<int>& redirect) {
  auto resolve = [&](int id) {
    while (redirect[static_cast<std::size_t>(id)] != id) id = redirect[static_cast<std::size_t>(id)];
    return id;
  };
  std::vector<int> new_id(g.size(), -1);
  Graph out;
  for (const auto& n : g.nodes) {
    if (drop[static_cast<std::size_t>(n.id)]) continue;
    std::vector<int> ins;
    for (int i : n.inputs) ins.push_back(new_id[static_cast<std::size_t>(resolve(i))]);
    new_id[static_cast<std::size_t>(n.id)] = out.add(n.kind, std::move(ins), n.weights);
  }
  out.input_id = new_id[static_cast<std::size_t>(resolve(g.input_id))];
  out.input_shape = g.input_shape;
  for (int o : g.output_ids) out.output_ids.push_back(new_id[static_cast<std::size_t>(resolve(o))]);
  return out;
}

}  // namespace qfk
