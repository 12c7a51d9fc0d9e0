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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qfk/graph.hpp"
#include "qfk/reference.hpp"
#include "qfk/tensor.hpp"

namespace qfk {

inline constexpr std::size_t kMinCalibrationImages = 100;
inline constexpr std::size_t kMaxCalibrationImages = 1000;
inline constexpr std::size_t kHistogramBins = 2048;
inline constexpr double kPercentile = 0.999;

/// Running range of one node output over the calibration set. `count` is the
/// number of images observed.
struct TensorStats {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  std::int64_t count = 0;
  // Histogram of |x| over [0, hist_max], filled only for percentile calibration.
  std::vector<std::uint64_t> hist;
  double hist_max = 0;

  void observe(std::span<const float> values, std::int64_t images) {
    for (float v : values) {
      min = std::min(min, static_cast<double>(v));
      max = std::max(max, static_cast<double>(v));
    }
    count += images;
  }

  void observe_histogram(std::span<const float> values) {
    if (hist.empty()) hist.assign(kHistogramBins, 0);
    for (float v : values) {
      const double a = std::abs(static_cast<double>(v));
      std::size_t bin = 0;
      if (hist_max > 0)
        bin = std::min(kHistogramBins - 1, static_cast<std::size_t>(a / hist_max * kHistogramBins));
      ++hist[bin];
    }
  }

  /// Min of mins, max of maxes, sum of counts. Histograms must share a range.
  TensorStats& merge(const TensorStats& o) {
    min = std::min(min, o.min);
    max = std::max(max, o.max);
    count += o.count;
    if (!o.hist.empty()) {
      if (hist.empty()) {
        hist = o.hist;
        hist_max = o.hist_max;
      } else {
        check(hist_max == o.hist_max, Errc::kInvalidArgument, "cannot merge histograms with different ranges");
        for (std::size_t i = 0; i < hist.size(); ++i) hist[i] += o.hist[i];
      }
    }
    return *this;
  }

  friend bool operator==(const TensorStats&, const TensorStats&) = default;
};

/// Statistics indexed by node id.
using CalibrationStats = std::vector<TensorStats>;

inline CalibrationStats merge(CalibrationStats a, const CalibrationStats& b) {
  if (a.empty()) return b;
  check(a.size() == b.size(), Errc::kInvalidArgument, "cannot merge stats of different graphs");
  for (std::size_t i = 0; i < a.size(); ++i) a[i].merge(b[i]);
  return a;
}

struct CalibrationOptions {
  bool force = false;       // accept set sizes outside [100, 1000]
  bool histograms = false;  // second pass collecting |x| histograms (percentile strategy)
  std::int64_t batch = 8;
};

inline void check_folded(const Graph& g) {
  for (const auto& n : g.nodes)
    check(!is<op::BatchNorm>(n.kind), Errc::kInvalidArgument,
          "node " + std::to_string(n.id) + " is BatchNorm; fold batch norms before calibration or quantization");
}

namespace detail {

inline TensorF32 stack_images(const std::vector<TensorF32>& images, std::size_t begin, std::size_t end) {
  const auto& s0 = images[begin].shape();
  std::vector<std::int64_t> dims = s0.dims();
  if (dims.size() == 3) dims.insert(dims.begin(), 1);
  check(dims.size() == 4 && dims[0] == 1, Errc::kShapeMismatch,
        "calibration images must be (C,H,W) or (1,C,H,W), got " + s0.to_string());
  const std::int64_t per = s0.volume();
  dims[0] = static_cast<std::int64_t>(end - begin);
  TensorF32 batch{Shape(dims)};
  for (std::size_t i = begin; i < end; ++i) {
    check(images[i].shape().volume() == per, Errc::kShapeMismatch,
          "calibration image " + std::to_string(i) + " has shape " + images[i].shape().to_string() +
              ", expected " + s0.to_string());
    std::copy_n(images[i].data(), per, batch.data() + static_cast<std::int64_t>(i - begin) * per);
  }
  return batch;
}

}  // namespace detail

/// Runs the single-precision graph over the calibration images and records
/// the range of every node output.
inline CalibrationStats collect_calibration(const Graph& g, const std::vector<TensorF32>& images,
                                            const CalibrationOptions& opts = {}) {
  check_folded(g);
  require_valid(g);
  if (!opts.force)
    check(images.size() >= kMinCalibrationImages && images.size() <= kMaxCalibrationImages,
          Errc::kCalibrationSize,
          "calibration set has " + std::to_string(images.size()) +
              " images; it has to be around 100-1000 images (use --force to override)");
  check(!images.empty(), Errc::kCalibrationSize, "calibration set is empty");
  check(opts.batch >= 1, Errc::kInvalidArgument, "calibration batch must be >= 1");

  CalibrationStats stats(g.size());
  const auto step = static_cast<std::size_t>(opts.batch);
  for (std::size_t b = 0; b < images.size(); b += step) {
    const std::size_t e = std::min(images.size(), b + step);
    const auto batch = detail::stack_images(images, b, e);
    forward_f32(g, batch, [&](int id, const TensorF32& v) {
      stats[static_cast<std::size_t>(id)].observe(v.values(), static_cast<std::int64_t>(e - b));
    });
  }
  if (opts.histograms) {
    for (auto& s : stats) s.hist_max = std::max(std::abs(s.min), std::abs(s.max));
    for (std::size_t b = 0; b < images.size(); b += step) {
      const std::size_t e = std::min(images.size(), b + step);
      const auto batch = detail::stack_images(images, b, e);
      forward_f32(g, batch, [&](int id, const TensorF32& v) {
        stats[static_cast<std::size_t>(id)].observe_histogram(v.values());
      });
    }
  }
  return stats;
}

enum class CalibrationStrategy { kMinMax, kPercentile };

namespace detail {

/// Smallest scale (>= base) whose code range around an integer zero point
/// still covers [lo, hi]; lo <= 0 <= hi.
inline QuantParams cover_range(double lo, double hi, double base_scale) {
  QuantParams qp;
  qp.zero_point = static_cast<std::int32_t>(
      std::clamp<std::int64_t>(round_half_away(-128.0 - lo / base_scale), lo < 0 ? -127 : -128, hi > 0 ? 126 : 127));
  double scale = base_scale;
  if (hi > 0) scale = std::max(scale, hi / (127 - qp.zero_point));
  if (lo < 0) scale = std::max(scale, lo / (-128 - qp.zero_point));
  qp.scale = scale;
  return qp;
}

inline double percentile_magnitude(const TensorStats& s) {
  std::uint64_t total = 0;
  for (auto c : s.hist) total += c;
  if (total == 0 || s.hist_max <= 0) return s.hist_max;
  const auto target = static_cast<std::uint64_t>(std::ceil(kPercentile * static_cast<double>(total)));
  std::uint64_t run = 0;
  for (std::size_t i = 0; i < s.hist.size(); ++i) {
    run += s.hist[i];
    if (run >= target) return s.hist_max * static_cast<double>(i + 1) / static_cast<double>(s.hist.size());
  }
  return s.hist_max;
}

}  // namespace detail

/// Activation quantization parameters from observed statistics.
///
/// minmax: scale = (max - min) / 255, zero_point = round(-128 - min / scale),
/// after which the scale is widened just enough that the integer zero point
/// still covers both ends. The range always includes 0 so padding and ReLU
/// floors are exact. A constant tensor (min == max) gets
/// scale = max(|max|, 1) * 2 / 255 centred on zero_point 0.
///
/// percentile: as minmax after clipping the range to the 99.9th percentile
/// of |x| from a 2048-bin histogram.
inline QuantParams compute_qparams(const TensorStats& stats,
                                   CalibrationStrategy strategy = CalibrationStrategy::kMinMax) {
  check(stats.count > 0, Errc::kInvalidArgument, "cannot compute quant params from empty statistics");
  double lo = stats.min;
  double hi = stats.max;
  if (strategy == CalibrationStrategy::kPercentile) {
    check(!stats.hist.empty(), Errc::kInvalidArgument, "percentile strategy needs histogram statistics");
    const double mag = detail::percentile_magnitude(stats);
    lo = std::max(lo, -mag);
    hi = std::min(hi, mag);
  }
  if (lo == hi) {
    const double scale = std::max(std::abs(hi), 1.0) * 2.0 / 255.0;
    QuantParams qp{scale, 0};
    if (hi > 0) qp.scale = std::max(qp.scale, hi / 127.0);
    if (hi < 0) qp.scale = std::max(qp.scale, hi / -128.0);
    return qp;
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  return detail::cover_range(lo, hi, (hi - lo) / 255.0);
}

/// Output parameters fixed by operator semantics rather than calibration.
inline constexpr QuantParams kSigmoidOutputQParams{1.0 / 256.0, -128};
inline constexpr QuantParams kSoftmaxOutputQParams{1.0 / 255.0, -128};

struct QNode {
  int id = 0;
  NodeKind kind;
  std::vector<int> inputs;
  std::optional<TensorI8> weight;  // symmetric, zero_point 0
  std::vector<std::int32_t> bias;  // at scale input_scale * weight_scale
  QuantParams out_qp;
  // Parameters of the intermediate result inside a fused DenseSigmoid.
  std::optional<QuantParams> inner_qp;

  friend bool operator==(const QNode&, const QNode&) = default;
};

/// INT8 mirror of a batch-norm-free Graph. Every node output has QuantParams.
struct QuantizedGraph {
  std::vector<QNode> nodes;
  int input_id = 0;
  std::vector<int> output_ids;
  Shape input_shape;

  const QNode& node(int id) const { return nodes.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes.size(); }
  const QuantParams& input_qparams() const { return node(input_id).out_qp; }

  friend bool operator==(const QuantizedGraph&, const QuantizedGraph&) = default;
};

/// Structural view used for validation and shape inference.
inline Graph structure_of(const QuantizedGraph& qg) {
  Graph g;
  for (const auto& n : qg.nodes) {
    WeightMap w;
    if (n.weight) w["weight"] = TensorF32(n.weight->shape());
    if (!n.bias.empty()) w["bias"] = TensorF32(Shape{static_cast<std::int64_t>(n.bias.size())});
    g.nodes.push_back(Node{n.id, n.kind, n.inputs, std::move(w)});
  }
  g.input_id = qg.input_id;
  g.output_ids = qg.output_ids;
  g.input_shape = qg.input_shape;
  return g;
}

inline TensorI8 quantize_weights_symmetric(const TensorF32& w) {
  double max_abs = 0;
  for (float v : w.values()) {
    check(std::isfinite(v), Errc::kNonFinite, "non-finite weight");
    max_abs = std::max(max_abs, std::abs(static_cast<double>(v)));
  }
  const QuantParams qp{max_abs > 0 ? max_abs / 127.0 : 1.0, 0};
  return quantize(w, qp);
}

inline std::vector<std::int32_t> quantize_bias(const TensorF32* bias, std::int64_t n, double in_scale,
                                               double w_scale) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(n), 0);
  if (!bias) return out;
  const double s = in_scale * w_scale;
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = std::clamp(static_cast<double>((*bias)[static_cast<std::size_t>(i)]) / s, -2147483648.0, 2147483647.0);
    out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(round_half_away(v));
  }
  return out;
}

/// Quantizes weights (symmetric per tensor) and biases (int32) and assigns
/// activation parameters. Order-preserving operators (ReLU, MaxPool,
/// Upsample) pass their input parameters through unchanged; a Conv2D, Dense
/// or Concat whose sole consumer is a ReLU takes the ReLU's calibrated range
/// so the pair can later be fused without changing a single code.
inline QuantizedGraph quantize_graph(const Graph& g, const std::map<int, QuantParams>& qparams) {
  require_valid(g);
  check_folded(g);
  std::vector<QuantParams> qp(g.size());
  for (const auto& n : g.nodes) {
    if (is<op::Sigmoid>(n.kind)) qp[static_cast<std::size_t>(n.id)] = kSigmoidOutputQParams;
    else if (is<op::SoftmaxPerPixel>(n.kind)) qp[static_cast<std::size_t>(n.id)] = kSoftmaxOutputQParams;
    else {
      auto it = qparams.find(n.id);
      check(it != qparams.end(), Errc::kInvalidArgument, "missing quant params for node " + std::to_string(n.id));
      check_qparams(it->second);
      qp[static_cast<std::size_t>(n.id)] = it->second;
    }
  }
  const auto users = consumers(g);
  for (const auto& n : g.nodes) {
    if (!is<op::ReLU>(n.kind)) continue;
    const Node& producer = g.node(n.inputs[0]);
    const bool requantizing = is<op::Conv2D>(producer.kind) || is<op::Dense>(producer.kind) || is<op::Concat>(producer.kind);
    const bool is_output = std::find(g.output_ids.begin(), g.output_ids.end(), producer.id) != g.output_ids.end();
    if (requantizing && users[static_cast<std::size_t>(producer.id)].size() == 1 && !is_output)
      qp[static_cast<std::size_t>(producer.id)] = qp[static_cast<std::size_t>(n.id)];
  }
  for (const auto& n : g.nodes)
    if (is<op::ReLU>(n.kind) || is<op::MaxPool2D>(n.kind) || is<op::Upsample2xNearest>(n.kind))
      qp[static_cast<std::size_t>(n.id)] = qp[static_cast<std::size_t>(n.inputs[0])];

  QuantizedGraph qg;
  qg.input_id = g.input_id;
  qg.output_ids = g.output_ids;
  qg.input_shape = g.input_shape;
  for (const auto& n : g.nodes) {
    QNode q{n.id, n.kind, n.inputs, std::nullopt, {}, qp[static_cast<std::size_t>(n.id)], std::nullopt};
    if (is<op::Conv2D>(n.kind) || is<op::Dense>(n.kind)) {
      const auto& w = n.weights.at("weight");
      q.weight = quantize_weights_symmetric(w);
      auto bit = n.weights.find("bias");
      q.bias = quantize_bias(bit == n.weights.end() ? nullptr : &bit->second, w.shape()[0],
                             qp[static_cast<std::size_t>(n.inputs[0])].scale, q.weight->qp.scale);
    }
    qg.nodes.push_back(std::move(q));
  }
  return qg;
}

/// compute_qparams for every node with statistics.
inline std::map<int, QuantParams> qparams_from_stats(const CalibrationStats& stats,
                                                     CalibrationStrategy strategy = CalibrationStrategy::kMinMax) {
  std::map<int, QuantParams> out;
  for (std::size_t i = 0; i < stats.size(); ++i)
    if (stats[i].count > 0) out[static_cast<int>(i)] = compute_qparams(stats[i], strategy);
  return out;
}

}  // namespace qfk
