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

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "qfk/graph.hpp"
#include "qfk/tensor.hpp"

namespace qfk {

struct UYNetConfig {
  std::int64_t input_h = 224;
  std::int64_t input_w = 224;
  int encoder_depth = 4;
  std::int64_t base_channels = 16;
  static constexpr std::int64_t kSegClasses = 2;  // real / fake per pixel
  static constexpr std::int64_t kInputChannels = 3;

  void validate() const {
    check(encoder_depth >= 2 && encoder_depth <= 8, Errc::kInvalidArgument,
          "encoder_depth must be in [2, 8], got " + std::to_string(encoder_depth));
    check(base_channels >= 1, Errc::kInvalidArgument, "base_channels must be >= 1");
    const std::int64_t div = std::int64_t{1} << encoder_depth;
    check(input_h >= div && input_w >= div && input_h % div == 0 && input_w % div == 0,
          Errc::kInvalidArgument,
          "input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
              " must be divisible by 2^encoder_depth = " + std::to_string(div));
  }

  Shape input_shape(std::int64_t batch = 1) const { return Shape{batch, kInputChannels, input_h, input_w}; }
};

namespace detail {

/// Deterministic He-uniform initializer. Draws are taken in graph construction
/// order, so a seed fixes every weight bit.
class WeightInit {
 public:
  explicit WeightInit(std::uint64_t seed) : rng_(seed) {}

  double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

  TensorF32 he_uniform(Shape shape, std::int64_t fan_in) {
    TensorF32 t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<float>((2.0 * uniform() - 1.0) * bound);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

class UYNetBuilder {
 public:
  UYNetBuilder(Graph& g, std::uint64_t seed) : g_(g), init_(seed) {}

  int conv(int x, std::int64_t in_c, std::int64_t out_c, std::int64_t k, std::int64_t pad) {
    WeightMap w;
    w["weight"] = init_.he_uniform(Shape{out_c, in_c, k, k}, in_c * k * k);
    w["bias"] = TensorF32(Shape{out_c}, 0.0f);
    return g_.add(op::Conv2D{out_c, k, k, 1, pad}, {x}, std::move(w));
  }

  int conv_bn_relu(int x, std::int64_t in_c, std::int64_t out_c) {
    int c = conv(x, in_c, out_c, 3, 1);
    WeightMap bn;
    bn["gamma"] = TensorF32(Shape{out_c}, 1.0f);
    bn["beta"] = TensorF32(Shape{out_c}, 0.0f);
    bn["mean"] = TensorF32(Shape{out_c}, 0.0f);
    bn["var"] = TensorF32(Shape{out_c}, 1.0f);
    int b = g_.add(op::BatchNorm{1e-5}, {c}, std::move(bn));
    return g_.add(op::ReLU{}, {b});
  }

  int double_conv(int x, std::int64_t in_c, std::int64_t out_c) {
    return conv_bn_relu(conv_bn_relu(x, in_c, out_c), out_c, out_c);
  }

  int dense(int x, std::int64_t in_f, std::int64_t out_f) {
    WeightMap w;
    w["weight"] = init_.he_uniform(Shape{out_f, in_f}, in_f);
    w["bias"] = TensorF32(Shape{out_f}, 0.0f);
    return g_.add(op::Dense{out_f}, {x}, std::move(w));
  }

 private:
  Graph& g_;
  WeightInit init_;
};

inline Graph build_unet_family(const UYNetConfig& cfg, std::uint64_t seed, bool with_classifier) {
  cfg.validate();
  Graph g;
  g.input_shape = cfg.input_shape(1);
  UYNetBuilder b(g, seed);
  g.input_id = g.add(op::Input{}, {});

  std::vector<int> skips;
  std::vector<std::int64_t> widths;
  int x = g.input_id;
  std::int64_t in_c = UYNetConfig::kInputChannels;
  for (int stage = 0; stage < cfg.encoder_depth; ++stage) {
    const std::int64_t c = cfg.base_channels << stage;
    x = b.double_conv(x, in_c, c);
    skips.push_back(x);
    widths.push_back(c);
    x = g.add(op::MaxPool2D{2, 2}, {x});
    in_c = c;
  }
  const std::int64_t bottleneck_c = cfg.base_channels << cfg.encoder_depth;
  const int bottleneck = b.double_conv(x, in_c, bottleneck_c);

  x = bottleneck;
  in_c = bottleneck_c;
  for (int stage = cfg.encoder_depth - 1; stage >= 0; --stage) {
    const std::int64_t c = widths[static_cast<std::size_t>(stage)];
    int up = g.add(op::Upsample2xNearest{}, {x});
    up = b.conv_bn_relu(up, in_c, c);
    int cat = g.add(op::Concat{}, {skips[static_cast<std::size_t>(stage)], up});
    x = b.double_conv(cat, 2 * c, c);
    in_c = c;
  }
  int logits = b.conv(x, in_c, UYNetConfig::kSegClasses, 1, 0);
  int mask = g.add(op::SoftmaxPerPixel{}, {logits});
  g.output_ids.push_back(mask);

  if (with_classifier) {
    int pooled = g.add(op::GlobalAvgPool{}, {bottleneck});
    int logit = b.dense(pooled, bottleneck_c, 1);
    g.output_ids.push_back(g.add(op::Sigmoid{}, {logit}));
  }
  return g;
}

}  // namespace detail

/// Multitask network: a UNet encoder whose bottleneck feeds both the UNet
/// decoder (per-pixel real/fake softmax) and a GlobalAvgPool -> Dense(1) ->
/// Sigmoid classification branch. Outputs are (mask probabilities, score).
inline Graph build_uynet(const UYNetConfig& cfg, std::uint64_t seed) {
  return detail::build_unet_family(cfg, seed, true);
}

/// The same network without the classification branch; shared layers get the
/// same weights as build_uynet with the same seed.
inline Graph build_unet_seg_only(const UYNetConfig& cfg, std::uint64_t seed) {
  return detail::build_unet_family(cfg, seed, false);
}

struct LossReport {
  double l_seg = 0;
  double l_cls = 0;
  double l_final = 0;
};

inline constexpr double kProbFloor = 1e-12;

/// Mean per-pixel cross-entropy of (N,2,H,W) probabilities against an (N,H,W)
/// binary target.
inline double cross_entropy_seg(const TensorF32& mask_probs, const Tensor<std::uint8_t>& target) {
  const auto& s = mask_probs.shape();
  check(s.rank() == 4 && s[1] == 2, Errc::kShapeMismatch, "mask probabilities must be (N,2,H,W), got " + s.to_string());
  const auto& t = target.shape();
  check(t.rank() == 3 && t[0] == s[0] && t[1] == s[2] && t[2] == s[3], Errc::kShapeMismatch,
        "target shape " + t.to_string() + " does not match mask " + s.to_string());
  const std::int64_t plane = s[2] * s[3];
  double total = 0;
  for (std::int64_t n = 0; n < s[0]; ++n)
    for (std::int64_t p = 0; p < plane; ++p) {
      const float p0 = mask_probs[static_cast<std::size_t>((n * 2) * plane + p)];
      const float p1 = mask_probs[static_cast<std::size_t>((n * 2 + 1) * plane + p)];
      check(std::abs(static_cast<double>(p0) + p1 - 1.0) <= 1e-5, Errc::kInvalidArgument,
            "mask probabilities do not sum to 1 at pixel " + std::to_string(p));
      const std::uint8_t label = target[static_cast<std::size_t>(n * plane + p)];
      check(label <= 1, Errc::kInvalidArgument, "segmentation target must be 0 or 1");
      total -= std::log(std::max(static_cast<double>(label ? p1 : p0), kProbFloor));
    }
  return total / static_cast<double>(s[0] * plane);
}

inline double bce_class(double p, int label) {
  check(label == 0 || label == 1, Errc::kInvalidArgument, "class label must be 0 or 1");
  p = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
  return -(label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

inline LossReport final_loss(double l_seg, double l_cls) {
  check(l_seg >= 0 && l_cls >= 0, Errc::kInvalidArgument, "losses must be nonnegative");
  return {l_seg, l_cls, (l_seg + l_cls) / 2};
}

}  // namespace qfk
