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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qfk/reference.hpp"
#include "qfk/uynet.hpp"
#include "testing.hpp"

namespace qfk {
namespace {

const Shape& out_shape(const std::vector<Shape>& s, int id) { return s[static_cast<std::size_t>(id)]; }

TEST(BuildUYNet, DefaultShapes) {
  const Graph g = build_uynet(UYNetConfig{}, 0);
  ASSERT_EQ(g.output_ids.size(), 2u);
  const auto s = infer_shapes(g, Shape{3, 3, 224, 224});
  EXPECT_EQ(out_shape(s, g.output_ids[0]), Shape({3, 2, 224, 224}));
  EXPECT_EQ(out_shape(s, g.output_ids[1]), Shape({3, 1}));
  EXPECT_EQ(g.input_shape, Shape({1, 3, 224, 224}));
}

TEST(BuildUYNet, SmallShapes) {
  const Graph g = build_uynet(testing::small_config(64, 2), 0);
  const auto s = infer_shapes(g, Shape{5, 3, 64, 64});
  EXPECT_EQ(out_shape(s, g.output_ids[0]), Shape({5, 2, 64, 64}));
}

TEST(BuildUYNet, SameSeedSameWeights) {
  const auto cfg = testing::small_config(32, 2);
  EXPECT_EQ(build_uynet(cfg, 9), build_uynet(cfg, 9));
  EXPECT_NE(build_uynet(cfg, 9), build_uynet(cfg, 10));
}

TEST(BuildUYNet, ConfigValidation) {
  UYNetConfig cfg;
  cfg.encoder_depth = 1;
  EXPECT_THROW((void)build_uynet(cfg, 0), Error);
  cfg = UYNetConfig{};
  cfg.input_h = 100;  // not divisible by 16
  EXPECT_THROW((void)build_uynet(cfg, 0), Error);
  cfg = UYNetConfig{};
  cfg.base_channels = 0;
  EXPECT_THROW((void)build_uynet(cfg, 0), Error);
}

TEST(BuildUYNet, EncoderStagesAreConvBnReluTwiceThenPool) {
  const Graph g = build_uynet(testing::small_config(32, 3), 0);
  int pools = 0, bns = 0, convs3 = 0;
  for (const auto& n : g.nodes) {
    pools += is<op::MaxPool2D>(n.kind);
    bns += is<op::BatchNorm>(n.kind);
    if (const auto* c = std::get_if<op::Conv2D>(&n.kind)) convs3 += c->kernel_h == 3;
    if (is<op::BatchNorm>(n.kind)) EXPECT_TRUE(is<op::Conv2D>(g.node(n.inputs[0]).kind));
  }
  EXPECT_EQ(pools, 3);
  // 2 per encoder stage + 2 bottleneck + 3 per decoder stage.
  EXPECT_EQ(convs3, 2 * 3 + 2 + 3 * 3);
  EXPECT_EQ(bns, convs3);
}

TEST(BuildUYNet, SegOnlySharesWeights) {
  const auto cfg = testing::small_config(32, 2);
  const Graph full = build_uynet(cfg, 5);
  const Graph seg = build_unet_seg_only(cfg, 5);
  ASSERT_EQ(seg.output_ids.size(), 1u);
  ASSERT_LT(seg.size(), full.size());
  for (std::size_t i = 0; i < seg.size(); ++i) EXPECT_EQ(seg.nodes[i], full.nodes[i]) << i;
}

TEST(UYNetProperty, MaskMatchesInputSpatialDims) {
  for (int depth = 2; depth <= 4; ++depth)
    for (std::int64_t h : {16, 32, 48})
      for (std::int64_t w : {16, 32, 64}) {
        UYNetConfig cfg;
        cfg.encoder_depth = depth;
        cfg.input_h = h;
        cfg.input_w = w;
        cfg.base_channels = 2;
        if (h % (1 << depth) || w % (1 << depth)) continue;
        const Graph g = build_uynet(cfg, 0);
        EXPECT_EQ(out_shape(infer_shapes(g, cfg.input_shape(2)), g.output_ids[0]), Shape({2, 2, h, w}));
      }
}

TEST(UYNetProperty, ClassBranchIsSinglePathThroughBottleneck) {
  for (int depth = 2; depth <= 4; ++depth) {
    const Graph g = build_uynet(testing::small_config(64, depth), 0);
    // Count input-to-class-output paths by dynamic programming over the DAG.
    std::vector<std::int64_t> paths(g.size(), 0), to_mask(g.size(), 0);
    paths[static_cast<std::size_t>(g.input_id)] = 1;
    for (const auto& n : g.nodes)
      for (int in : n.inputs) paths[static_cast<std::size_t>(n.id)] += paths[static_cast<std::size_t>(in)];
    EXPECT_EQ(paths[static_cast<std::size_t>(g.output_ids[1])], 1);
    // No decoder node (Upsample or Concat) is an ancestor of the class output.
    std::vector<char> anc(g.size(), 0);
    anc[static_cast<std::size_t>(g.output_ids[1])] = 1;
    for (int i = static_cast<int>(g.size()) - 1; i >= 0; --i)
      if (anc[static_cast<std::size_t>(i)])
        for (int in : g.node(i).inputs) anc[static_cast<std::size_t>(in)] = 1;
    int gap_input = -1;
    for (const auto& n : g.nodes) {
      if (!anc[static_cast<std::size_t>(n.id)]) continue;
      EXPECT_FALSE(is<op::Upsample2xNearest>(n.kind) || is<op::Concat>(n.kind)) << n.id;
      if (is<op::GlobalAvgPool>(n.kind)) gap_input = n.inputs[0];
    }
    // The pooled tensor is the bottleneck, which also feeds the decoder.
    ASSERT_GE(gap_input, 0);
    const auto s = infer_shapes(g, g.input_shape);
    EXPECT_EQ(out_shape(s, gap_input)[2], 64 >> depth);
    EXPECT_EQ(consumers(g)[static_cast<std::size_t>(gap_input)].size(), 2u);
  }
}

TEST(UYNetProperty, SoftmaxSumsToOne) {
  std::mt19937_64 rng(8);
  const auto cfg = testing::small_config(32, 2);
  const Graph g = build_uynet(cfg, 3);
  for (int t = 0; t < 3; ++t) {
    const auto out = run_graph_f32(g, testing::random_tensor(cfg.input_shape(2), rng, -3, 3));
    const auto& s = out.mask_probs.shape();
    const std::int64_t plane = s[2] * s[3];
    for (std::int64_t n = 0; n < s[0]; ++n)
      for (std::int64_t p = 0; p < plane; ++p) {
        const double sum = static_cast<double>(out.mask_probs[static_cast<std::size_t>(n * 2 * plane + p)]) +
                           out.mask_probs[static_cast<std::size_t>((n * 2 + 1) * plane + p)];
        ASSERT_NEAR(sum, 1.0, 1e-6);
      }
  }
}

// --- losses -------------------------------------------------------------------

TensorF32 probs(std::int64_t n, std::int64_t h, std::int64_t w, float p1) {
  TensorF32 t(Shape{n, 2, h, w});
  const std::int64_t plane = h * w;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t p = 0; p < plane; ++p) {
      t[static_cast<std::size_t>(b * 2 * plane + p)] = 1 - p1;
      t[static_cast<std::size_t>((b * 2 + 1) * plane + p)] = p1;
    }
  return t;
}

Tensor<std::uint8_t> target(std::int64_t n, std::int64_t h, std::int64_t w, std::uint8_t v) {
  return Tensor<std::uint8_t>(Shape{n, h, w}, v);
}

TEST(Loss, CrossEntropyExamples) {
  EXPECT_NEAR(cross_entropy_seg(probs(2, 3, 4, 0.5f), target(2, 3, 4, 1)), std::log(2.0), 1e-6);
  EXPECT_NEAR(cross_entropy_seg(probs(2, 3, 4, 0.5f), target(2, 3, 4, 0)), 0.693147, 1e-6);
  EXPECT_NEAR(cross_entropy_seg(probs(1, 2, 2, 1.0f), target(1, 2, 2, 1)), 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy_seg(probs(1, 5, 5, 0.25f), target(1, 5, 5, 1)), 1.386294, 1e-6);
}

TEST(Loss, CrossEntropyFloorsZeroProbability) {
  EXPECT_NEAR(cross_entropy_seg(probs(1, 1, 1, 1.0f), target(1, 1, 1, 0)), -std::log(kProbFloor), 1e-6);
}

TEST(Loss, CrossEntropyErrors) {
  EXPECT_THROW((void)cross_entropy_seg(probs(1, 2, 2, 0.5f), target(1, 3, 2, 0)), Error);
  TensorF32 bad = probs(1, 2, 2, 0.5f);
  bad[0] = 0.9f;
  EXPECT_THROW((void)cross_entropy_seg(bad, target(1, 2, 2, 0)), Error);
}

TEST(Loss, BceExamples) {
  EXPECT_NEAR(bce_class(0.5, 1), std::log(2.0), 1e-6);
  EXPECT_LE(bce_class(1.0, 1), 1e-12);
  EXPECT_NEAR(bce_class(0.1, 0), 0.105361, 1e-6);
  EXPECT_TRUE(std::isfinite(bce_class(0.0, 1)));
}

TEST(Loss, FinalLossExamples) {
  EXPECT_EQ(final_loss(2.0, 4.0).l_final, 3.0);
  EXPECT_EQ(final_loss(0, 0).l_final, 0.0);
  EXPECT_EQ(final_loss(std::log(2.0), std::log(2.0)).l_final, std::log(2.0));
  EXPECT_THROW((void)final_loss(-1, 0), Error);
  const auto r = final_loss(0.25, 0.75);
  EXPECT_EQ(r.l_seg, 0.25);
  EXPECT_EQ(r.l_cls, 0.75);
}

}  // namespace
}  // namespace qfk
