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

#include <random>

#include "qfk/compiler.hpp"
#include "qfk/pipeline.hpp"
#include "qfk/quantizer.hpp"
#include "testing.hpp"

namespace qfk {
namespace {

Graph relu_graph(Shape in) {
  Graph g;
  g.input_id = g.add(op::Input{}, {});
  g.output_ids = {g.add(op::ReLU{}, {g.input_id})};
  g.input_shape = std::move(in);
  return g;
}

Graph single_conv(const TensorF32& w, const TensorF32& b) {
  Graph g;
  g.input_id = g.add(op::Input{}, {});
  const op::Conv2D c{w.shape()[0], w.shape()[2], w.shape()[3], 1, 0};
  g.output_ids = {g.add(c, {g.input_id}, {{"weight", w}, {"bias", b}})};
  g.input_shape = Shape{1, w.shape()[1], 4, 4};
  return g;
}

std::vector<TensorF32> images(const Shape& s, int n, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::vector<TensorF32> out;
  for (int i = 0; i < n; ++i) out.push_back(testing::random_tensor(s, rng, lo, hi));
  return out;
}

TensorStats stats_of(double lo, double hi) {
  TensorStats s;
  s.min = lo;
  s.max = hi;
  s.count = 1;
  return s;
}

TEST(Calibrate, IdentityOnZeros) {
  Graph g;
  g.input_id = g.add(op::Input{}, {});
  g.output_ids = {g.input_id};
  g.input_shape = Shape{1, 1, 2, 2};
  const std::vector<TensorF32> zeros(100, TensorF32(g.input_shape, 0.0f));
  const auto st = collect_calibration(g, zeros);
  EXPECT_EQ(st[0].min, 0.0);
  EXPECT_EQ(st[0].max, 0.0);
  EXPECT_EQ(st[0].count, 100);
}

TEST(Calibrate, ReluClipsNegatives) {
  const Graph g = relu_graph(Shape{1, 2, 3, 3});
  const auto imgs = images(g.input_shape, 150, 1);
  double observed_max = 0;
  for (const auto& t : imgs)
    for (float v : t.values()) observed_max = std::max(observed_max, static_cast<double>(v));
  const auto st = collect_calibration(g, imgs);
  EXPECT_EQ(st[1].min, 0.0);
  EXPECT_LE(st[1].max, 1.0);
  EXPECT_EQ(st[1].max, observed_max);
  for (const auto& s : st) EXPECT_EQ(s.count, 150);
}

TEST(Calibrate, SetSizeGuidance) {
  const Graph g = relu_graph(Shape{1, 1, 2, 2});
  try {
    (void)collect_calibration(g, images(g.input_shape, 50, 2));
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kCalibrationSize);
    EXPECT_NE(std::string(e.what()).find("100-1000"), std::string::npos);
  }
  EXPECT_THROW((void)collect_calibration(g, images(g.input_shape, 1001, 2)), Error);
  CalibrationOptions force;
  force.force = true;
  EXPECT_EQ(collect_calibration(g, images(g.input_shape, 50, 2), force)[1].count, 50);
}

TEST(Calibrate, RejectsUnfoldedGraph) {
  const Graph g = build_uynet(testing::small_config(32, 2), 0);
  CalibrationOptions force;
  force.force = true;
  EXPECT_THROW((void)collect_calibration(g, images(g.input_shape, 2, 3, 0, 1), force), Error);
}

TEST(QParams, SpecExamples) {
  auto qp = compute_qparams(stats_of(-1, 1));
  EXPECT_NEAR(qp.scale, 2.0 / 255.0, 1e-4);
  EXPECT_LE(std::abs(qp.zero_point), 1);

  qp = compute_qparams(stats_of(0, 0));
  EXPECT_NEAR(qp.scale, 2.0 / 255.0, 1e-12);
  EXPECT_EQ(qp.zero_point, 0);

  qp = compute_qparams(stats_of(0, 2.55));
  EXPECT_NEAR(qp.scale, 0.01, 1e-9);
  EXPECT_EQ(qp.zero_point, -128);
}

TEST(QParams, EmptyStatsRejected) { EXPECT_THROW((void)compute_qparams(TensorStats{}), Error); }

TEST(QParams, PercentileIgnoresOutliers) {
  const Graph g = relu_graph(Shape{1, 1, 10, 10});
  auto imgs = images(g.input_shape, 100, 4, 0, 1);
  imgs[7][3] = 1000.0f;
  CalibrationOptions o;
  o.histograms = true;
  const auto st = collect_calibration(g, imgs, o);
  const auto mm = compute_qparams(st[1], CalibrationStrategy::kMinMax);
  const auto pc = compute_qparams(st[1], CalibrationStrategy::kPercentile);
  EXPECT_GT(mm.scale, 1000.0 / 256);
  EXPECT_LT(pc.scale, 5.0 / 255);
  // No histogram collected.
  EXPECT_THROW((void)compute_qparams(collect_calibration(g, imgs)[1], CalibrationStrategy::kPercentile), Error);
}

TEST(QParamsProperty, RangeCoversCalibratedInterval) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 5000; ++t) {
    const double scale = std::pow(10.0, testing::uniform(rng, -4, 3));
    double lo = testing::uniform(rng, -1, 1) * scale;
    double hi = testing::uniform(rng, -1, 1) * scale;
    if (t % 7 == 0) lo = 0;
    if (t % 11 == 0) hi = lo;
    if (lo > hi) std::swap(lo, hi);
    const auto qp = compute_qparams(stats_of(lo, hi));
    ASSERT_NO_THROW(check_qparams(qp));
    const double rlo = qp.scale * (-128 - qp.zero_point);
    const double rhi = qp.scale * (127 - qp.zero_point);
    const double slack = 1e-12 * std::max(1.0, scale);
    ASSERT_LE(rlo, lo + slack) << lo << " " << hi;
    ASSERT_GE(rhi, hi - slack) << lo << " " << hi;
    // Zero is exactly representable.
    ASSERT_GE(qp.zero_point, -128);
    ASSERT_LE(qp.zero_point, 127);
  }
}

TEST(StatsProperty, ShardedCollectionMergesExactly) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 10; ++t) {
    const Graph g = fold_batchnorm(testing::random_graph(rng, {10, true}));
    std::vector<TensorF32> imgs;
    for (int i = 0; i < 12; ++i) imgs.push_back(testing::random_tensor(g.input_shape, rng));
    CalibrationOptions o;
    o.force = true;
    const auto whole = collect_calibration(g, imgs, o);
    const std::vector<TensorF32> a(imgs.begin(), imgs.begin() + 5), b(imgs.begin() + 5, imgs.begin() + 9),
        c(imgs.begin() + 9, imgs.end());
    const auto sa = collect_calibration(g, a, o), sb = collect_calibration(g, b, o), sc = collect_calibration(g, c, o);
    EXPECT_EQ(merge(merge(sa, sb), sc), whole);
    EXPECT_EQ(merge(sa, merge(sb, sc)), whole);
    EXPECT_EQ(merge(merge(sc, sb), sa), whole);
  }
}

TEST(QuantizeGraph, ZeroWeightsStayZero) {
  const TensorF32 w(Shape{2, 1, 3, 3}, 0.0f), b(Shape{2}, 0.0f);
  const Graph g = single_conv(w, b);
  const auto qg = quantize_graph(g, {{0, QuantParams{0.01, 0}}, {1, QuantParams{0.02, 3}}});
  for (auto q : qg.node(1).weight->q.values()) EXPECT_EQ(q, 0);
  for (auto v : qg.node(1).bias) EXPECT_EQ(v, 0);
}

TEST(QuantizeGraph, HandCheckedConv) {
  // max |w| = 127/64, so the weight scale is 1/64.
  const TensorF32 w(Shape{1, 1, 2, 2}, {1.984375f, -0.5f, 0.0078125f, -0.0234375f});
  const TensorF32 b(Shape{1}, {0.5f});
  const auto qg = quantize_graph(single_conv(w, b), {{0, QuantParams{0.125, -5}}, {1, QuantParams{0.05, 2}}});
  const auto& qw = *qg.node(1).weight;
  EXPECT_EQ(qw.qp.scale, 1.0 / 64);
  EXPECT_EQ(qw.qp.zero_point, 0);
  EXPECT_EQ(qw.q.values()[0], 127);
  EXPECT_EQ(qw.q.values()[1], -32);
  EXPECT_EQ(qw.q.values()[2], 1);   // 0.5 rounds away from zero
  EXPECT_EQ(qw.q.values()[3], -2);  // -1.5 too
  // 0.5 / (0.125 / 64) = 256
  EXPECT_EQ(qg.node(1).bias, std::vector<std::int32_t>{256});
  EXPECT_EQ(qg.node(1).out_qp, (QuantParams{0.05, 2}));
  EXPECT_EQ(qg.input_qparams(), (QuantParams{0.125, -5}));
}

TEST(QuantizeGraph, MissingQParamsNamesNode) {
  const TensorF32 w(Shape{1, 1, 1, 1}, 1.0f), b(Shape{1}, 0.0f);
  try {
    (void)quantize_graph(single_conv(w, b), {{0, QuantParams{0.1, 0}}});
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("node 1"), std::string::npos) << e.what();
  }
}

TEST(QuantizeGraph, FixedOutputParams) {
  const Graph g = fold_batchnorm(build_uynet(testing::small_config(32, 2), 0));
  const auto qg = quantize_model(g, images(g.input_shape, 3, 5, 0, 1), {CalibrationStrategy::kMinMax, true});
  for (const auto& n : qg.nodes) {
    if (is<op::Sigmoid>(n.kind)) EXPECT_EQ(n.out_qp, kSigmoidOutputQParams);
    if (is<op::SoftmaxPerPixel>(n.kind)) EXPECT_EQ(n.out_qp, kSoftmaxOutputQParams);
    EXPECT_FALSE(is<op::BatchNorm>(n.kind));
    EXPECT_NO_THROW(check_qparams(n.out_qp));
  }
}

TEST(QuantizeGraphProperty, Deterministic) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 20; ++t) {
    const Graph g = fold_batchnorm(testing::random_graph(rng, {12, true}));
    std::vector<TensorF32> imgs;
    for (int i = 0; i < 4; ++i) imgs.push_back(testing::random_tensor(g.input_shape, rng));
    CalibrationOptions o;
    o.force = true;
    const auto qps = qparams_from_stats(collect_calibration(g, imgs, o));
    EXPECT_EQ(quantize_graph(g, qps), quantize_graph(g, qps));
  }
}

TEST(QuantizeGraphProperty, StructurePreserved) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 20; ++t) {
    const Graph g = fold_batchnorm(testing::random_graph(rng));
    std::vector<TensorF32> imgs{testing::random_tensor(g.input_shape, rng)};
    const auto qg = quantize_model(g, imgs, {CalibrationStrategy::kMinMax, true});
    ASSERT_EQ(qg.size(), g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      EXPECT_EQ(qg.nodes[i].kind, g.nodes[i].kind);
      EXPECT_EQ(qg.nodes[i].inputs, g.nodes[i].inputs);
    }
    EXPECT_EQ(qg.output_ids, g.output_ids);
  }
}

}  // namespace
}  // namespace qfk
