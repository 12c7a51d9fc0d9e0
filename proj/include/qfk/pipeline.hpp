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

// End-to-end steps shared by the command-line tool and the test suites.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qfk/bench.hpp"
#include "qfk/compiler.hpp"
#include "qfk/quantizer.hpp"
#include "qfk/reference.hpp"
#include "qfk/runtime.hpp"

namespace qfk {

/// `count` images of shape (1,C,H,W) with pixels drawn uniformly from the
/// 256 levels of an 8-bit image, scaled to [0, 1].
inline std::vector<TensorF32> synthetic_images(const Shape& image_shape, std::size_t count, std::uint64_t seed) {
  check(image_shape.rank() == 4 && image_shape[0] == 1, Errc::kInvalidArgument,
        "synthetic images need a (1,C,H,W) shape, got " + image_shape.to_string());
  std::mt19937_64 rng(seed);
  std::vector<TensorF32> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TensorF32 t(image_shape);
    for (auto& v : t.values()) v = static_cast<float>(rng() % 256) / 255.0f;
    out.push_back(std::move(t));
  }
  return out;
}

struct QuantizeOptions {
  CalibrationStrategy strategy = CalibrationStrategy::kMinMax;
  bool force = false;  // allow calibration sets outside [100, 1000]
};

/// Calibrated quantization parameters for the batch-norm-folded form of `g`.
inline std::map<int, QuantParams> calibrate_model(const Graph& g, const std::vector<TensorF32>& images,
                                                  const QuantizeOptions& opts = {}) {
  const Graph folded = fold_batchnorm(g);
  CalibrationOptions co;
  co.force = opts.force;
  co.histograms = opts.strategy == CalibrationStrategy::kPercentile;
  return qparams_from_stats(collect_calibration(folded, images, co), opts.strategy);
}

/// Folds, calibrates and quantizes `g`.
inline QuantizedGraph quantize_model(const Graph& g, const std::vector<TensorF32>& images,
                                     const QuantizeOptions& opts = {}) {
  return quantize_graph(fold_batchnorm(g), calibrate_model(g, images, opts));
}

/// Input batches cycled through by the benchmarks; eight distinct batches.
inline std::vector<TensorF32> bench_batches(const Shape& input_shape, std::int64_t batch, std::uint64_t seed) {
  const auto images = synthetic_images(input_shape.with_batch(1), static_cast<std::size_t>(8 * batch), seed);
  std::vector<TensorF32> out;
  for (std::size_t b = 0; b < 8; ++b)
    out.push_back(detail::stack_images(images, b * static_cast<std::size_t>(batch), (b + 1) * static_cast<std::size_t>(batch)));
  return out;
}

/// Throughput of the single-precision reference path.
inline BenchReport bench_fp32(const Graph& g, BenchOptions opts, std::uint64_t seed) {
  opts.precision = "fp32";
  const auto batches = bench_batches(g.input_shape, opts.batch, seed);
  return measure_fps([&](std::int64_t i) { (void)forward_f32(g, batches[static_cast<std::size_t>(i % 8)]); }, opts);
}

/// Throughput of the compiled INT8 plan. Batches smaller than the plan
/// batch are padded, so they cost a full plan batch.
inline BenchReport bench_int8(const Plan& plan, BenchOptions opts, std::uint64_t seed, int threads = 1) {
  check(opts.batch >= 1 && opts.batch <= kPlanBatch, Errc::kInvalidArgument,
        "int8 batch must be in [1, 8], got " + std::to_string(opts.batch));
  opts.precision = "int8";
  const auto floats = bench_batches(plan.input_shape.with_batch(1), kPlanBatch, seed);
  std::vector<TensorI8> batches;
  for (const auto& b : floats) batches.push_back(quantize(b, plan.input_qp));
  Executor exec(plan, threads);
  return measure_fps([&](std::int64_t i) { (void)exec.run(batches[static_cast<std::size_t>(i % 8)]); }, opts);
}

}  // namespace qfk
