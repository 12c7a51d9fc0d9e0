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
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfk/image.hpp"
#include "qfk/plan.hpp"
#include "qfk/reference.hpp"

namespace qfk {

inline constexpr double kFakeThreshold = 0.5;

struct PreprocessConfig {
  std::int64_t target_h = 224;
  std::int64_t target_w = 224;
  double value_scale = 1.0 / 255.0;
  QuantParams input_qp{1.0 / 255.0, -128};
};

/// Bilinear resize (half-pixel centres) to the target size, scaled to [0, 1],
/// laid out as (1,3,H,W).
inline TensorF32 preprocess_f32(const Image& img, const PreprocessConfig& cfg = {}) {
  check(!img.empty() && img.channels == 3, Errc::kInvalidArgument,
        "cannot preprocess an empty image (" + std::to_string(img.width) + "x" + std::to_string(img.height) + ")");
  const std::int64_t oh = cfg.target_h, ow = cfg.target_w;
  TensorF32 out(Shape{1, 3, oh, ow});
  const double sy = static_cast<double>(img.height) / static_cast<double>(oh);
  const double sx = static_cast<double>(img.width) / static_cast<double>(ow);
  for (std::int64_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const std::int64_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const std::int64_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < 3; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bottom = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(0, c, y, x) = static_cast<float>((top * (1 - wy) + bottom * wy) * cfg.value_scale);
      }
    }
  }
  return out;
}

inline TensorI8 preprocess(const Image& img, const PreprocessConfig& cfg = {}) {
  return quantize(preprocess_f32(img, cfg), cfg.input_qp);
}

struct InferenceResult {
  std::string frame_id;
  TensorF32 mask;  // (2,H,W) per-pixel probabilities
  int label = 0;   // 1 = fake
  double score = 0;
};

inline int label_for(double score) { return score >= kFakeThreshold ? 1 : 0; }

namespace detail {

/// Dequantized INT8 softmax codes renormalised so each pixel sums to one.
inline TensorF32 mask_from_codes(const std::int8_t* codes, std::int64_t channels, std::int64_t h, std::int64_t w,
                                 const QuantParams& qp) {
  TensorF32 mask(Shape{channels, h, w});
  const std::int64_t plane = h * w;
  for (std::int64_t p = 0; p < plane; ++p) {
    double sum = 0;
    for (std::int64_t c = 0; c < channels; ++c) sum += dequantize_value(codes[c * plane + p], qp);
    for (std::int64_t c = 0; c < channels; ++c)
      mask[static_cast<std::size_t>(c * plane + p)] =
          sum > 0 ? static_cast<float>(dequantize_value(codes[c * plane + p], qp) / sum) : static_cast<float>(1.0 / channels);
  }
  return mask;
}

}  // namespace detail

/// Runs up to eight preprocessed frames through a compiled U-YNet plan.
/// Partial batches are padded with zero-point frames whose outputs are dropped.
inline std::vector<InferenceResult> run_plan_int8(Executor& exec, const std::vector<TensorI8>& frames) {
  const Plan& plan = exec.plan();
  check(!frames.empty() && static_cast<std::int64_t>(frames.size()) <= kPlanBatch, Errc::kInvalidArgument,
        "batch size must be in [1, 8], got " + std::to_string(frames.size()));
  check(plan.output_buffers.size() == 2, Errc::kInvalidArgument, "plan does not have mask and score outputs");
  const std::int64_t per = plan.input_shape.volume() / kPlanBatch;
  TensorI8 batch{Tensor<std::int8_t>(plan.input_shape, static_cast<std::int8_t>(plan.input_qp.zero_point)), plan.input_qp};
  for (std::size_t i = 0; i < frames.size(); ++i) {
    check(frames[i].qp == plan.input_qp, Errc::kInvalidArgument,
          "frame " + std::to_string(i) + " quant params do not match the plan input");
    check(frames[i].shape().volume() == per, Errc::kShapeMismatch,
          "frame " + std::to_string(i) + " has shape " + frames[i].shape().to_string() + ", plan expects " +
              plan.input_shape.with_batch(1).to_string());
    std::copy_n(frames[i].q.data(), per, batch.q.data() + static_cast<std::int64_t>(i) * per);
  }
  const auto outs = exec.run(batch);
  const auto& mask = outs[0];
  const auto& score = outs[1];
  const auto& ms = mask.shape();
  const std::int64_t mplane = ms[1] * ms[2] * ms[3];
  std::vector<InferenceResult> results;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    InferenceResult r;
    r.mask = detail::mask_from_codes(mask.q.data() + static_cast<std::int64_t>(i) * mplane, ms[1], ms[2], ms[3], mask.qp);
    r.score = dequantize_value(score.q[i], score.qp);
    r.label = label_for(r.score);
    results.push_back(std::move(r));
  }
  return results;
}

inline std::vector<InferenceResult> run_plan_int8(const Plan& plan, const std::vector<TensorI8>& frames, int threads = 1) {
  Executor exec(plan, threads);
  return run_plan_int8(exec, frames);
}

/// FP32 counterpart of run_plan_int8 for a two-output graph.
inline std::vector<InferenceResult> results_from_f32(const F32Outputs& out) {
  std::vector<InferenceResult> results;
  const auto& ms = out.mask_probs.shape();
  const std::int64_t per = ms[1] * ms[2] * ms[3];
  for (std::int64_t i = 0; i < ms[0]; ++i) {
    InferenceResult r;
    r.mask = TensorF32(Shape{ms[1], ms[2], ms[3]},
                       std::vector<float>(out.mask_probs.data() + i * per, out.mask_probs.data() + (i + 1) * per));
    r.score = out.scores.empty() ? 0.0 : out.scores[static_cast<std::size_t>(i)];
    r.label = label_for(r.score);
    results.push_back(std::move(r));
  }
  return results;
}

struct EvalReport {
  std::int64_t total = 0;
  std::int64_t correct = 0;
  std::int64_t wrong = 0;
  double accuracy = 0;
};

inline EvalReport make_report(std::int64_t correct, std::int64_t total) {
  check(total > 0 && correct >= 0 && correct <= total, Errc::kInvalidArgument, "invalid prediction counts");
  return {total, correct, total - correct, static_cast<double>(correct) / static_cast<double>(total)};
}

using LabelMap = std::map<std::string, int>;

/// Labels file: JSON object mapping frame id to 0 (real) or 1 (fake).
inline LabelMap load_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  check(!j.is_discarded() && j.is_object(), Errc::kMalformed, "labels file must be a JSON object: " + path.string());
  LabelMap labels;
  for (const auto& [id, v] : j.items()) {
    check(v.is_number_integer() && (v.get<int>() == 0 || v.get<int>() == 1), Errc::kMalformed,
          "label for '" + id + "' must be 0 or 1");
    labels[id] = v.get<int>();
  }
  return labels;
}

inline EvalReport evaluate(const std::vector<InferenceResult>& results, const LabelMap& labels) {
  check(!results.empty(), Errc::kInvalidArgument, "no results");
  std::int64_t correct = 0;
  for (const auto& r : results) {
    auto it = labels.find(r.frame_id);
    check(it != labels.end(), Errc::kMissingLabel, "missing label for frame '" + r.frame_id + "'");
    correct += (it->second == r.label);
  }
  return make_report(correct, static_cast<std::int64_t>(results.size()));
}

inline EvalReport evaluate(const std::vector<InferenceResult>& results, const std::filesystem::path& labels_path) {
  return evaluate(results, load_labels(labels_path));
}

inline nlohmann::ordered_json report_json(const EvalReport& r, double fps) {
  return {{"total", r.total}, {"correct", r.correct}, {"wrong", r.wrong}, {"accuracy", r.accuracy}, {"fps", fps}};
}

}  // namespace qfk
