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
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfk/error.hpp"

namespace qfk {

struct BenchOptions {
  std::int64_t images = 80;
  std::int64_t batch = 8;
  std::int64_t warmup = 3;  // batches, untimed
  std::string node_name = "cpu";
  std::string model_variant = "full";  // "full" or "seg-only"
  std::string precision = "int8";      // "int8" or "fp32"
};

struct BenchReport {
  std::string node_name;
  std::string model_variant;
  std::string precision;
  std::int64_t images = 0;
  std::int64_t batch = 0;
  std::int64_t warmup_batches = 0;
  double wall_seconds = 0;
  double fps = 0;
  std::vector<double> batch_seconds;  // timed batches only
};

inline double fps_from(double images, double seconds) {
  check(seconds > 0 && images > 0, Errc::kInvalidArgument, "fps needs positive image count and time");
  return images / seconds;
}

/// Times `run_batch(batch_index)` over ceil(images / batch) batches after
/// `warmup` untimed batches. Each call processes one batch of frames.
template <class RunBatch>
BenchReport measure_fps(RunBatch&& run_batch, const BenchOptions& opts) {
  check(opts.batch >= 1, Errc::kInvalidArgument, "batch must be >= 1");
  check(opts.images >= 10 * opts.batch, Errc::kInvalidArgument,
        "need at least " + std::to_string(10 * opts.batch) + " images for a stable measurement, got " +
            std::to_string(opts.images));
  check(opts.warmup >= 1, Errc::kInvalidArgument, "warmup must be at least one batch");
  for (std::int64_t i = 0; i < opts.warmup; ++i) run_batch(i);

  BenchReport r;
  r.node_name = opts.node_name;
  r.model_variant = opts.model_variant;
  r.precision = opts.precision;
  r.batch = opts.batch;
  r.warmup_batches = opts.warmup;
  const std::int64_t batches = (opts.images + opts.batch - 1) / opts.batch;
  // A trailing partial batch still runs a whole batch; count what was timed.
  r.images = batches * opts.batch;
  for (std::int64_t i = 0; i < batches; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run_batch(opts.warmup + i);
    const auto t1 = std::chrono::steady_clock::now();
    r.batch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  for (double s : r.batch_seconds) r.wall_seconds += s;
  r.fps = fps_from(static_cast<double>(r.images), r.wall_seconds);
  return r;
}

inline nlohmann::ordered_json bench_to_json(const BenchReport& r) {
  return {{"node_name", r.node_name},       {"model_variant", r.model_variant}, {"precision", r.precision},
          {"images", r.images},             {"batch", r.batch},                 {"warmup_batches", r.warmup_batches},
          {"wall_seconds", r.wall_seconds}, {"fps", r.fps},                     {"batch_seconds", r.batch_seconds}};
}

struct ComparisonRow {
  BenchReport report;
  double ratio_vs_slowest = 1.0;
};

struct Comparison {
  std::vector<ComparisonRow> rows;  // fastest first
  std::string text;
  nlohmann::ordered_json json;
  std::string csv;
};

inline Comparison compare_report(const std::vector<BenchReport>& reports) {
  check(reports.size() >= 2, Errc::kInvalidArgument, "need >= 2 reports to compare");
  Comparison c;
  for (const auto& r : reports) c.rows.push_back({r, 1.0});
  std::stable_sort(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) { return a.report.fps > b.report.fps; });
  const double slowest = c.rows.back().report.fps;
  for (auto& row : c.rows) row.ratio_vs_slowest = row.report.fps / slowest;

  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-9s %-9s %12s %8s\n", "node", "variant", "precision", "fps", "ratio");
  c.text = line;
  c.csv = "node,variant,precision,fps\n";
  c.json = nlohmann::ordered_json::array();
  int n = 1;
  std::string notes;
  for (const auto& row : c.rows) {
    const auto& r = row.report;
    std::snprintf(line, sizeof line, "%-16s %-9s %-9s %12.2f %7.2fx [%d]\n", r.node_name.c_str(),
                  r.model_variant.c_str(), r.precision.c_str(), r.fps, row.ratio_vs_slowest, n);
    c.text += line;
    std::snprintf(line, sizeof line, "[%d] %s model, %s precision, batch %lld, %lld images after %lld warmup batches\n", n,
                  r.model_variant.c_str(), r.precision.c_str(), static_cast<long long>(r.batch),
                  static_cast<long long>(r.images), static_cast<long long>(r.warmup_batches));
    notes += line;
    std::snprintf(line, sizeof line, "%s,%s,%s,%.6f\n", r.node_name.c_str(), r.model_variant.c_str(), r.precision.c_str(), r.fps);
    c.csv += line;
    auto j = bench_to_json(r);
    j["ratio_vs_slowest"] = row.ratio_vs_slowest;
    c.json.push_back(j);
    ++n;
  }
  c.text += notes;
  return c;
}

}  // namespace qfk
