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

// Acceptance checks. `acceptance --criterion N` runs one; no argument runs
// all nine. Each prints one PASS/FAIL line; the exit code is the number of
// failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "qfk/qfk.hpp"
#include "testing.hpp"

namespace {

using namespace qfk;
namespace fs = std::filesystem;

// Tolerances and sizes, fixed here.
constexpr int kOracleGraphs = 100;
constexpr int kOracleMaxNodes = 12;
constexpr double kOracleSeconds = 60;

constexpr std::int64_t kFidelitySize = 64;
constexpr int kFidelityDepth = 2;
constexpr std::size_t kFidelityCalib = 128;
constexpr std::size_t kFidelityInputs = 200;
constexpr double kMinAgreement = 0.95;
constexpr double kMaxMeanScoreDiff = 0.05;
constexpr double kFidelitySeconds = 120;

constexpr double kMinSpeedup = 1.5;
constexpr std::int64_t kBenchImages = 160;
constexpr std::int64_t kBenchWarmup = 3;
constexpr double kMinInstructionRatio = 1.6;
constexpr double kMaxInstructionRatio = 2.4;

constexpr double kLossTol = 1e-6;
constexpr int kMaskPairs = 50;
constexpr int kManifests = 1000;
constexpr int kSoftmaxInputs = 20;
constexpr double kSoftmaxTol = 1e-6;
constexpr int kFoldGraphs = 20;
constexpr double kFoldTol = 1e-4;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Outcome compiler_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  int equal = 0;
  for (int t = 0; t < kOracleGraphs; ++t) {
    const auto qg = testing::random_quantized_graph(rng, kOracleMaxNodes);
    const Plan plan = compile(qg);
    const TensorI8 x = testing::random_i8(plan.input_shape, qg.input_qparams(), rng);
    const auto want = run_quantized_reference(qg, x);
    const auto got = Executor(plan).run(x);
    bool same = want.size() == got.size();
    for (std::size_t o = 0; same && o < want.size(); ++o) same = want[o].q == got[o].q && want[o].qp == got[o].qp;
    equal += same;
  }
  const double s = seconds_since(t0);
  return {equal == kOracleGraphs && s < kOracleSeconds,
          fmt("%d/%d random graphs bit-exact (plan vs interpreter) in %.1fs", equal, kOracleGraphs, s)};
}

Outcome quantization_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  UYNetConfig cfg;
  cfg.input_h = cfg.input_w = kFidelitySize;
  cfg.encoder_depth = kFidelityDepth;
  const Graph g = build_uynet(cfg, 2024);
  const auto calib = synthetic_images(cfg.input_shape(1), kFidelityCalib, 11);
  const Plan plan = compile(quantize_model(g, calib));
  const auto inputs = synthetic_images(cfg.input_shape(1), kFidelityInputs, 12);
  Executor exec(plan);
  std::size_t agree = 0;
  double diff = 0;
  for (std::size_t b = 0; b < inputs.size(); b += kPlanBatch) {
    const std::size_t e = std::min(inputs.size(), b + kPlanBatch);
    const auto ref = results_from_f32(run_graph_f32(g, detail::stack_images(inputs, b, e)));
    std::vector<TensorI8> frames;
    for (std::size_t i = b; i < e; ++i) frames.push_back(quantize(inputs[i], plan.input_qp));
    const auto got = run_plan_int8(exec, frames);
    for (std::size_t i = 0; i < got.size(); ++i) {
      agree += got[i].label == ref[i].label;
      diff += std::abs(got[i].score - ref[i].score);
    }
  }
  const double rate = static_cast<double>(agree) / static_cast<double>(inputs.size());
  const double mean = diff / static_cast<double>(inputs.size());
  const double s = seconds_since(t0);
  return {rate >= kMinAgreement && mean <= kMaxMeanScoreDiff && s < kFidelitySeconds,
          fmt("decision agreement %.3f (>= %.2f), mean |score diff| %.5f (<= %.2f), %.1fs", rate, kMinAgreement, mean,
              kMaxMeanScoreDiff, s)};
}

Outcome throughput() {
  UYNetConfig cfg;
  cfg.input_h = cfg.input_w = kFidelitySize;
  cfg.encoder_depth = kFidelityDepth;
  const Graph g = build_uynet(cfg, 7);
  const Plan plan = compile(quantize_model(g, synthetic_images(cfg.input_shape(1), kFidelityCalib, 7)));
  BenchOptions o;
  o.images = kBenchImages;
  o.batch = kPlanBatch;
  o.warmup = kBenchWarmup;
  const auto fp32 = bench_fp32(g, o, 7);
  const auto int8 = bench_int8(plan, o, 7);
  const double speedup = int8.fps / fp32.fps;

  // Instruction counts of the full network and the segmentation-only network
  // at the default geometry.
  const UYNetConfig def;
  const auto calib = synthetic_images(def.input_shape(1), 2, 3);
  const auto full = compile(quantize_model(build_uynet(def, 7), calib, {CalibrationStrategy::kMinMax, true}));
  const auto seg = compile(quantize_model(build_unet_seg_only(def, 7), calib, {CalibrationStrategy::kMinMax, true}));
  const double ratio = static_cast<double>(full.instructions.size()) / static_cast<double>(seg.instructions.size());
  const bool speed_ok = speedup >= kMinSpeedup;
  const bool ratio_ok = ratio >= kMinInstructionRatio && ratio <= kMaxInstructionRatio;
  return {speed_ok && ratio_ok,
          fmt("int8 %.1f fps vs fp32 %.1f fps = %.2fx (>= %.1f: %s); instructions full/seg-only %zu/%zu = %.3f "
              "(in [%.1f, %.1f]: %s)",
              int8.fps, fp32.fps, speedup, kMinSpeedup, speed_ok ? "yes" : "no", full.instructions.size(),
              seg.instructions.size(), ratio, kMinInstructionRatio, kMaxInstructionRatio, ratio_ok ? "yes" : "no")};
}

Outcome loss_forms() {
  TensorF32 p(Shape{2, 2, 8, 8}, 0.5f);
  const Tensor<std::uint8_t> target(Shape{2, 8, 8}, 1);
  const double ce = cross_entropy_seg(p, target);
  const double bce = bce_class(0.5, 1);
  bool exact = true;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double a = testing::uniform(rng, 0, 10), b = testing::uniform(rng, 0, 10);
    exact = exact && final_loss(a, b).l_final == (a + b) / 2;
  }
  const double ln2 = std::log(2.0);
  return {std::abs(ce - ln2) <= kLossTol && std::abs(bce - ln2) <= kLossTol && exact,
          fmt("CE(uniform) - ln2 = %.2e, BCE(0.5,1) - ln2 = %.2e, final_loss == (a+b)/2 on 1000 pairs: %s", ce - ln2,
              bce - ln2, exact ? "yes" : "no")};
}

Image random_image(std::mt19937_64& rng, std::int64_t w, std::int64_t h) {
  Image img(w, h, 3);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng() % 256);
  return img;
}

Outcome mask_oracle() {
  std::mt19937_64 rng(5);
  int exact = 0;
  for (int t = 0; t < kMaskPairs; ++t) {
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng() % 64), h = 1 + static_cast<std::int64_t>(rng() % 64);
    const Image a = random_image(rng, w, h);
    Image b = a;
    for (auto& v : b.pixels)
      if (rng() % 2) v = static_cast<std::uint8_t>(std::clamp<int>(v + static_cast<int>(rng() % 121) - 60, 0, 255));
    const int threshold = static_cast<int>(rng() % 256);
    const auto m = make_mask(a, b, threshold);
    bool same = m.shape() == Shape{h, w};
    for (std::int64_t p = 0; same && p < w * h; ++p) {
      int d = 0;
      for (int k = 0; k < 3; ++k) d = std::max(d, std::abs(a.pixels[static_cast<std::size_t>(p * 3 + k)] - b.pixels[static_cast<std::size_t>(p * 3 + k)]));
      same = m[static_cast<std::size_t>(p)] == (d > threshold ? 1 : 0);
    }
    exact += same;
  }
  const Image a = random_image(rng, 31, 17);
  const auto m = make_mask(a, a, 0);
  const bool zeros = std::all_of(m.values().begin(), m.values().end(), [](std::uint8_t v) { return v == 0; });
  return {exact == kMaskPairs && zeros,
          fmt("%d/%d random pairs match the brute-force oracle; identical frames all zero: %s", exact, kMaskPairs,
              zeros ? "yes" : "no")};
}

Outcome leakage_freedom() {
  std::mt19937_64 rng(6);
  int clean = 0, within = 0;
  for (int t = 0; t < kManifests; ++t) {
    std::vector<int> sizes{124};
    const int extra = 2 + static_cast<int>(rng() % 40);
    for (int i = 0; i < extra; ++i) sizes.push_back(1 + static_cast<int>(rng() % 30));
    std::shuffle(sizes.begin(), sizes.end(), rng);
    ClusterMap clusters;
    int n = 0;
    for (std::size_t c = 0; c < sizes.size(); ++c)
      for (int i = 0; i < sizes[c]; ++i) clusters["f" + std::to_string(n++)] = static_cast<int>(c);
    const double a = 0.5 + testing::uniform(rng, 0, 0.3);
    const double b = testing::uniform(rng, 0.05, (1 - a) - 0.05);
    const SplitRatios r{a, b, 1 - a - b};
    const auto m = split_dataset(clusters, r, rng());
    std::map<int, std::set<Split>> splits_of;
    for (const auto& rec : m.records) splits_of[rec.cluster_id].insert(rec.split);
    clean += std::all_of(splits_of.begin(), splits_of.end(), [](const auto& kv) { return kv.second.size() == 1; });
    const auto got = m.split_sizes();
    bool ok = true;
    for (std::size_t s = 0; s < 3; ++s) ok = ok && std::abs(static_cast<double>(got[s]) - r[s] * n) <= 124 + 1e-9;
    within += ok;
  }
  return {clean == kManifests && within == kManifests,
          fmt("%d/%d manifests leakage-free, %d/%d within one largest cluster of target proportions", clean, kManifests,
              within, kManifests)};
}

Outcome npy_exact() {
  const auto dir = testing::temp_dir("acceptance_npy");
  std::mt19937_64 rng(7);
  TensorF32 mask = testing::random_tensor(Shape{2, 224, 224}, rng, 0, 1);
  save_mask_npy(mask, dir / "mask.npy");
  const Bytes b = read_file(dir / "mask.npy");
  const Bytes magic{0x93, 0x4E, 0x55, 0x4D, 0x50, 0x59, 0x01, 0x00};
  const bool prefix = b.size() >= 10 && std::equal(magic.begin(), magic.end(), b.begin());
  const std::size_t header = prefix ? 10u + (b[8] | (b[9] << 8)) : 0;
  const std::size_t data = b.size() - header;
  const auto back = load_mask_npy(dir / "mask.npy");
  const bool round = back.shape() == mask.shape() && std::memcmp(back.data(), mask.data(), mask.size() * 4) == 0;
  return {prefix && round && data == 401408,
          fmt("magic+version bytes %s, round trip exact: %s, data section %zu bytes (401408)", prefix ? "ok" : "wrong",
              round ? "yes" : "no", data)};
}

Outcome normalization() {
  std::mt19937_64 rng(8);
  const auto cfg = testing::small_config(64, 2);
  const Graph g = build_uynet(cfg, 8);
  double worst = 0;
  for (int t = 0; t < kSoftmaxInputs; ++t) {
    const auto out = run_graph_f32(g, testing::random_tensor(cfg.input_shape(1), rng, -4, 4));
    const std::int64_t plane = cfg.input_h * cfg.input_w;
    for (std::int64_t p = 0; p < plane; ++p)
      worst = std::max(worst, std::abs(static_cast<double>(out.mask_probs[static_cast<std::size_t>(p)]) +
                                       out.mask_probs[static_cast<std::size_t>(plane + p)] - 1.0));
  }
  double fold = 0;
  for (int t = 0; t < kFoldGraphs; ++t) {
    const Graph r = testing::random_graph(rng, {14, true});
    const auto x = testing::random_tensor(r.input_shape.with_batch(2), rng);
    const auto a = forward_f32(r, x), b = forward_f32(fold_batchnorm(r), x);
    for (std::size_t o = 0; o < a.size(); ++o)
      for (std::size_t i = 0; i < a[o].values().size(); ++i)
        fold = std::max(fold, std::abs(static_cast<double>(a[o].values()[i]) - b[o].values()[i]));
  }
  return {worst <= kSoftmaxTol && fold <= kFoldTol,
          fmt("max |sum - 1| %.2e over %d inputs (<= 1e-6), max BN-fold change %.2e over %d graphs (<= 1e-4)", worst,
              kSoftmaxInputs, fold, kFoldGraphs)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cli(const fs::path& out, const std::string& args) {
  const std::string cmd = std::string("\"") + QFK_CLI_PATH + "\" --seed 5 -o \"" + out.string() + "\" " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism() {
  const auto dir = testing::temp_dir("acceptance_det");
  fs::create_directories(dir / "calib");
  std::mt19937_64 rng(9);
  for (int i = 0; i < 100; ++i) save_png(random_image(rng, 64, 64), dir / "calib" / ("c" + std::to_string(i) + ".png"));
  const std::string shape = " --height 64 --width 64 --depth 2";
  // Same paths both times, so run records are comparable too.
  const fs::path r = dir / "run";
  const std::vector<std::string> artifacts{"build/model.qfk", "build/run.json", "cal/calibration.json", "cal/run.json",
                                           "q/model_int8.qfk", "q/run.json", "c/plan.json", "c/run.json"};
  int failures = 0;
  std::vector<std::vector<std::string>> snapshots;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(r);
    failures += cli(r / "build", "build" + shape) != 0;
    failures += cli(r / "cal", "calibrate --model " + (r / "build/model.qfk").string() + " --images " + (dir / "calib").string()) != 0;
    failures += cli(r / "q", "quantize --model " + (r / "build/model.qfk").string() + " --calibration " + (r / "cal/calibration.json").string()) != 0;
    failures += cli(r / "c", "compile --model " + (r / "q/model_int8.qfk").string()) != 0;
    snapshots.emplace_back();
    for (const auto& f : artifacts) snapshots.back().push_back(slurp(r / f));
  }
  int differ = 0;
  for (std::size_t i = 0; i < artifacts.size(); ++i) differ += snapshots[0][i].empty() || snapshots[0][i] != snapshots[1][i];
  return {failures == 0 && differ == 0,
          fmt("%d command failures; %d of %zu artifacts differ across two build/calibrate/quantize/compile runs", failures, differ,
              artifacts.size())};
}

const std::vector<std::pair<std::string, std::function<Outcome()>>>& criteria() {
  static const std::vector<std::pair<std::string, std::function<Outcome()>>> all{
      {"compiler oracle equivalence", compiler_oracle},
      {"quantization fidelity", quantization_fidelity},
      {"throughput and instruction ratio", throughput},
      {"loss closed forms", loss_forms},
      {"mask oracle", mask_oracle},
      {"leakage-freedom", leakage_freedom},
      {"NPY bit-exactness", npy_exact},
      {"softmax normalization and BN folding", normalization},
      {"determinism", determinism},
  };
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("qfk acceptance checks");
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);
  int failures = 0;
  for (std::size_t i = 0; i < criteria().size(); ++i) {
    if (only && static_cast<int>(i) + 1 != only) continue;
    Outcome o;
    try {
      o = criteria()[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria()[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures;
}
