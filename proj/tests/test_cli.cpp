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

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "qfk/image.hpp"
#include "qfk/model_io.hpp"
#include "qfk/npy.hpp"
#include "testing.hpp"

namespace qfk {
namespace {

namespace fs = std::filesystem;

struct Result {
  int exit_code = 0;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs the CLI with `args` and outputs under `out`.
Result run(const fs::path& out, const std::string& args) {
  fs::create_directories(out.parent_path());
  const fs::path err = out.string() + ".stderr";
  const std::string cmd = std::string("\"") + QFK_CLI_PATH + "\" -o \"" + out.string() + "\" " + args + " > /dev/null 2> \"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Result r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

void write_images(const fs::path& dir, int n, std::uint64_t seed, std::int64_t size = 32) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < n; ++i) {
    Image img(size, size, 3);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng() % 256);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03d.png", i);
    save_png(img, dir / name);
  }
}

std::string small_model_flags() { return "--height 32 --width 32 --depth 2 --base-channels 4"; }

// Every regular file under `dir`, relative path -> bytes.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = new fs::path(testing::temp_dir("cli"));
    write_images(*root / "calib", 100, 1);
    write_images(*root / "few", 50, 2);
    write_images(*root / "frames", 8, 3);
    nlohmann::json labels;
    for (int i = 0; i < 8; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03d", i);
      labels[name] = i % 2;
    }
    std::ofstream(*root / "labels.json") << labels.dump();
    ASSERT_EQ(run(*root / "model", "build --seed 7 " + small_model_flags()).exit_code, 0);
    ASSERT_EQ(run(*root / "cal", "calibrate --model " + (*root / "model/model.qfk").string() + " --images " +
                                     (*root / "calib").string()).exit_code, 0);
    ASSERT_EQ(run(*root / "q", "quantize --model " + (*root / "model/model.qfk").string() + " --calibration " +
                                   (*root / "cal/calibration.json").string()).exit_code, 0);
  }
  static void TearDownTestSuite() { delete root; }
  static fs::path path(const std::string& rel) { return *root / rel; }
  static inline fs::path* root = nullptr;
};

TEST_F(Cli, BuildIsByteReproducible) {
  ASSERT_EQ(run(path("b1"), "build --seed 7 " + small_model_flags()).exit_code, 0);
  ASSERT_EQ(run(path("b2"), "build --seed 7 " + small_model_flags()).exit_code, 0);
  ASSERT_EQ(run(path("b3"), "build --seed 8 " + small_model_flags()).exit_code, 0);
  EXPECT_EQ(tree(path("b1")), tree(path("b2")));
  EXPECT_EQ(slurp(path("b1/model.qfk")), slurp(path("model/model.qfk")));
  EXPECT_NE(slurp(path("b1/model.qfk")), slurp(path("b3/model.qfk")));
  EXPECT_NO_THROW((void)decode_model(read_file(path("b1/model.qfk"))));
}

TEST_F(Cli, QuantizeCompileReproducible) {
  for (const char* d : {"p1", "p2"}) {
    const fs::path base = path(d);
    ASSERT_EQ(run(base / "cal", "calibrate --model " + path("model/model.qfk").string() + " --images " + path("calib").string()).exit_code, 0);
    ASSERT_EQ(run(base / "q", "quantize --model " + path("model/model.qfk").string() + " --calibration " +
                                  (base / "cal/calibration.json").string()).exit_code, 0);
    ASSERT_EQ(run(base / "c", "compile --model " + (base / "q/model_int8.qfk").string()).exit_code, 0);
  }
  EXPECT_EQ(slurp(path("p1/cal/calibration.json")), slurp(path("p2/cal/calibration.json")));
  EXPECT_EQ(slurp(path("p1/q/model_int8.qfk")), slurp(path("p2/q/model_int8.qfk")));
  EXPECT_EQ(slurp(path("p1/c/plan.json")), slurp(path("p2/c/plan.json")));
  EXPECT_EQ(slurp(path("p1/q/model_int8.qfk")), slurp(path("q/model_int8.qfk")));
}

TEST_F(Cli, InferWritesMasksAndReport) {
  for (const char* model : {"q/model_int8.qfk", "model/model.qfk"}) {
    const fs::path out = path(std::string("inf_") + (model[0] == 'q' ? "int8" : "fp32"));
    ASSERT_EQ(run(out, "infer --model " + path(model).string() + " --images " + path("frames").string()).exit_code, 0);
    int npy = 0;
    for (const auto& e : fs::directory_iterator(out / "masks")) {
      ++npy;
      const auto m = load_mask_npy(e.path());
      EXPECT_EQ(m.shape(), Shape({2, 32, 32}));
    }
    EXPECT_EQ(npy, 8);
    const auto report = nlohmann::json::parse(slurp(out / "report.json"));
    EXPECT_EQ(report["total"], 8);
    EXPECT_TRUE(report["accuracy"].is_null());
    EXPECT_GT(report["fps"].get<double>(), 0);
    const auto preds = nlohmann::json::parse(slurp(out / "predictions.json"));
    EXPECT_EQ(preds["frames"].size(), 8u);
    const auto runj = nlohmann::json::parse(slurp(out / "run.json"));
    EXPECT_EQ(runj["command"], "infer");
    EXPECT_EQ(runj["seed"], 0);
  }
}

TEST_F(Cli, InferThenEvalEqualsInlineLabels) {
  const std::string model = " --model " + path("q/model_int8.qfk").string() + " --images " + path("frames").string();
  ASSERT_EQ(run(path("ie_a"), "infer" + model).exit_code, 0);
  ASSERT_EQ(run(path("ie_b"), "eval --predictions " + path("ie_a/predictions.json").string() + " --labels " +
                                  path("labels.json").string()).exit_code, 0);
  ASSERT_EQ(run(path("ie_c"), "infer" + model + " --labels " + path("labels.json").string()).exit_code, 0);
  auto composed = nlohmann::json::parse(slurp(path("ie_b/report.json")));
  auto inline_ = nlohmann::json::parse(slurp(path("ie_c/report.json")));
  inline_.erase("fps");
  EXPECT_EQ(composed, inline_);
  EXPECT_EQ(composed["total"], 8);
  EXPECT_EQ(composed["correct"].get<int>() + composed["wrong"].get<int>(), 8);
}

TEST_F(Cli, SubcommandsAreIdempotent) {
  const std::string infer = "infer --model " + path("q/model_int8.qfk").string() + " --images " + path("frames").string();
  ASSERT_EQ(run(path("id1"), infer).exit_code, 0);
  ASSERT_EQ(run(path("id2"), infer).exit_code, 0);
  auto a = tree(path("id1")), b = tree(path("id2"));
  // Throughput is a timing, not an output of the computation.
  auto strip = [](std::string s) {
    auto j = nlohmann::json::parse(s);
    j.erase("fps");
    return j.dump();
  };
  a["report.json"] = strip(a["report.json"]);
  b["report.json"] = strip(b["report.json"]);
  EXPECT_EQ(a, b);

  const fs::path data = path("prepdata");
  write_images(data / "real", 6, 10, 16);
  write_images(data / "fake", 3, 11, 16);
  const std::string prep = "prep --real " + (data / "real").string() + " --fake " + (data / "fake").string() + " --ratios 0.34 0.33 0.33";
  ASSERT_EQ(run(path("pr1"), prep).exit_code, 0) << run(path("pr1"), prep).err;
  ASSERT_EQ(run(path("pr2"), prep).exit_code, 0);
  EXPECT_EQ(tree(path("pr1")), tree(path("pr2")));
  const auto labels = nlohmann::json::parse(slurp(path("pr1/labels.json")));
  EXPECT_EQ(labels.size(), 6u);
  EXPECT_EQ(labels["frame_000"], 1);
  EXPECT_EQ(labels["frame_005"], 0);
}

TEST_F(Cli, CalibrationSizeRule) {
  const auto r = run(path("few_out"), "calibrate --model " + path("model/model.qfk").string() + " --images " + path("few").string());
  EXPECT_EQ(r.exit_code, 3);
  EXPECT_NE(r.err.find("100-1000"), std::string::npos) << r.err;
  // One machine-parseable line.
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["command"], "calibrate");
  EXPECT_EQ(j["exit_code"], 3);
  EXPECT_EQ(run(path("few_forced"), "calibrate --force --model " + path("model/model.qfk").string() + " --images " +
                                        path("few").string()).exit_code, 0);
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run(path("e1"), "build --no-such-flag").exit_code, 2);
  EXPECT_EQ(run(path("e2"), "").exit_code, 2);
  const auto missing = run(path("e3"), "compile --model " + path("nope.qfk").string());
  EXPECT_EQ(missing.exit_code, 3);
  EXPECT_NE(missing.err.find("nope.qfk"), std::string::npos);
  std::ofstream(path("junk.qfk")) << "not a model";
  EXPECT_EQ(run(path("e4"), "compile --model " + path("junk.qfk").string()).exit_code, 3);
  // An FP32 model where an INT8 one is required.
  EXPECT_EQ(run(path("e5"), "compile --model " + path("model/model.qfk").string()).exit_code, 3);
}

TEST_F(Cli, OutputDirFromEnvironment) {
  const fs::path out = path("env_out");
  const std::string cmd = "QFK_OUTPUT_DIR=\"" + out.string() + "\" \"" + QFK_CLI_PATH + "\" build --seed 7 " +
                          small_model_flags() + " > /dev/null 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(slurp(out / "model.qfk"), slurp(path("model/model.qfk")));
}

TEST_F(Cli, Bench) {
  ASSERT_EQ(run(path("bench"), "bench --model " + path("model/model.qfk").string() + " --int8-model " +
                                   path("q/model_int8.qfk").string() + " --images 80").exit_code, 0);
  const auto j = nlohmann::json::parse(slurp(path("bench/bench.json")));
  ASSERT_EQ(j["reports"].size(), 2u);
  EXPECT_EQ(j["reports"][0]["warmup_batches"], 3);
  EXPECT_EQ(slurp(path("bench/bench.csv")).rfind("node,variant,precision,fps\n", 0), 0u);
}

}  // namespace
}  // namespace qfk
