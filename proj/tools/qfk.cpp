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

// qfk: deepfake segmentation/classification pipeline driver.
//
//   qfk prep      --real DIR [--fake DIR]            masks + manifest + labels
//   qfk build     [--height H --width W --depth D]   U-YNet -> model.qfk
//   qfk calibrate --model M --images DIR [--force]   -> calibration.json
//   qfk quantize  --model M --calibration C          -> model_int8.qfk
//   qfk compile   --model M                          -> plan.json
//   qfk infer     --model M --images DIR [--labels]  -> masks/, predictions.json, report.json
//   qfk eval      --predictions P --labels L         -> report.json
//   qfk bench     [--model M] [--precision int8,fp32] -> bench.json, bench.csv, bench.txt
//
// Outputs go to --output-dir (default $QFK_OUTPUT_DIR, else ./qfk_out) with a
// run.json record. Failures print one JSON line on stderr and exit with
// 2 (usage), 3 (data) or 4 (internal).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qfk/qfk.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

struct Common {
  std::string output_dir;
  std::uint64_t seed = 0;
  int threads = 1;
};

void write_text(const fs::path& path, const std::string& text) {
  qfk::write_file(path, qfk::Bytes(text.begin(), text.end()));
}

void write_json(const fs::path& path, const ojson& j) { write_text(path, j.dump(2) + "\n"); }

ojson read_json(const fs::path& path) {
  const auto bytes = qfk::read_file(path);
  auto j = ojson::parse(bytes.begin(), bytes.end(), nullptr, false);
  qfk::check(!j.is_discarded(), qfk::Errc::kMalformed, "not valid JSON: " + path.string());
  return j;
}

void write_run_record(const Common& c, const std::string& command, const ojson& config,
                      const std::vector<std::string>& outputs) {
  ojson run;
  run["tool"] = "qfk";
  run["version"] = kToolVersion;
  run["model_format_version"] = qfk::kModelVersion;
  run["command"] = command;
  run["seed"] = c.seed;
  run["config"] = config;
  run["outputs"] = outputs;
  write_json(fs::path(c.output_dir) / "run.json", run);
}

qfk::Shape image_shape_of(const qfk::Shape& input_shape) { return input_shape.with_batch(1); }

qfk::PreprocessConfig preprocess_for(const qfk::Shape& input_shape) {
  qfk::PreprocessConfig p;
  p.target_h = input_shape[2];
  p.target_w = input_shape[3];
  return p;
}

std::vector<std::pair<std::string, qfk::TensorF32>> load_frames(const fs::path& dir, const qfk::Shape& input_shape) {
  const auto cfg = preprocess_for(input_shape);
  std::vector<std::pair<std::string, qfk::TensorF32>> frames;
  for (const auto& p : qfk::list_images(dir)) frames.emplace_back(p.stem().string(), qfk::preprocess_f32(qfk::load_image(p), cfg));
  qfk::check(!frames.empty(), qfk::Errc::kMissingFile, "no images found in '" + dir.string() + "'");
  return frames;
}

qfk::CalibrationStrategy strategy_from(const std::string& s) {
  if (s == "minmax") return qfk::CalibrationStrategy::kMinMax;
  if (s == "percentile") return qfk::CalibrationStrategy::kPercentile;
  qfk::fail(qfk::Errc::kInvalidArgument, "unknown calibration strategy '" + s + "'");
}

// --- prep --------------------------------------------------------------------

struct PrepArgs {
  std::string real_dir, fake_dir, mask_format = "npy";
  int threshold = qfk::kDefaultMaskThreshold;
  double cluster_threshold = qfk::kDefaultClusterThreshold;
  std::vector<double> ratios{0.8, 0.1, 0.1};
};

void run_prep(const Common& c, const PrepArgs& a) {
  qfk::check(a.mask_format == "npy" || a.mask_format == "png", qfk::Errc::kInvalidArgument,
             "mask format must be npy or png");
  const auto pairs = qfk::discover_frame_pairs(a.real_dir, a.fake_dir);
  const fs::path out(c.output_dir);
  std::vector<std::pair<std::string, fs::path>> faces;
  ojson labels = ojson::object();
  std::map<std::string, std::string> mask_paths;
  for (const auto& p : pairs) {
    faces.emplace_back(p.frame_id, p.real_path);
    const auto mask = qfk::pair_mask(p, a.threshold);
    const std::string rel = "masks/" + p.frame_id + "." + a.mask_format;
    if (a.mask_format == "npy") {
      qfk::TensorF32 f(mask.shape());
      for (std::size_t i = 0; i < f.values().size(); ++i) f[i] = mask[i];
      qfk::save_mask_npy(f, out / rel);
    } else {
      qfk::Image img(mask.shape()[1], mask.shape()[0], 1);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask[i] ? 255 : 0;
      qfk::save_png(img, out / rel);
    }
    mask_paths[p.frame_id] = rel;
    labels[p.frame_id] = p.is_fake() ? 1 : 0;
  }
  const auto clusters = qfk::cluster_face_files(faces, a.cluster_threshold);
  auto manifest = qfk::split_dataset(clusters, {a.ratios[0], a.ratios[1], a.ratios[2]}, c.seed);
  for (auto& r : manifest.records) r.mask_path = mask_paths.at(r.frame_id);
  write_json(out / "manifest.json", qfk::manifest_to_json(manifest));
  write_json(out / "labels.json", labels);
  write_run_record(c, "prep",
                   {{"real", a.real_dir}, {"fake", a.fake_dir}, {"threshold", a.threshold},
                    {"cluster_threshold", a.cluster_threshold}, {"ratios", a.ratios}, {"mask_format", a.mask_format}},
                   {"manifest.json", "labels.json", "masks/"});
}

// --- build -------------------------------------------------------------------

struct BuildArgs {
  qfk::UYNetConfig cfg;
  std::string variant = "full";
};

void run_build(const Common& c, const BuildArgs& a) {
  qfk::check(a.variant == "full" || a.variant == "seg-only", qfk::Errc::kInvalidArgument,
             "variant must be full or seg-only");
  const auto g = a.variant == "full" ? qfk::build_uynet(a.cfg, c.seed) : qfk::build_unet_seg_only(a.cfg, c.seed);
  qfk::save_model(g, fs::path(c.output_dir) / "model.qfk");
  write_run_record(c, "build",
                   {{"height", a.cfg.input_h}, {"width", a.cfg.input_w}, {"depth", a.cfg.encoder_depth},
                    {"base_channels", a.cfg.base_channels}, {"variant", a.variant}},
                   {"model.qfk"});
}

// --- calibrate / quantize ----------------------------------------------------

struct CalibrateArgs {
  std::string model, images, strategy = "minmax";
  bool force = false;
};

void run_calibrate(const Common& c, const CalibrateArgs& a) {
  const auto bytes = qfk::read_file(a.model);
  const auto g = qfk::decode_model(bytes);
  const auto frames = load_frames(a.images, g.input_shape);
  std::vector<qfk::TensorF32> images;
  for (const auto& f : frames) images.push_back(f.second);
  const auto qps = qfk::calibrate_model(g, images, {strategy_from(a.strategy), a.force});
  ojson j;
  j["model_crc32"] = qfk::crc32_of(bytes.data(), bytes.size());
  j["strategy"] = a.strategy;
  j["images"] = images.size();
  j["qparams"] = ojson::object();
  for (const auto& [id, qp] : qps) j["qparams"][std::to_string(id)] = {{"scale", qp.scale}, {"zero_point", qp.zero_point}};
  write_json(fs::path(c.output_dir) / "calibration.json", j);
  write_run_record(c, "calibrate", {{"model", a.model}, {"images", a.images}, {"strategy", a.strategy}, {"force", a.force}},
                   {"calibration.json"});
}

struct QuantizeArgs {
  std::string model, calibration;
};

void run_quantize(const Common& c, const QuantizeArgs& a) {
  const auto bytes = qfk::read_file(a.model);
  const auto g = qfk::decode_model(bytes);
  const auto j = read_json(a.calibration);
  qfk::check(j.contains("model_crc32") && j.contains("qparams"), qfk::Errc::kMalformed,
             "calibration file lacks model_crc32/qparams");
  qfk::check(j["model_crc32"].get<std::uint32_t>() == qfk::crc32_of(bytes.data(), bytes.size()), qfk::Errc::kChecksum,
             "calibration file was produced for a different model");
  std::map<int, qfk::QuantParams> qps;
  for (const auto& [id, v] : j["qparams"].items()) qps[std::stoi(id)] = qfk::detail::qp_from_json(v);
  const auto qg = qfk::quantize_graph(qfk::fold_batchnorm(g), qps);
  qfk::save_model(qg, fs::path(c.output_dir) / "model_int8.qfk");
  write_run_record(c, "quantize", {{"model", a.model}, {"calibration", a.calibration}}, {"model_int8.qfk"});
}

// --- compile -----------------------------------------------------------------

void run_compile(const Common& c, const std::string& model) {
  const auto plan = qfk::compile(qfk::load_quantized_model(model));
  write_json(fs::path(c.output_dir) / "plan.json", qfk::plan_to_json(plan));
  write_run_record(c, "compile", {{"model", model}}, {"plan.json"});
}

// --- infer / eval ------------------------------------------------------------

struct InferArgs {
  std::string model, images, labels;
};

ojson predictions_json(const std::vector<qfk::InferenceResult>& results) {
  ojson frames = ojson::object();
  for (const auto& r : results) frames[r.frame_id] = {{"label", r.label}, {"score", r.score}};
  return {{"threshold", qfk::kFakeThreshold}, {"frames", frames}};
}

std::vector<qfk::InferenceResult> results_from_predictions(const ojson& j) {
  qfk::check(j.contains("frames") && j["frames"].is_object(), qfk::Errc::kMalformed, "predictions file lacks frames");
  std::vector<qfk::InferenceResult> out;
  for (const auto& [id, v] : j["frames"].items()) {
    qfk::InferenceResult r;
    r.frame_id = id;
    r.label = v.at("label").get<int>();
    r.score = v.at("score").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

ojson eval_json(const std::vector<qfk::InferenceResult>& results, const std::string& labels) {
  const auto rep = qfk::evaluate(results, fs::path(labels));
  return {{"total", rep.total}, {"correct", rep.correct}, {"wrong", rep.wrong}, {"accuracy", rep.accuracy}};
}

void run_infer(const Common& c, const InferArgs& a) {
  const auto bytes = qfk::read_file(a.model);
  const bool int8 = qfk::model_precision(bytes) == "int8";
  std::vector<qfk::InferenceResult> results;
  double seconds = 0;
  const fs::path out(c.output_dir);
  if (int8) {
    const auto plan = qfk::compile(qfk::decode_quantized_model(bytes));
    const auto frames = load_frames(a.images, plan.input_shape);
    qfk::Executor exec(plan, c.threads);
    for (std::size_t b = 0; b < frames.size(); b += qfk::kPlanBatch) {
      std::vector<qfk::TensorI8> batch;
      const std::size_t e = std::min(frames.size(), b + qfk::kPlanBatch);
      for (std::size_t i = b; i < e; ++i) batch.push_back(qfk::quantize(frames[i].second, plan.input_qp));
      const auto t0 = std::chrono::steady_clock::now();
      auto rs = qfk::run_plan_int8(exec, batch);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        rs[i].frame_id = frames[b + i].first;
        results.push_back(std::move(rs[i]));
      }
    }
  } else {
    const auto g = qfk::decode_model(bytes);
    const auto frames = load_frames(a.images, g.input_shape);
    std::vector<qfk::TensorF32> images;
    for (const auto& f : frames) images.push_back(f.second);
    for (std::size_t b = 0; b < frames.size(); b += qfk::kPlanBatch) {
      const std::size_t e = std::min(frames.size(), b + qfk::kPlanBatch);
      const auto batch = qfk::detail::stack_images(images, b, e);
      const auto t0 = std::chrono::steady_clock::now();
      auto rs = qfk::results_from_f32(qfk::run_graph_f32(g, batch));
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      for (std::size_t i = 0; i < rs.size(); ++i) {
        rs[i].frame_id = frames[b + i].first;
        results.push_back(std::move(rs[i]));
      }
    }
  }
  for (const auto& r : results) qfk::save_mask_npy(r.mask, out / "masks" / (r.frame_id + ".npy"));
  write_json(out / "predictions.json", predictions_json(results));
  ojson report;
  if (!a.labels.empty()) {
    report = eval_json(results, a.labels);
  } else {
    report = {{"total", results.size()}, {"correct", nullptr}, {"wrong", nullptr}, {"accuracy", nullptr}};
  }
  report["fps"] = seconds > 0 ? static_cast<double>(results.size()) / seconds : 0.0;
  write_json(out / "report.json", report);
  write_run_record(c, "infer", {{"model", a.model}, {"images", a.images}, {"labels", a.labels}, {"precision", int8 ? "int8" : "fp32"}},
                   {"masks/", "predictions.json", "report.json"});
}

void run_eval(const Common& c, const std::string& predictions, const std::string& labels) {
  const auto results = results_from_predictions(read_json(predictions));
  write_json(fs::path(c.output_dir) / "report.json", eval_json(results, labels));
  write_run_record(c, "eval", {{"predictions", predictions}, {"labels", labels}}, {"report.json"});
}

// --- bench -------------------------------------------------------------------

struct BenchArgs {
  std::string model, int8_model, node = "cpu", variant = "full";
  std::vector<std::string> precisions{"int8", "fp32"};
  qfk::UYNetConfig cfg;
  std::int64_t images = 80, batch = 8, warmup = 3, calib_images = 128;
};

void run_bench(const Common& c, BenchArgs a) {
  qfk::check(a.variant == "full" || a.variant == "seg-only", qfk::Errc::kInvalidArgument,
             "variant must be full or seg-only");
  qfk::Graph g;
  if (!a.model.empty())
    g = qfk::load_model(a.model);
  else
    g = a.variant == "full" ? qfk::build_uynet(a.cfg, c.seed) : qfk::build_unet_seg_only(a.cfg, c.seed);
  qfk::BenchOptions opts;
  opts.images = a.images;
  opts.batch = a.batch;
  opts.warmup = a.warmup;
  opts.node_name = a.node;
  opts.model_variant = a.variant;
  std::vector<qfk::BenchReport> reports;
  for (const auto& p : a.precisions) {
    if (p == "fp32") {
      reports.push_back(qfk::bench_fp32(g, opts, c.seed));
    } else if (p == "int8") {
      qfk::QuantizedGraph qg;
      if (!a.int8_model.empty()) {
        qg = qfk::load_quantized_model(a.int8_model);
      } else {
        const auto calib = qfk::synthetic_images(image_shape_of(g.input_shape), static_cast<std::size_t>(a.calib_images), c.seed);
        qg = qfk::quantize_model(g, calib, {qfk::CalibrationStrategy::kMinMax, true});
      }
      reports.push_back(qfk::bench_int8(qfk::compile(qg), opts, c.seed, c.threads));
    } else {
      qfk::fail(qfk::Errc::kInvalidArgument, "unknown precision '" + p + "'");
    }
  }
  const fs::path out(c.output_dir);
  ojson j;
  j["reports"] = ojson::array();
  for (const auto& r : reports) j["reports"].push_back(qfk::bench_to_json(r));
  std::string csv = "node,variant,precision,fps\n", text;
  if (reports.size() >= 2) {
    const auto cmp = qfk::compare_report(reports);
    j["comparison"] = cmp.json;
    csv = cmp.csv;
    text = cmp.text;
  } else {
    for (const auto& r : reports) {
      char line[256];
      std::snprintf(line, sizeof line, "%s,%s,%s,%.6f\n", r.node_name.c_str(), r.model_variant.c_str(), r.precision.c_str(), r.fps);
      csv += line;
      std::snprintf(line, sizeof line, "%s %s %s: %.2f fps\n", r.node_name.c_str(), r.model_variant.c_str(), r.precision.c_str(), r.fps);
      text += line;
    }
  }
  write_json(out / "bench.json", j);
  write_text(out / "bench.csv", csv);
  write_text(out / "bench.txt", text);
  std::cout << text;
  write_run_record(c, "bench",
                   {{"model", a.model}, {"int8_model", a.int8_model}, {"node", a.node}, {"variant", a.variant},
                    {"precisions", a.precisions}, {"images", a.images}, {"batch", a.batch}, {"warmup", a.warmup},
                    {"threads", c.threads}, {"isa", qfk::simd::isa_name(qfk::simd::active_isa())}},
                   {"bench.json", "bench.csv", "bench.txt"});
}

int report_error(const std::string& command, std::string_view code, const std::string& message, int status) {
  ojson e{{"error", code}, {"command", command}, {"message", message}, {"exit_code", status}};
  std::cerr << e.dump() << std::endl;
  return status;
}

void add_model_shape(CLI::App* sub, qfk::UYNetConfig& cfg) {
  sub->add_option("--height", cfg.input_h, "Input height")->capture_default_str();
  sub->add_option("--width", cfg.input_w, "Input width")->capture_default_str();
  sub->add_option("--depth", cfg.encoder_depth, "Encoder depth")->capture_default_str();
  sub->add_option("--base-channels", cfg.base_channels, "Channels of the first encoder stage")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qfk: quantized deepfake segmentation and classification pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kToolVersion);

  Common common;
  if (const char* env = std::getenv("QFK_OUTPUT_DIR")) common.output_dir = env;
  if (common.output_dir.empty()) common.output_dir = "qfk_out";
  app.add_option("-o,--output-dir", common.output_dir, "Directory for all outputs (default $QFK_OUTPUT_DIR or ./qfk_out)");
  app.add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads for plan execution")->check(CLI::Range(1, 256))->capture_default_str();

  PrepArgs prep;
  auto* s_prep = app.add_subcommand("prep", "Build masks, labels and a leakage-free split manifest");
  s_prep->add_option("--real", prep.real_dir, "Directory of real frames")->required()->check(CLI::ExistingDirectory);
  s_prep->add_option("--fake", prep.fake_dir, "Directory of fake frames (same file stems)")->check(CLI::ExistingDirectory);
  s_prep->add_option("--threshold", prep.threshold, "Mask difference threshold")->check(CLI::Range(0, 255))->capture_default_str();
  s_prep->add_option("--cluster-threshold", prep.cluster_threshold, "Hash distance merge threshold")->capture_default_str();
  s_prep->add_option("--ratios", prep.ratios, "train val test ratios")->expected(3);
  s_prep->add_option("--mask-format", prep.mask_format, "npy or png")->check(CLI::IsMember({"npy", "png"}));

  BuildArgs build;
  auto* s_build = app.add_subcommand("build", "Construct a U-YNet and write model.qfk");
  add_model_shape(s_build, build.cfg);
  s_build->add_option("--variant", build.variant, "full or seg-only")->check(CLI::IsMember({"full", "seg-only"}));

  CalibrateArgs cal;
  auto* s_cal = app.add_subcommand("calibrate", "Record activation ranges over a calibration set");
  s_cal->add_option("--model", cal.model, "FP32 model")->required();
  s_cal->add_option("--images", cal.images, "Calibration image directory")->required();
  s_cal->add_option("--strategy", cal.strategy, "minmax or percentile")->check(CLI::IsMember({"minmax", "percentile"}));
  s_cal->add_flag("--force", cal.force, "Accept fewer than 100 or more than 1000 images");

  QuantizeArgs quant;
  auto* s_quant = app.add_subcommand("quantize", "Quantize a model with calibrated parameters");
  s_quant->add_option("--model", quant.model, "FP32 model")->required();
  s_quant->add_option("--calibration", quant.calibration, "calibration.json")->required();

  std::string compile_model;
  auto* s_compile = app.add_subcommand("compile", "Compile an INT8 model and dump the plan");
  s_compile->add_option("--model", compile_model, "INT8 model")->required();

  InferArgs inf;
  auto* s_infer = app.add_subcommand("infer", "Run a model over a directory of frames");
  s_infer->add_option("--model", inf.model, "FP32 or INT8 model")->required();
  s_infer->add_option("--images", inf.images, "Frame directory")->required();
  s_infer->add_option("--labels", inf.labels, "Labels JSON for an inline evaluation");

  std::string ev_pred, ev_labels;
  auto* s_eval = app.add_subcommand("eval", "Score predictions against labels");
  s_eval->add_option("--predictions", ev_pred, "predictions.json")->required();
  s_eval->add_option("--labels", ev_labels, "Labels JSON")->required();

  BenchArgs bench;
  bench.cfg.input_h = bench.cfg.input_w = 64;
  bench.cfg.encoder_depth = 2;
  auto* s_bench = app.add_subcommand("bench", "Measure FP32 and INT8 throughput");
  s_bench->add_option("--model", bench.model, "FP32 model (default: build one)");
  s_bench->add_option("--int8-model", bench.int8_model, "INT8 model (default: quantize with synthetic calibration)");
  add_model_shape(s_bench, bench.cfg);
  s_bench->add_option("--variant", bench.variant, "full or seg-only")->check(CLI::IsMember({"full", "seg-only"}));
  s_bench->add_option("--precision", bench.precisions, "Precisions to measure")->delimiter(',');
  s_bench->add_option("--images", bench.images, "Timed images")->capture_default_str();
  s_bench->add_option("--batch", bench.batch, "Batch size")->capture_default_str();
  s_bench->add_option("--warmup", bench.warmup, "Untimed warmup batches")->capture_default_str();
  s_bench->add_option("--calib-images", bench.calib_images, "Synthetic calibration images")->capture_default_str();
  s_bench->add_option("--node", bench.node, "Node name for the report")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("", "usage", e.what(), 2);
  }

  std::string command;
  for (auto* s : app.get_subcommands()) command = s->get_name();
  try {
    fs::create_directories(common.output_dir);
    if (command == "prep") run_prep(common, prep);
    else if (command == "build") run_build(common, build);
    else if (command == "calibrate") run_calibrate(common, cal);
    else if (command == "quantize") run_quantize(common, quant);
    else if (command == "compile") run_compile(common, compile_model);
    else if (command == "infer") run_infer(common, inf);
    else if (command == "eval") run_eval(common, ev_pred, ev_labels);
    else if (command == "bench") run_bench(common, bench);
  } catch (const qfk::Error& e) {
    return report_error(command, qfk::errc_name(e.code()), e.what(), e.code() == qfk::Errc::kInternal ? 4 : 3);
  } catch (const fs::filesystem_error& e) {
    return report_error(command, "filesystem", e.what(), 3);
  } catch (const nlohmann::json::exception& e) {
    return report_error(command, "malformed", e.what(), 3);
  } catch (const std::exception& e) {
    return report_error(command, "internal", e.what(), 4);
  }
  return 0;
}
