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

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfk/graph.hpp"
#include "qfk/quantizer.hpp"

// .qfk model container:
//   "QFKMODEL" | u16 version | u32 header length | UTF-8 JSON header | blobs
// Integers are little-endian. Each weight blob is referenced from the header
// by offset and size into the blob section and carries a CRC32.
namespace qfk {

static_assert(std::endian::native == std::endian::little, "the .qfk writer assumes a little-endian host");

inline constexpr char kModelMagic[8] = {'Q', 'F', 'K', 'M', 'O', 'D', 'E', 'L'};
inline constexpr std::uint16_t kModelVersion = 1;

using Bytes = std::vector<std::uint8_t>;
using json = nlohmann::json;

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  check(static_cast<bool>(in), Errc::kMissingFile, "cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(static_cast<bool>(out), Errc::kMissingFile, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  check(static_cast<bool>(out), Errc::kMissingFile, "short write to " + path.string());
}

namespace detail {

inline json kind_to_json(const NodeKind& k) {
  json j;
  j["type"] = kind_name(k);
  auto conv = [&](const op::Conv2D& c) {
    j["out_channels"] = c.out_channels;
    j["kernel"] = {c.kernel_h, c.kernel_w};
    j["stride"] = c.stride;
    j["padding"] = c.padding;
  };
  std::visit(overloaded{
                 [&](const op::Conv2D& c) { conv(c); },
                 [&](const op::ConvBiasReLU& c) { conv(c.conv); },
                 [&](const op::BatchNorm& b) { j["eps"] = b.eps; },
                 [&](const op::MaxPool2D& p) {
                   j["kernel"] = p.kernel;
                   j["stride"] = p.stride;
                 },
                 [&](const op::Dense& d) { j["out_features"] = d.out_features; },
                 [&](const op::DenseSigmoid& d) { j["out_features"] = d.dense.out_features; },
                 [](const auto&) {},
             },
             k);
  return j;
}

inline NodeKind kind_from_json(const json& j) {
  const auto type = j.at("type").get<std::string>();
  auto conv = [&] {
    return op::Conv2D{j.at("out_channels").get<std::int64_t>(), j.at("kernel").at(0).get<std::int64_t>(),
                      j.at("kernel").at(1).get<std::int64_t>(), j.at("stride").get<std::int64_t>(),
                      j.at("padding").get<std::int64_t>()};
  };
  if (type == "Input") return op::Input{};
  if (type == "Conv2D") return conv();
  if (type == "ConvBiasReLU") return op::ConvBiasReLU{conv()};
  if (type == "BatchNorm") return op::BatchNorm{j.at("eps").get<double>()};
  if (type == "ReLU") return op::ReLU{};
  if (type == "MaxPool2D") return op::MaxPool2D{j.at("kernel").get<std::int64_t>(), j.at("stride").get<std::int64_t>()};
  if (type == "Upsample2xNearest") return op::Upsample2xNearest{};
  if (type == "Concat") return op::Concat{};
  if (type == "GlobalAvgPool") return op::GlobalAvgPool{};
  if (type == "Dense") return op::Dense{j.at("out_features").get<std::int64_t>()};
  if (type == "DenseSigmoid") return op::DenseSigmoid{op::Dense{j.at("out_features").get<std::int64_t>()}};
  if (type == "Sigmoid") return op::Sigmoid{};
  if (type == "SoftmaxPerPixel") return op::SoftmaxPerPixel{};
  fail(Errc::kMalformed, "unknown node type '" + type + "'");
}

inline json qp_to_json(const QuantParams& q) { return json{{"scale", q.scale}, {"zero_point", q.zero_point}}; }
inline QuantParams qp_from_json(const json& j) {
  QuantParams q{j.at("scale").get<double>(), j.at("zero_point").get<std::int32_t>()};
  check(q.valid(), Errc::kMalformed, "invalid quant params in model header");
  return q;
}

class BlobWriter {
 public:
  template <class T>
  json add(const char* dtype, const Shape& shape, std::span<const T> values) {
    const auto offset = blobs_.size();
    const auto nbytes = values.size_bytes();
    blobs_.resize(offset + nbytes);
    if (nbytes) std::memcpy(blobs_.data() + offset, values.data(), nbytes);
    return json{{"dtype", dtype},
                {"shape", shape.dims()},
                {"offset", offset},
                {"nbytes", nbytes},
                {"crc32", crc32_of(blobs_.data() + offset, nbytes)}};
  }
  const Bytes& bytes() const { return blobs_; }

 private:
  Bytes blobs_;
};

class BlobReader {
 public:
  BlobReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <class T>
  std::vector<T> read(const json& ref, const char* dtype, Shape* shape_out) {
    check(ref.at("dtype").get<std::string>() == dtype, Errc::kMalformed,
          "blob dtype " + ref.at("dtype").get<std::string>() + ", expected " + dtype);
    const auto offset = ref.at("offset").get<std::uint64_t>();
    const auto nbytes = ref.at("nbytes").get<std::uint64_t>();
    check(offset <= size_ && nbytes <= size_ - offset, Errc::kTruncated,
          "truncated blob at offset " + std::to_string(offset) + " (" + std::to_string(nbytes) + " bytes)");
    check(crc32_of(data_ + offset, nbytes) == ref.at("crc32").get<std::uint32_t>(), Errc::kChecksum,
          "checksum failure in blob at offset " + std::to_string(offset));
    Shape shape(ref.at("shape").get<std::vector<std::int64_t>>());
    check(static_cast<std::uint64_t>(shape.volume()) * sizeof(T) == nbytes, Errc::kMalformed,
          "blob size does not match its shape");
    std::vector<T> out(static_cast<std::size_t>(shape.volume()));
    if (nbytes) std::memcpy(out.data(), data_ + offset, nbytes);
    if (shape_out) *shape_out = shape;
    return out;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
};

inline Bytes assemble(const json& header, const Bytes& blobs) {
  const std::string text = header.dump();
  Bytes out(kModelMagic, kModelMagic + 8);
  out.push_back(static_cast<std::uint8_t>(kModelVersion & 0xff));
  out.push_back(static_cast<std::uint8_t>(kModelVersion >> 8));
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blobs.begin(), blobs.end());
  return out;
}

struct Container {
  json header;
  const std::uint8_t* blobs = nullptr;
  std::size_t blob_size = 0;
};

inline Container parse_container(const Bytes& bytes) {
  check(bytes.size() >= 8 && std::memcmp(bytes.data(), kModelMagic, 8) == 0, Errc::kBadMagic,
        "bad magic: not a .qfk model");
  check(bytes.size() >= 14, Errc::kTruncated, "truncated model header");
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[8] | (bytes[9] << 8));
  check(version == kModelVersion, Errc::kVersionMismatch,
        "version mismatch: file has " + std::to_string(version) + ", reader supports " + std::to_string(kModelVersion));
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[10 + static_cast<std::size_t>(i)]) << (8 * i);
  check(bytes.size() - 14 >= len, Errc::kTruncated, "truncated model header");
  Container c;
  c.header = json::parse(bytes.begin() + 14, bytes.begin() + 14 + len, nullptr, false);
  check(!c.header.is_discarded() && c.header.is_object(), Errc::kMalformed, "model header is not valid JSON");
  c.blobs = bytes.data() + 14 + len;
  c.blob_size = bytes.size() - 14 - len;
  check(c.header.contains("blob_bytes") && c.header["blob_bytes"].get<std::uint64_t>() <= c.blob_size,
        Errc::kTruncated, "truncated blob section");
  return c;
}

template <class G>
json graph_frame(const G& g, const char* precision) {
  json h;
  h["format"] = "qfk";
  h["precision"] = precision;
  h["input_id"] = g.input_id;
  h["output_ids"] = g.output_ids;
  h["input_shape"] = g.input_shape.rank() ? json(g.input_shape.dims()) : json::array();
  return h;
}

template <class G>
void read_frame(const json& h, G& g) {
  g.input_id = h.at("input_id").get<int>();
  g.output_ids = h.at("output_ids").get<std::vector<int>>();
  auto dims = h.at("input_shape").get<std::vector<std::int64_t>>();
  if (!dims.empty()) g.input_shape = Shape(std::move(dims));
}

}  // namespace detail

inline Bytes encode_model(const Graph& g) {
  require_valid(g);
  detail::BlobWriter blobs;
  json h = detail::graph_frame(g, "fp32");
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json jn{{"id", n.id}, {"kind", detail::kind_to_json(n.kind)}, {"inputs", n.inputs}};
    json w = json::object();
    for (const auto& [name, t] : n.weights) w[name] = blobs.add<float>("f32", t.shape(), t.values());
    jn["weights"] = w;
    nodes.push_back(jn);
  }
  h["nodes"] = nodes;
  h["blob_bytes"] = blobs.bytes().size();
  return detail::assemble(h, blobs.bytes());
}

inline Bytes encode_model(const QuantizedGraph& g) {
  require_valid(structure_of(g));
  detail::BlobWriter blobs;
  json h = detail::graph_frame(g, "int8");
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    json jn{{"id", n.id}, {"kind", detail::kind_to_json(n.kind)}, {"inputs", n.inputs}, {"qparams", detail::qp_to_json(n.out_qp)}};
    if (n.inner_qp) jn["inner_qparams"] = detail::qp_to_json(*n.inner_qp);
    if (n.weight) {
      jn["weight"] = blobs.add<std::int8_t>("i8", n.weight->shape(), n.weight->q.values());
      jn["weight"]["qparams"] = detail::qp_to_json(n.weight->qp);
    }
    if (!n.bias.empty())
      jn["bias"] = blobs.add<std::int32_t>("i32", Shape{static_cast<std::int64_t>(n.bias.size())}, std::span<const std::int32_t>(n.bias));
    nodes.push_back(jn);
  }
  h["nodes"] = nodes;
  h["blob_bytes"] = blobs.bytes().size();
  return detail::assemble(h, blobs.bytes());
}

/// "fp32" or "int8", from the container header.
inline std::string model_precision(const Bytes& bytes) {
  return detail::parse_container(bytes).header.value("precision", "");
}

inline Graph decode_model(const Bytes& bytes) {
  auto c = detail::parse_container(bytes);
  check(c.header.value("precision", "") == "fp32", Errc::kMalformed, "expected an fp32 model");
  detail::BlobReader reader(c.blobs, c.blob_size);
  Graph g;
  try {
    detail::read_frame(c.header, g);
    for (const auto& jn : c.header.at("nodes")) {
      Node n;
      n.id = jn.at("id").get<int>();
      n.kind = detail::kind_from_json(jn.at("kind"));
      n.inputs = jn.at("inputs").get<std::vector<int>>();
      for (const auto& [name, ref] : jn.at("weights").items()) {
        Shape s;
        auto data = reader.read<float>(ref, "f32", &s);
        n.weights[name] = TensorF32(s, std::move(data));
      }
      g.nodes.push_back(std::move(n));
    }
  } catch (const json::exception& e) {
    fail(Errc::kMalformed, std::string("malformed model header: ") + e.what());
  }
  require_valid(g);
  return g;
}

inline QuantizedGraph decode_quantized_model(const Bytes& bytes) {
  auto c = detail::parse_container(bytes);
  check(c.header.value("precision", "") == "int8", Errc::kMalformed, "expected an int8 model");
  detail::BlobReader reader(c.blobs, c.blob_size);
  QuantizedGraph g;
  try {
    detail::read_frame(c.header, g);
    for (const auto& jn : c.header.at("nodes")) {
      QNode n;
      n.id = jn.at("id").get<int>();
      n.kind = detail::kind_from_json(jn.at("kind"));
      n.inputs = jn.at("inputs").get<std::vector<int>>();
      n.out_qp = detail::qp_from_json(jn.at("qparams"));
      if (jn.contains("inner_qparams")) n.inner_qp = detail::qp_from_json(jn["inner_qparams"]);
      if (jn.contains("weight")) {
        Shape s;
        auto data = reader.read<std::int8_t>(jn["weight"], "i8", &s);
        n.weight = TensorI8{Tensor<std::int8_t>(s, std::move(data)), detail::qp_from_json(jn["weight"].at("qparams"))};
      }
      if (jn.contains("bias")) n.bias = reader.read<std::int32_t>(jn["bias"], "i32", nullptr);
      g.nodes.push_back(std::move(n));
    }
  } catch (const json::exception& e) {
    fail(Errc::kMalformed, std::string("malformed model header: ") + e.what());
  }
  require_valid(structure_of(g));
  return g;
}

inline void save_model(const Graph& g, const std::filesystem::path& path) { write_file(path, encode_model(g)); }
inline void save_model(const QuantizedGraph& g, const std::filesystem::path& path) { write_file(path, encode_model(g)); }
inline Graph load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }
inline QuantizedGraph load_quantized_model(const std::filesystem::path& path) {
  return decode_quantized_model(read_file(path));
}

}  // namespace qfk
