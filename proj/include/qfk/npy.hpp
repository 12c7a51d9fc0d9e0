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

#include <cstring>
#include <filesystem>
#include <regex>
#include <string>
#include <vector>

#include "qfk/model_io.hpp"
#include "qfk/tensor.hpp"

// NPY format 1.0, little-endian float32, C order.
namespace qfk {

inline constexpr std::uint8_t kNpyMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};

inline std::string npy_header_text(const Shape& shape) {
  std::string dims;
  for (std::size_t i = 0; i < shape.rank(); ++i) dims += (i ? ", " : "") + std::to_string(shape[i]);
  if (shape.rank() == 1) dims += ",";
  std::string h = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + dims + "), }";
  // magic(6) + version(2) + length(2) + text + '\n' is a multiple of 64.
  const std::size_t total = 10 + h.size() + 1;
  h.append((64 - total % 64) % 64, ' ');
  h.push_back('\n');
  return h;
}

inline Bytes encode_npy(const TensorF32& t) {
  const std::string header = npy_header_text(t.shape());
  Bytes out(kNpyMagic, kNpyMagic + 6);
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  out.insert(out.end(), p, p + t.size() * sizeof(float));
  return out;
}

inline TensorF32 decode_npy(const Bytes& bytes) {
  check(bytes.size() >= 10 && std::memcmp(bytes.data(), kNpyMagic, 6) == 0, Errc::kMalformed, "not an NPY file");
  check(bytes[6] == 1 && bytes[7] == 0, Errc::kMalformed, "unsupported NPY version");
  const std::size_t hlen = bytes[8] | (bytes[9] << 8);
  check(bytes.size() >= 10 + hlen, Errc::kMalformed, "truncated NPY header");
  const std::string header(bytes.begin() + 10, bytes.begin() + 10 + static_cast<std::ptrdiff_t>(hlen));
  static const std::regex descr(R"('descr'\s*:\s*'<f4')");
  static const std::regex fortran(R"('fortran_order'\s*:\s*False)");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;
  check(std::regex_search(header, descr), Errc::kMalformed, "NPY dtype must be '<f4'");
  check(std::regex_search(header, fortran), Errc::kMalformed, "NPY must be C-ordered");
  check(std::regex_search(header, m, shape_re), Errc::kMalformed, "NPY header has no shape");
  std::vector<std::int64_t> dims;
  static const std::regex num(R"(\d+)");
  const std::string body = m[1].str();
  for (auto it = std::sregex_iterator(body.begin(), body.end(), num); it != std::sregex_iterator(); ++it)
    dims.push_back(std::stoll(it->str()));
  check(!dims.empty(), Errc::kMalformed, "NPY scalar arrays are not supported");
  Shape shape(dims);
  const std::size_t need = static_cast<std::size_t>(shape.volume()) * sizeof(float);
  check(bytes.size() - 10 - hlen == need, Errc::kMalformed, "NPY data size does not match its shape");
  TensorF32 t(shape);
  std::memcpy(t.data(), bytes.data() + 10 + hlen, need);
  return t;
}

/// Writes a (2,H,W) or (H,W) mask.
inline void save_mask_npy(const TensorF32& mask, const std::filesystem::path& path) {
  check(mask.shape().rank() == 2 || mask.shape().rank() == 3, Errc::kShapeMismatch,
        "mask must be (2,H,W) or (H,W), got " + mask.shape().to_string());
  write_file(path, encode_npy(mask));
}

inline TensorF32 load_mask_npy(const std::filesystem::path& path) { return decode_npy(read_file(path)); }

}  // namespace qfk
