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

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qfk/model_io.hpp"

namespace qfk {

/// 8-bit interleaved image, row-major HWC.
struct Image {
  std::int64_t width = 0;
  std::int64_t height = 0;
  std::int64_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::int64_t w, std::int64_t h, std::int64_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w * h * c), fill) {}

  std::uint8_t& at(std::int64_t y, std::int64_t x, std::int64_t c) {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  std::uint8_t at(std::int64_t y, std::int64_t x, std::int64_t c) const {
    return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
  }
  bool empty() const { return width == 0 || height == 0; }
  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

inline Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  check(png_image_begin_read_from_file(&img, path.c_str()) != 0, Errc::kMalformed,
        "cannot decode PNG " + path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image out(img.width, img.height, 3);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(Errc::kMalformed, "cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

inline void write_png(const Image& image, const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  check(png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr) != 0, Errc::kMissingFile,
        "cannot write PNG " + path.string());
}

inline Image read_pnm(const std::filesystem::path& path) {
  const Bytes b = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t.push_back(static_cast<char>(b[pos++]));
    return t;
  };
  const std::string magic = token();
  check(magic == "P6" || magic == "P5", Errc::kMalformed, "unsupported PNM type in " + path.string());
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(token());
    h = std::stoll(token());
    maxval = std::stoll(token());
  } catch (const std::exception&) {
    fail(Errc::kMalformed, "malformed PNM header in " + path.string());
  }
  check(w > 0 && h > 0 && maxval == 255, Errc::kMalformed, "PNM must be 8-bit with nonzero size: " + path.string());
  ++pos;  // single whitespace before raster
  const std::int64_t c = magic == "P6" ? 3 : 1;
  check(b.size() >= pos + static_cast<std::size_t>(w * h * c), Errc::kMalformed, "truncated PNM raster in " + path.string());
  Image img(w, h, 3);
  for (std::int64_t i = 0; i < w * h; ++i)
    for (std::int64_t k = 0; k < 3; ++k)
      img.pixels[static_cast<std::size_t>(i * 3 + k)] = b[pos + static_cast<std::size_t>(i * c + (c == 3 ? k : 0))];
  return img;
}

inline std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

}  // namespace detail

inline bool is_image_file(const std::filesystem::path& p) {
  const auto e = detail::lower_ext(p);
  return e == ".png" || e == ".ppm" || e == ".pgm" || e == ".pnm";
}

/// Decodes PNG or binary PPM/PGM into 3-channel RGB.
inline Image load_image(const std::filesystem::path& path) {
  check(std::filesystem::exists(path), Errc::kMissingFile, "no such image: " + path.string());
  if (detail::lower_ext(path) == ".png") return detail::read_png(path);
  check(is_image_file(path), Errc::kMalformed, "unsupported image format: " + path.string());
  return detail::read_pnm(path);
}

inline void save_ppm(const Image& image, const std::filesystem::path& path) {
  const std::string header = (image.channels == 1 ? "P5\n" : "P6\n") + std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  write_file(path, out);
}

inline void save_png(const Image& image, const std::filesystem::path& path) { detail::write_png(image, path); }

/// Image files in a directory, sorted by file name.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  check(std::filesystem::is_directory(dir), Errc::kMissingFile, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace qfk
