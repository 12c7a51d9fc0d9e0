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
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qfk/image.hpp"
#include "qfk/tensor.hpp"

namespace qfk {

inline constexpr int kDefaultMaskThreshold = 25;
inline constexpr double kDefaultClusterThreshold = 0.1;

/// (H,W) mask of 0/1 values.
using BinaryMask = Tensor<std::uint8_t>;

/// 1 where any channel of the two frames differs by more than `threshold`.
inline BinaryMask make_mask(const Image& real, const Image& fake, int threshold = kDefaultMaskThreshold) {
  check(real.width == fake.width && real.height == fake.height && real.channels == fake.channels,
        Errc::kShapeMismatch,
        "frame dimensions differ: " + std::to_string(real.width) + "x" + std::to_string(real.height) + " vs " +
            std::to_string(fake.width) + "x" + std::to_string(fake.height));
  check(threshold >= 0 && threshold <= 255, Errc::kInvalidArgument, "mask threshold must be in [0, 255]");
  check(!real.empty(), Errc::kInvalidArgument, "empty frame");
  BinaryMask mask(Shape{real.height, real.width});
  const std::int64_t c = real.channels;
  for (std::int64_t p = 0; p < real.width * real.height; ++p) {
    int diff = 0;
    for (std::int64_t k = 0; k < c; ++k) {
      const auto i = static_cast<std::size_t>(p * c + k);
      diff = std::max(diff, std::abs(static_cast<int>(real.pixels[i]) - static_cast<int>(fake.pixels[i])));
    }
    mask[static_cast<std::size_t>(p)] = diff > threshold ? 1 : 0;
  }
  return mask;
}

inline BinaryMask zero_mask(const Image& frame) { return BinaryMask(Shape{frame.height, frame.width}, 0); }

/// 64-bit average hash: 8x8 area-averaged luminance, bit set where a cell is
/// brighter than the mean of all cells. Bit 63 is the top-left cell.
inline std::uint64_t average_hash(const Image& img) {
  check(!img.empty(), Errc::kInvalidArgument, "cannot hash an empty image");
  std::array<double, 64> cells{};
  for (int cy = 0; cy < 8; ++cy)
    for (int cx = 0; cx < 8; ++cx) {
      const std::int64_t y0 = cy * img.height / 8, x0 = cx * img.width / 8;
      const std::int64_t y1 = std::max(y0 + 1, (cy + 1) * img.height / 8);
      const std::int64_t x1 = std::max(x0 + 1, (cx + 1) * img.width / 8);
      double sum = 0;
      for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) {
          double luma = 0;
          for (std::int64_t k = 0; k < img.channels; ++k) luma += img.at(y, x, k);
          sum += luma / static_cast<double>(img.channels);
        }
      cells[static_cast<std::size_t>(cy * 8 + cx)] = sum / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  const double mean = std::accumulate(cells.begin(), cells.end(), 0.0) / 64.0;
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < 64; ++i)
    if (cells[i] > mean) h |= std::uint64_t{1} << (63 - i);
  return h;
}

/// Fraction of differing bits, in [0, 1].
inline double hash_distance(std::uint64_t a, std::uint64_t b) { return std::popcount(a ^ b) / 64.0; }

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

using ClusterMap = std::map<std::string, int>;

/// Groups frames whose average-hash distance is at most `threshold`
/// (transitively). Cluster ids are dense from 0, numbered in order of each
/// cluster's smallest frame id, so input order never matters.
inline ClusterMap cluster_hashes(const std::map<std::string, std::uint64_t>& hashes,
                                 double threshold = kDefaultClusterThreshold) {
  check(!hashes.empty(), Errc::kInvalidArgument, "no frames to cluster");
  std::vector<std::pair<std::string, std::uint64_t>> items(hashes.begin(), hashes.end());
  detail::UnionFind uf(items.size());
  for (std::size_t i = 0; i < items.size(); ++i)
    for (std::size_t j = i + 1; j < items.size(); ++j)
      if (hash_distance(items[i].second, items[j].second) <= threshold) uf.unite(i, j);
  ClusterMap out;
  std::map<std::size_t, int> dense;
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto [it, inserted] = dense.try_emplace(uf.find(i), static_cast<int>(dense.size()));
    out[items[i].first] = it->second;
  }
  return out;
}

inline ClusterMap cluster_faces(const std::vector<std::pair<std::string, Image>>& frames,
                                double threshold = kDefaultClusterThreshold) {
  check(!frames.empty(), Errc::kInvalidArgument, "no frames to cluster");
  std::map<std::string, std::uint64_t> hashes;
  for (const auto& [id, img] : frames) {
    check(hashes.emplace(id, average_hash(img)).second, Errc::kInvalidArgument, "duplicate frame id '" + id + "'");
  }
  return cluster_hashes(hashes, threshold);
}

/// As cluster_faces, decoding each frame from disk.
inline ClusterMap cluster_face_files(const std::vector<std::pair<std::string, std::filesystem::path>>& frames,
                                     double threshold = kDefaultClusterThreshold) {
  check(!frames.empty(), Errc::kInvalidArgument, "no frames to cluster");
  std::map<std::string, std::uint64_t> hashes;
  for (const auto& [id, path] : frames) {
    Image img;
    try {
      img = load_image(path);
    } catch (const Error& e) {
      fail(Errc::kMalformed, "unreadable frame '" + id + "': " + e.what());
    }
    check(hashes.emplace(id, average_hash(img)).second, Errc::kInvalidArgument, "duplicate frame id '" + id + "'");
  }
  return cluster_hashes(hashes, threshold);
}

/// A real frame and, when present, the fake generated from it.
struct FramePair {
  std::string frame_id;
  std::filesystem::path real_path;
  std::filesystem::path fake_path;  // empty for real-only frames
  bool is_fake() const { return !fake_path.empty(); }
};

/// Pairs every image in `real_dir` with the image of the same stem in
/// `fake_dir`. A fake with no real counterpart is an error.
inline std::vector<FramePair> discover_frame_pairs(const std::filesystem::path& real_dir,
                                                   const std::filesystem::path& fake_dir) {
  std::map<std::string, std::filesystem::path> fakes;
  if (!fake_dir.empty())
    for (const auto& f : list_images(fake_dir)) fakes.emplace(f.stem().string(), f);
  std::vector<FramePair> pairs;
  std::map<std::string, bool> seen;
  for (const auto& r : list_images(real_dir)) {
    FramePair p{r.stem().string(), r, {}};
    check(seen.emplace(p.frame_id, true).second, Errc::kInvalidArgument, "duplicate frame id '" + p.frame_id + "'");
    if (auto it = fakes.find(p.frame_id); it != fakes.end()) {
      p.fake_path = it->second;
      fakes.erase(it);
    }
    pairs.push_back(std::move(p));
  }
  check(fakes.empty(), Errc::kMissingFile,
        fakes.empty() ? std::string() : "fake frame '" + fakes.begin()->first + "' has no real frame");
  check(!pairs.empty(), Errc::kMissingFile, "no frames found in '" + real_dir.string() + "'");
  return pairs;
}

/// Ground-truth mask of a pair: thresholded difference, or zeros when real-only.
inline BinaryMask pair_mask(const FramePair& p, int threshold = kDefaultMaskThreshold) {
  const Image real = load_image(p.real_path);
  if (!p.is_fake()) return zero_mask(real);
  return make_mask(real, load_image(p.fake_path), threshold);
}

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  fail(Errc::kMalformed, "unknown split '" + s + "'");
}

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  double operator[](std::size_t i) const { return i == 0 ? train : i == 1 ? val : test; }
};

struct ManifestRecord {
  std::string frame_id;
  int cluster_id = 0;
  Split split = Split::kTrain;
  std::string mask_path;
  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;  // sorted by frame id
  SplitRatios ratios;

  std::array<std::int64_t, 3> split_sizes() const {
    std::array<std::int64_t, 3> n{};
    for (const auto& r : records) ++n[static_cast<std::size_t>(r.split)];
    return n;
  }
};

/// Assigns whole clusters to splits: largest cluster first, each to the split
/// furthest below its frame quota; ties broken by the seeded generator.
inline DatasetManifest split_dataset(const ClusterMap& clusters, const SplitRatios& ratios, std::uint64_t seed = 0) {
  check(ratios.train > 0 && ratios.val > 0 && ratios.test > 0, Errc::kInvalidArgument, "split ratios must be positive");
  check(std::abs(ratios.train + ratios.val + ratios.test - 1.0) <= 1e-9, Errc::kInvalidArgument,
        "split ratios must sum to 1");
  std::map<int, std::int64_t> sizes;
  for (const auto& [id, c] : clusters) ++sizes[c];
  check(sizes.size() >= 3, Errc::kInvalidArgument,
        "need at least 3 clusters to populate train/val/test, got " + std::to_string(sizes.size()));

  std::mt19937_64 rng(seed);
  std::vector<int> order;
  for (const auto& [c, n] : sizes) order.push_back(c);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });

  const auto total = static_cast<double>(clusters.size());
  std::array<double, 3> assigned{};
  std::map<int, Split> split_of;
  for (int c : order) {
    std::array<double, 3> deficit{};
    double best = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      deficit[s] = ratios[s] * total - assigned[s];
      best = std::max(best, deficit[s]);
    }
    std::vector<std::size_t> tied;
    for (std::size_t s = 0; s < 3; ++s)
      if (deficit[s] >= best - 1e-9) tied.push_back(s);
    const std::size_t pick = tied.size() == 1 ? tied[0] : tied[rng() % tied.size()];
    assigned[pick] += static_cast<double>(sizes[c]);
    split_of[c] = static_cast<Split>(pick);
  }

  DatasetManifest m;
  m.ratios = ratios;
  for (const auto& [id, c] : clusters) m.records.push_back({id, c, split_of[c], ""});
  return m;
}

/// True when no cluster has frames in two different splits.
inline bool leakage_free(const DatasetManifest& m) {
  std::map<int, Split> seen;
  for (const auto& r : m.records) {
    auto [it, inserted] = seen.emplace(r.cluster_id, r.split);
    if (!inserted && it->second != r.split) return false;
  }
  return true;
}

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
  nlohmann::ordered_json j;
  j["ratios"] = {{"train", m.ratios.train}, {"val", m.ratios.val}, {"test", m.ratios.test}};
  const auto n = m.split_sizes();
  j["split_sizes"] = {{"train", n[0]}, {"val", n[1]}, {"test", n[2]}};
  auto recs = nlohmann::ordered_json::array();
  for (const auto& r : m.records)
    recs.push_back({{"frame_id", r.frame_id}, {"cluster_id", r.cluster_id}, {"split", split_name(r.split)}, {"mask_path", r.mask_path}});
  j["records"] = recs;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.ratios = {j.at("ratios").at("train").get<double>(), j.at("ratios").at("val").get<double>(),
                j.at("ratios").at("test").get<double>()};
    for (const auto& r : j.at("records"))
      m.records.push_back({r.at("frame_id").get<std::string>(), r.at("cluster_id").get<int>(),
                           split_from_name(r.at("split").get<std::string>()), r.value("mask_path", "")});
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kMalformed, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

}  // namespace qfk
