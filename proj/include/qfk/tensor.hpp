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
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qfk/error.hpp"

namespace qfk {

/// Dimensions of a tensor, outermost first. Images are laid out N,C,H,W.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims) : Shape(std::vector<std::int64_t>(dims)) {}
  explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {
    check(!dims_.empty() && dims_.size() <= kMaxRank, Errc::kInvalidArgument,
          "shape rank must be in [1, 4], got " + std::to_string(dims_.size()));
    for (auto d : dims_)
      check(d >= 1, Errc::kInvalidArgument, "shape dims must be >= 1, got " + to_string());
  }

  std::size_t rank() const { return dims_.size(); }
  std::int64_t operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<std::int64_t>& dims() const { return dims_; }

  std::int64_t volume() const {
    std::int64_t v = 1;
    for (auto d : dims_) v *= d;
    return dims_.empty() ? 0 : v;
  }

  /// Same shape with the leading (batch) dimension replaced.
  Shape with_batch(std::int64_t n) const {
    auto d = dims_;
    d[0] = n;
    return Shape(std::move(d));
  }

  std::string to_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::int64_t> dims_;
};

/// Dense row-major tensor owning its storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.volume()), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check(static_cast<std::int64_t>(data_.size()) == shape_.volume(), Errc::kShapeMismatch,
          "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
              shape_.to_string());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-4 tensors.
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using TensorF32 = Tensor<float>;
using TensorI32 = Tensor<std::int32_t>;

/// Affine mapping between reals and signed 8-bit codes: x = scale * (q - zero_point).
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;

  bool valid() const {
    return std::isfinite(scale) && scale > 0.0 && zero_point >= -128 && zero_point <= 127;
  }
  /// Real value represented by the smallest and largest code.
  double real_min() const { return scale * (-128 - zero_point); }
  double real_max() const { return scale * (127 - zero_point); }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline void check_qparams(const QuantParams& qp) {
  check(qp.valid(), Errc::kInvalidArgument,
        "invalid quant params: scale=" + std::to_string(qp.scale) +
            " zero_point=" + std::to_string(qp.zero_point));
}

/// INT8 tensor together with the parameters that give its codes meaning.
struct TensorI8 {
  Tensor<std::int8_t> q;
  QuantParams qp;

  const Shape& shape() const { return q.shape(); }
  std::size_t size() const { return q.size(); }
  friend bool operator==(const TensorI8&, const TensorI8&) = default;
};

inline std::int8_t saturate_i8(std::int64_t v) {
  return static_cast<std::int8_t>(std::clamp<std::int64_t>(v, -128, 127));
}

/// Rounds half away from zero; the only rounding mode used for float-to-code conversion.
inline std::int64_t round_half_away(double v) { return static_cast<std::int64_t>(std::llround(v)); }

/// Quantizes a single value. Caller guarantees x is finite.
inline std::int8_t quantize_value(double x, const QuantParams& qp) {
  double r = x / qp.scale;
  // llround is undefined outside the int64 range; anything that large saturates anyway.
  r = std::clamp(r, -1e12, 1e12);
  return saturate_i8(round_half_away(r) + qp.zero_point);
}

inline float dequantize_value(std::int8_t q, const QuantParams& qp) {
  return static_cast<float>(qp.scale * (static_cast<std::int32_t>(q) - qp.zero_point));
}

inline TensorI8 quantize(const TensorF32& x, const QuantParams& qp) {
  check_qparams(qp);
  Tensor<std::int8_t> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    check(std::isfinite(x[i]), Errc::kNonFinite,
          "non-finite input element at flat index " + std::to_string(i));
    out[i] = quantize_value(x[i], qp);
  }
  return {std::move(out), qp};
}

inline TensorF32 dequantize(const TensorI8& q) {
  TensorF32 out(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = dequantize_value(q.q[i], q.qp);
  return out;
}

/// Rescales 32-bit accumulators (in units of in_scale * w_scale) to INT8 codes
/// using the real-valued ratio. The execution engines use FixedPointMultiplier,
/// which approximates this within one unit of its last place.
inline TensorI8 requantize(const TensorI32& acc, double in_scale, double w_scale,
                           const QuantParams& out_qp) {
  check(in_scale > 0 && w_scale > 0, Errc::kInvalidArgument, "requantize scales must be positive");
  check_qparams(out_qp);
  const double ratio = in_scale * w_scale / out_qp.scale;
  Tensor<std::int8_t> out(acc.shape());
  for (std::size_t i = 0; i < acc.size(); ++i)
    out[i] = saturate_i8(round_half_away(std::clamp(acc[i] * ratio, -1e12, 1e12)) + out_qp.zero_point);
  return {std::move(out), out_qp};
}

/// Real multiplier represented as multiplier * 2^-shift, multiplier in [2^30, 2^31).
struct FixedPointMultiplier {
  std::int32_t multiplier = 1 << 30;
  std::int32_t shift = 30;
  double real = 1.0;

  static FixedPointMultiplier from_real(double ratio) {
    check(std::isfinite(ratio) && ratio > 0.0, Errc::kInvalidArgument,
          "fixed-point multiplier needs a positive finite ratio");
    int exp = 0;
    const double frac = std::frexp(ratio, &exp);  // ratio = frac * 2^exp, frac in [0.5, 1)
    auto m = static_cast<std::int64_t>(std::llround(frac * 2147483648.0));
    std::int32_t shift = 31 - exp;
    if (m == (std::int64_t{1} << 31)) {
      m >>= 1;
      --shift;
    }
    FixedPointMultiplier f;
    f.multiplier = static_cast<std::int32_t>(m);
    f.shift = shift;
    f.real = ratio;
    return f;
  }

  double value() const { return std::ldexp(static_cast<double>(multiplier), -shift); }

  /// round(v * multiplier / 2^shift), ties toward +infinity.
  std::int64_t apply(std::int64_t v) const {
    const __int128 prod = static_cast<__int128>(v) * multiplier;
    if (shift <= 0) {
      const __int128 r = prod << (-shift);
      return static_cast<std::int64_t>(std::clamp<__int128>(r, INT64_MIN, INT64_MAX));
    }
    if (shift >= 126) return 0;
    if (shift < 62 && v > -(std::int64_t{1} << 31) && v < (std::int64_t{1} << 31)) {
      // |v * multiplier| < 2^62, so the 64-bit path matches the wide one exactly.
      return (v * multiplier + (std::int64_t{1} << (shift - 1))) >> shift;
    }
    const __int128 half = static_cast<__int128>(1) << (shift - 1);
    return static_cast<std::int64_t>((prod + half) >> shift);
  }

  friend bool operator==(const FixedPointMultiplier& a, const FixedPointMultiplier& b) {
    return a.multiplier == b.multiplier && a.shift == b.shift;
  }
};

/// Accumulator to INT8 code through a fixed-point multiplier.
inline std::int8_t requantize_fixed(std::int64_t acc, const FixedPointMultiplier& m,
                                    std::int32_t out_zero_point) {
  return saturate_i8(m.apply(acc) + out_zero_point);
}

}  // namespace qfk
