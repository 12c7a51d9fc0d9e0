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

// Register-blocked GEMM microkernels with runtime ISA selection. Each kernel
// covers whole pixel blocks and returns how many leading pixels it handled;
// the caller finishes the remainder with portable code.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <string_view>

#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
#define QFK_X86_SIMD 1
#include <immintrin.h>
#endif

namespace qfk::simd {

enum class Isa : int { kScalar = 0, kAvx2 = 1, kAvx512 = 2, kAvx512Vnni = 3 };

inline const char* isa_name(Isa i) {
  switch (i) {
    case Isa::kScalar: return "scalar";
    case Isa::kAvx2: return "avx2";
    case Isa::kAvx512: return "avx512";
    case Isa::kAvx512Vnni: return "avx512vnni";
  }
  return "?";
}

inline Isa detect_isa() {
#ifdef QFK_X86_SIMD
  __builtin_cpu_init();
  const bool avx512 = __builtin_cpu_supports("avx512f") && __builtin_cpu_supports("avx512bw");
  if (avx512 && __builtin_cpu_supports("avx512vnni")) return Isa::kAvx512Vnni;
  if (avx512) return Isa::kAvx512;
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::kAvx2;
#endif
  return Isa::kScalar;
}

inline std::atomic<int>& isa_limit_slot() {
  static std::atomic<int> slot = [] {
    // QFK_ISA=scalar|avx2|avx512|avx512vnni caps the kernels used.
    const char* env = std::getenv("QFK_ISA");
    if (!env) return static_cast<int>(Isa::kAvx512Vnni);
    const std::string_view v(env);
    for (int i = 0; i <= 3; ++i)
      if (v == isa_name(static_cast<Isa>(i))) return i;
    return static_cast<int>(Isa::kAvx512Vnni);
  }();
  return slot;
}

/// Caps the instruction set used by the kernels (tests compare paths).
inline void limit_isa(Isa cap) { isa_limit_slot().store(static_cast<int>(cap)); }

inline Isa active_isa() {
  static const Isa hw = detect_isa();
  return static_cast<Isa>(std::min(static_cast<int>(hw), isa_limit_slot().load(std::memory_order_relaxed)));
}

#ifdef QFK_X86_SIMD

// out[o][p] = bias[o] + sum_k w[o][k] * col[k][p]; blocks of 4 channels x 16 pixels.
__attribute__((target("avx2,fma"))) inline std::int64_t gemm_f32_avx2(const float* w, const float* bias,
                                                                       const float* col, std::int64_t out_c,
                                                                       std::int64_t k_count, std::int64_t p_count,
                                                                       float* out) {
  const std::int64_t p_main = p_count - p_count % 16;
  for (std::int64_t p0 = 0; p0 < p_main; p0 += 16) {
    std::int64_t o = 0;
    for (; o + 4 <= out_c; o += 4) {
      __m256 acc[4][2];
      for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm256_set1_ps(bias ? bias[o + r] : 0.0f);
      const float* wr[4] = {w + (o + 0) * k_count, w + (o + 1) * k_count, w + (o + 2) * k_count,
                            w + (o + 3) * k_count};
      for (std::int64_t k = 0; k < k_count; ++k) {
        const __m256 v0 = _mm256_loadu_ps(col + k * p_count + p0);
        const __m256 v1 = _mm256_loadu_ps(col + k * p_count + p0 + 8);
        for (int r = 0; r < 4; ++r) {
          const __m256 s = _mm256_broadcast_ss(wr[r] + k);
          acc[r][0] = _mm256_fmadd_ps(s, v0, acc[r][0]);
          acc[r][1] = _mm256_fmadd_ps(s, v1, acc[r][1]);
        }
      }
      for (int r = 0; r < 4; ++r) {
        _mm256_storeu_ps(out + (o + r) * p_count + p0, acc[r][0]);
        _mm256_storeu_ps(out + (o + r) * p_count + p0 + 8, acc[r][1]);
      }
    }
    for (; o < out_c; ++o) {
      __m256 a0 = _mm256_set1_ps(bias ? bias[o] : 0.0f), a1 = a0;
      const float* wr = w + o * k_count;
      for (std::int64_t k = 0; k < k_count; ++k) {
        const __m256 s = _mm256_broadcast_ss(wr + k);
        a0 = _mm256_fmadd_ps(s, _mm256_loadu_ps(col + k * p_count + p0), a0);
        a1 = _mm256_fmadd_ps(s, _mm256_loadu_ps(col + k * p_count + p0 + 8), a1);
      }
      _mm256_storeu_ps(out + o * p_count + p0, a0);
      _mm256_storeu_ps(out + o * p_count + p0 + 8, a1);
    }
  }
  return p_main;
}

// Same blocking with 32 pixels per block.
__attribute__((target("avx512f"))) inline std::int64_t gemm_f32_avx512(const float* w, const float* bias,
                                                                        const float* col, std::int64_t out_c,
                                                                        std::int64_t k_count, std::int64_t p_count,
                                                                        float* out) {
  const std::int64_t p_main = p_count - p_count % 32;
  for (std::int64_t p0 = 0; p0 < p_main; p0 += 32) {
    std::int64_t o = 0;
    for (; o + 4 <= out_c; o += 4) {
      __m512 acc[4][2];
      for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm512_set1_ps(bias ? bias[o + r] : 0.0f);
      const float* wr[4] = {w + (o + 0) * k_count, w + (o + 1) * k_count, w + (o + 2) * k_count,
                            w + (o + 3) * k_count};
      for (std::int64_t k = 0; k < k_count; ++k) {
        const __m512 v0 = _mm512_loadu_ps(col + k * p_count + p0);
        const __m512 v1 = _mm512_loadu_ps(col + k * p_count + p0 + 16);
        for (int r = 0; r < 4; ++r) {
          const __m512 s = _mm512_set1_ps(wr[r][k]);
          acc[r][0] = _mm512_fmadd_ps(s, v0, acc[r][0]);
          acc[r][1] = _mm512_fmadd_ps(s, v1, acc[r][1]);
        }
      }
      for (int r = 0; r < 4; ++r) {
        _mm512_storeu_ps(out + (o + r) * p_count + p0, acc[r][0]);
        _mm512_storeu_ps(out + (o + r) * p_count + p0 + 16, acc[r][1]);
      }
    }
    for (; o < out_c; ++o) {
      __m512 a0 = _mm512_set1_ps(bias ? bias[o] : 0.0f), a1 = a0;
      const float* wr = w + o * k_count;
      for (std::int64_t k = 0; k < k_count; ++k) {
        const __m512 s = _mm512_set1_ps(wr[k]);
        a0 = _mm512_fmadd_ps(s, _mm512_loadu_ps(col + k * p_count + p0), a0);
        a1 = _mm512_fmadd_ps(s, _mm512_loadu_ps(col + k * p_count + p0 + 16), a1);
      }
      _mm512_storeu_ps(out + o * p_count + p0, a0);
      _mm512_storeu_ps(out + o * p_count + p0 + 16, a1);
    }
  }
  return p_main;
}

inline std::int32_t load_pair(const std::int16_t* p) {
  std::int32_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// Integer kernels over pair-interleaved operands: rows [K2][P][2], weights
// [O][K2][2], both int16. acc[o][p] = sum over pairs, written to acc_out
// ([O][P]); requantization is left to the caller.
__attribute__((target("avx2"))) inline std::int64_t gemm_pairs_avx2(const std::int16_t* w, const std::int16_t* rows,
                                                                     std::int64_t out_c, std::int64_t k2,
                                                                     std::int64_t p_count, std::int32_t* acc_out) {
  const std::int64_t p_main = p_count - p_count % 16;
  for (std::int64_t p0 = 0; p0 < p_main; p0 += 16) {
    std::int64_t o = 0;
    for (; o + 4 <= out_c; o += 4) {
      __m256i acc[4][2];
      for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm256_setzero_si256();
      for (std::int64_t k = 0; k < k2; ++k) {
        const std::int16_t* src = rows + (k * p_count + p0) * 2;
        const __m256i v0 = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(src));
        const __m256i v1 = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(src + 16));
        for (int r = 0; r < 4; ++r) {
          const __m256i s = _mm256_set1_epi32(load_pair(w + ((o + r) * k2 + k) * 2));
          acc[r][0] = _mm256_add_epi32(acc[r][0], _mm256_madd_epi16(v0, s));
          acc[r][1] = _mm256_add_epi32(acc[r][1], _mm256_madd_epi16(v1, s));
        }
      }
      for (int r = 0; r < 4; ++r) {
        _mm256_storeu_si256(reinterpret_cast<__m256i*>(acc_out + (o + r) * p_count + p0), acc[r][0]);
        _mm256_storeu_si256(reinterpret_cast<__m256i*>(acc_out + (o + r) * p_count + p0 + 8), acc[r][1]);
      }
    }
    for (; o < out_c; ++o) {
      __m256i a0 = _mm256_setzero_si256(), a1 = a0;
      for (std::int64_t k = 0; k < k2; ++k) {
        const std::int16_t* src = rows + (k * p_count + p0) * 2;
        const __m256i s = _mm256_set1_epi32(load_pair(w + (o * k2 + k) * 2));
        a0 = _mm256_add_epi32(a0, _mm256_madd_epi16(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(src)), s));
        a1 = _mm256_add_epi32(a1,
                              _mm256_madd_epi16(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(src + 16)), s));
      }
      _mm256_storeu_si256(reinterpret_cast<__m256i*>(acc_out + o * p_count + p0), a0);
      _mm256_storeu_si256(reinterpret_cast<__m256i*>(acc_out + o * p_count + p0 + 8), a1);
    }
  }
  return p_main;
}

// The two AVX-512 variants differ only in the multiply-accumulate step; each
// carries its own target so the plain one never emits VNNI instructions.
#define QFK_GEMM_PAIRS_512(NAME, TARGET, MADD)                                                              \
  __attribute__((target(TARGET))) inline std::int64_t NAME(const std::int16_t* w, const std::int16_t* rows,  \
                                                           std::int64_t out_c, std::int64_t k2,              \
                                                           std::int64_t p_count, std::int32_t* acc_out) {    \
    const std::int64_t p_main = p_count - p_count % 32;                                                      \
    for (std::int64_t p0 = 0; p0 < p_main; p0 += 32) {                                                       \
      std::int64_t o = 0;                                                                                    \
      for (; o + 4 <= out_c; o += 4) {                                                                       \
        __m512i acc[4][2];                                                                                   \
        for (int r = 0; r < 4; ++r) acc[r][0] = acc[r][1] = _mm512_setzero_si512();                         \
        for (std::int64_t k = 0; k < k2; ++k) {                                                              \
          const std::int16_t* src = rows + (k * p_count + p0) * 2;                                           \
          const __m512i v0 = _mm512_loadu_si512(src);                                                        \
          const __m512i v1 = _mm512_loadu_si512(src + 32);                                                   \
          for (int r = 0; r < 4; ++r) {                                                                      \
            const __m512i s = _mm512_set1_epi32(load_pair(w + ((o + r) * k2 + k) * 2));                      \
            acc[r][0] = MADD(acc[r][0], v0, s);                                                              \
            acc[r][1] = MADD(acc[r][1], v1, s);                                                              \
          }                                                                                                  \
        }                                                                                                    \
        for (int r = 0; r < 4; ++r) {                                                                        \
          _mm512_storeu_si512(acc_out + (o + r) * p_count + p0, acc[r][0]);                                  \
          _mm512_storeu_si512(acc_out + (o + r) * p_count + p0 + 16, acc[r][1]);                             \
        }                                                                                                    \
      }                                                                                                      \
      for (; o < out_c; ++o) {                                                                               \
        __m512i a0 = _mm512_setzero_si512(), a1 = a0;                                                        \
        for (std::int64_t k = 0; k < k2; ++k) {                                                              \
          const std::int16_t* src = rows + (k * p_count + p0) * 2;                                           \
          const __m512i s = _mm512_set1_epi32(load_pair(w + (o * k2 + k) * 2));                              \
          a0 = MADD(a0, _mm512_loadu_si512(src), s);                                                         \
          a1 = MADD(a1, _mm512_loadu_si512(src + 32), s);                                                    \
        }                                                                                                    \
        _mm512_storeu_si512(acc_out + o * p_count + p0, a0);                                                 \
        _mm512_storeu_si512(acc_out + o * p_count + p0 + 16, a1);                                            \
      }                                                                                                      \
    }                                                                                                        \
    return p_main;                                                                                           \
  }

#define QFK_MADD_BW(acc, a, b) _mm512_add_epi32((acc), _mm512_madd_epi16((a), (b)))
#define QFK_MADD_VNNI(acc, a, b) _mm512_dpwssd_epi32((acc), (a), (b))
QFK_GEMM_PAIRS_512(gemm_pairs_avx512, "avx512f,avx512bw", QFK_MADD_BW)
QFK_GEMM_PAIRS_512(gemm_pairs_avx512vnni, "avx512f,avx512bw,avx512vnni", QFK_MADD_VNNI)
#undef QFK_MADD_BW
#undef QFK_MADD_VNNI
#undef QFK_GEMM_PAIRS_512

// Vector requantization: out = max(floor, sat8(((acc + bias) * m + 2^(s-1)) >> s) + zp)).
// Exact for s >= 32 when acc + bias cannot overflow int32: the high word of
// the 64-bit sum is floor(y / 2^32), and floor division composes.
__attribute__((target("avx2"))) inline std::int64_t requant_avx2(const std::int32_t* acc, std::int64_t count,
                                                                  std::int32_t bias, std::int32_t multiplier,
                                                                  int shift, std::int32_t zp, std::int8_t floor_code,
                                                                  std::int8_t* out) {
  const std::int64_t main = count - count % 8;
  const __m256i vb = _mm256_set1_epi32(bias);
  const __m256i vm = _mm256_set1_epi32(multiplier);
  const __m256i half = _mm256_set1_epi64x(std::int64_t{1} << (shift - 1));
  const __m128i rest = _mm_cvtsi32_si128(shift - 32);
  const __m256i vz = _mm256_set1_epi32(zp);
  const __m256i lo = _mm256_set1_epi32(std::max<std::int32_t>(-128, floor_code));
  const __m256i hi = _mm256_set1_epi32(127);
  const __m256i gather = _mm256_setr_epi8(0, 4, 8, 12, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, 0, 4, 8, 12, -1,
                                          -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1);
  const __m256i join = _mm256_setr_epi32(0, 4, 1, 1, 1, 1, 1, 1);
  for (std::int64_t i = 0; i < main; i += 8) {
    const __m256i v = _mm256_add_epi32(_mm256_loadu_si256(reinterpret_cast<const __m256i*>(acc + i)), vb);
    const __m256i even = _mm256_add_epi64(_mm256_mul_epi32(v, vm), half);
    const __m256i odd = _mm256_add_epi64(_mm256_mul_epi32(_mm256_srli_epi64(v, 32), vm), half);
    __m256i r = _mm256_blend_epi32(_mm256_srli_epi64(even, 32), odd, 0xAA);
    r = _mm256_add_epi32(_mm256_sra_epi32(r, rest), vz);
    r = _mm256_min_epi32(_mm256_max_epi32(r, lo), hi);
    r = _mm256_permutevar8x32_epi32(_mm256_shuffle_epi8(r, gather), join);
    const std::int64_t packed = _mm_cvtsi128_si64(_mm256_castsi256_si128(r));
    std::memcpy(out + i, &packed, 8);
  }
  return main;
}

__attribute__((target("avx512f,avx512bw"))) inline std::int64_t requant_avx512(
    const std::int32_t* acc, std::int64_t count, std::int32_t bias, std::int32_t multiplier, int shift,
    std::int32_t zp, std::int8_t floor_code, std::int8_t* out) {
  const std::int64_t main = count - count % 16;
  const __m512i vb = _mm512_set1_epi32(bias);
  const __m512i vm = _mm512_set1_epi32(multiplier);
  const __m512i half = _mm512_set1_epi64(std::int64_t{1} << (shift - 1));
  const __m128i rest = _mm_cvtsi32_si128(shift - 32);
  const __m512i vz = _mm512_set1_epi32(zp);
  const __m512i lo = _mm512_set1_epi32(std::max<std::int32_t>(-128, floor_code));
  for (std::int64_t i = 0; i < main; i += 16) {
    const __m512i v = _mm512_add_epi32(_mm512_loadu_si512(acc + i), vb);
    const __m512i even = _mm512_add_epi64(_mm512_mul_epi32(v, vm), half);
    const __m512i odd = _mm512_add_epi64(_mm512_mul_epi32(_mm512_srli_epi64(v, 32), vm), half);
    __m512i r = _mm512_mask_blend_epi32(0xAAAA, _mm512_srli_epi64(even, 32), odd);
    r = _mm512_max_epi32(_mm512_add_epi32(_mm512_sra_epi32(r, rest), vz), lo);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out + i), _mm512_cvtsepi32_epi8(r));
  }
  return main;
}

#endif  // QFK_X86_SIMD

/// Runs the widest available FP32 kernel; returns pixels covered.
inline std::int64_t gemm_f32_blocks(const float* w, const float* bias, const float* col, std::int64_t out_c,
                                    std::int64_t k_count, std::int64_t p_count, float* out) {
#ifdef QFK_X86_SIMD
  switch (active_isa()) {
    case Isa::kAvx512Vnni:
    case Isa::kAvx512: return gemm_f32_avx512(w, bias, col, out_c, k_count, p_count, out);
    case Isa::kAvx2: return gemm_f32_avx2(w, bias, col, out_c, k_count, p_count, out);
    case Isa::kScalar: break;
  }
#else
  (void)w, (void)bias, (void)col, (void)out_c, (void)k_count, (void)p_count, (void)out;
#endif
  return 0;
}

/// Vector requantization of a leading run of `acc`; returns entries written.
/// Callers guarantee shift >= 32 and that acc + bias fits in int32.
inline std::int64_t requant_blocks(const std::int32_t* acc, std::int64_t count, std::int32_t bias,
                                   std::int32_t multiplier, int shift, std::int32_t zp, std::int8_t floor_code,
                                   std::int8_t* out) {
#ifdef QFK_X86_SIMD
  switch (active_isa()) {
    case Isa::kAvx512Vnni:
    case Isa::kAvx512: return requant_avx512(acc, count, bias, multiplier, shift, zp, floor_code, out);
    case Isa::kAvx2: return requant_avx2(acc, count, bias, multiplier, shift, zp, floor_code, out);
    case Isa::kScalar: break;
  }
#else
  (void)acc, (void)count, (void)bias, (void)multiplier, (void)shift, (void)zp, (void)floor_code, (void)out;
#endif
  return 0;
}

/// Runs the widest available integer kernel; returns pixels covered.
inline std::int64_t gemm_pairs_blocks(const std::int16_t* w, const std::int16_t* rows, std::int64_t out_c,
                                      std::int64_t k2, std::int64_t p_count, std::int32_t* acc) {
#ifdef QFK_X86_SIMD
  switch (active_isa()) {
    case Isa::kAvx512Vnni: return gemm_pairs_avx512vnni(w, rows, out_c, k2, p_count, acc);
    case Isa::kAvx512: return gemm_pairs_avx512(w, rows, out_c, k2, p_count, acc);
    case Isa::kAvx2: return gemm_pairs_avx2(w, rows, out_c, k2, p_count, acc);
    case Isa::kScalar: break;
  }
#else
  (void)w, (void)rows, (void)out_c, (void)k2, (void)p_count, (void)acc;
#endif
  return 0;
}

}  // namespace qfk::simd
