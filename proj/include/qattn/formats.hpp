// Copyright 2026 The qattn Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Software emulation of the low-precision number formats used by the
// quantized attention pipeline. Every emulated value is carried widened in a
// double; the functions below only decide which doubles are representable.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "qattn/tensor.hpp"

namespace qattn {

enum class Format { Int4, Int8, E4M3, E5M2, FP16, FP22, FP32, FP64 };

enum class Fp8Variant { E4M3, E5M2 };

struct FormatInfo {
  bool is_integer;
  int exponent_bits;  // 0 for integer kinds
  int mantissa_bits;  // 0 for integer kinds
  int exponent_bias;
  double max_value;   // max code (integers) or max finite magnitude
};

constexpr FormatInfo format_info(Format f) {
  switch (f) {
    case Format::Int4: return {true, 0, 0, 0, 7.0};
    case Format::Int8: return {true, 0, 0, 0, 127.0};
    case Format::E4M3: return {false, 4, 3, 7, 448.0};
    case Format::E5M2: return {false, 5, 2, 15, 57344.0};
    case Format::FP16: return {false, 5, 10, 15, 65504.0};
    case Format::FP22: return {false, 8, 13, 127, 3.4028234663852886e38};
    case Format::FP32: return {false, 8, 23, 127, 3.4028234663852886e38};
    case Format::FP64: return {false, 11, 52, 1023, 1.7976931348623157e308};
  }
  return {false, 0, 0, 0, 0.0};
}

constexpr std::string_view format_name(Format f) {
  switch (f) {
    case Format::Int4: return "int4";
    case Format::Int8: return "int8";
    case Format::E4M3: return "e4m3";
    case Format::E5M2: return "e5m2";
    case Format::FP16: return "fp16";
    case Format::FP22: return "fp22";
    case Format::FP32: return "fp32";
    case Format::FP64: return "fp64";
  }
  return "?";
}

inline Format parse_format(std::string_view s) {
  for (Format f : {Format::Int4, Format::Int8, Format::E4M3, Format::E5M2,
                   Format::FP16, Format::FP22, Format::FP32, Format::FP64}) {
    if (format_name(f) == s) return f;
  }
  if (s == "none" || s == "off") return Format::FP64;
  throw ConfigError("unknown number format '" + std::string(s) + "'");
}

/// Round half to even, then clamp into [-max_code, max_code].
inline std::int32_t round_to_int(double x, std::int32_t max_code) {
  if (!std::isfinite(x)) throw NumericError("non-finite quantization input");
  const double r = std::nearbyint(x);  // default FE_TONEAREST: ties to even
  const double m = static_cast<double>(max_code);
  if (r > m) return max_code;
  if (r < -m) return -max_code;
  return static_cast<std::int32_t>(r);
}

namespace detail {

// Nearest value with `mantissa_bits` fraction bits, subnormals below the
// minimum normal exponent, saturating at `max_finite`. Ties go to even.
inline double round_minifloat(double x, int mantissa_bits, int exponent_bias,
                              double max_finite) {
  if (x == 0.0) return x;
  const double a = std::fabs(x);
  int e = std::ilogb(a);
  const int min_normal_exp = 1 - exponent_bias;
  if (e < min_normal_exp) e = min_normal_exp;
  const double quantum = std::ldexp(1.0, e - mantissa_bits);
  double r = std::nearbyint(a / quantum) * quantum;
  if (r > max_finite) r = max_finite;
  return std::copysign(r, x);
}

}  // namespace detail

/// Nearest FP8 value (OCP convention: E4M3 has no infinities, both variants
/// saturate to the max finite magnitude on overflow).
inline double cast_fp8(double x, Fp8Variant variant) {
  if (!std::isfinite(x)) throw NumericError("non-finite input to FP8 cast");
  const FormatInfo fi =
      format_info(variant == Fp8Variant::E4M3 ? Format::E4M3 : Format::E5M2);
  return detail::round_minifloat(x, fi.mantissa_bits, fi.exponent_bias, fi.max_value);
}

/// Nearest IEEE half value, saturating at +-65504.
inline double cast_fp16(double x) {
  if (!std::isfinite(x)) throw NumericError("non-finite input to FP16 cast");
  return detail::round_minifloat(x, 10, 15, 65504.0);
}

/// Zero the 10 low mantissa bits of a single-precision value, leaving a
/// 1-8-13 value. NaN and infinities pass through unchanged.
inline float truncate_to_fp22(float x) {
  if (!std::isfinite(x)) return x;
  return std::bit_cast<float>(std::bit_cast<std::uint32_t>(x) & 0xFFFFFC00u);
}

/// Value of an E4M3 bit pattern; NaN for the two NaN encodings (S.1111.111).
inline double decode_e4m3(std::uint8_t bits) {
  const int sign = bits >> 7;
  const int exp = (bits >> 3) & 0xF;
  const int man = bits & 0x7;
  if (exp == 0xF && man == 0x7) return std::nan("");
  const double mag = exp == 0 ? std::ldexp(man, -9)
                              : std::ldexp(8 + man, exp - 7 - 3);
  return sign ? -mag : mag;
}

/// Rounds a value into `f` without scaling. Integer kinds round and clamp;
/// FP32 rounds to single precision; FP64 is the identity.
inline double cast_to(double x, Format f) {
  switch (f) {
    case Format::Int4:
    case Format::Int8:
      return round_to_int(x, static_cast<std::int32_t>(format_info(f).max_value));
    case Format::E4M3: return cast_fp8(x, Fp8Variant::E4M3);
    case Format::E5M2: return cast_fp8(x, Fp8Variant::E5M2);
    case Format::FP16: return cast_fp16(x);
    case Format::FP22: return truncate_to_fp22(static_cast<float>(x));
    case Format::FP32: return static_cast<float>(x);
    case Format::FP64: return x;
  }
  return x;
}

}  // namespace qattn
