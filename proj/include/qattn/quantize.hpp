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

// Symmetric quantizers at every granularity the pipeline needs, including the
// per-thread layout derived from the m16n8 mma accumulator fragment.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "qattn/formats.hpp"
#include "qattn/tensor.hpp"

namespace qattn {

enum class GranularityKind { PerTensor, PerBlock, PerToken, PerChannel, PerThread };

enum class Side { Query, Key };

constexpr std::string_view granularity_name(GranularityKind k) {
  switch (k) {
    case GranularityKind::PerTensor: return "per-tensor";
    case GranularityKind::PerBlock: return "per-block";
    case GranularityKind::PerToken: return "per-token";
    case GranularityKind::PerChannel: return "per-channel";
    case GranularityKind::PerThread: return "per-thread";
  }
  return "?";
}

inline GranularityKind parse_granularity(std::string_view s) {
  for (auto k : {GranularityKind::PerTensor, GranularityKind::PerBlock,
                 GranularityKind::PerToken, GranularityKind::PerChannel,
                 GranularityKind::PerThread}) {
    if (granularity_name(k) == s) return k;
  }
  throw ConfigError("unknown granularity '" + std::string(s) + "'");
}

/// Query-side per-thread groups per warp and key-side groups per key block.
inline constexpr std::size_t kQueryGroupsPerWarp = 8;
inline constexpr std::size_t kKeyGroupsPerBlock = 4;

struct Granularity {
  GranularityKind kind = GranularityKind::PerTensor;
  std::size_t b_q = 128;
  std::size_t b_kv = 64;
  std::size_t c_w = 4;
  Side side = Side::Query;

  std::size_t block_size() const { return side == Side::Query ? b_q : b_kv; }

  void validate() const {
    if (b_q == 0 || b_kv == 0 || c_w == 0) {
      throw ConfigError("block sizes and warp count must be positive");
    }
    if (kind != GranularityKind::PerThread) return;
    if (b_q % c_w != 0) throw ConfigError("b_q must be divisible by c_w");
    if ((b_q / c_w) % 8 != 0) throw ConfigError("per-warp tile b_q/c_w must be divisible by 8");
    if (b_kv % 8 != 0) throw ConfigError("b_kv must be divisible by 8");
  }
};

/// Group id of token `n` under per-thread quantization.
///
/// Query side: warp w of a b_q block owns the contiguous tile of b_q/c_w rows
/// starting at w*b_q/c_w; rows of the tile that are congruent mod 8 land in
/// the same accumulator thread, giving 8 groups per warp.
/// Key side: tokens t with the same floor((t mod 8)/2) share a thread column
/// pair, giving 4 groups per key block.
inline std::size_t group_assign_per_thread(std::size_t n, Side side, std::size_t b_q,
                                           std::size_t b_kv, std::size_t c_w) {
  Granularity{GranularityKind::PerThread, b_q, b_kv, c_w, side}.validate();
  if (side == Side::Query) {
    const std::size_t block = n / b_q;
    const std::size_t t = n % b_q;
    const std::size_t tile = b_q / c_w;
    const std::size_t warp = t / tile;
    const std::size_t offset = t % tile;
    return block * kQueryGroupsPerWarp * c_w + warp * kQueryGroupsPerWarp + offset % 8;
  }
  const std::size_t block = n / b_kv;
  const std::size_t t = n % b_kv;
  return block * kKeyGroupsPerBlock + (t % 8) / 2;
}

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

/// Number of scale slots for a rows x cols tensor. Ragged tail blocks keep
/// their full slot count, so some per-thread slots may be empty.
inline std::size_t group_count(const Granularity& g, std::size_t rows, std::size_t cols) {
  switch (g.kind) {
    case GranularityKind::PerTensor: return 1;
    case GranularityKind::PerBlock: return ceil_div(rows, g.block_size());
    case GranularityKind::PerToken: return rows;
    case GranularityKind::PerChannel: return cols;
    case GranularityKind::PerThread:
      return g.side == Side::Query
                 ? ceil_div(rows, g.b_q) * kQueryGroupsPerWarp * g.c_w
                 : ceil_div(rows, g.b_kv) * kKeyGroupsPerBlock;
  }
  return 1;
}

/// Group id for every token (every channel for PerChannel).
inline std::vector<std::size_t> group_map(const Granularity& g, std::size_t rows,
                                          std::size_t cols) {
  g.validate();
  const bool by_channel = g.kind == GranularityKind::PerChannel;
  std::vector<std::size_t> map(by_channel ? cols : rows);
  for (std::size_t n = 0; n < map.size(); ++n) {
    switch (g.kind) {
      case GranularityKind::PerTensor: map[n] = 0; break;
      case GranularityKind::PerBlock: map[n] = n / g.block_size(); break;
      case GranularityKind::PerToken:
      case GranularityKind::PerChannel: map[n] = n; break;
      case GranularityKind::PerThread:
        map[n] = group_assign_per_thread(n, g.side, g.b_q, g.b_kv, g.c_w);
        break;
    }
  }
  return map;
}

/// Divisor turning a group's absmax into its scale; 0 for formats that are
/// stored unscaled (FP16 and wider).
constexpr double scale_divisor(Format f) {
  switch (f) {
    case Format::Int4:
    case Format::Int8:
    case Format::E4M3:
    case Format::E5M2:
      return format_info(f).max_value;
    default:
      return 0.0;
  }
}

inline constexpr double kZeroGroupFloor = 1e-30;

struct QuantizedTensor {
  Tensor codes;
  std::vector<double> scales;
  std::vector<std::size_t> group_of;  // per token, or per channel for PerChannel
  Granularity granularity;
  Format format = Format::FP64;

  std::size_t rows() const { return codes.rows(); }
  std::size_t cols() const { return codes.cols(); }

  double scale_at(std::size_t r, std::size_t c) const {
    return scales[group_of[granularity.kind == GranularityKind::PerChannel ? c : r]];
  }
};

inline void require_finite(const Tensor& x) {
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw NumericError("non-finite quantization input");
  }
}

inline std::vector<double> compute_scales(const Tensor& x, const Granularity& g,
                                          Format format) {
  require_finite(x);
  const auto map = group_map(g, x.rows(), x.cols());
  const std::size_t groups = group_count(g, x.rows(), x.cols());
  const double divisor = scale_divisor(format);
  if (divisor == 0.0) return std::vector<double>(groups, 1.0);

  std::vector<double> absmax(groups, 0.0);
  const bool by_channel = g.kind == GranularityKind::PerChannel;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      double& m = absmax[map[by_channel ? c : r]];
      m = std::max(m, std::fabs(x(r, c)));
    }
  }
  for (double& m : absmax) m = std::max(m, kZeroGroupFloor) / divisor;
  return absmax;
}

inline QuantizedTensor quantize(const Tensor& x, const Granularity& g, Format format) {
  QuantizedTensor q;
  q.scales = compute_scales(x, g, format);
  q.group_of = group_map(g, x.rows(), x.cols());
  q.granularity = g;
  q.format = format;
  q.codes = Tensor(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      q.codes(r, c) = cast_to(x(r, c) / q.scale_at(r, c), format);
    }
  }
  return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.rows(), q.cols());
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) out(r, c) = q.codes(r, c) * q.scale_at(r, c);
  }
  return out;
}

inline constexpr double kProbabilityTolerance = 1e-6;

/// Quantizes unnormalized probabilities with the static scale 1/max of the
/// format (1/448 for E4M3), so P = 1 maps onto the largest code.
inline QuantizedTensor quantize_p_static(const Tensor& p, Format format = Format::E4M3) {
  for (double v : p.values()) {
    if (!(v >= -kProbabilityTolerance && v <= 1.0 + kProbabilityTolerance)) {
      throw NumericError("unnormalized probability out of range");
    }
  }
  const double divisor = scale_divisor(format);
  const double scale = divisor == 0.0 ? 1.0 : 1.0 / divisor;
  QuantizedTensor q;
  q.granularity = Granularity{GranularityKind::PerTensor};
  q.format = format;
  q.scales = {scale};
  q.group_of.assign(p.rows(), 0);
  q.codes = Tensor(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double v = std::clamp(p.values()[i], 0.0, 1.0);
    q.codes.values()[i] = cast_to(divisor == 0.0 ? v : v * divisor, format);
  }
  return q;
}

/// Alternative P quantizer with one dynamic scale per block (absmax / max).
/// Not the default pipeline path.
inline QuantizedTensor quantize_p_block_max(const Tensor& p, Format format = Format::E4M3) {
  for (double v : p.values()) {
    if (!(v >= -kProbabilityTolerance && v <= 1.0 + kProbabilityTolerance)) {
      throw NumericError("unnormalized probability out of range");
    }
  }
  return quantize(p, Granularity{GranularityKind::PerTensor}, format);
}

}  // namespace qattn
