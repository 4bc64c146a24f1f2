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

// Attention engines: a dense exact oracle, a FlashAttention-style tiled path
// in double precision, and the quantized pipeline (smoothing, per-thread
// INT4/INT8 QK, FP8 PV, emulated FP22 accumulation).

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qattn/formats.hpp"
#include "qattn/quantize.hpp"
#include "qattn/smooth.hpp"
#include "qattn/tensor.hpp"

namespace qattn {

enum class Accumulation { FP32Exact, FP22SingleLevel, FP22TwoLevel };

/// How often the emulated FP22 accumulator is truncated: after every scalar
/// multiply-add, or once per 32 products (one k32 mma step).
enum class TruncationCadence { PerFma, PerMmaK32 };

enum class Baseline { None, SmoothQuant, Hadamard };

enum class PScaling { Static, BlockMax };

constexpr std::string_view accumulation_name(Accumulation a) {
  switch (a) {
    case Accumulation::FP32Exact: return "fp32";
    case Accumulation::FP22SingleLevel: return "fp22-single";
    case Accumulation::FP22TwoLevel: return "fp22-two-level";
  }
  return "?";
}

inline Accumulation parse_accumulation(std::string_view s) {
  for (auto a : {Accumulation::FP32Exact, Accumulation::FP22SingleLevel,
                 Accumulation::FP22TwoLevel}) {
    if (accumulation_name(a) == s) return a;
  }
  throw ConfigError("unknown accumulation mode '" + std::string(s) + "'");
}

constexpr std::string_view baseline_name(Baseline b) {
  switch (b) {
    case Baseline::None: return "none";
    case Baseline::SmoothQuant: return "smoothquant";
    case Baseline::Hadamard: return "hadamard";
  }
  return "?";
}

inline Baseline parse_baseline(std::string_view s) {
  for (auto b : {Baseline::None, Baseline::SmoothQuant, Baseline::Hadamard}) {
    if (baseline_name(b) == s) return b;
  }
  throw ConfigError("unknown baseline '" + std::string(s) + "'");
}

struct AttentionConfig {
  std::size_t b_q = 128;
  std::size_t b_kv = 64;
  std::size_t c_w = 4;
  Format qk_format = Format::Int4;  // Int4, Int8, FP16, or FP64 (no quantization)
  GranularityKind qk_granularity = GranularityKind::PerThread;
  Format pv_format = Format::E4M3;  // E4M3, E5M2, Int8, FP16, or FP64
  PScaling p_scaling = PScaling::Static;
  Accumulation accumulation = Accumulation::FP22TwoLevel;
  TruncationCadence cadence = TruncationCadence::PerFma;
  SmoothingFlags smoothing{true, true, false};
  Baseline baseline = Baseline::None;
  double smoothquant_alpha = 0.5;
  std::uint64_t hadamard_seed = 0;
  bool causal = false;
  std::optional<double> softmax_scale;  // defaults to 1/sqrt(d)

  /// Every quantizer is the identity and accumulation is wide.
  static AttentionConfig full_precision() {
    AttentionConfig c;
    c.qk_format = Format::FP64;
    c.qk_granularity = GranularityKind::PerTensor;
    c.pv_format = Format::FP64;
    c.accumulation = Accumulation::FP32Exact;
    c.smoothing = {};
    return c;
  }

  Granularity granularity(Side side) const {
    return Granularity{qk_granularity, b_q, b_kv, c_w, side};
  }

  double scale_for(std::size_t head_dim) const {
    return softmax_scale.value_or(1.0 / std::sqrt(static_cast<double>(head_dim)));
  }

  void validate() const {
    granularity(Side::Query).validate();
    switch (qk_format) {
      case Format::Int4: case Format::Int8: case Format::FP16: case Format::FP64: break;
      default: throw ConfigError("qk_format must be int4, int8, fp16 or fp64");
    }
    switch (pv_format) {
      case Format::E4M3: case Format::E5M2: case Format::Int8: case Format::FP16:
      case Format::FP64: break;
      default: throw ConfigError("pv_format must be e4m3, e5m2, int8, fp16 or fp64");
    }
    if (qk_granularity == GranularityKind::PerChannel) {
      throw ConfigError("per-channel granularity cannot be used for Q and K");
    }
    if (accumulation != Accumulation::FP32Exact && pv_format != Format::E4M3 &&
        pv_format != Format::E5M2) {
      throw ConfigError("FP22 accumulation requires an FP8 pv_format");
    }
    if (accumulation == Accumulation::FP22SingleLevel && p_scaling == PScaling::BlockMax) {
      throw ConfigError("block-max P scaling needs a per-block accumulator");
    }
    if (baseline == Baseline::SmoothQuant && !(smoothquant_alpha > 0.0 && smoothquant_alpha < 1.0)) {
      throw ConfigError("smoothquant alpha must lie in (0, 1)");
    }
  }
};

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ConfigError("shape mismatch: Q, K, V");
  }
  if (q.empty() || k.empty() || v.empty()) throw ConfigError("empty attention input");
}

/// Dense softmax(Q K^T * scale) V in double precision. With `causal`, query
/// row i attends to key rows <= i.
inline Tensor attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                               bool causal = false,
                               std::optional<double> softmax_scale = std::nullopt) {
  check_qkv(q, k, v);
  const double scale = softmax_scale.value_or(1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor out(q.rows(), v.cols());
  std::vector<double> s(k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const std::size_t n = causal ? std::min(i + 1, k.rows()) : k.rows();
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) acc += q(i, c) * k(j, c);
      s[j] = acc * scale;
      m = std::max(m, s[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = std::exp(s[j] - m);
      sum += s[j];
    }
    auto o = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double p = s[j] / sum;
      for (std::size_t c = 0; c < v.cols(); ++c) o[c] += p * v(j, c);
    }
  }
  return out;
}

/// Online-softmax running state for one query block.
struct TileState {
  std::vector<double> m;  // running row max
  std::vector<double> l;  // running row sum of exp(S - m)

  explicit TileState(std::size_t rows)
      : m(rows, -std::numeric_limits<double>::infinity()), l(rows, 0.0) {}

  /// Folds the score tile `s` (rows x cols) in place: s becomes
  /// exp(s - m_new), and the returned factors exp(m_old - m_new) are what the
  /// output accumulator must be rescaled by.
  std::vector<double> update(Tensor& s) {
    std::vector<double> alpha(s.rows());
    for (std::size_t r = 0; r < s.rows(); ++r) {
      auto row = s.row(r);
      const double m_new = std::max(m[r], *std::max_element(row.begin(), row.end()));
      if (m_new == -std::numeric_limits<double>::infinity()) {
        // Row fully masked so far.
        std::fill(row.begin(), row.end(), 0.0);
        alpha[r] = 1.0;
        continue;
      }
      alpha[r] = std::exp(m[r] - m_new);
      double sum = 0.0;
      for (double& x : row) {
        x = std::exp(x - m_new);
        sum += x;
      }
      l[r] = alpha[r] * l[r] + sum;
      m[r] = m_new;
    }
    return alpha;
  }
};

namespace detail {

struct BlockRange {
  std::size_t begin;
  std::size_t end;
  std::size_t size() const { return end - begin; }
};

inline BlockRange block(std::size_t index, std::size_t block_size, std::size_t total) {
  const std::size_t begin = index * block_size;
  return {begin, std::min(total, begin + block_size)};
}

inline void apply_causal_mask(Tensor& s, BlockRange rows, BlockRange cols) {
  for (std::size_t r = 0; r < s.rows(); ++r) {
    for (std::size_t c = 0; c < s.cols(); ++c) {
      if (cols.begin + c > rows.begin + r) s(r, c) = -std::numeric_limits<double>::infinity();
    }
  }
}

}  // namespace detail

/// FlashAttention-style tiled attention in double precision with no
/// quantization. `cfg` only contributes block sizes, causality and scale.
inline Tensor attention_tiled_fp(const Tensor& q, const Tensor& k, const Tensor& v,
                                 const AttentionConfig& cfg = AttentionConfig::full_precision()) {
  check_qkv(q, k, v);
  const double scale = cfg.scale_for(q.cols());
  const std::size_t d = q.cols();
  Tensor out(q.rows(), v.cols());
  for (std::size_t bi = 0; bi * cfg.b_q < q.rows(); ++bi) {
    const auto rows = detail::block(bi, cfg.b_q, q.rows());
    TileState st(rows.size());
    Tensor o(rows.size(), v.cols());
    for (std::size_t bj = 0; bj * cfg.b_kv < k.rows(); ++bj) {
      const auto cols = detail::block(bj, cfg.b_kv, k.rows());
      if (cfg.causal && cols.begin > rows.end - 1) break;
      Tensor s(rows.size(), cols.size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < cols.size(); ++c) {
          double acc = 0.0;
          for (std::size_t x = 0; x < d; ++x) acc += q(rows.begin + r, x) * k(cols.begin + c, x);
          s(r, c) = acc * scale;
        }
      }
      if (cfg.causal) detail::apply_causal_mask(s, rows, cols);
      const auto alpha = st.update(s);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        auto orow = o.row(r);
        for (double& x : orow) x *= alpha[r];
        for (std::size_t c = 0; c < cols.size(); ++c) {
          const double p = s(r, c);
          const auto vrow = v.row(cols.begin + c);
          for (std::size_t x = 0; x < orow.size(); ++x) orow[x] += p * vrow[x];
        }
      }
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t x = 0; x < v.cols(); ++x) out(rows.begin + r, x) = o(r, x) / st.l[r];
    }
  }
  return out;
}

namespace detail {

inline float fp22(float x) {
  return std::bit_cast<float>(std::bit_cast<std::uint32_t>(x) & 0xFFFFFC00u);
}

}  // namespace detail

/// P V product for one (query block, key block) tile in code space. Rows of
/// `p_codes` are queries, its columns and the rows of `v_codes` are the b_kv
/// keys. Returns a fresh accumulator R:
///   FP32Exact       wide (double) accumulation;
///   FP22 modes      single-precision accumulator truncated to 13 mantissa
///                   bits after every multiply-add (or every 32 products).
inline Tensor accumulate_pv(const Tensor& p_codes, const Tensor& v_codes, Accumulation mode,
                            TruncationCadence cadence = TruncationCadence::PerFma) {
  if (p_codes.cols() != v_codes.rows()) throw ConfigError("shape mismatch: accumulate_pv");
  Tensor r(p_codes.rows(), v_codes.cols());
  const std::size_t d = v_codes.cols();
  if (mode == Accumulation::FP32Exact) {
    for (std::size_t i = 0; i < p_codes.rows(); ++i) {
      auto out = r.row(i);
      for (std::size_t k = 0; k < p_codes.cols(); ++k) {
        const double p = p_codes(i, k);
        const auto vrow = v_codes.row(k);
        for (std::size_t c = 0; c < d; ++c) out[c] += p * vrow[c];
      }
    }
    return r;
  }
  std::vector<float> acc(d);
  std::vector<double> pending(d);
  for (std::size_t i = 0; i < p_codes.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0f);
    if (cadence == TruncationCadence::PerFma) {
      for (std::size_t k = 0; k < p_codes.cols(); ++k) {
        const float p = static_cast<float>(p_codes(i, k));
        if (p == 0.0f) continue;
        const auto vrow = v_codes.row(k);
        for (std::size_t c = 0; c < d; ++c) {
          acc[c] = detail::fp22(acc[c] + p * static_cast<float>(vrow[c]));
        }
      }
    } else {
      for (std::size_t k0 = 0; k0 < p_codes.cols(); k0 += 32) {
        std::fill(pending.begin(), pending.end(), 0.0);
        const std::size_t k1 = std::min(p_codes.cols(), k0 + 32);
        for (std::size_t k = k0; k < k1; ++k) {
          const double p = p_codes(i, k);
          const auto vrow = v_codes.row(k);
          for (std::size_t c = 0; c < d; ++c) pending[c] += p * vrow[c];
        }
        for (std::size_t c = 0; c < d; ++c) {
          acc[c] = detail::fp22(static_cast<float>(acc[c] + pending[c]));
        }
      }
    }
    std::copy(acc.begin(), acc.end(), r.row(i).begin());
  }
  return r;
}

/// Running output accumulator of one query block across key blocks.
///
/// FP32Exact keeps a double buffer. FP22TwoLevel adds each block's FP22
/// partial product into an FP32 buffer after rescaling it. FP22SingleLevel
/// keeps one FP22 accumulator for the whole row: it is rescaled in place and
/// the next block's products are accumulated directly into it.
class PvAccumulator {
 public:
  PvAccumulator(std::size_t rows, std::size_t cols, Accumulation mode,
                TruncationCadence cadence = TruncationCadence::PerFma)
      : mode_(mode), cadence_(cadence), wide_(rows, cols), narrow_(rows * cols, 0.0f) {}

  /// O <- diag(alpha) O + factor * P V.
  void add_block(std::span<const double> alpha, const Tensor& p_codes, const Tensor& v_codes,
                 double factor = 1.0) {
    const std::size_t d = wide_.cols();
    switch (mode_) {
      case Accumulation::FP32Exact: {
        const Tensor r = accumulate_pv(p_codes, v_codes, mode_, cadence_);
        for (std::size_t i = 0; i < wide_.rows(); ++i) {
          for (std::size_t c = 0; c < d; ++c) {
            wide_(i, c) = alpha[i] * wide_(i, c) + factor * r(i, c);
          }
        }
        break;
      }
      case Accumulation::FP22TwoLevel: {
        const Tensor r = accumulate_pv(p_codes, v_codes, mode_, cadence_);
        for (std::size_t i = 0; i < wide_.rows(); ++i) {
          const float a = static_cast<float>(alpha[i]);
          const float f = static_cast<float>(factor);
          for (std::size_t c = 0; c < d; ++c) {
            float& o = narrow_[i * d + c];
            const float scaled = a * o;
            o = scaled + f * static_cast<float>(r(i, c));
          }
        }
        break;
      }
      case Accumulation::FP22SingleLevel:
        add_block_single_level(alpha, p_codes, v_codes);
        break;
    }
  }

  Tensor result() const {
    if (mode_ == Accumulation::FP32Exact) return wide_;
    Tensor out(wide_.rows(), wide_.cols());
    for (std::size_t i = 0; i < narrow_.size(); ++i) out.values()[i] = narrow_[i];
    return out;
  }

 private:
  void add_block_single_level(std::span<const double> alpha, const Tensor& p_codes,
                              const Tensor& v_codes) {
    const std::size_t d = wide_.cols();
    std::vector<double> pending(d);
    for (std::size_t i = 0; i < p_codes.rows(); ++i) {
      float* acc = narrow_.data() + i * d;
      const float a = static_cast<float>(alpha[i]);
      for (std::size_t c = 0; c < d; ++c) acc[c] = detail::fp22(a * acc[c]);
      if (cadence_ == TruncationCadence::PerFma) {
        for (std::size_t k = 0; k < p_codes.cols(); ++k) {
          const float p = static_cast<float>(p_codes(i, k));
          if (p == 0.0f) continue;
          const auto vrow = v_codes.row(k);
          for (std::size_t c = 0; c < d; ++c) {
            acc[c] = detail::fp22(acc[c] + p * static_cast<float>(vrow[c]));
          }
        }
      } else {
        for (std::size_t k0 = 0; k0 < p_codes.cols(); k0 += 32) {
          std::fill(pending.begin(), pending.end(), 0.0);
          const std::size_t k1 = std::min(p_codes.cols(), k0 + 32);
          for (std::size_t k = k0; k < k1; ++k) {
            const double p = p_codes(i, k);
            const auto vrow = v_codes.row(k);
            for (std::size_t c = 0; c < d; ++c) pending[c] += p * vrow[c];
          }
          for (std::size_t c = 0; c < d; ++c) {
            acc[c] = detail::fp22(static_cast<float>(acc[c] + pending[c]));
          }
        }
      }
    }
  }

  Accumulation mode_;
  TruncationCadence cadence_;
  Tensor wide_;
  std::vector<float> narrow_;
};

struct Sage2Diagnostics {
  std::size_t q_groups = 0;
  std::size_t k_groups = 0;
  double q_zero_code_fraction = 0.0;  // share of Q codes that quantized to 0
  double k_zero_code_fraction = 0.0;
  double p_zero_code_fraction = 0.0;
};

struct Sage2Result {
  Tensor output;
  SmoothingState smoothing;
  Sage2Diagnostics diagnostics;
};

namespace detail {

inline double zero_fraction(const Tensor& codes) {
  if (codes.empty()) return 0.0;
  const auto zeros = std::count(codes.values().begin(), codes.values().end(), 0.0);
  return static_cast<double>(zeros) / static_cast<double>(codes.size());
}

// Q and K codes as int16 so the QK product accumulates exactly in int32, as
// the INT32 mma accumulator does.
inline std::vector<std::int16_t> to_int16(const Tensor& codes) {
  std::vector<std::int16_t> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    out[i] = static_cast<std::int16_t>(codes.values()[i]);
  }
  return out;
}

}  // namespace detail

/// The quantized attention pipeline:
///   1. optional baseline transform, then smoothing of Q (per block), K and V;
///   2. dS_ij = q_bar_i K_j'^T;
///   3. Q, K quantized at the configured granularity, V per channel;
///   4. online softmax on dequant(Q^ K^T) + dS, P~ quantized with a static
///      scale, P^ V^ accumulated in the configured accumulator;
///   5. O_i = diag(l)^-1 O * delta_P * delta_V (+ V mean).
inline Sage2Result attention_sage2(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                   const AttentionConfig& cfg) {
  cfg.validate();
  check_qkv(q_in, k_in, v_in);
  const std::size_t n_q = q_in.rows();
  const std::size_t n_kv = k_in.rows();
  const std::size_t d = q_in.cols();
  const std::size_t d_v = v_in.cols();
  const double scale = cfg.scale_for(d);

  Sage2Result res;
  SmoothingState& sm = res.smoothing;
  sm.mode = cfg.smoothing;

  Tensor q = q_in;
  Tensor k = k_in;
  if (cfg.baseline == Baseline::SmoothQuant) {
    auto t = baseline_smoothquant(q, k, cfg.smoothquant_alpha);
    q = std::move(t.q);
    k = std::move(t.k);
  } else if (cfg.baseline == Baseline::Hadamard) {
    auto t = baseline_hadamard(q, k, cfg.hadamard_seed);
    q = std::move(t.q);
    k = std::move(t.k);
  }

  if (cfg.smoothing.k) {
    auto t = smooth_k(k);
    k = std::move(t.centered);
    sm.k_bar = std::move(t.mean);
  }
  const std::size_t q_blocks = ceil_div(n_q, cfg.b_q);
  sm.q_bar = Tensor(q_blocks, d);
  if (cfg.smoothing.q) {
    auto t = smooth_q(q, cfg.b_q);
    q = std::move(t.centered);
    sm.q_bar = std::move(t.block_means);
  }
  Tensor v = v_in;
  if (cfg.smoothing.v) {
    auto t = smooth_v(v);
    v = std::move(t.centered);
    sm.v_mean = std::move(t.mean);
  }

  sm.delta_s = Tensor(q_blocks, n_kv);
  if (cfg.smoothing.q) {
    for (std::size_t bi = 0; bi < q_blocks; ++bi) {
      for (std::size_t bj = 0; bj * cfg.b_kv < n_kv; ++bj) {
        const auto cols = detail::block(bj, cfg.b_kv, n_kv);
        const auto ds = compute_delta_s(sm.q_bar.row(bi), k.slice_rows(cols.begin, cols.end));
        std::copy(ds.begin(), ds.end(), sm.delta_s.row(bi).begin() + cols.begin);
      }
    }
  }

  const QuantizedTensor qh = quantize(q, cfg.granularity(Side::Query), cfg.qk_format);
  const QuantizedTensor kh = quantize(k, cfg.granularity(Side::Key), cfg.qk_format);
  const QuantizedTensor vh =
      quantize(v, Granularity{GranularityKind::PerChannel}, cfg.pv_format);
  res.diagnostics.q_groups = qh.scales.size();
  res.diagnostics.k_groups = kh.scales.size();
  res.diagnostics.q_zero_code_fraction = detail::zero_fraction(qh.codes);
  res.diagnostics.k_zero_code_fraction = detail::zero_fraction(kh.codes);

  const bool integer_qk = format_info(cfg.qk_format).is_integer;
  std::vector<std::int16_t> qi, ki;
  if (integer_qk) {
    qi = detail::to_int16(qh.codes);
    ki = detail::to_int16(kh.codes);
  }
  const double p_divisor = scale_divisor(cfg.pv_format);
  const double static_p_scale = p_divisor == 0.0 ? 1.0 : 1.0 / p_divisor;

  Tensor out(n_q, d_v);
  std::size_t p_zeros = 0, p_total = 0;
  for (std::size_t bi = 0; bi < q_blocks; ++bi) {
    const auto rows = detail::block(bi, cfg.b_q, n_q);
    TileState st(rows.size());
    PvAccumulator acc(rows.size(), d_v, cfg.accumulation, cfg.cadence);
    const auto ds_row = sm.delta_s.row(bi);
    for (std::size_t bj = 0; bj * cfg.b_kv < n_kv; ++bj) {
      const auto cols = detail::block(bj, cfg.b_kv, n_kv);
      if (cfg.causal && cols.begin > rows.end - 1) break;

      Tensor s(rows.size(), cols.size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::size_t qr = rows.begin + r;
        const double dq = qh.scales[qh.group_of[qr]];
        for (std::size_t c = 0; c < cols.size(); ++c) {
          const std::size_t kr = cols.begin + c;
          const double dk = kh.scales[kh.group_of[kr]];
          double dot;
          if (integer_qk) {
            const std::int16_t* a = qi.data() + qr * d;
            const std::int16_t* b = ki.data() + kr * d;
            std::int32_t iacc = 0;
            for (std::size_t x = 0; x < d; ++x) iacc += static_cast<std::int32_t>(a[x]) * b[x];
            dot = static_cast<double>(iacc);
          } else {
            const auto a = qh.codes.row(qr);
            const auto b = kh.codes.row(kr);
            dot = 0.0;
            for (std::size_t x = 0; x < d; ++x) dot += a[x] * b[x];
          }
          s(r, c) = (dot * dq * dk + ds_row[kr]) * scale;
        }
      }
      if (cfg.causal) detail::apply_causal_mask(s, rows, cols);
      const auto alpha = st.update(s);  // s now holds P~

      QuantizedTensor ph = cfg.p_scaling == PScaling::Static
                               ? quantize_p_static(s, cfg.pv_format)
                               : quantize_p_block_max(s, cfg.pv_format);
      p_zeros += static_cast<std::size_t>(
          std::count(ph.codes.values().begin(), ph.codes.values().end(), 0.0));
      p_total += ph.codes.size();
      const double factor =
          cfg.p_scaling == PScaling::Static ? 1.0 : ph.scales.front() / static_p_scale;
      acc.add_block(alpha, ph.codes, vh.codes.slice_rows(cols.begin, cols.end), factor);
    }
    const Tensor o = acc.result();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < d_v; ++c) {
        double val = o(r, c) / st.l[r] * static_p_scale * vh.scales[c];
        if (sm.v_mean) val += (*sm.v_mean)[c];
        out(rows.begin + r, c) = val;
      }
    }
  }
  res.diagnostics.p_zero_code_fraction =
      p_total ? static_cast<double>(p_zeros) / static_cast<double>(p_total) : 0.0;
  res.output = std::move(out);
  return res;
}

}  // namespace qattn
