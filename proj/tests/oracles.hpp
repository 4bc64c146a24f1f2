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

// Independent reference implementations used only by tests. Nothing here
// calls into the code paths it checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "qattn/tensor.hpp"

namespace qattn::testing {

/// Finite non-negative values of a minifloat with the given field widths, in
/// ascending order, paired with their mantissa field (for tie-breaking).
struct MinifloatValue {
  double value;
  int mantissa_field;
};

inline std::vector<MinifloatValue> enumerate_minifloat(int exp_bits, int man_bits, int bias,
                                                       bool ieee_top_exponent_reserved) {
  std::vector<MinifloatValue> out;
  const int top = (1 << exp_bits) - 1;
  const int man_count = 1 << man_bits;
  for (int e = 0; e <= top; ++e) {
    for (int m = 0; m < man_count; ++m) {
      if (ieee_top_exponent_reserved && e == top) continue;       // inf / nan
      if (!ieee_top_exponent_reserved && e == top && m == man_count - 1) continue;  // E4M3 nan
      const double frac = static_cast<double>(m) / man_count;
      const double v = e == 0 ? frac * std::pow(2.0, 1 - bias) : (1.0 + frac) * std::pow(2.0, e - bias);
      out.push_back({v, m});
    }
  }
  return out;
}

inline const std::vector<MinifloatValue>& e4m3_values() {
  static const auto v = enumerate_minifloat(4, 3, 7, false);
  return v;
}
inline const std::vector<MinifloatValue>& e5m2_values() {
  static const auto v = enumerate_minifloat(5, 2, 15, true);
  return v;
}
inline const std::vector<MinifloatValue>& fp16_values() {
  static const auto v = enumerate_minifloat(5, 10, 15, true);
  return v;
}

/// Nearest table entry, ties to the even mantissa field, saturating.
inline double nearest_in(const std::vector<MinifloatValue>& table, double x) {
  const double a = std::fabs(x);
  const double max = table.back().value;
  double r;
  if (a >= max) {
    r = max;
  } else {
    auto hi = std::lower_bound(table.begin(), table.end(), a,
                               [](const MinifloatValue& v, double t) { return v.value < t; });
    auto lo = hi == table.begin() ? hi : hi - 1;
    const double dlo = a - lo->value;
    const double dhi = hi->value - a;
    if (dlo < dhi) r = lo->value;
    else if (dhi < dlo) r = hi->value;
    else r = (lo->mantissa_field % 2 == 0) ? lo->value : hi->value;
  }
  return std::copysign(r, x);
}

/// Round half to even by case analysis on the fractional part.
inline long long round_half_even(double x) {
  const double fl = std::floor(x);
  const double frac = x - fl;
  long long base = static_cast<long long>(fl);
  if (frac > 0.5) return base + 1;
  if (frac < 0.5) return base;
  return (base % 2 == 0) ? base : base + 1;
}

/// Truncation of a normal float's significand to 14 significant bits
/// (1 implicit + 13 stored), computed in double through frexp.
inline double truncate_significand(double x, int stored_bits) {
  if (x == 0.0) return x;
  int e;
  const double mant = std::frexp(x, &e);  // |mant| in [0.5, 1)
  const double scaled = std::trunc(std::ldexp(mant, stored_bits + 1));
  return std::ldexp(scaled, e - stored_bits - 1);
}

/// Per-thread group membership built from the token sets directly: query
/// warp tiles of b_q/c_w rows split into 8 residue classes; key blocks split
/// into pairs {8m + 2j, 8m + 2j + 1}.
inline std::vector<std::vector<std::size_t>> per_thread_sets(std::size_t n, bool query,
                                                             std::size_t b_q, std::size_t b_kv,
                                                             std::size_t c_w) {
  std::vector<std::vector<std::size_t>> sets;
  if (query) {
    const std::size_t tile = b_q / c_w;
    for (std::size_t base = 0; base < n; base += b_q) {
      for (std::size_t w = 0; w < c_w; ++w) {
        for (std::size_t i = 0; i < 8; ++i) {
          std::vector<std::size_t> s;
          for (std::size_t m = 0; m < tile / 8; ++m) {
            const std::size_t t = base + w * tile + i + 8 * m;
            if (t < n) s.push_back(t);
          }
          sets.push_back(s);
        }
      }
    }
  } else {
    for (std::size_t base = 0; base < n; base += b_kv) {
      for (std::size_t j = 0; j < 4; ++j) {
        std::vector<std::size_t> s;
        for (std::size_t m = 0; m < b_kv / 8; ++m) {
          for (std::size_t t : {base + 8 * m + 2 * j, base + 8 * m + 2 * j + 1}) {
            if (t < n) s.push_back(t);
          }
        }
        sets.push_back(s);
      }
    }
  }
  return sets;
}

inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      long double acc = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) acc += (long double)a(i, c) * b(j, c);
      out(i, j) = static_cast<double>(acc);
    }
  }
  return out;
}

/// Second softmax-attention implementation: long double, normalizes by the
/// log-sum-exp instead of the running max.
inline Tensor attention_lse(const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
  const long double scale = 1.0L / std::sqrt((long double)q.cols());
  Tensor out(q.rows(), v.cols());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const std::size_t n = causal ? std::min(i + 1, k.rows()) : k.rows();
    std::vector<long double> s(n);
    long double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      long double acc = 0;
      for (std::size_t c = 0; c < q.cols(); ++c) acc += (long double)q(i, c) * k(j, c);
      s[j] = acc * scale;
      mx = std::max(mx, s[j]);
    }
    long double z = 0;
    for (auto x : s) z += std::exp(x - mx);
    const long double lse = mx + std::log(z);
    for (auto& x : s) x = std::exp(x - lse);
    std::vector<long double> acc(v.cols(), 0.0L);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < v.cols(); ++c) acc[c] += s[j] * v(j, c);
    }
    for (std::size_t c = 0; c < v.cols(); ++c) out(i, c) = static_cast<double>(acc[c]);
  }
  return out;
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double scale = 1.0, double mean = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, scale);
  Tensor t(rows, cols);
  for (double& x : t.values()) x = nd(rng);
  return t;
}

}  // namespace qattn::testing
