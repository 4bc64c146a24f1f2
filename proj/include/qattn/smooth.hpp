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

// Outlier smoothing of Q, K and V, plus the SmoothQuant and random-Hadamard
// baselines they are compared against.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "qattn/quantize.hpp"
#include "qattn/tensor.hpp"

namespace qattn {

/// Column means of rows [begin, end).
inline std::vector<double> column_mean(const Tensor& x, std::size_t begin, std::size_t end) {
  std::vector<double> mean(x.cols(), 0.0);
  for (std::size_t r = begin; r < end; ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(r, c);
  }
  const double inv = 1.0 / static_cast<double>(end - begin);
  for (double& m : mean) m *= inv;
  return mean;
}

struct CenteredTensor {
  Tensor centered;
  std::vector<double> mean;
};

/// K - mean(K), with the mean taken over all tokens.
inline CenteredTensor smooth_k(const Tensor& k) {
  if (k.empty()) throw ConfigError("cannot smooth an empty tensor");
  CenteredTensor out{k, column_mean(k, 0, k.rows())};
  for (std::size_t r = 0; r < k.rows(); ++r) {
    for (std::size_t c = 0; c < k.cols(); ++c) out.centered(r, c) -= out.mean[c];
  }
  return out;
}

/// Channel-mean removal for V; the mean is added back to the attention output.
inline CenteredTensor smooth_v(const Tensor& v) { return smooth_k(v); }

struct BlockCenteredTensor {
  Tensor centered;
  Tensor block_means;  // one row per block of b_q tokens
};

/// Subtracts each b_q-token block's column mean; the last block may be short.
inline BlockCenteredTensor smooth_q(const Tensor& q, std::size_t b_q) {
  if (q.empty()) throw ConfigError("cannot smooth an empty tensor");
  if (b_q == 0) throw ConfigError("b_q must be positive");
  const std::size_t blocks = ceil_div(q.rows(), b_q);
  BlockCenteredTensor out{q, Tensor(blocks, q.cols())};
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t begin = b * b_q;
    const std::size_t end = std::min(q.rows(), begin + b_q);
    const auto mean = column_mean(q, begin, end);
    std::copy(mean.begin(), mean.end(), out.block_means.row(b).begin());
    for (std::size_t r = begin; r < end; ++r) {
      for (std::size_t c = 0; c < q.cols(); ++c) out.centered(r, c) -= mean[c];
    }
  }
  return out;
}

/// Row correction q_bar * K_j'^T for one (Q-block, K-block) pair; `k_block`
/// holds the (smoothed) key rows of block j.
inline std::vector<double> compute_delta_s(std::span<const double> q_bar, const Tensor& k_block) {
  if (q_bar.size() != k_block.cols()) throw ConfigError("shape mismatch: compute_delta_s");
  std::vector<double> out(k_block.rows(), 0.0);
  for (std::size_t r = 0; r < k_block.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < q_bar.size(); ++c) acc += q_bar[c] * k_block(r, c);
    out[r] = acc;
  }
  return out;
}

struct SmoothingFlags {
  bool q = false;
  bool k = false;
  bool v = false;
  friend bool operator==(const SmoothingFlags&, const SmoothingFlags&) = default;
};

/// Correction terms produced by preprocessing.
struct SmoothingState {
  SmoothingFlags mode;
  Tensor q_bar;                          // blocks x d; zero rows when smooth_q is off
  std::vector<double> k_bar;             // empty when smooth_k is off
  std::optional<std::vector<double>> v_mean;
  Tensor delta_s;                        // Q blocks x N_kv; row i concatenates dS_ij over j
};

/// Column-wise absolute maxima.
inline std::vector<double> column_absmax(const Tensor& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] = std::max(m[c], std::fabs(x(r, c)));
  }
  return m;
}

struct QKPair {
  Tensor q;
  Tensor k;
};

/// SmoothQuant-style migration between Q and K: per channel
/// s = max|Q|^alpha / max|K|^(1-alpha), Q' = Q / s, K' = K * s.
inline QKPair baseline_smoothquant(const Tensor& q, const Tensor& k, double alpha = 0.5) {
  if (q.cols() != k.cols()) throw ConfigError("shape mismatch: baseline_smoothquant");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("smoothquant alpha must lie in (0, 1)");
  const auto qmax = column_absmax(q);
  const auto kmax = column_absmax(k);
  std::vector<double> s(q.cols());
  for (std::size_t c = 0; c < s.size(); ++c) {
    s[c] = std::pow(std::max(qmax[c], kZeroGroupFloor), alpha) /
           std::pow(std::max(kmax[c], kZeroGroupFloor), 1.0 - alpha);
  }
  QKPair out{q, k};
  for (std::size_t r = 0; r < q.rows(); ++r) {
    for (std::size_t c = 0; c < q.cols(); ++c) out.q(r, c) /= s[c];
  }
  for (std::size_t r = 0; r < k.rows(); ++r) {
    for (std::size_t c = 0; c < k.cols(); ++c) out.k(r, c) *= s[c];
  }
  return out;
}

/// In-place unnormalized fast Walsh-Hadamard transform (Sylvester ordering).
inline void fwht(std::span<double> x) {
  for (std::size_t h = 1; h < x.size(); h *= 2) {
    for (std::size_t i = 0; i < x.size(); i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j];
        const double b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
}

/// Seeded +-1 diagonal. Uses the top bit of mt19937_64, whose output sequence
/// is fixed by the standard.
inline std::vector<double> random_signs(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> signs(d);
  for (double& s : signs) s = (rng() >> 63) ? -1.0 : 1.0;
  return signs;
}

/// X * (D H / sqrt(d)) row by row.
inline Tensor apply_random_hadamard(const Tensor& x, std::span<const double> signs) {
  const std::size_t d = x.cols();
  if (d == 0 || (d & (d - 1)) != 0) throw ConfigError("Hadamard transform needs a power-of-two head dimension");
  const double norm = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] *= signs[c];
    fwht(row);
    for (double& v : row) v *= norm;
  }
  return out;
}

/// Rotates Q and K by the same random orthogonal D H / sqrt(d), which leaves
/// Q K^T unchanged.
inline QKPair baseline_hadamard(const Tensor& q, const Tensor& k, std::uint64_t seed) {
  if (q.cols() != k.cols()) throw ConfigError("shape mismatch: baseline_hadamard");
  const auto signs = random_signs(q.cols(), seed);
  return {apply_random_hadamard(q, signs), apply_random_hadamard(k, signs)};
}

}  // namespace qattn
