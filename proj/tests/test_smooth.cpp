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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "qattn/smooth.hpp"

namespace qattn {
namespace {

using testing::matmul_nt;
using testing::random_tensor;

std::vector<double> col_means(const Tensor& x, std::size_t begin, std::size_t end) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t r = begin; r < end; ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) m[c] += x(r, c) / static_cast<double>(end - begin);
  }
  return m;
}

TEST(SmoothK, IdenticalRowsCenterToZero) {
  const Tensor k{{1.5, -2, 3}, {1.5, -2, 3}, {1.5, -2, 3}};
  const auto s = smooth_k(k);
  EXPECT_EQ(s.mean, (std::vector<double>{1.5, -2, 3}));
  EXPECT_EQ(s.centered, Tensor(3, 3));
}

TEST(SmoothK, SmallExample) {
  const auto s = smooth_k(Tensor{{1, 2}, {3, 4}});
  EXPECT_EQ(s.mean, (std::vector<double>{2, 3}));
  EXPECT_EQ(s.centered, (Tensor{{-1, -1}, {1, 1}}));
}

TEST(SmoothK, ColumnMeansVanish) {
  const auto s = smooth_k(random_tensor(300, 16, 1, 2.0, 5.0));
  for (double m : col_means(s.centered, 0, 300)) EXPECT_LE(std::fabs(m), 1e-9);
}

TEST(SmoothK, EmptyIsAnError) { EXPECT_THROW(smooth_k(Tensor{}), ConfigError); }

TEST(SmoothQ, ConstantBlockCentersToZero) {
  const auto s = smooth_q(Tensor(128, 4, 3.25), 64);
  EXPECT_EQ(s.centered, Tensor(128, 4));
  EXPECT_EQ(s.block_means.rows(), 2u);
}

TEST(SmoothQ, DistinctBlockMeans) {
  Tensor q = random_tensor(256, 8, 2);
  for (std::size_t r = 128; r < 256; ++r) {
    for (double& v : q.row(r)) v += 10.0;
  }
  const auto s = smooth_q(q, 128);
  for (std::size_t b = 0; b < 2; ++b) {
    const auto m = col_means(q, b * 128, b * 128 + 128);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(s.block_means(b, c), m[c], 1e-12);
  }
  EXPECT_GT(s.block_means(1, 0) - s.block_means(0, 0), 9.0);
}

TEST(SmoothQ, PerBlockMeansVanishIncludingRaggedTail) {
  const auto s = smooth_q(random_tensor(300, 8, 3, 1.0, -4.0), 128);
  ASSERT_EQ(s.block_means.rows(), 3u);
  for (auto [b, e] : {std::pair{0, 128}, std::pair{128, 256}, std::pair{256, 300}}) {
    for (double m : col_means(s.centered, b, e)) EXPECT_LE(std::fabs(m), 1e-9);
  }
}

TEST(DeltaS, Examples) {
  const Tensor kb = random_tensor(64, 8, 4);
  const std::vector<double> zero(8, 0.0);
  for (double v : compute_delta_s(zero, kb)) EXPECT_EQ(v, 0.0);

  const auto centered = smooth_k(Tensor(64, 8, 2.0)).centered;
  const auto qbar = random_tensor(1, 8, 5);
  for (double v : compute_delta_s(qbar.row(0), centered)) EXPECT_EQ(v, 0.0);

  const Tensor dense = matmul_nt(qbar, kb);
  const auto ds = compute_delta_s(qbar.row(0), kb);
  for (std::size_t j = 0; j < ds.size(); ++j) EXPECT_NEAR(ds[j], dense(0, j), 1e-12);
}

TEST(SmoothV, Examples) {
  EXPECT_EQ(smooth_v(Tensor(10, 3, 7.0)).centered, Tensor(10, 3));

  Tensor v = random_tensor(512, 8, 6);
  for (double& x : v.values()) x += 8.5;
  const auto s = smooth_v(v);
  for (double m : col_means(s.centered, 0, 512)) EXPECT_LE(std::fabs(m), 1e-9);
  for (double m : s.mean) EXPECT_NEAR(m, 8.5, 0.2);
}

TEST(SmoothV, RowStochasticTimesMeanIsMean) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::vector<double> vm{8.2, -3.0, 0.5};
  for (int row = 0; row < 20; ++row) {
    std::vector<double> p(50);
    double sum = 0;
    for (double& x : p) sum += (x = u(rng));
    for (std::size_t c = 0; c < vm.size(); ++c) {
      double acc = 0;
      for (double x : p) acc += (x / sum) * vm[c];
      EXPECT_NEAR(acc, vm[c], 1e-12);
    }
  }
}

TEST(SmoothQuant, EqualMaximaGiveIdentity) {
  const Tensor q{{2, -1}, {-2, 0.5}};
  const Tensor k{{-2, 1}, {1, 0}};
  const auto t = baseline_smoothquant(q, k, 0.5);
  EXPECT_EQ(t.q, q);
  EXPECT_EQ(t.k, k);
}

TEST(SmoothQuant, ScaleFormula) {
  // max|Q_0| = 4, max|K_0| = 1 -> s_0 = 4^0.5 / 1^0.5 = 2.
  const auto t = baseline_smoothquant(Tensor{{4.0}, {-1.0}}, Tensor{{1.0}, {0.5}}, 0.5);
  EXPECT_DOUBLE_EQ(t.q(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(t.k(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(t.k(1, 0), 1.0);
}

TEST(SmoothQuant, PreservesProduct) {
  const Tensor q = random_tensor(64, 32, 9, 3.0);
  const Tensor k = random_tensor(80, 32, 10, 0.2);
  const auto t = baseline_smoothquant(q, k, 0.5);
  EXPECT_LE(max_abs_diff(matmul_nt(t.q, t.k), matmul_nt(q, k)), 1e-10);
}

TEST(SmoothQuant, RejectsBadAlpha) {
  EXPECT_THROW(baseline_smoothquant(Tensor{{1.0}}, Tensor{{1.0}}, 1.0), ConfigError);
}

TEST(Hadamard, DimensionOneIsSignFlip) {
  const Tensor q{{3.0}, {-2.0}};
  const Tensor k{{0.5}, {4.0}};
  const auto t = baseline_hadamard(q, k, 17);
  EXPECT_EQ(std::fabs(t.q(0, 0)), 3.0);
  EXPECT_EQ(matmul_nt(t.q, t.k), matmul_nt(q, k));
}

TEST(Hadamard, PreservesProduct) {
  const Tensor q = random_tensor(100, 64, 11, 2.0, 1.0);
  const Tensor k = random_tensor(90, 64, 12);
  const auto t = baseline_hadamard(q, k, 3);
  EXPECT_LE(max_abs_diff(matmul_nt(t.q, t.k), matmul_nt(q, k)), 1e-9);
}

TEST(Hadamard, TwiceMatchesMatrixOracle) {
  constexpr std::size_t d = 16;
  const Tensor x = random_tensor(5, d, 13);
  const auto signs = random_signs(d, 99);
  // Sylvester H from the bit-parity definition.
  Tensor m(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      m(i, j) = signs[i] * ((std::popcount(i & j) % 2) ? -1.0 : 1.0);  // (D H)_ij
    }
  }
  // X (DH)(DH) / d
  Tensor expect(5, d);
  for (std::size_t r = 0; r < 5; ++r) {
    std::vector<double> once(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < d; ++i) once[j] += x(r, i) * m(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t i = 0; i < d; ++i) expect(r, j) += once[i] * m(i, j) / d;
    }
  }
  const Tensor twice = apply_random_hadamard(apply_random_hadamard(x, signs), signs);
  EXPECT_LE(max_abs_diff(twice, expect), 1e-12);
}

TEST(Hadamard, RejectsNonPowerOfTwo) {
  EXPECT_THROW(baseline_hadamard(Tensor(2, 6), Tensor(2, 6), 0), ConfigError);
}

// Dropping b = q_bar k_bar^T + gamma(Q) k_bar^T leaves row softmax unchanged.
TEST(SmoothingProperty, SoftmaxRowBiasInvariance) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor q = random_tensor(256, 16, 100 + seed, 1.0, 2.0);
    const Tensor k = random_tensor(192, 16, 200 + seed, 1.0, -3.0);
    const std::size_t b_q = 128;
    const auto sq = smooth_q(q, b_q);
    const auto sk = smooth_k(k);
    const Tensor full = matmul_nt(q, k);
    const Tensor core = matmul_nt(sq.centered, sk.centered);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const auto ds = compute_delta_s(sq.block_means.row(i / b_q), sk.centered);
      std::vector<double> a(k.rows()), b(k.rows());
      double bmin = INFINITY, bmax = -INFINITY, ma = -INFINITY, mb = -INFINITY;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        a[j] = full(i, j);
        b[j] = core(i, j) + ds[j];
        const double dropped = a[j] - b[j];
        bmin = std::min(bmin, dropped);
        bmax = std::max(bmax, dropped);
        ma = std::max(ma, a[j]);
        mb = std::max(mb, b[j]);
      }
      ASSERT_LE(bmax - bmin, 1e-10);
      double za = 0, zb = 0;
      for (std::size_t j = 0; j < k.rows(); ++j) {
        za += std::exp(a[j] - ma);
        zb += std::exp(b[j] - mb);
      }
      for (std::size_t j = 0; j < k.rows(); ++j) {
        ASSERT_NEAR(std::exp(a[j] - ma) / za, std::exp(b[j] - mb) / zb, 1e-10);
      }
    }
  }
}

TEST(SmoothingTheory, VarianceShrinksByNMinusOneOverN) {
  // Column variance after mean subtraction, over many small draws (N = 8 makes
  // the (N-1)/N factor visible).
  constexpr std::size_t n = 8;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(5.0, 2.0);
  double acc = 0.0;
  const int draws = 20000;
  for (int t = 0; t < draws; ++t) {
    Tensor x(n, 1);
    for (double& v : x.values()) v = nd(rng);
    const auto y = smooth_k(x).centered;
    acc += y(0, 0) * y(0, 0);
  }
  EXPECT_NEAR(acc / draws, (n - 1.0) / n * 4.0, 0.05 * 4.0);
}

}  // namespace
}  // namespace qattn
