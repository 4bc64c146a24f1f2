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

// Synthetic Q/K/V generation and the QATN tensor file format.
//
// QATN layout, all integers little-endian:
//   "QATN" | u32 version = 1 | u8 dtype (0 = f64, 1 = f32) | u32 rank |
//   u64 dims[rank] | values, row-major, IEEE little-endian.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qattn/tensor.hpp"

namespace qattn {

struct GenSpec {
  std::size_t n_tokens = 1024;
  std::size_t head_dim = 64;
  std::uint64_t seed = 0;
  double sigma = 1.0;             // per-channel token std
  double channel_mean_std = 0.0;  // spread of ordinary channel means
  std::size_t outlier_channels = 4;
  double outlier_multiplier = 20.0;  // outlier channel mean = +-multiplier * sigma
  std::optional<std::pair<double, double>> v_bias;  // uniform per-channel V bias

  void validate() const {
    if (n_tokens == 0) throw ConfigError("n_tokens must be at least 1");
    if (head_dim == 0) throw ConfigError("head_dim must be at least 1");
    if (outlier_channels > head_dim) throw ConfigError("more outlier channels than head_dim");
    if (outlier_multiplier < 1.0) throw ConfigError("outlier multiplier must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    if (channel_mean_std < 0.0) throw ConfigError("channel_mean_std must be non-negative");
    if (v_bias && v_bias->first > v_bias->second) throw ConfigError("v_bias range is reversed");
  }
};

struct GeneratedQKV {
  Tensor q;
  Tensor k;
  Tensor v;
  std::vector<std::size_t> outlier_channels;  // sorted
};

/// Tokens are i.i.d. Gaussian per channel. Q and K share one seeded set of
/// outlier channels whose means are +-multiplier*sigma (independent signs per
/// tensor); every other channel mean is N(0, channel_mean_std^2). V is
/// zero-mean unless `v_bias` is set.
inline GeneratedQKV gen_qkv(const GenSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t n = spec.n_tokens;
  const std::size_t d = spec.head_dim;

  std::vector<std::size_t> channels(d);
  std::iota(channels.begin(), channels.end(), std::size_t{0});
  std::shuffle(channels.begin(), channels.end(), rng);
  channels.resize(spec.outlier_channels);
  std::sort(channels.begin(), channels.end());

  std::normal_distribution<double> normal(0.0, 1.0);
  auto channel_means = [&] {
    std::vector<double> mu(d);
    for (double& m : mu) m = spec.channel_mean_std * normal(rng);
    for (std::size_t c : channels) {
      const double sign = (rng() >> 63) ? -1.0 : 1.0;
      mu[c] = sign * spec.outlier_multiplier * spec.sigma;
    }
    return mu;
  };
  auto sample = [&](const std::vector<double>& mu) {
    Tensor t(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < d; ++c) t(r, c) = mu[c] + spec.sigma * normal(rng);
    }
    return t;
  };

  GeneratedQKV out;
  out.outlier_channels = channels;
  const auto mu_q = channel_means();
  const auto mu_k = channel_means();
  out.q = sample(mu_q);
  out.k = sample(mu_k);
  std::vector<double> mu_v(d, 0.0);
  if (spec.v_bias) {
    std::uniform_real_distribution<double> bias(spec.v_bias->first, spec.v_bias->second);
    for (double& m : mu_v) m = bias(rng);
  }
  out.v = sample(mu_v);
  return out;
}

enum class TensorFileErrorKind {
  Io,
  BadMagic,
  UnsupportedVersion,
  BadDtype,
  BadRank,
  DimensionOverflow,
  Truncated,
  TrailingData,
};

class TensorFileError : public std::runtime_error {
 public:
  TensorFileError(TensorFileErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  TensorFileErrorKind kind() const { return kind_; }

 private:
  TensorFileErrorKind kind_;
};

enum class TensorDtype : std::uint8_t { F64 = 0, F32 = 1 };

inline constexpr std::array<char, 4> kTensorMagic{'Q', 'A', 'T', 'N'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
  }
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return v;
  }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw TensorFileError(TensorFileErrorKind::Truncated, "truncated file");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const Tensor& t, TensorDtype dtype = TensorDtype::F64) {
  std::vector<unsigned char> out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le<std::uint32_t>(out, kTensorVersion);
  out.push_back(static_cast<unsigned char>(dtype));
  detail::put_le<std::uint32_t>(out, 2);
  detail::put_le<std::uint64_t>(out, t.rows());
  detail::put_le<std::uint64_t>(out, t.cols());
  for (double v : t.values()) {
    if (dtype == TensorDtype::F64) {
      detail::put_le(out, std::bit_cast<std::uint64_t>(v));
    } else {
      detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

/// Accepts rank 1 (read as a single row) or rank 2.
inline Tensor decode_tensor(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  in.need(kTensorMagic.size());
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
    throw TensorFileError(TensorFileErrorKind::BadMagic, "bad magic");
  }
  for (std::size_t i = 0; i < kTensorMagic.size(); ++i) in.get_le<std::uint8_t>();
  const auto version = in.get_le<std::uint32_t>();
  if (version != kTensorVersion) {
    throw TensorFileError(TensorFileErrorKind::UnsupportedVersion,
                          "unsupported version " + std::to_string(version));
  }
  const auto dtype_code = in.get_le<std::uint8_t>();
  if (dtype_code > 1) throw TensorFileError(TensorFileErrorKind::BadDtype, "bad dtype code");
  const auto dtype = static_cast<TensorDtype>(dtype_code);
  const auto rank = in.get_le<std::uint32_t>();
  if (rank < 1 || rank > 2) {
    throw TensorFileError(TensorFileErrorKind::BadRank, "unsupported rank " + std::to_string(rank));
  }
  std::uint64_t dims[2] = {1, 1};
  for (std::uint32_t i = 0; i < rank; ++i) dims[2 - rank + i] = in.get_le<std::uint64_t>();
  const std::uint64_t elem = dtype == TensorDtype::F64 ? 8 : 4;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / elem;
  if (dims[1] != 0 && dims[0] > limit / dims[1]) {
    throw TensorFileError(TensorFileErrorKind::DimensionOverflow, "dimension overflow");
  }
  const std::uint64_t count = dims[0] * dims[1];
  if (count * elem > in.remaining()) throw TensorFileError(TensorFileErrorKind::Truncated, "truncated file");
  if (count * elem < in.remaining()) {
    throw TensorFileError(TensorFileErrorKind::TrailingData, "trailing data after tensor values");
  }
  std::vector<double> values(count);
  for (double& v : values) {
    v = dtype == TensorDtype::F64 ? std::bit_cast<double>(in.get_le<std::uint64_t>())
                                  : static_cast<double>(std::bit_cast<float>(in.get_le<std::uint32_t>()));
  }
  return Tensor(dims[0], dims[1], std::move(values));
}

inline void save_tensor(const std::string& path, const Tensor& t,
                        TensorDtype dtype = TensorDtype::F64) {
  const auto bytes = encode_tensor(t, dtype);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw TensorFileError(TensorFileErrorKind::Io, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw TensorFileError(TensorFileErrorKind::Io, "write failed for '" + path + "'");
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorFileError(TensorFileErrorKind::Io, "cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace qattn
