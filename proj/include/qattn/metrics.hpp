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

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "qattn/tensor.hpp"

namespace qattn {

// All metrics flatten both tensors row-major and accumulate in double.

inline double cos_sim(const Tensor& ref, const Tensor& out) {
  require_same_shape(ref, out, "cos_sim");
  double dot = 0.0, nr = 0.0, no = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double a = ref.values()[i];
    const double b = out.values()[i];
    dot += a * b;
    nr += a * a;
    no += b * b;
  }
  if (nr == 0.0 && no == 0.0) throw NumericError("undefined similarity: both tensors are zero");
  if (nr == 0.0 || no == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(nr) * std::sqrt(no)), -1.0, 1.0);
}

inline double rel_l1(const Tensor& ref, const Tensor& out) {
  require_same_shape(ref, out, "rel_l1");
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    diff += std::fabs(ref.values()[i] - out.values()[i]);
    norm += std::fabs(ref.values()[i]);
  }
  if (norm == 0.0) throw NumericError("relative L1 undefined: zero reference");
  return diff / norm;
}

inline double rmse(const Tensor& ref, const Tensor& out) {
  require_same_shape(ref, out, "rmse");
  if (ref.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = ref.values()[i] - out.values()[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(ref.size()));
}

enum class Aggregation { Mean, Worst };

struct AccuracyReport {
  std::string config;  // variant name or knob summary
  double cos_sim = 1.0;
  double rel_l1 = 0.0;
  double rmse = 0.0;
  std::size_t trials = 1;
};

inline AccuracyReport measure(const Tensor& ref, const Tensor& out, std::string config = {}) {
  return {std::move(config), cos_sim(ref, out), rel_l1(ref, out), rmse(ref, out), 1};
}

/// Mean averages every metric; Worst keeps the lowest CosSim and the largest
/// L1 and RMSE, which may come from different trials.
inline AccuracyReport aggregate(std::span<const AccuracyReport> reports, Aggregation mode) {
  if (reports.empty()) throw ConfigError("cannot aggregate an empty report list");
  AccuracyReport out = reports.front();
  out.trials = reports.size();
  if (mode == Aggregation::Mean) {
    double c = 0.0, l = 0.0, r = 0.0;
    for (const auto& rep : reports) {
      c += rep.cos_sim;
      l += rep.rel_l1;
      r += rep.rmse;
    }
    const double n = static_cast<double>(reports.size());
    out.cos_sim = c / n;
    out.rel_l1 = l / n;
    out.rmse = r / n;
  } else {
    for (const auto& rep : reports) {
      out.cos_sim = std::min(out.cos_sim, rep.cos_sim);
      out.rel_l1 = std::max(out.rel_l1, rep.rel_l1);
      out.rmse = std::max(out.rmse, rep.rmse);
    }
  }
  return out;
}

}  // namespace qattn
