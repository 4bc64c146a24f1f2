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

// Minimal library use: generate outlier-heavy Q/K/V, run the quantized
// kernel and compare it with the exact reference.

#include <cstdio>

#include "qattn/attention.hpp"
#include "qattn/metrics.hpp"
#include "qattn/synth.hpp"

int main() {
  qattn::GenSpec spec;
  spec.n_tokens = 512;
  spec.v_bias = std::pair{8.0, 9.0};
  const auto t = qattn::gen_qkv(spec);
  const qattn::Tensor ref = qattn::attention_oracle(t.q, t.k, t.v);

  qattn::AttentionConfig cfg;  // INT4 per-thread QK, E4M3 P~V, FP22 two-level
  for (bool smooth : {false, true}) {
    cfg.smoothing.q = cfg.smoothing.k = smooth;
    const auto res = qattn::attention_sage2(t.q, t.k, t.v, cfg);
    const auto m = qattn::measure(ref, res.output);
    std::printf("smooth q/k %-3s  cos %.5f  rel-l1 %.4f  rmse %.4f\n", smooth ? "on" : "off",
                m.cos_sim, m.rel_l1, m.rmse);
  }
}
