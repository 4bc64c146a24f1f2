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

// Batch harness behind the qattn CLI: JSON run configs, named attention
// variants, ablation axes, trial fan-out, and report writers.

#pragma once

#include <atomic>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "qattn/attention.hpp"
#include "qattn/metrics.hpp"
#include "qattn/synth.hpp"

namespace qattn {

using json = nlohmann::json;

struct NamedConfig {
  std::string name;
  AttentionConfig config;
};

/// Built-in variants.
inline const std::map<std::string, AttentionConfig, std::less<>>& variant_presets() {
  static const auto presets = [] {
    std::map<std::string, AttentionConfig, std::less<>> m;
    m["fp-exact"] = AttentionConfig::full_precision();

    AttentionConfig s4;  // defaults: INT4 per-thread, E4M3, FP22 two-level, smooth Q+K
    m["sage2-4b"] = s4;
    AttentionConfig s8 = s4;
    s8.qk_format = Format::Int8;
    m["sage2-8b"] = s8;

    auto with = [&](auto f) {
      AttentionConfig c = s4;
      f(c);
      return c;
    };
    m["per-token-int4"] = with([](auto& c) { c.qk_granularity = GranularityKind::PerToken; });
    m["per-block-int4"] = with([](auto& c) { c.qk_granularity = GranularityKind::PerBlock; });
    m["per-tensor-int4"] = with([](auto& c) {
      c.qk_granularity = GranularityKind::PerTensor;
      c.smoothing = {};
    });
    m["hadamard-int4"] = with([](auto& c) {
      c.smoothing = {};
      c.baseline = Baseline::Hadamard;
    });
    m["smoothquant-int4"] = with([](auto& c) {
      c.smoothing = {};
      c.baseline = Baseline::SmoothQuant;
    });
    m["smooth-k-int4"] = with([](auto& c) { c.smoothing = {false, true, false}; });
    m["smooth-q-int4"] = with([](auto& c) { c.smoothing = {true, false, false}; });
    m["no-smooth-int4"] = with([](auto& c) { c.smoothing = {}; });
    return m;
  }();
  return presets;
}

inline AttentionConfig preset(std::string_view name) {
  const auto& p = variant_presets();
  const auto it = p.find(name);
  if (it == p.end()) throw ConfigError("unknown variant '" + std::string(name) + "'");
  return it->second;
}

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> known,
                                const char* where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace detail

inline TruncationCadence parse_cadence(std::string_view s) {
  if (s == "per-fma") return TruncationCadence::PerFma;
  if (s == "per-mma-k32") return TruncationCadence::PerMmaK32;
  throw ConfigError("unknown truncation cadence '" + std::string(s) + "'");
}

inline PScaling parse_p_scaling(std::string_view s) {
  if (s == "static") return PScaling::Static;
  if (s == "block-max") return PScaling::BlockMax;
  throw ConfigError("unknown p_scaling '" + std::string(s) + "'");
}

/// A variant is a preset name, or an object with "name", optional "base"
/// preset (default sage2-4b) and knob overrides.
inline NamedConfig parse_variant(const json& j) {
  if (j.is_string()) return {j.get<std::string>(), preset(j.get<std::string>())};
  if (!j.is_object()) throw ConfigError("variant must be a name or an object");
  detail::reject_unknown_keys(
      j, {"name", "base", "b_q", "b_kv", "c_w", "qk_format", "qk_granularity", "pv_format",
          "p_scaling", "accumulation", "cadence", "smooth_q", "smooth_k", "smooth_v", "baseline",
          "smoothquant_alpha", "hadamard_seed", "causal", "softmax_scale"},
      "variant");
  if (!j.contains("name")) throw ConfigError("variant object needs a 'name'");
  NamedConfig out{j.at("name").get<std::string>(),
                  preset(detail::get_or<std::string>(j, "base", "sage2-4b"))};
  AttentionConfig& c = out.config;
  c.b_q = detail::get_or<std::size_t>(j, "b_q", c.b_q);
  c.b_kv = detail::get_or<std::size_t>(j, "b_kv", c.b_kv);
  c.c_w = detail::get_or<std::size_t>(j, "c_w", c.c_w);
  if (j.contains("qk_format")) c.qk_format = parse_format(j["qk_format"].get<std::string>());
  if (j.contains("qk_granularity")) {
    c.qk_granularity = parse_granularity(j["qk_granularity"].get<std::string>());
  }
  if (j.contains("pv_format")) c.pv_format = parse_format(j["pv_format"].get<std::string>());
  if (j.contains("p_scaling")) c.p_scaling = parse_p_scaling(j["p_scaling"].get<std::string>());
  if (j.contains("accumulation")) {
    c.accumulation = parse_accumulation(j["accumulation"].get<std::string>());
  }
  if (j.contains("cadence")) c.cadence = parse_cadence(j["cadence"].get<std::string>());
  c.smoothing.q = detail::get_or<bool>(j, "smooth_q", c.smoothing.q);
  c.smoothing.k = detail::get_or<bool>(j, "smooth_k", c.smoothing.k);
  c.smoothing.v = detail::get_or<bool>(j, "smooth_v", c.smoothing.v);
  if (j.contains("baseline")) c.baseline = parse_baseline(j["baseline"].get<std::string>());
  c.smoothquant_alpha = detail::get_or<double>(j, "smoothquant_alpha", c.smoothquant_alpha);
  c.hadamard_seed = detail::get_or<std::uint64_t>(j, "hadamard_seed", c.hadamard_seed);
  c.causal = detail::get_or<bool>(j, "causal", c.causal);
  if (j.contains("softmax_scale")) c.softmax_scale = j["softmax_scale"].get<double>();
  c.validate();
  return out;
}

inline GenSpec parse_genspec(const json& j) {
  if (!j.is_object()) throw ConfigError("gen spec must be an object");
  detail::reject_unknown_keys(j, {"n_tokens", "head_dim", "seed", "sigma", "channel_mean_std",
                                  "outlier_channels", "outlier_multiplier", "v_bias"},
                              "gen spec");
  GenSpec g;
  g.n_tokens = detail::get_or<std::size_t>(j, "n_tokens", g.n_tokens);
  g.head_dim = detail::get_or<std::size_t>(j, "head_dim", g.head_dim);
  g.seed = detail::get_or<std::uint64_t>(j, "seed", g.seed);
  g.sigma = detail::get_or<double>(j, "sigma", g.sigma);
  g.channel_mean_std = detail::get_or<double>(j, "channel_mean_std", g.channel_mean_std);
  g.outlier_channels = detail::get_or<std::size_t>(j, "outlier_channels", g.outlier_channels);
  g.outlier_multiplier = detail::get_or<double>(j, "outlier_multiplier", g.outlier_multiplier);
  if (j.contains("v_bias") && !j["v_bias"].is_null()) {
    const auto& b = j["v_bias"];
    if (!b.is_array() || b.size() != 2) throw ConfigError("v_bias must be [lo, hi]");
    g.v_bias = std::make_pair(b[0].get<double>(), b[1].get<double>());
  }
  g.validate();
  return g;
}

enum class ReportFormat { Json, Csv, Markdown };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "json") return ReportFormat::Json;
  if (s == "csv") return ReportFormat::Csv;
  if (s == "md" || s == "markdown") return ReportFormat::Markdown;
  throw ConfigError("unknown output format '" + std::string(s) + "'");
}

struct TensorPaths {
  std::string q, k, v;
};

struct RunConfig {
  std::optional<GenSpec> gen;
  std::optional<TensorPaths> tensors;
  std::vector<NamedConfig> variants;
  std::optional<NamedConfig> base;  // ablation base; defaults to the first variant
  std::size_t trials = 1;
  std::uint64_t seed = 0;
  bool causal = false;
  ReportFormat format = ReportFormat::Json;
  std::size_t threads = 0;  // 0: QATTN_THREADS or hardware concurrency

  void validate() const {
    if (variants.empty() && !base) throw ConfigError("config needs at least one variant");
    if (trials == 0) throw ConfigError("trials must be at least 1");
    if (!gen && !tensors) throw ConfigError("config needs 'gen' or 'tensors'");
  }
};

inline RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  detail::reject_unknown_keys(
      j, {"gen", "tensors", "variants", "base", "trials", "seed", "causal", "format", "threads"},
      "config");
  RunConfig rc;
  if (j.contains("gen")) rc.gen = parse_genspec(j["gen"]);
  if (j.contains("tensors")) {
    const auto& t = j["tensors"];
    if (!t.is_object() || !t.contains("q") || !t.contains("k") || !t.contains("v")) {
      throw ConfigError("tensors must give q, k and v paths");
    }
    rc.tensors = TensorPaths{t["q"].get<std::string>(), t["k"].get<std::string>(),
                             t["v"].get<std::string>()};
  }
  if (!rc.gen && !rc.tensors) rc.gen = GenSpec{};
  if (j.contains("variants")) {
    if (!j["variants"].is_array()) throw ConfigError("variants must be an array");
    for (const auto& v : j["variants"]) rc.variants.push_back(parse_variant(v));
  }
  if (j.contains("base")) rc.base = parse_variant(j["base"]);
  rc.trials = detail::get_or<std::size_t>(j, "trials", rc.trials);
  rc.seed = detail::get_or<std::uint64_t>(j, "seed", rc.gen ? rc.gen->seed : 0);
  rc.causal = detail::get_or<bool>(j, "causal", rc.causal);
  rc.format = parse_report_format(detail::get_or<std::string>(j, "format", "json"));
  rc.threads = detail::get_or<std::size_t>(j, "threads", rc.threads);
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path + "'");
  try {
    return parse_run_config(json::parse(f));
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

struct ReportRow {
  std::string name;
  AccuracyReport mean;
  AccuracyReport worst;
};

inline std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("QATTN_THREADS")) n = std::strtoull(env, nullptr, 10);
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs `job(i)` for i in [0, jobs) on a small worker pool. The first
/// exception thrown by any job is rethrown after all workers join.
inline void parallel_for(std::size_t jobs, std::size_t threads,
                         const std::function<void(std::size_t)>& job) {
  const std::size_t workers = worker_count(threads, jobs);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (error) std::rethrow_exception(error);
}

inline bool verbose() {
  const char* v = std::getenv("QATTN_VERBOSE");
  return v && *v && std::string_view(v) != "0";
}

struct TrialInputs {
  Tensor q, k, v;
};

inline TrialInputs trial_inputs(const RunConfig& rc, std::size_t trial) {
  if (rc.tensors) {
    TrialInputs in{load_tensor(rc.tensors->q), load_tensor(rc.tensors->k),
                   load_tensor(rc.tensors->v)};
    check_qkv(in.q, in.k, in.v);
    return in;
  }
  GenSpec g = *rc.gen;
  g.seed = rc.seed + trial;
  auto t = gen_qkv(g);
  return {std::move(t.q), std::move(t.k), std::move(t.v)};
}

/// Every variant on every trial, against the dense oracle. Rows follow the
/// order of `variants`; results do not depend on thread scheduling.
inline std::vector<ReportRow> evaluate(const RunConfig& rc, const std::vector<NamedConfig>& variants) {
  if (variants.empty()) throw ConfigError("no variants to evaluate");
  std::vector<std::vector<AccuracyReport>> per(variants.size(),
                                               std::vector<AccuracyReport>(rc.trials));
  parallel_for(rc.trials, rc.threads, [&](std::size_t trial) {
    const TrialInputs in = trial_inputs(rc, trial);
    std::optional<Tensor> refs[2];  // default softmax scale, indexed by causal
    for (std::size_t vi = 0; vi < variants.size(); ++vi) {
      AttentionConfig cfg = variants[vi].config;
      cfg.causal = cfg.causal || rc.causal;
      std::optional<Tensor> own;
      auto& slot = cfg.softmax_scale ? own : refs[cfg.causal];
      if (!slot) slot = attention_oracle(in.q, in.k, in.v, cfg.causal, cfg.softmax_scale);
      const Tensor& ref = *slot;
      if (cfg.baseline == Baseline::Hadamard) cfg.hadamard_seed ^= rc.seed + trial;
      const Tensor out = attention_sage2(in.q, in.k, in.v, cfg).output;
      per[vi][trial] = measure(ref, out, variants[vi].name);
      if (verbose()) {
        std::fprintf(stderr, "[qattn] trial %zu %s cos=%.6f\n", trial, variants[vi].name.c_str(),
                     per[vi][trial].cos_sim);
      }
    }
  });
  std::vector<ReportRow> rows;
  for (std::size_t vi = 0; vi < variants.size(); ++vi) {
    rows.push_back({variants[vi].name, aggregate(per[vi], Aggregation::Mean),
                    aggregate(per[vi], Aggregation::Worst)});
  }
  return rows;
}

inline std::vector<ReportRow> cmd_run(const RunConfig& rc) { return evaluate(rc, rc.variants); }

enum class AblationAxis { Granularity, PvFormat, Smoothing, Accumulation };

inline AblationAxis parse_axis(std::string_view s) {
  if (s == "granularity") return AblationAxis::Granularity;
  if (s == "pv_format" || s == "pv-format") return AblationAxis::PvFormat;
  if (s == "smoothing") return AblationAxis::Smoothing;
  if (s == "accumulation") return AblationAxis::Accumulation;
  throw ConfigError("unknown ablation axis '" + std::string(s) + "'");
}

/// The variants compared along one axis, derived from `base`.
inline std::vector<NamedConfig> ablation_variants(AblationAxis axis, const AttentionConfig& base) {
  std::vector<NamedConfig> out;
  auto add = [&](std::string name, auto edit) {
    AttentionConfig c = base;
    edit(c);
    c.validate();
    out.push_back({std::move(name), c});
  };
  switch (axis) {
    case AblationAxis::Granularity:
      for (auto k : {GranularityKind::PerToken, GranularityKind::PerThread,
                     GranularityKind::PerBlock, GranularityKind::PerTensor}) {
        add(std::string(granularity_name(k)), [k](auto& c) { c.qk_granularity = k; });
      }
      break;
    case AblationAxis::PvFormat:
      // P~V format study uses a 32-bit accumulator throughout.
      for (auto [name, f] : {std::pair{"INT8", Format::Int8}, std::pair{"E5M2", Format::E5M2},
                             std::pair{"E4M3", Format::E4M3}, std::pair{"FP16", Format::FP16}}) {
        add(name, [f](auto& c) {
          c.pv_format = f;
          c.accumulation = Accumulation::FP32Exact;
        });
      }
      break;
    case AblationAxis::Smoothing: {
      struct Row {
        const char* name;
        Baseline baseline;
        bool q, k;
      };
      for (const Row& r : {Row{"None", Baseline::None, false, false},
                           Row{"HadmdAttn", Baseline::Hadamard, false, false},
                           Row{"SmoothAttn", Baseline::SmoothQuant, false, false},
                           Row{"Smooth K", Baseline::None, false, true},
                           Row{"Smooth Q", Baseline::None, true, false},
                           Row{"Smooth Q+K", Baseline::None, true, true}}) {
        add(r.name, [&r](auto& c) {
          c.baseline = r.baseline;
          c.smoothing.q = r.q;
          c.smoothing.k = r.k;
        });
      }
      break;
    }
    case AblationAxis::Accumulation:
      for (auto a : {Accumulation::FP32Exact, Accumulation::FP22TwoLevel,
                     Accumulation::FP22SingleLevel}) {
        add(std::string(accumulation_name(a)), [a](auto& c) { c.accumulation = a; });
      }
      break;
  }
  return out;
}

inline std::vector<ReportRow> cmd_ablate(AblationAxis axis, const RunConfig& rc) {
  const AttentionConfig base = rc.base ? rc.base->config
                               : rc.variants.empty() ? preset("sage2-4b")
                                                     : rc.variants.front().config;
  return evaluate(rc, ablation_variants(axis, base));
}

namespace detail {

// Shortest round-trip decimal form, independent of locale.
inline std::string number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

inline std::string format_report(const std::vector<ReportRow>& rows, ReportFormat fmt) {
  std::ostringstream os;
  switch (fmt) {
    case ReportFormat::Json: {
      json out = json::array();
      for (const auto& r : rows) {
        auto metrics = [](const AccuracyReport& a) {
          return json{{"cos_sim", a.cos_sim}, {"rel_l1", a.rel_l1}, {"rmse", a.rmse}};
        };
        out.push_back({{"name", r.name},
                       {"trials", r.mean.trials},
                       {"mean", metrics(r.mean)},
                       {"worst", metrics(r.worst)}});
      }
      os << json{{"rows", out}}.dump(2) << '\n';
      break;
    }
    case ReportFormat::Csv:
      os << "name,trials,mean_cos_sim,mean_rel_l1,mean_rmse,worst_cos_sim,worst_rel_l1,worst_rmse\n";
      for (const auto& r : rows) {
        os << '"' << r.name << "\"," << r.mean.trials << ',' << detail::number(r.mean.cos_sim)
           << ',' << detail::number(r.mean.rel_l1) << ',' << detail::number(r.mean.rmse) << ','
           << detail::number(r.worst.cos_sim) << ',' << detail::number(r.worst.rel_l1) << ','
           << detail::number(r.worst.rmse) << '\n';
      }
      break;
    case ReportFormat::Markdown:
      os << "| Method | CosSim ↑ | Relative L1 ↓ | RMSE ↓ | Worst CosSim ↑ | Worst Relative L1 ↓ "
            "| Worst RMSE ↓ |\n";
      os << "|---|---|---|---|---|---|---|\n";
      for (const auto& r : rows) {
        os << "| " << r.name << " | " << detail::fixed(100.0 * r.mean.cos_sim, 2) << "% | "
           << detail::fixed(r.mean.rel_l1, 4) << " | " << detail::fixed(r.mean.rmse, 4) << " | "
           << detail::fixed(100.0 * r.worst.cos_sim, 2) << "% | "
           << detail::fixed(r.worst.rel_l1, 4) << " | " << detail::fixed(r.worst.rmse, 4)
           << " |\n";
      }
      break;
  }
  return os.str();
}

/// Writes Q, K and V of `spec` as q.qatn, k.qatn and v.qatn under `dir`.
inline std::vector<std::string> cmd_gen(const GenSpec& spec, const std::string& dir) {
  const auto t = gen_qkv(spec);
  std::vector<std::string> paths;
  for (auto [name, tensor] : {std::pair{"q.qatn", &t.q}, std::pair{"k.qatn", &t.k},
                              std::pair{"v.qatn", &t.v}}) {
    paths.push_back(dir + "/" + name);
    save_tensor(paths.back(), *tensor);
  }
  return paths;
}

}  // namespace qattn
