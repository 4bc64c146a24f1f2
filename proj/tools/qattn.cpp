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

// qattn: accuracy harness for the quantized attention simulator.
//
//   qattn run <config.json> [--out PATH] [--format json|csv|md] [--trials N] [--seed S]
//   qattn ablate --axis granularity|pv_format|smoothing|accumulation <config.json> [...]
//   qattn gen <spec.json> <dir>
//
// Exit codes: 0 ok, 1 configuration error, 2 runtime error.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qattn/harness.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct CommonOptions {
  std::string out;
  std::string format;
  std::optional<std::size_t> trials;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--out", o.out, "Write the report to this path instead of stdout");
  cmd->add_option("--format", o.format, "Report format")
      ->check(CLI::IsMember({"json", "csv", "md", "markdown"}));
  cmd->add_option("--trials", o.trials, "Override the trial count")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "Override the base seed");
}

qattn::RunConfig load(const std::string& path, const CommonOptions& o) {
  qattn::RunConfig rc = qattn::load_run_config(path);
  if (o.trials) rc.trials = *o.trials;
  if (o.seed) rc.seed = *o.seed;
  if (!o.format.empty()) rc.format = qattn::parse_report_format(o.format);
  rc.validate();
  return rc;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + out + "'");
  f << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qattn - quantized attention accuracy harness"};
  app.require_subcommand(1);

  CommonOptions run_opts;
  std::string run_config;
  auto* run = app.add_subcommand("run", "Evaluate every configured variant against the oracle");
  run->add_option("config", run_config, "Run config (JSON)")->required();
  add_common(run, run_opts);

  CommonOptions ablate_opts;
  std::string ablate_config;
  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "Sweep one axis around a base variant");
  ablate->add_option("--axis", axis, "granularity | pv_format | smoothing | accumulation")
      ->required();
  ablate->add_option("config", ablate_config, "Run config (JSON)")->required();
  add_common(ablate, ablate_opts);

  std::string gen_spec;
  std::string gen_dir;
  auto* gen = app.add_subcommand("gen", "Write synthetic Q/K/V tensor files");
  gen->add_option("spec", gen_spec, "Generation spec (JSON)")->required();
  gen->add_option("dir", gen_dir, "Output directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*run) {
      const auto rc = load(run_config, run_opts);
      emit(qattn::format_report(qattn::cmd_run(rc), rc.format), run_opts.out);
    } else if (*ablate) {
      const auto which = qattn::parse_axis(axis);
      const auto rc = load(ablate_config, ablate_opts);
      emit(qattn::format_report(qattn::cmd_ablate(which, rc), rc.format), ablate_opts.out);
    } else if (*gen) {
      std::ifstream f(gen_spec);
      if (!f) throw qattn::ConfigError("cannot read spec '" + gen_spec + "'");
      qattn::GenSpec spec;
      try {
        spec = qattn::parse_genspec(qattn::json::parse(f));
      } catch (const qattn::json::exception& e) {
        throw qattn::ConfigError("spec '" + gen_spec + "': " + e.what());
      }
      for (const auto& p : qattn::cmd_gen(spec, gen_dir)) std::cout << p << '\n';
    }
  } catch (const qattn::ConfigError& e) {
    std::cerr << "qattn: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "qattn: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
