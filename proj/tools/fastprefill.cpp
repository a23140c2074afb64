// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include <CLI11.hpp>

#include "fastprefill/cli.hpp"
#include "fastprefill/config.hpp"

namespace fp = fastprefill;

int main(int argc, char** argv) {
  CLI::App app{"Sparse-attention prefill simulator and performance model"};
  app.require_subcommand(1);

  fp::CliOptions opts;
  std::string lengths;
  uint64_t seed = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", opts.out_path, "Report path (default: stdout)");
    sub->add_option("--format", opts.format, "Report format")->check(CLI::IsMember({"json", "csv"}));
    sub->add_option("--seed", seed, "Seed override");
    sub->add_option("--lengths", lengths, "Comma-separated sequence lengths");
  };

  auto* run = app.add_subcommand("run", "Prefill over the configured lengths; TTFT report");
  auto* ab_cache = app.add_subcommand("ablate-cache", "Same workload with the KV cache on and off");
  auto* ab_mpu = app.add_subcommand("ablate-mpu", "Same workload with DSP-only and hybrid arrays");
  auto* trace = app.add_subcommand("trace-cache", "Liveness cache vs LRU on a block-access trace");
  auto* verify = app.add_subcommand("verify", "Exhaustive arithmetic and oracle-equivalence checks");
  for (auto* sub : {run, ab_cache, ab_mpu, trace, verify}) common(sub);
  trace->add_option("--trace", opts.trace_path, "Replay this JSON-lines trace")->check(CLI::ExistingFile);
  trace->add_option("--trace-out", opts.trace_out, "Write the generated first-layer trace");
  trace->add_option("--index-out", opts.index_out, "Write the first-layer index sets");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!lengths.empty()) opts.lengths = fp::parse_lengths(lengths);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  for (auto* sub : {run, ab_cache, ab_mpu, trace, verify})
    if (sub->count("--seed") > 0) opts.seed = seed;

  if (*run) return fp::cmd_run(opts, std::cerr);
  if (*ab_cache) return fp::cmd_ablate_cache(opts, std::cerr);
  if (*ab_mpu) return fp::cmd_ablate_mpu(opts, std::cerr);
  if (*trace) return fp::cmd_trace_cache(opts, std::cerr);
  return fp::cmd_verify(opts, std::cerr);
}
