// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/cli.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "fastprefill/config.hpp"
#include "fastprefill/kv_cache.hpp"
#include "fastprefill/pipeline.hpp"
#include "fastprefill/verify.hpp"

namespace fastprefill {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void write_atomic(const std::string& path, const std::string& content) {
  const std::filesystem::path target(path);
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot open " + tmp.string() + " for writing");
    out << content;
    out.flush();
    require(out.good(), "write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, target);
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

void emit(const CliOptions& o, const std::string& content) {
  if (o.out_path.empty()) {
    std::cout << content;
  } else {
    write_atomic(o.out_path, content);
  }
}

RunConfig resolve_config(const CliOptions& o) {
  require(o.format == "json" || o.format == "csv", "format must be json or csv");
  RunConfig c = o.config_path.empty() ? parse_run_config("{}") : load_run_config(o.config_path);
  if (o.seed) {
    c.seed = *o.seed;
    c.model.seed = *o.seed;
  }
  if (o.lengths) c.lengths = *o.lengths;
  c.validate();
  return c;
}

ModelWeights build_model(const RunConfig& c) {
  return c.weights_manifest.empty() ? synth_model(c.model, c.seed) : load_model(c.weights_manifest, c.model);
}

struct Functional {
  PrefillResult result;
  size_t selected = 0;
  size_t causal = 0;
  size_t vertical_slash = 0;
  size_t query_aware = 0;
};

Functional run_functional(const RunConfig& c, const ModelWeights& m, size_t S, const MpuConfig& mpu) {
  PipelineOptions opts = c.pipeline_options();
  opts.mpu = mpu;
  const QTensor x = synth_embeddings(m, S, c.workload, c.seed);
  Functional f{run_prefill(x, m, opts)};
  for (const LayerRecord& l : f.result.layers) {
    for (const BlockIndexSet& s : l.index_sets) {
      f.selected += s.total();
      f.causal += s.num_blocks() * (s.num_blocks() + 1) / 2;
      (s.pattern == Pattern::query_aware ? f.query_aware : f.vertical_slash) += 1;
    }
  }
  return f;
}

ordered_json stage_json(const StageCost& s) {
  ordered_json j;
  j["compute_cycles"] = s.compute_cycles;
  j["stall_cycles"] = s.stall_cycles;
  j["memory_cycles"] = s.memory_cycles;
  j["stage_cycles"] = s.stage_cycles;
  j["hbm_bytes"] = s.hbm_bytes;
  j["ddr_bytes"] = s.ddr_bytes;
  return j;
}

ordered_json cache_json(const CacheStats& s) {
  ordered_json j;
  j["accesses"] = s.accesses;
  j["hits"] = s.hits;
  j["prefetch_hits"] = s.prefetch_hits;
  j["misses"] = s.misses;
  j["bypasses"] = s.bypasses;
  j["evictions"] = s.evictions;
  j["prefetches"] = s.prefetches;
  j["bytes_fetched"] = s.bytes_fetched;
  j["demand_bytes"] = s.demand_bytes;
  j["prefetch_bytes"] = s.prefetch_bytes;
  j["peak_hot_blocks"] = s.peak_hot;
  j["peak_cold_blocks"] = s.peak_cold;
  j["hit_rate"] = s.hit_rate();
  j["complete"] = s.complete;
  return j;
}

ordered_json perf_json(const PerfReport& r) {
  ordered_json j;
  j["ttft_seconds"] = r.ttft_seconds;
  j["total_cycles"] = r.total_cycles;
  j["complete"] = r.complete;
  ordered_json stages;
  for (size_t s = 0; s < kNumStages; ++s) stages[std::string(stage_name(static_cast<Stage>(s)))] = stage_json(r.totals[s]);
  j["stages"] = stages;
  ordered_json layers = ordered_json::array();
  for (const auto& l : r.layers) {
    ordered_json lj;
    for (size_t s = 0; s < kNumStages; ++s) lj[std::string(stage_name(static_cast<Stage>(s)))] = stage_json(l[s]);
    layers.push_back(lj);
  }
  j["layers"] = layers;
  j["cache"] = cache_json(r.cache);
  return j;
}

struct Row {
  std::string variant;
  PerfReport perf;
  const Functional* fn = nullptr;
  double ratio = 0.0;  // ablations: baseline ttft / this ttft
};

ordered_json row_json(const Row& r) {
  ordered_json j;
  j["variant"] = r.variant;
  j["seq_len"] = r.perf.seq_len;
  j["perf"] = perf_json(r.perf);
  ordered_json sp;
  sp["selected_blocks"] = r.fn->selected;
  sp["causal_blocks"] = r.fn->causal;
  sp["density"] = static_cast<double>(r.fn->selected) / static_cast<double>(r.fn->causal);
  sp["vertical_slash_heads"] = r.fn->vertical_slash;
  sp["query_aware_heads"] = r.fn->query_aware;
  j["sparsity"] = sp;
  j["output_digest"] = hex64(output_digest(r.fn->result));
  if (r.ratio > 0.0) j["speedup_vs_baseline"] = r.ratio;
  return j;
}

std::string csv_row(const std::string& command, const Row& r) {
  const PerfReport& p = r.perf;
  uint64_t hbm = 0, ddr = 0;
  for (const auto& s : p.totals) {
    hbm += s.hbm_bytes;
    ddr += s.ddr_bytes;
  }
  std::ostringstream o;
  o.precision(17);
  o << kSchemaVersion << ',' << command << ',' << r.variant << ',' << p.seq_len << ',' << p.ttft_seconds << ','
    << p.total_cycles;
  for (const auto& s : p.totals) o << ',' << s.stage_cycles;
  o << ',' << hbm << ',' << ddr << ',' << p.cache.bytes_fetched << ',' << p.cache.hit_rate() << ','
    << static_cast<double>(r.fn->selected) / static_cast<double>(r.fn->causal) << ',' << r.ratio << ','
    << hex64(output_digest(r.fn->result)) << '\n';
  return o.str();
}

ordered_json config_echo(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["lengths"] = c.lengths;
  j["model"] = {{"layers", c.model.layers},           {"d_model", c.model.d_model},
                {"num_q_heads", c.model.num_q_heads}, {"num_kv_heads", c.model.num_kv_heads},
                {"head_dim", c.model.head_dim},       {"ffn_dim", c.model.ffn_dim}};
  j["sparsity"] = {{"block_size", c.sparsity.block_size}, {"tau", c.sparsity.tau}, {"gamma", c.sparsity.gamma}};
  j["mpu"] = {{"dsp_arrays", c.platform.mpu.dsp_arrays}, {"lut_arrays", c.platform.mpu.lut_arrays},
              {"array_dim", c.platform.mpu.array_dim}};
  j["cache"] = {{"enabled", c.platform.cache.enabled},
                {"total_capacity", c.platform.cache.total_capacity},
                {"hot_fraction", c.platform.cache.hot_fraction},
                {"lookahead", c.platform.cache.lookahead}};
  return j;
}

std::string render(const std::string& command, const RunConfig& c, const std::vector<Row>& rows,
                   const std::string& format, const ordered_json& extra = {}) {
  if (format == "csv") {
    std::string out = report_csv_header();
    for (const Row& r : rows) out += csv_row(command, r);
    return out;
  }
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = command;
  j["config"] = config_echo(c);
  ordered_json results = ordered_json::array();
  for (const Row& r : rows) results.push_back(row_json(r));
  j["results"] = results;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  return j.dump(2) + "\n";
}

template <typename Fn>
int guarded(std::ostream& log, const char* command, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    log << command << ": error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace

std::string report_csv_header() {
  return "schema_version,command,variant,seq_len,ttft_seconds,total_cycles,qkv_cycles,sigu_cycles,sau_cycles,"
         "ffn_cycles,hbm_bytes,ddr_bytes,kv_bytes_fetched,cache_hit_rate,density,speedup_vs_baseline,"
         "output_digest\n";
}

int cmd_run(const CliOptions& o, std::ostream& log) {
  return guarded(log, "run", [&] {
    const RunConfig c = resolve_config(o);
    const ModelWeights m = build_model(c);
    std::vector<Functional> fns;
    fns.reserve(c.lengths.size());
    std::vector<Row> rows;
    for (size_t S : c.lengths) {
      fns.push_back(run_functional(c, m, S, c.platform.mpu));
      rows.push_back({"base", ttft_estimate(fns.back().result.trace, c.platform), &fns.back()});
      log << "run: S=" << S << " ttft=" << rows.back().perf.ttft_seconds << " s\n";
    }
    emit(o, render("run", c, rows, o.format));
    return 0;
  });
}

int cmd_ablate_cache(const CliOptions& o, std::ostream& log) {
  return guarded(log, "ablate-cache", [&] {
    const RunConfig c = resolve_config(o);
    const ModelWeights m = build_model(c);
    PlatformConfig on = c.platform, off = c.platform;
    on.cache.enabled = true;
    off.cache.enabled = false;
    std::vector<Functional> fns;
    fns.reserve(c.lengths.size());
    std::vector<Row> rows;
    for (size_t S : c.lengths) {
      // The cache changes only the cost model, so one functional pass serves both variants.
      fns.push_back(run_functional(c, m, S, c.platform.mpu));
      Row r_off{"cache_off", ttft_estimate(fns.back().result.trace, off), &fns.back(), 1.0};
      Row r_on{"cache_on", ttft_estimate(fns.back().result.trace, on), &fns.back()};
      r_on.ratio = r_off.perf.ttft_seconds / r_on.perf.ttft_seconds;
      log << "ablate-cache: S=" << S << " speedup=" << r_on.ratio << '\n';
      rows.push_back(std::move(r_off));
      rows.push_back(std::move(r_on));
    }
    emit(o, render("ablate-cache", c, rows, o.format));
    return 0;
  });
}

int cmd_ablate_mpu(const CliOptions& o, std::ostream& log) {
  return guarded(log, "ablate-mpu", [&] {
    const RunConfig c = resolve_config(o);
    const ModelWeights m = build_model(c);
    PlatformConfig dsp = c.platform, hybrid = c.platform;
    dsp.mpu.lut_arrays = 0;
    if (hybrid.mpu.lut_arrays == 0) hybrid.mpu.lut_arrays = 6;
    std::vector<Functional> fns;
    fns.reserve(2 * c.lengths.size());
    std::vector<Row> rows;
    bool identical = true;
    for (size_t S : c.lengths) {
      fns.push_back(run_functional(c, m, S, dsp.mpu));
      const Functional* a = &fns.back();
      fns.push_back(run_functional(c, m, S, hybrid.mpu));
      const Functional* b = &fns.back();
      identical = identical && output_digest(a->result) == output_digest(b->result);
      Row r_dsp{"dsp_only", ttft_estimate(a->result.trace, dsp), a, 1.0};
      Row r_hyb{"hybrid", ttft_estimate(b->result.trace, hybrid), b};
      r_hyb.ratio = r_dsp.perf.ttft_seconds / r_hyb.perf.ttft_seconds;
      log << "ablate-mpu: S=" << S << " speedup=" << r_hyb.ratio << '\n';
      rows.push_back(std::move(r_dsp));
      rows.push_back(std::move(r_hyb));
    }
    ordered_json extra;
    extra["outputs_identical"] = identical;
    emit(o, render("ablate-mpu", c, rows, o.format, extra));
    if (!identical) {
      log << "ablate-mpu: outputs differ between array mixes\n";
      return 1;
    }
    return 0;
  });
}

int cmd_trace_cache(const CliOptions& o, std::ostream& log) {
  return guarded(log, "trace-cache", [&] {
    const RunConfig c = resolve_config(o);
    const uint64_t block_bytes = 2ull * c.sparsity.block_size * c.model.head_dim;
    struct Source {
      std::string name;
      std::vector<TraceRecord> trace;
      size_t num_query_blocks;
    };
    std::vector<Source> sources;
    if (!o.trace_path.empty()) {
      std::ifstream in(o.trace_path);
      require(in.good(), "cannot open trace " + o.trace_path);
      std::stringstream ss;
      ss << in.rdbuf();
      Source s{o.trace_path, trace_from_jsonl(ss.str()), 0};
      for (const auto& r : s.trace) s.num_query_blocks = std::max<size_t>(s.num_query_blocks, r.key.block + 1);
      sources.push_back(std::move(s));
    } else {
      const ModelWeights m = build_model(c);
      const size_t S = c.lengths.front();
      const Functional f = run_functional(c, m, S, c.platform.mpu);
      for (size_t l = 0; l < f.result.trace.layers.size(); ++l) {
        const StageWork& w = f.result.trace.layers[l][Stage::sau];
        sources.push_back({"layer" + std::to_string(l), w.kv_trace, w.num_query_blocks});
      }
      if (!o.trace_out.empty()) write_atomic(o.trace_out, trace_to_jsonl(sources.front().trace));
      if (!o.index_out.empty()) {
        std::string lines;
        for (const BlockIndexSet& s : f.result.layers.front().index_sets) lines += index_set_to_json(s) + "\n";
        write_atomic(o.index_out, lines);
      }
    }
    const CacheConfig& cc = c.platform.cache;
    ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = "trace-cache";
    j["block_bytes"] = block_bytes;
    j["capacity_bytes"] = cc.total_capacity;
    ordered_json results = ordered_json::array();
    std::string csv = "schema_version,command,source,policy,accesses,hits,prefetch_hits,misses,bypasses,"
                      "evictions,bytes_fetched,hit_rate\n";
    for (const Source& s : sources) {
      const CacheRun live = simulate_cache(s.trace, cc, block_bytes, s.num_query_blocks);
      const CacheStats lru = simulate_lru(s.trace, cc.total_capacity, block_bytes);
      const CacheStats none = simulate_cacheless(s.trace, block_bytes);
      ordered_json r;
      r["source"] = s.name;
      r["records"] = s.trace.size();
      r["liveness"] = cache_json(live.stats);
      r["lru"] = cache_json(lru);
      r["cacheless"] = cache_json(none);
      results.push_back(r);
      const std::pair<const char*, const CacheStats*> policies[] = {
          {"liveness", &live.stats}, {"lru", &lru}, {"cacheless", &none}};
      for (const auto& [name, st] : policies) {
        std::ostringstream line;
        line.precision(17);
        line << kSchemaVersion << ",trace-cache," << s.name << ',' << name << ',' << st->accesses << ','
             << st->hits << ',' << st->prefetch_hits << ',' << st->misses << ',' << st->bypasses << ','
             << st->evictions << ',' << st->bytes_fetched << ',' << st->hit_rate() << '\n';
        csv += line.str();
      }
      log << "trace-cache: " << s.name << " liveness=" << live.stats.hit_rate() << " lru=" << lru.hit_rate() << '\n';
    }
    j["results"] = results;
    emit(o, o.format == "csv" ? csv : j.dump(2) + "\n");
    return 0;
  });
}

int cmd_verify(const CliOptions& o, std::ostream& log) {
  return guarded(log, "verify", [&] {
    require(o.format == "json" || o.format == "csv", "format must be json or csv");
    const uint64_t seed = o.seed.value_or(0);
    const auto checks = run_verify(VerifyHooks{}, seed);
    bool all = true;
    ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["command"] = "verify";
    j["seed"] = seed;
    ordered_json arr = ordered_json::array();
    std::string csv = "schema_version,command,check,passed,detail\n";
    for (const auto& c : checks) {
      all = all && c.passed;
      log << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : ": " + c.detail) << '\n';
      arr.push_back({{"check", c.name}, {"passed", c.passed}, {"detail", c.detail}});
      csv += std::to_string(kSchemaVersion) + ",verify,\"" + c.name + "\"," + (c.passed ? "true" : "false") + ",\"" +
             c.detail + "\"\n";
    }
    j["checks"] = arr;
    j["passed"] = all;
    emit(o, o.format == "csv" ? csv : j.dump(2) + "\n");
    return all ? 0 : 1;
  });
}

}  // namespace fastprefill
