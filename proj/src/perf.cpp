// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/perf.hpp"

#include <cmath>

namespace fastprefill {

void PlatformConfig::validate() const {
  require(frequency > 0.0 && std::isfinite(frequency), "PlatformConfig: frequency must be positive");
  require(hbm_bw > 0.0 && std::isfinite(hbm_bw), "PlatformConfig: hbm_bw must be positive");
  require(ddr_bw > 0.0 && std::isfinite(ddr_bw), "PlatformConfig: ddr_bw must be positive");
  require(hbm_latency_ns >= 0.0 && std::isfinite(hbm_latency_ns), "PlatformConfig: hbm_latency_ns must be >= 0");
  mpu.validate();
  cache.validate();
}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::qkv: return "qkv";
    case Stage::sigu: return "sigu";
    case Stage::sau: return "sau";
    case Stage::ffn: return "ffn";
  }
  return "?";
}

void StageWork::add_gemm(size_t m, size_t k, size_t n, uint64_t count) {
  if (count != 0) gemms[{m, k, n}] += count;
}

StageCost& StageCost::operator+=(const StageCost& o) {
  compute_cycles += o.compute_cycles;
  stall_cycles += o.stall_cycles;
  memory_cycles += o.memory_cycles;
  stage_cycles += o.stage_cycles;
  hbm_bytes += o.hbm_bytes;
  ddr_bytes += o.ddr_bytes;
  return *this;
}

uint64_t memory_cycles(uint64_t bytes, Channel ch, const PlatformConfig& p) {
  if (bytes == 0) return 0;
  const double bw = ch == Channel::hbm ? p.hbm_bw : p.ddr_bw;
  // Exact when bytes * frequency / bw is integral (e.g. 460 GB at 460 GB/s).
  const long double cyc = static_cast<long double>(bytes) * p.frequency / bw;
  return static_cast<uint64_t>(std::ceil(cyc - 1e-9L));
}

uint64_t stage_cost(uint64_t compute_cycles, uint64_t bytes, Channel ch, const PlatformConfig& p) {
  return std::max(compute_cycles, memory_cycles(bytes, ch, p));
}

uint64_t demand_stall_cycles(uint64_t block_bytes, const PlatformConfig& p) {
  const auto latency = static_cast<uint64_t>(std::ceil(p.hbm_latency_ns * 1e-9 * p.frequency - 1e-9));
  return latency + memory_cycles(block_bytes, Channel::hbm, p);
}

PerfReport ttft_estimate(const PerfTrace& trace, const PlatformConfig& p) {
  p.validate();
  PerfReport rep;
  rep.seq_len = trace.seq_len;
  bool cache_complete = true;
  for (const LayerWork& layer : trace.layers) {
    std::array<StageCost, kNumStages> costs{};
    for (size_t s = 0; s < kNumStages; ++s) {
      const StageWork& w = layer.stages[s];
      StageCost c;
      for (const auto& [shape, count] : w.gemms) c.compute_cycles += count * gemm_cycles(shape.m, shape.k, shape.n, p.mpu);
      c.hbm_bytes = w.hbm_bytes;
      c.ddr_bytes = w.ddr_bytes;
      if (!w.kv_trace.empty()) {
        const CacheRun run = simulate_cache(w.kv_trace, p.cache, w.kv_block_bytes, w.num_query_blocks);
        c.hbm_bytes += run.stats.bytes_fetched;
        c.stall_cycles = run.stats.demand_fetches() * demand_stall_cycles(w.kv_block_bytes, p);
        c.compute_cycles += c.stall_cycles;
        cache_complete = cache_complete && run.stats.complete;
        CacheStats& t = rep.cache;
        t.accesses += run.stats.accesses;
        t.hits += run.stats.hits;
        t.prefetch_hits += run.stats.prefetch_hits;
        t.misses += run.stats.misses;
        t.bypasses += run.stats.bypasses;
        t.evictions += run.stats.evictions;
        t.prefetches += run.stats.prefetches;
        t.bytes_fetched += run.stats.bytes_fetched;
        t.demand_bytes += run.stats.demand_bytes;
        t.prefetch_bytes += run.stats.prefetch_bytes;
        t.consumes += run.stats.consumes;
        t.live_hot_evictions += run.stats.live_hot_evictions;
        t.peak_hot = std::max(t.peak_hot, run.stats.peak_hot);
        t.peak_cold = std::max(t.peak_cold, run.stats.peak_cold);
      }
      c.memory_cycles =
          std::max(memory_cycles(c.hbm_bytes, Channel::hbm, p), memory_cycles(c.ddr_bytes, Channel::ddr, p));
      c.stage_cycles = std::max(c.compute_cycles, c.memory_cycles);
      costs[s] = c;
      rep.totals[s] += c;
      rep.total_cycles += c.stage_cycles;
    }
    rep.layers.push_back(costs);
  }
  rep.cache.complete = cache_complete;
  rep.complete = trace.complete && cache_complete;
  rep.ttft_seconds = static_cast<double>(rep.total_cycles) / p.frequency;
  return rep;
}

}  // namespace fastprefill
