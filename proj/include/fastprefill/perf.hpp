// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fastprefill/attention.hpp"
#include "fastprefill/kv_cache.hpp"
#include "fastprefill/mpu.hpp"

namespace fastprefill {

struct PlatformConfig {
  double frequency = 175e6;  // Hz
  double hbm_bw = 460e9;     // bytes/s
  double ddr_bw = 38e9;      // bytes/s
  // Latency of an HBM block fetch that was not issued ahead of its consumer.
  double hbm_latency_ns = 200.0;
  MpuConfig mpu;
  CacheConfig cache;

  void validate() const;
};

enum class Stage : uint8_t { qkv = 0, sigu = 1, sau = 2, ffn = 3 };
inline constexpr size_t kNumStages = 4;
std::string_view stage_name(Stage s);

enum class Channel : uint8_t { hbm, ddr };

struct GemmShape {
  size_t m = 0, k = 0, n = 0;
  friend auto operator<=>(const GemmShape&, const GemmShape&) = default;
};

// Work of one stage in one layer: GEMM shapes with multiplicity and bytes per
// channel. The attention stage also carries its KV access trace.
struct StageWork {
  std::map<GemmShape, uint64_t> gemms;
  uint64_t hbm_bytes = 0;
  uint64_t ddr_bytes = 0;
  std::vector<TraceRecord> kv_trace;
  uint64_t kv_block_bytes = 0;
  size_t num_query_blocks = 0;

  void add_gemm(size_t m, size_t k, size_t n, uint64_t count = 1);
};

struct LayerWork {
  std::array<StageWork, kNumStages> stages;
  StageWork& operator[](Stage s) { return stages[static_cast<size_t>(s)]; }
  const StageWork& operator[](Stage s) const { return stages[static_cast<size_t>(s)]; }
};

struct PerfTrace {
  size_t seq_len = 0;
  std::vector<LayerWork> layers;
  bool complete = false;
};

struct StageCost {
  uint64_t compute_cycles = 0;  // includes stall_cycles
  uint64_t stall_cycles = 0;
  uint64_t memory_cycles = 0;
  uint64_t stage_cycles = 0;
  uint64_t hbm_bytes = 0;
  uint64_t ddr_bytes = 0;

  StageCost& operator+=(const StageCost& o);
};

struct PerfReport {
  size_t seq_len = 0;
  std::vector<std::array<StageCost, kNumStages>> layers;
  std::array<StageCost, kNumStages> totals{};
  uint64_t total_cycles = 0;
  double ttft_seconds = 0.0;
  CacheStats cache;
  bool complete = false;
};

// ceil(bytes * frequency / bandwidth) for one channel.
uint64_t memory_cycles(uint64_t bytes, Channel ch, const PlatformConfig& p);
// max(compute, memory) for a single-channel stage.
uint64_t stage_cost(uint64_t compute_cycles, uint64_t bytes, Channel ch, const PlatformConfig& p);

// Stall added per demand fetch: latency plus one block transfer.
uint64_t demand_stall_cycles(uint64_t block_bytes, const PlatformConfig& p);

PerfReport ttft_estimate(const PerfTrace& trace, const PlatformConfig& p);

}  // namespace fastprefill
