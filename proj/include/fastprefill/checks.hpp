// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fastprefill/attention.hpp"
#include "fastprefill/kv_cache.hpp"
#include "fastprefill/quant.hpp"
#include "fastprefill/sigu.hpp"

// Property checks and deterministic generators shared by the verify command
// and the test suites.
namespace fastprefill::checks {

QTensor random_qtensor(std::mt19937_64& rng, size_t rows, size_t cols, double scale = 0.05);

// Random non-negative vector normalized to sum 1 in Q16.16 (exactly, by
// giving the rounding remainder to one entry). Includes ties when `ties`.
FixedVec random_distribution(std::mt19937_64& rng, size_t n, bool ties);

// Cumulative score of the selection reaches gamma and dropping its lowest
// selected element falls below gamma (or everything is selected).
bool coverage_holds(const CoverageRecord& rec, double gamma, std::string* why = nullptr);

// Random causal index sets for `heads` query heads over `blocks` blocks.
std::vector<BlockIndexSet> random_index_sets(std::mt19937_64& rng, size_t heads, size_t blocks, double density);

struct NamedTrace {
  std::string name;
  std::vector<TraceRecord> trace;
  size_t num_query_blocks = 0;
  uint64_t block_bytes = 0;
  uint64_t capacity = 0;
};

// Random trace with consistent counters (each record serves 1..3 consumers).
NamedTrace random_trace(std::mt19937_64& rng, size_t kv_heads, size_t blocks, size_t records);

// Fixed-seed GQA workloads built from vertical-slash and query-aware index
// sets through the job list and pass schedule.
std::vector<NamedTrace> gqa_workload_suite();

struct CacheAudit {
  bool ok = true;
  std::string detail;
  CacheStats stats;
};

// Replays the trace step by step and checks capacity, liveness, single
// residency, drain and traffic bounds.
CacheAudit audit_cache(const NamedTrace& t, const CacheConfig& cfg);

}  // namespace fastprefill::checks
