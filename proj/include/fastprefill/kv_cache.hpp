// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <list>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fastprefill/attention.hpp"

namespace fastprefill {

struct CacheConfig {
  bool enabled = true;
  uint64_t total_capacity = 16ull << 20;  // bytes
  double hot_fraction = 0.5;
  uint32_t t_hot = 0;  // 0: ceil(num_query_blocks / 2)
  size_t lookahead = 4;

  void validate() const;
  uint32_t resolved_t_hot(size_t num_query_blocks) const;
};

enum class Tier : uint8_t { hot, cold };

enum class Outcome : uint8_t { hit, prefetch_hit, miss_hot, miss_cold, bypass };

struct CacheStats {
  uint64_t accesses = 0;
  uint64_t hits = 0;
  uint64_t prefetch_hits = 0;  // first touch of a prefetched block
  uint64_t misses = 0;
  uint64_t bypasses = 0;
  uint64_t evictions = 0;
  uint64_t prefetches = 0;
  uint64_t bytes_fetched = 0;
  uint64_t demand_bytes = 0;
  uint64_t prefetch_bytes = 0;
  uint64_t consumes = 0;
  uint64_t live_hot_evictions = 0;  // must stay zero
  size_t peak_hot = 0;              // blocks
  size_t peak_cold = 0;
  bool complete = false;  // every counter reached zero and both tiers drained

  double hit_rate() const;
  // Fetches issued on the critical path (not hidden by prefetch).
  uint64_t demand_fetches() const { return misses + bypasses; }
};

// Dual-tier cache keyed by (kv_head, block) with exact remaining-use counters.
class KvCache {
 public:
  KvCache(const CacheConfig& cfg, uint64_t block_bytes, size_t num_query_blocks);

  // Remaining-use counters from the job list, or from a trace (sum of consumers).
  void init_counters(const JobList& jobs);
  void init_counters(std::span<const TraceRecord> trace);

  // One fetch of `key` that will serve `batch` consumers; admission looks at
  // the uses left after this batch plus one. Contract: remaining_use >= batch.
  Outcome access(BlockKey key, uint32_t batch = 1);
  void consume(BlockKey key);
  // Issues fetches for up to lookahead upcoming records. Returns the count.
  size_t prefetch_step(std::span<const TraceRecord> upcoming);

  uint32_t remaining(BlockKey key) const;
  bool resident(BlockKey key) const { return entries_.count(key) != 0; }
  std::optional<Tier> tier_of(BlockKey key) const;
  size_t hot_capacity() const { return hot_cap_; }
  size_t cold_capacity() const { return cold_cap_; }
  size_t hot_used() const { return hot_used_; }
  size_t cold_used() const { return cold_used_; }
  uint32_t t_hot() const { return t_hot_; }

  CacheStats stats() const;

 private:
  struct Entry {
    Tier tier;
    bool untouched_prefetch;
    uint64_t seq;
  };

  std::optional<Tier> destination(uint32_t uses_after) const;
  bool has_room(Tier t) const { return t == Tier::hot ? hot_used_ < hot_cap_ : cold_used_ < cold_cap_; }
  void insert(BlockKey key, Tier t, bool prefetched);
  void evict(BlockKey key, bool live);
  void fetch(BlockKey key);

  CacheConfig cfg_;
  uint64_t block_bytes_;
  size_t hot_cap_ = 0;
  size_t cold_cap_ = 0;
  size_t hot_used_ = 0;
  size_t cold_used_ = 0;
  uint32_t t_hot_ = 1;
  uint64_t seq_ = 0;
  std::map<BlockKey, uint32_t> remaining_;
  std::map<BlockKey, Entry> entries_;
  CacheStats stats_;
};

struct CacheRun {
  CacheStats stats;
  std::vector<Outcome> outcomes;  // per trace record
};

// Replays a trace: prefetch_step over the next records, access, then one
// consume per consumer.
CacheRun simulate_cache(std::span<const TraceRecord> trace, const CacheConfig& cfg, uint64_t block_bytes,
                        size_t num_query_blocks);

// Same-capacity LRU without liveness information or prefetch.
CacheStats simulate_lru(std::span<const TraceRecord> trace, uint64_t capacity_bytes, uint64_t block_bytes);

// Every access fetched (no cache).
CacheStats simulate_cacheless(std::span<const TraceRecord> trace, uint64_t block_bytes);

}  // namespace fastprefill
