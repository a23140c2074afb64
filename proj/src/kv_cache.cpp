// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/kv_cache.hpp"

#include <cmath>
#include <set>
#include <unordered_map>

namespace fastprefill {

void CacheConfig::validate() const {
  require(hot_fraction > 0.0 && hot_fraction < 1.0, "CacheConfig: hot_fraction must lie in (0, 1)");
  require(lookahead >= 1, "CacheConfig: lookahead must be at least 1");
}

uint32_t CacheConfig::resolved_t_hot(size_t num_query_blocks) const {
  if (t_hot != 0) return t_hot;
  return std::max<uint32_t>(1, static_cast<uint32_t>((num_query_blocks + 1) / 2));
}

double CacheStats::hit_rate() const { return accesses == 0 ? 0.0 : static_cast<double>(hits) / accesses; }

KvCache::KvCache(const CacheConfig& cfg, uint64_t block_bytes, size_t num_query_blocks)
    : cfg_(cfg), block_bytes_(block_bytes) {
  cfg_.validate();
  require(block_bytes >= 1, "KvCache: block_bytes must be positive");
  if (cfg_.enabled) {
    const auto total = static_cast<size_t>(cfg_.total_capacity / block_bytes_);
    hot_cap_ = static_cast<size_t>(std::floor(static_cast<double>(cfg_.total_capacity) * cfg_.hot_fraction /
                                              static_cast<double>(block_bytes_)));
    hot_cap_ = std::min(hot_cap_, total);
    cold_cap_ = total - hot_cap_;
  }
  t_hot_ = cfg_.resolved_t_hot(num_query_blocks);
}

void KvCache::init_counters(const JobList& jobs) {
  require(entries_.empty() && stats_.accesses == 0, "KvCache: counters must be set before the run");
  remaining_.clear();
  for (size_t kv = 0; kv < jobs.num_kv_heads(); ++kv) {
    for (size_t b = 0; b < jobs.num_blocks(); ++b) {
      const BlockKey key{static_cast<uint32_t>(kv), static_cast<uint32_t>(b)};
      if (const uint32_t n = jobs.use_count(key); n > 0) remaining_[key] = n;
    }
  }
}

void KvCache::init_counters(std::span<const TraceRecord> trace) {
  require(entries_.empty() && stats_.accesses == 0, "KvCache: counters must be set before the run");
  remaining_.clear();
  for (const auto& r : trace) remaining_[r.key] += r.consumers;
}

uint32_t KvCache::remaining(BlockKey key) const {
  const auto it = remaining_.find(key);
  return it == remaining_.end() ? 0 : it->second;
}

std::optional<Tier> KvCache::tier_of(BlockKey key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second.tier;
}

std::optional<Tier> KvCache::destination(uint32_t uses) const {
  if (uses > t_hot_ && hot_cap_ > 0) return Tier::hot;
  if (uses >= 2 && cold_cap_ > 0) return Tier::cold;
  return std::nullopt;
}

void KvCache::insert(BlockKey key, Tier t, bool prefetched) {
  entries_[key] = Entry{t, prefetched, seq_++};
  if (t == Tier::hot) {
    ++hot_used_;
    stats_.peak_hot = std::max(stats_.peak_hot, hot_used_);
  } else {
    ++cold_used_;
    stats_.peak_cold = std::max(stats_.peak_cold, cold_used_);
  }
}

void KvCache::evict(BlockKey key, bool live) {
  const auto it = entries_.find(key);
  if (it->second.tier == Tier::hot) {
    if (live) ++stats_.live_hot_evictions;
    --hot_used_;
  } else {
    --cold_used_;
  }
  entries_.erase(it);
  ++stats_.evictions;
}

void KvCache::fetch(BlockKey key) {
  require(remaining(key) > 0, "KvCache: fetch of a block with no remaining uses");
  stats_.bytes_fetched += block_bytes_;
}

Outcome KvCache::access(BlockKey key, uint32_t batch) {
  require(batch >= 1, "KvCache::access: empty batch");
  const uint32_t r = remaining(key);
  require(r > 0, "KvCache::access: block has no remaining uses");
  require(r >= batch, "KvCache::access: batch exceeds remaining uses");
  ++stats_.accesses;
  if (auto it = entries_.find(key); it != entries_.end()) {
    if (it->second.untouched_prefetch) {
      it->second.untouched_prefetch = false;
      ++stats_.prefetch_hits;
      return Outcome::prefetch_hit;
    }
    ++stats_.hits;
    return Outcome::hit;
  }

  fetch(key);
  stats_.demand_bytes += block_bytes_;
  const uint32_t uses = r - batch + 1;
  const auto dest = destination(uses);
  if (dest == Tier::hot && has_room(Tier::hot)) {
    insert(key, Tier::hot, false);
    ++stats_.misses;
    return Outcome::miss_hot;
  }
  if (uses >= 2 && cold_cap_ > 0) {
    if (!has_room(Tier::cold)) {
      // Victim: smallest remaining use, oldest first; untouched prefetches are kept.
      const BlockKey* victim = nullptr;
      uint32_t best_r = 0;
      uint64_t best_seq = 0;
      for (const auto& [k, e] : entries_) {
        if (e.tier != Tier::cold || e.untouched_prefetch) continue;
        const uint32_t kr = remaining(k);
        if (victim == nullptr || kr < best_r || (kr == best_r && e.seq < best_seq)) {
          victim = &k;
          best_r = kr;
          best_seq = e.seq;
        }
      }
      if (victim != nullptr) evict(*victim, true);
    }
    if (has_room(Tier::cold)) {
      insert(key, Tier::cold, false);
      ++stats_.misses;
      return Outcome::miss_cold;
    }
  }
  ++stats_.bypasses;
  return Outcome::bypass;
}

void KvCache::consume(BlockKey key) {
  const auto it = remaining_.find(key);
  require(it != remaining_.end() && it->second > 0, "KvCache::consume: remaining-use underflow");
  ++stats_.consumes;
  if (--it->second == 0) {
    remaining_.erase(it);
    if (resident(key)) evict(key, false);
  }
}

size_t KvCache::prefetch_step(std::span<const TraceRecord> upcoming) {
  size_t issued = 0, considered = 0;
  std::set<BlockKey> seen;
  for (const TraceRecord& rec : upcoming) {
    if (considered == cfg_.lookahead) break;
    if (resident(rec.key) || !seen.insert(rec.key).second) continue;
    const uint32_t r = remaining(rec.key);
    if (r == 0) continue;
    ++considered;
    const auto dest = destination(r - rec.consumers + 1);
    if (!dest || !has_room(*dest)) continue;
    fetch(rec.key);
    stats_.prefetch_bytes += block_bytes_;
    ++stats_.prefetches;
    insert(rec.key, *dest, true);
    ++issued;
  }
  return issued;
}

CacheStats KvCache::stats() const {
  CacheStats s = stats_;
  s.complete = remaining_.empty() && entries_.empty();
  return s;
}

CacheRun simulate_cache(std::span<const TraceRecord> trace, const CacheConfig& cfg, uint64_t block_bytes,
                        size_t num_query_blocks) {
  KvCache cache(cfg, block_bytes, num_query_blocks);
  cache.init_counters(trace);
  CacheRun run;
  run.outcomes.reserve(trace.size());
  for (size_t i = 0; i < trace.size(); ++i) {
    if (cfg.enabled) cache.prefetch_step(trace.subspan(i));
    run.outcomes.push_back(cache.access(trace[i].key, trace[i].consumers));
    for (uint32_t c = 0; c < trace[i].consumers; ++c) cache.consume(trace[i].key);
  }
  run.stats = cache.stats();
  return run;
}

CacheStats simulate_lru(std::span<const TraceRecord> trace, uint64_t capacity_bytes, uint64_t block_bytes) {
  require(block_bytes >= 1, "simulate_lru: block_bytes must be positive");
  const auto cap = static_cast<size_t>(capacity_bytes / block_bytes);
  std::list<BlockKey> order;  // front = most recent
  std::map<BlockKey, std::list<BlockKey>::iterator> where;
  CacheStats s;
  for (const auto& rec : trace) {
    ++s.accesses;
    s.consumes += rec.consumers;
    if (auto it = where.find(rec.key); it != where.end()) {
      ++s.hits;
      order.splice(order.begin(), order, it->second);
      continue;
    }
    ++s.misses;
    s.bytes_fetched += block_bytes;
    s.demand_bytes += block_bytes;
    if (cap == 0) continue;
    if (order.size() == cap) {
      where.erase(order.back());
      order.pop_back();
      ++s.evictions;
    }
    order.push_front(rec.key);
    where[rec.key] = order.begin();
  }
  s.complete = true;
  return s;
}

CacheStats simulate_cacheless(std::span<const TraceRecord> trace, uint64_t block_bytes) {
  return simulate_lru(trace, 0, block_bytes);
}

}  // namespace fastprefill
