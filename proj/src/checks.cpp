// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/checks.hpp"

#include <algorithm>
#include <set>

namespace fastprefill::checks {

QTensor random_qtensor(std::mt19937_64& rng, size_t rows, size_t cols, double scale) {
  std::vector<int8_t> data(rows * cols);
  for (auto& v : data) v = static_cast<int8_t>(static_cast<int64_t>(rng() % 255) - 127);
  return QTensor(rows, cols, std::move(data), scale);
}

FixedVec random_distribution(std::mt19937_64& rng, size_t n, bool ties) {
  std::vector<uint64_t> w(n);
  uint64_t total = 0;
  for (auto& x : w) {
    x = ties ? 1 + rng() % 4 : 1 + rng() % 100000;
    total += x;
  }
  FixedVec out;
  out.data.resize(n);
  int64_t sum = 0;
  for (size_t i = 0; i < n; ++i) {
    out.data[i] = static_cast<int32_t>(w[i] * 65536 / total);
    sum += out.data[i];
  }
  out.data[rng() % n] += static_cast<int32_t>(65536 - sum);
  return out;
}

bool coverage_holds(const CoverageRecord& rec, double gamma, std::string* why) {
  auto fail = [why](std::string msg) {
    if (why != nullptr) *why = std::move(msg);
    return false;
  };
  const auto& s = rec.scores.data;
  const auto& sel = rec.selected;
  if (!std::is_sorted(sel.begin(), sel.end()) || std::adjacent_find(sel.begin(), sel.end()) != sel.end())
    return fail("selection is not a sorted set");
  for (uint32_t i : sel)
    if (i >= s.size()) return fail("selection index out of range");
  if (gamma >= 1.0) return sel.size() == s.size() ? true : fail("gamma >= 1 must select everything");

  const int64_t need = coverage_threshold(gamma);
  int64_t cum = 0, total = 0;
  int32_t lowest = INT32_MAX;
  for (uint32_t i : sel) {
    cum += s[i];
    lowest = std::min(lowest, s[i]);
  }
  for (int32_t v : s) total += v;
  if (cum < need) {
    if (sel.size() == s.size()) return true;  // the whole vector rounds below gamma
    return fail("cumulative score " + std::to_string(cum) + " below threshold " + std::to_string(need));
  }
  if (cum - lowest >= need) return fail("not minimal: dropping the lowest selected score still covers gamma");
  std::vector<uint8_t> in(s.size(), 0);
  for (uint32_t i : sel) in[i] = 1;
  for (size_t i = 0; i < s.size(); ++i)
    if (!in[i] && s[i] > lowest) return fail("an unselected score exceeds a selected one");
  (void)total;
  return true;
}

std::vector<BlockIndexSet> random_index_sets(std::mt19937_64& rng, size_t heads, size_t blocks, double density) {
  std::bernoulli_distribution pick(density);
  std::vector<BlockIndexSet> sets(heads);
  for (size_t h = 0; h < heads; ++h) {
    sets[h].head = static_cast<uint32_t>(h);
    sets[h].pattern = h % 2 == 0 ? Pattern::vertical_slash : Pattern::query_aware;
    sets[h].blocks.resize(blocks);
    for (size_t q = 0; q < blocks; ++q)
      for (size_t k = 0; k <= q; ++k)
        if (k == q || pick(rng)) sets[h].blocks[q].push_back(static_cast<uint32_t>(k));
  }
  return sets;
}

NamedTrace random_trace(std::mt19937_64& rng, size_t kv_heads, size_t blocks, size_t records) {
  NamedTrace t;
  t.name = "random";
  t.num_query_blocks = blocks;
  t.block_bytes = 4096;
  t.capacity = t.block_bytes * (1 + rng() % (kv_heads * blocks));
  // Skewed key popularity so that some blocks see heavy reuse.
  std::vector<double> weight(kv_heads * blocks);
  for (size_t i = 0; i < weight.size(); ++i) weight[i] = 1.0 / static_cast<double>(1 + (rng() % weight.size()));
  std::discrete_distribution<size_t> key(weight.begin(), weight.end());
  for (size_t r = 0; r < records; ++r) {
    const size_t k = key(rng);
    t.trace.push_back({{static_cast<uint32_t>(k / blocks), static_cast<uint32_t>(k % blocks)},
                       static_cast<uint32_t>(1 + rng() % 3), 0});
  }
  return t;
}

namespace {

std::vector<BlockIndexSet> gqa_sets(std::mt19937_64& rng, size_t heads, size_t nb) {
  std::vector<BlockIndexSet> sets;
  for (size_t h = 0; h < heads; ++h) {
    if (rng() % 4 != 0) {
      std::vector<uint32_t> sv{0}, ss{0, 1};
      for (int i = 0; i < 2; ++i) sv.push_back(static_cast<uint32_t>(rng() % nb));
      ss.push_back(static_cast<uint32_t>(2 + rng() % 6));
      std::sort(sv.begin(), sv.end());
      sv.erase(std::unique(sv.begin(), sv.end()), sv.end());
      std::sort(ss.begin(), ss.end());
      ss.erase(std::unique(ss.begin(), ss.end()), ss.end());
      sets.push_back(expand_vertical_slash(sv, ss, nb, static_cast<uint32_t>(h)));
    } else {
      BlockIndexSet s;
      s.head = static_cast<uint32_t>(h);
      s.pattern = Pattern::query_aware;
      s.blocks.resize(nb);
      for (size_t q = 0; q < nb; ++q) {
        std::set<uint32_t> row{0, static_cast<uint32_t>(q)};
        for (int i = 0; i < 3; ++i) row.insert(static_cast<uint32_t>(rng() % (q + 1)));
        s.blocks[q].assign(row.begin(), row.end());
      }
      sets.push_back(std::move(s));
    }
  }
  return sets;
}

}  // namespace

std::vector<NamedTrace> gqa_workload_suite() {
  struct Spec {
    size_t q_heads, kv_heads, blocks, group, capacity_blocks;
    uint64_t seed;
  };
  const Spec specs[] = {
      {8, 2, 64, 8, 48, 11},  {8, 2, 96, 16, 64, 12}, {8, 4, 64, 8, 96, 13},
      {16, 4, 48, 8, 64, 14}, {4, 1, 128, 16, 32, 15}, {8, 2, 128, 32, 128, 16},
  };
  std::vector<NamedTrace> out;
  for (const Spec& s : specs) {
    std::mt19937_64 rng(s.seed);
    const auto sets = gqa_sets(rng, s.q_heads, s.blocks);
    const JobList jobs(sets, s.kv_heads);
    NamedTrace t;
    t.name = "gqa-h" + std::to_string(s.q_heads) + "-kv" + std::to_string(s.kv_heads) + "-nb" +
             std::to_string(s.blocks) + "-g" + std::to_string(s.group);
    t.trace = schedule_trace(jobs, SauConfig{8, s.group});
    t.num_query_blocks = s.blocks;
    t.block_bytes = 2 * 128 * 64;
    t.capacity = t.block_bytes * s.capacity_blocks;
    out.push_back(std::move(t));
  }
  return out;
}

CacheAudit audit_cache(const NamedTrace& t, const CacheConfig& cfg) {
  CacheAudit a;
  auto fail = [&a](const std::string& msg) {
    if (a.ok) a.detail = msg;
    a.ok = false;
  };
  try {
    KvCache cache(cfg, t.block_bytes, t.num_query_blocks);
    cache.init_counters(t.trace);
    std::set<BlockKey> distinct;
    for (const auto& r : t.trace) distinct.insert(r.key);
    for (size_t i = 0; i < t.trace.size() && a.ok; ++i) {
      const TraceRecord& rec = t.trace[i];
      if (cfg.enabled) cache.prefetch_step(std::span(t.trace).subspan(i));
      if (cache.hot_used() > cache.hot_capacity() || cache.cold_used() > cache.cold_capacity())
        fail("tier over capacity after prefetch");
      const uint32_t before = cache.remaining(rec.key);
      cache.access(rec.key, rec.consumers);
      for (uint32_t c = 0; c < rec.consumers; ++c) cache.consume(rec.key);
      if (cache.remaining(rec.key) != before - rec.consumers) fail("remaining-use counter did not drop by the batch");
      if (cache.remaining(rec.key) == 0 && cache.resident(rec.key)) fail("dead block left resident");
      if (cache.hot_used() > cache.hot_capacity() || cache.cold_used() > cache.cold_capacity())
        fail("tier over capacity after access");
    }
    a.stats = cache.stats();
    if (a.stats.live_hot_evictions != 0) fail("a live hot entry was evicted");
    if (!a.stats.complete) fail("tiers did not drain or counters did not reach zero");
    const uint64_t lower = distinct.size() * t.block_bytes;
    const uint64_t upper = t.trace.size() * t.block_bytes;
    if (a.stats.bytes_fetched < lower) fail("traffic below the compulsory-miss bound");
    if (a.stats.bytes_fetched > upper) fail("traffic above the cacheless bound");
  } catch (const Error& e) {
    fail(std::string("contract violation: ") + e.what());
  }
  return a;
}

}  // namespace fastprefill::checks
