// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fastprefill/attention.hpp"
#include "fastprefill/checks.hpp"

using namespace fastprefill;

namespace {

BlockIndexSet rows(uint32_t head, std::vector<std::vector<uint32_t>> blocks) {
  BlockIndexSet s;
  s.head = head;
  s.blocks = std::move(blocks);
  return s;
}

AttentionInput random_input(std::mt19937_64& rng, size_t hq, size_t hkv, size_t S, size_t B, size_t d) {
  AttentionInput in;
  in.shape = {S, B, d};
  for (size_t h = 0; h < hq; ++h) in.q.push_back(checks::random_qtensor(rng, S, d, 0.04));
  for (size_t g = 0; g < hkv; ++g) {
    in.k.push_back(checks::random_qtensor(rng, S, d, 0.04));
    in.v.push_back(checks::random_qtensor(rng, S, d, 0.02));
  }
  return in;
}

std::vector<BlockIndexSet> full_sets(size_t heads, size_t nb) {
  std::vector<uint32_t> all(nb);
  std::iota(all.begin(), all.end(), 0u);
  std::vector<BlockIndexSet> s;
  for (size_t h = 0; h < heads; ++h) s.push_back(expand_vertical_slash(all, {}, nb, static_cast<uint32_t>(h)));
  return s;
}

}  // namespace

TEST_CASE("JobList: separate KV heads") {
  const std::vector<BlockIndexSet> sets{rows(0, {{}, {}, {0, 2}}), rows(1, {{}, {}, {1, 2}})};
  const JobList jobs(sets, 2);
  CHECK(jobs.group_size() == 1);
  CHECK(jobs.use_count({0, 0}) == 1);
  CHECK(jobs.use_count({0, 1}) == 0);
  CHECK(jobs.use_count({0, 2}) == 1);
  CHECK(jobs.use_count({1, 1}) == 1);
  CHECK(jobs.use_count({1, 2}) == 1);
  CHECK(jobs.num_jobs() == 4);
  CHECK(jobs.pending({1, 2}) == 2);
}

TEST_CASE("JobList: heads sharing one KV head merge their consumers") {
  const std::vector<BlockIndexSet> sets{rows(0, {{}, {}, {0, 2}}), rows(1, {{}, {}, {1, 2}})};
  const JobList jobs(sets, 1);
  CHECK(jobs.group_size() == 2);
  CHECK(jobs.use_count({0, 2}) == 2);
  const auto c = jobs.consumers({0, 2});
  CHECK(c[0] == Consumer{0, 2});
  CHECK(c[1] == Consumer{1, 2});
  CHECK_THROWS_AS(JobList(sets, 3), Error);
  CHECK_THROWS_AS(JobList({rows(0, {{1}})}, 1), Error);
}

TEST_CASE("JobList: use counts add up to the set sizes") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 20; ++t) {
    const size_t kv = 1 + rng() % 3, heads = kv * (1 + rng() % 3), nb = 1 + rng() % 30;
    const auto sets = checks::random_index_sets(rng, heads, nb, 0.3);
    const JobList jobs(sets, kv);
    size_t uses = 0, sizes = 0;
    for (size_t g = 0; g < kv; ++g)
      for (size_t b = 0; b < nb; ++b) {
        uses += jobs.use_count({uint32_t(g), uint32_t(b)});
        const auto c = jobs.consumers({uint32_t(g), uint32_t(b)});
        CHECK(std::is_sorted(c.begin(), c.end()));
      }
    for (const auto& s : sets) sizes += s.total();
    CHECK(uses == sizes);
    CHECK(jobs.num_jobs() == sizes);
  }
}

TEST_CASE("schedule_trace: passes, order and consumer totals") {
  std::mt19937_64 rng(22);
  const auto sets = checks::random_index_sets(rng, 4, 10, 0.4);
  const JobList jobs(sets, 2);
  const auto one = schedule_trace(jobs, SauConfig{8, 0});
  for (size_t i = 1; i < one.size(); ++i) CHECK(one[i - 1].key.block <= one[i].key.block);
  const auto grouped = schedule_trace(jobs, SauConfig{8, 3});
  CHECK(grouped.back().pass == 3);
  size_t a = 0, b = 0;
  for (const auto& r : one) a += r.consumers;
  for (const auto& r : grouped) b += r.consumers;
  CHECK(a == jobs.num_jobs());
  CHECK(b == jobs.num_jobs());
  for (const auto& r : grouped) CHECK(r.key.block < (r.pass + 1) * 3);
  CHECK(trace_from_jsonl(trace_to_jsonl(grouped)) == grouped);
  CHECK_THROWS_AS(trace_from_jsonl("{\"kv_head\": 0}\n"), Error);
}

TEST_CASE("one query block, one key block: plain softmax attention") {
  std::mt19937_64 rng(23);
  const AttentionInput in = random_input(rng, 1, 1, 16, 16, 8);
  const auto sets = full_sets(1, 1);
  const SauResult r = sparse_attention(in, sets, SauConfig{}, MpuConfig{});
  const auto ref = masked_attention_oracle(in, sets);
  CHECK(normwise_error(r.out.head_real(0), ref[0]) <= std::ldexp(1.0, -6));
  CHECK(r.jobs == 1);
}

TEST_CASE("full coverage: block-major schedule equals the dense reference") {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 4; ++t) {
    const size_t S = 40 + rng() % 90;
    const AttentionInput in = random_input(rng, 4, 2, S, 16, 16);
    const size_t nb = (S + 15) / 16;
    const auto sets = full_sets(4, nb);
    const SauResult r = sparse_attention(in, sets, SauConfig{8, t % 2 == 0 ? 0u : 2u}, MpuConfig{});
    const AttentionOutput dense = dense_attention(in, MpuConfig{});
    CHECK(r.out.heads == dense.heads);
    const auto ref = masked_attention_oracle(in, sets);
    for (size_t h = 0; h < 4; ++h) CHECK(normwise_error(r.out.head_real(h), ref[h]) <= std::ldexp(1.0, -6));
  }
}

TEST_CASE("random sparse sets: masked oracle within 2^-6, sequential reference bit-exact") {
  std::mt19937_64 rng(25);
  for (int t = 0; t < 8; ++t) {
    const size_t S = 50 + rng() % 200;
    const AttentionInput in = random_input(rng, 2, 1, S, 16, 16);
    const auto sets = checks::random_index_sets(rng, 2, (S + 15) / 16, 0.3);
    const SauResult r = sparse_attention(in, sets, SauConfig{3, 4}, MpuConfig{});
    CHECK(r.out.heads == sequential_attention(in, sets, MpuConfig{}).heads);
    const auto ref = masked_attention_oracle(in, sets);
    for (size_t h = 0; h < 2; ++h) CHECK(normwise_error(r.out.head_real(h), ref[h]) <= std::ldexp(1.0, -6));
  }
}

TEST_CASE("merge_states: identity, commutativity, order tolerance") {
  std::mt19937_64 rng(26);
  const AttentionInput in = random_input(rng, 1, 1, 96, 16, 16);
  const MpuConfig mpu;
  const QTensor q = in.q[0].row_block(80, 16);
  std::vector<RowState> parts;
  for (size_t kb = 0; kb < 6; ++kb)
    parts.push_back(
        block_state(q, in.k[0].row_block(kb * 16, 16), in.v[0].row_block(kb * 16, 16), 5, kb, in.shape, mpu, nullptr));

  const RowState id = merge_states(RowState{}, parts[0]);
  CHECK(id.m == parts[0].m);
  CHECK(id.l == parts[0].l);
  CHECK(id.acc == parts[0].acc);

  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    const RowState ab = merge_states(parts[i], parts[i + 1]);
    const RowState ba = merge_states(parts[i + 1], parts[i]);
    CHECK(ab.l == ba.l);
    CHECK(ab.acc == ba.acc);
  }

  RowState ascending;
  for (const auto& p : parts) ascending = merge_states(ascending, p);
  const auto ref = finalize_state(ascending);
  std::vector<size_t> order(parts.size());
  std::iota(order.begin(), order.end(), 0);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(order.begin(), order.end(), rng);
    RowState s;
    for (size_t i : order) s = merge_states(s, parts[i]);
    const auto got = finalize_state(s);
    double err = 0.0, mag = 0.0;
    for (size_t i = 0; i < ref.size(); ++i) {
      err = std::max(err, std::fabs(double(got[i]) - ref[i]));
      mag = std::max(mag, std::fabs(double(ref[i])));
    }
    CHECK(err <= std::ldexp(1.0, -12) * mag);
  }
  CHECK_THROWS_AS(finalize_state(RowState{}), Error);
}

TEST_CASE("sparse_attention: completion and accumulator bound") {
  std::mt19937_64 rng(27);
  const AttentionInput in = random_input(rng, 4, 2, 320, 16, 8);
  const auto sets = checks::random_index_sets(rng, 4, 20, 0.2);
  const SauResult one = sparse_attention(in, sets, SauConfig{8, 0}, MpuConfig{});
  const SauResult grouped = sparse_attention(in, sets, SauConfig{8, 5}, MpuConfig{});
  size_t total = 0;
  for (const auto& s : sets) total += s.total();
  CHECK(one.jobs == total);
  CHECK(grouped.passes == 4);
  CHECK(grouped.out.heads == one.out.heads);
  // Only the current pass's query blocks hold accumulators.
  CHECK(grouped.peak_live_accumulators <= 4 * 5);
  CHECK(one.cycles > 0);
}

TEST_CASE("attention input validation") {
  std::mt19937_64 rng(28);
  AttentionInput in = random_input(rng, 3, 2, 32, 16, 8);
  CHECK_THROWS_AS(sparse_attention(in, full_sets(3, 2), SauConfig{}, MpuConfig{}), Error);
  in = random_input(rng, 2, 1, 32, 16, 8);
  CHECK_THROWS_AS(sparse_attention(in, full_sets(2, 3), SauConfig{}, MpuConfig{}), Error);
  CHECK_THROWS_AS(sparse_attention(in, full_sets(2, 2), SauConfig{0, 0}, MpuConfig{}), Error);
}
