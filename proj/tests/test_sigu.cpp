// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "alloc_counter.hpp"
#include "fastprefill/checks.hpp"
#include "fastprefill/sigu.hpp"

using namespace fastprefill;

namespace {

FixedVec q16(std::vector<int32_t> v) {
  FixedVec f;
  f.data = std::move(v);
  return f;
}

using Rows = std::vector<std::vector<uint32_t>>;

}  // namespace

TEST_CASE("pool_mean") {
  const QTensor same(3, 2, {5, -7, 5, -7, 5, -7}, 1.0);
  CHECK(pool_mean(same) == std::vector<int32_t>{5 * 65536, -7 * 65536});
  const QTensor opposite(2, 2, {9, -4, -9, 4}, 1.0);
  CHECK(pool_mean(opposite) == std::vector<int32_t>{0, 0});

  std::mt19937_64 rng(4);
  const QTensor r = checks::random_qtensor(rng, 128, 16);
  const auto p = pool_mean(r);
  for (size_t c = 0; c < 16; ++c) {
    double m = 0.0;
    for (size_t i = 0; i < 128; ++i) m += r.at(i, c);
    CHECK(std::fabs(p[c] / 65536.0 - m / 128.0) <= std::ldexp(1.0, -10));
  }
}

TEST_CASE("jsd_sqrt") {
  const FixedVec a = q16({65536, 0}), b = q16({0, 65536});
  CHECK(jsd_sqrt(a, a) == 0.0);
  CHECK(jsd_sqrt(a, b) == doctest::Approx(std::sqrt(std::log(2.0))).epsilon(1e-12));
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const FixedVec p = checks::random_distribution(rng, 9, false);
    const FixedVec q = checks::random_distribution(rng, 9, false);
    CHECK(jsd_sqrt(p, q) == doctest::Approx(jsd_sqrt(q, p)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(jsd_sqrt(a, q16({65536})), Error);
}

TEST_CASE("classify_head") {
  BlockScores s;
  s.a_hat = s.a_bar = q16({40000, 25536});
  CHECK(classify_head(s, 0.1) == Pattern::query_aware);
  CHECK(classify_head(s, 0.0) == Pattern::vertical_slash);
  s.a_bar = q16({65536, 0});
  s.a_hat = q16({0, 65536});
  CHECK(classify_head(s, 0.1) == Pattern::vertical_slash);
}

TEST_CASE("coverage_select examples") {
  const FixedVec s = q16({32768, 19661, 13107});  // 0.5, 0.3, 0.2
  CHECK(coverage_select(s, 0.7) == std::vector<uint32_t>{0, 1});
  CHECK(coverage_select(s, 0.5) == std::vector<uint32_t>{0});
  CHECK(coverage_select(s, 1.0) == std::vector<uint32_t>{0, 1, 2});
  CHECK(coverage_threshold(0.7) == 45876);
  // Ties break toward the lower index.
  CHECK(coverage_select(q16({16384, 16384, 16384, 16384}), 0.5) == std::vector<uint32_t>{0, 1});
}

TEST_CASE("coverage_select equals the sort oracle beyond one heap load") {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 300; ++t) {
    const size_t n = 1 + rng() % 400;
    const FixedVec s = checks::random_distribution(rng, n, t % 2 == 0);
    const double gamma = 0.05 + 0.94 * static_cast<double>(rng() % 1000) / 1000.0;
    const auto got = coverage_select(s, gamma);
    CHECK(got == coverage_select_oracle(s, gamma));
    std::string why;
    CHECK_MESSAGE(checks::coverage_holds({s, got}, gamma, &why), why);
  }
}

TEST_CASE("expand_vertical_slash examples") {
  const std::vector<uint32_t> zero{0};
  CHECK(expand_vertical_slash(zero, zero, 4).blocks == Rows{{0}, {0, 1}, {0, 2}, {0, 3}});
  const std::vector<uint32_t> all{0, 1, 2};
  CHECK(expand_vertical_slash(all, zero, 3).blocks == Rows{{0}, {0, 1}, {0, 1, 2}});
  CHECK(expand_vertical_slash({}, zero, 3).blocks == Rows{{0}, {1}, {2}});
  // Floor rule: the diagonal is always present.
  CHECK(expand_vertical_slash({}, {}, 2).blocks == Rows{{0}, {1}});
  const std::vector<uint32_t> bad{3};
  CHECK_THROWS_AS(expand_vertical_slash(bad, {}, 3), Error);
}

TEST_CASE("query-aware map and indices") {
  const std::vector<int32_t> pq{65536}, pk{65536};
  const FixedVec one = query_aware_map(pq, pk, 1, 1, 1.0);
  CHECK(one.data == std::vector<int32_t>{65536});
  CHECK(query_aware_indices(one, coverage_select(one, 0.9), 1).blocks == Rows{{0}});

  std::mt19937_64 rng(14);
  const size_t nb = 6, d = 4;
  std::vector<int32_t> q(nb * d), k(nb * d);
  for (auto& v : q) v = static_cast<int32_t>(rng() % 200000) - 100000;
  for (auto& v : k) v = static_cast<int32_t>(rng() % 200000) - 100000;
  const FixedVec flat = query_aware_map(q, k, nb, d, 1e-5);
  CHECK(flat.size() == nb * (nb + 1) / 2);
  const int64_t total = std::accumulate(flat.data.begin(), flat.data.end(), int64_t{0});
  CHECK(std::llabs(total - 65536) <= static_cast<int64_t>(flat.size()));
  std::vector<uint32_t> every(flat.size());
  std::iota(every.begin(), every.end(), 0u);
  const BlockIndexSet full = query_aware_indices(flat, every, nb);
  for (size_t qb = 0; qb < nb; ++qb) CHECK(full.blocks[qb].size() == qb + 1);
  // Flat index q(q+1)/2 + k maps back to (q, k).
  const std::vector<uint32_t> pick{4};  // (2, 1)
  CHECK(query_aware_indices(flat, pick, nb).blocks[2] == std::vector<uint32_t>{1, 2});
}

TEST_CASE("generate_indices: a single block selects itself") {
  std::mt19937_64 rng(15);
  const SigConfig cfg{64, 0.1, 0.9};
  const QTensor q = checks::random_qtensor(rng, 64, 16), k = checks::random_qtensor(rng, 64, 16);
  const SigResult r = generate_indices(3, q, k, 64, cfg, MpuConfig{});
  CHECK(r.scores.a_hat.data == std::vector<int32_t>{65536});
  CHECK(r.scores.a_bar.data == std::vector<int32_t>{65536});
  CHECK(r.scores.a_v.data == std::vector<int32_t>{65536});
  CHECK(r.scores.a_s.data == std::vector<int32_t>{65536});
  CHECK(r.divergence == 0.0);
  CHECK(r.indices.pattern == Pattern::query_aware);
  CHECK(r.indices.head == 3);
  CHECK(r.indices.blocks == Rows{{0}});
  const SigResult vs = generate_indices(0, q, k, 64, SigConfig{64, 0.0, 0.9}, MpuConfig{});
  CHECK(vs.indices.pattern == Pattern::vertical_slash);
  CHECK(vs.indices.blocks == Rows{{0}});
}

TEST_CASE("generate_indices: equal scores spread mass by live-entry count") {
  const size_t B = 16, nb = 4, S = B * nb;
  const QTensor q(S, 8, 1.0);  // all zero: every logit is 0
  std::mt19937_64 rng(16);
  const QTensor k = checks::random_qtensor(rng, S, 8);
  const SigResult r = generate_indices(0, q, k, S, SigConfig{B, 0.0, 0.9}, MpuConfig{});
  // Full blocks hold B*B live entries, the diagonal B(B+1)/2.
  const double full = B * B, diag = B * (B + 1) / 2.0, total = (nb - 1) * full + diag;
  for (size_t b = 0; b + 1 < nb; ++b) CHECK(std::llabs(r.scores.a_v.data[b] - std::llround(full / total * 65536)) <= 1);
  CHECK(std::llabs(r.scores.a_v.data[nb - 1] - std::llround(diag / total * 65536)) <= 1);
}

TEST_CASE("BlockScoreStream enforces ascending single delivery") {
  std::mt19937_64 rng(17);
  const QTensor q = checks::random_qtensor(rng, 16, 8), k = checks::random_qtensor(rng, 48, 8);
  BlockScoreStream s(q, 48, SigConfig{16, 0.1, 0.9}, MpuConfig{});
  CHECK_THROWS_AS(s.push(1, k.row_block(16, 16)), Error);
  s.push(0, k.row_block(0, 16));
  CHECK_THROWS_AS(s.push(0, k.row_block(0, 16)), Error);
  CHECK_THROWS_AS(s.finish(), Error);
  s.push(1, k.row_block(16, 16));
  s.push(2, k.row_block(32, 16));
  CHECK_THROWS_AS(s.push(3, k.row_block(32, 16)), Error);
  CHECK(s.finish().num_blocks == 3);
}

TEST_CASE("streaming generation equals the materializing oracle") {
  std::mt19937_64 rng(18);
  for (int t = 0; t < 12; ++t) {
    const size_t S = t == 0 ? 1024 : 130 + rng() % 900, d = t % 2 == 0 ? 32 : 16;
    const QTensor q = checks::random_qtensor(rng, S, d, 0.03 + 0.01 * (t % 4));
    const QTensor k = checks::random_qtensor(rng, S, d, 0.03);
    const SigConfig cfg{t % 3 == 0 ? size_t{128} : size_t{64}, t % 2 == 0 ? 0.0 : 0.5, 0.85};
    const SigResult a = generate_indices(1, q, k, S, cfg, MpuConfig{});
    const SigResult b = generate_indices_oracle(1, q, k, S, cfg);
    CHECK(a.indices == b.indices);
    CHECK(a.scores.a_hat == b.scores.a_hat);
    CHECK(a.scores.a_bar == b.scores.a_bar);
    CHECK(a.coverage == b.coverage);
    CHECK(a.key_blocks_consumed == (S + cfg.block_size - 1) / cfg.block_size);
  }
}

TEST_CASE("streaming state does not grow with B x S") {
  std::mt19937_64 rng(19);
  const size_t B = 64, d = 32;
  auto peak_for = [&](size_t S) {
    const QTensor q = checks::random_qtensor(rng, S, d), k = checks::random_qtensor(rng, S, d);
    const QTensor q_hat = q.row_block(S - B, B);
    std::vector<QTensor> blocks;
    for (size_t b = 0; b < S / B; ++b) blocks.push_back(k.row_block(b * B, B));
    alloc_counter::Scope scope;
    BlockScoreStream s(q_hat, S, SigConfig{B, 0.1, 0.9}, MpuConfig{});
    for (size_t b = 0; b < blocks.size(); ++b) s.push(b, blocks[b]);
    (void)s.finish();
    return scope.peak_growth();
  };
  const size_t small = peak_for(1024), large = peak_for(8192);
  // 7 extra blocks' worth of per-block state, far below a B x S map.
  CHECK(large - small < 8192 * B * 4 / 8);
  CHECK(large < 64 * (8192 / B) * (d + 32) + 64 * B * B);
}

TEST_CASE("index set JSON round trip and validation") {
  const BlockIndexSet s = expand_vertical_slash(std::vector<uint32_t>{0}, std::vector<uint32_t>{0, 1}, 4, 2);
  const BlockIndexSet back = index_set_from_json(index_set_to_json(s));
  CHECK(back == s);
  CHECK_THROWS_AS(index_set_from_json(R"({"head":0,"pattern":"vertical_slash","blocks":[[1]]})"), Error);
  CHECK_THROWS_AS(index_set_from_json(R"({"head":0,"pattern":"vertical_slash","blocks":[[0],[1,0]]})"), Error);
  CHECK_THROWS_AS(index_set_from_json(R"({"head":0,"pattern":"diagonal","blocks":[[0]]})"), Error);
  CHECK_THROWS_AS(index_set_from_json("not json"), Error);
}

TEST_CASE("SigConfig validation") {
  CHECK_THROWS_AS(SigConfig({0, 0.1, 0.9}).validate(), Error);
  CHECK_THROWS_AS(SigConfig({128, 0.1, 0.0}).validate(), Error);
  CHECK_THROWS_AS(SigConfig({128, 0.1, 1.5}).validate(), Error);
  CHECK_THROWS_AS(SigConfig({128, -1.0, 0.9}).validate(), Error);
}
