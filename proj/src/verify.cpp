// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/verify.hpp"

#include <random>

#include "fastprefill/attention.hpp"
#include "fastprefill/checks.hpp"
#include "fastprefill/mpu.hpp"
#include "fastprefill/sigu.hpp"

namespace fastprefill {

namespace {

CheckResult exhaustive_multiply(int32_t (*nibble)(int8_t, int8_t)) {
  CheckResult r{"exhaustive INT8 multiply (bit-plane, nibble)", true, ""};
  for (int a = -128; a <= 127; ++a) {
    for (int b = -128; b <= 127; ++b) {
      const int32_t want = a * b;
      const auto ia = static_cast<int8_t>(a), ib = static_cast<int8_t>(b);
      if (bitplane_mul(ia, ib) != want || nibble(ia, ib) != want) {
        r.passed = false;
        r.detail = "mismatch at (" + std::to_string(a) + ", " + std::to_string(b) + ")";
        return r;
      }
    }
  }
  return r;
}

CheckResult gemm_paths(std::mt19937_64& rng, int32_t (*nibble)(int8_t, int8_t)) {
  CheckResult r{"GEMM path equivalence (dsp, lut, mixed)", true, ""};
  const MpuConfig dsp{4, 0, 32, 32}, lut{0, 4, 32, 32}, mixed{3, 3, 32, 32};
  for (int t = 0; t < 40 && r.passed; ++t) {
    const size_t m = 1 + rng() % 80, k = 1 + rng() % 80, n = 1 + rng() % 80;
    const QTensor a = checks::random_qtensor(rng, m, k), b = checks::random_qtensor(rng, k, n);
    const AccTile ref = gemm(a, b, dsp).tile;
    if (gemm(a, b, lut).tile != ref || gemm(a, b, mixed).tile != ref) {
      r.passed = false;
      r.detail = "GEMM results differ between array mixes";
    }
    // Scalar LUT tile through the (possibly replaced) nibble kernel.
    if (m <= 32 && n <= 32) {
      for (size_t i = 0; i < m && r.passed; ++i)
        for (size_t j = 0; j < n && r.passed; ++j) {
          int32_t acc = 0;
          for (size_t x = 0; x < k; ++x) acc += nibble(a.at(i, x), b.at(x, j));
          if (acc != ref.at(i, j)) {
            r.passed = false;
            r.detail = "nibble tile product differs from the direct product";
          }
        }
    }
  }
  return r;
}

CheckResult coverage_vs_sort(std::mt19937_64& rng, std::vector<uint32_t> (*coverage)(const FixedVec&, double)) {
  CheckResult r{"coverage selection vs full-sort oracle", true, ""};
  for (int t = 0; t < 300 && r.passed; ++t) {
    const size_t n = 1 + rng() % 200;
    const FixedVec s = checks::random_distribution(rng, n, t % 3 == 0);
    const double gamma = 0.05 + 0.9 * static_cast<double>(rng() % 1000) / 1000.0;
    CoverageRecord rec{s, coverage(s, gamma)};
    std::string why;
    if (!checks::coverage_holds(rec, gamma, &why)) {
      r.passed = false;
      r.detail = why;
    } else if (rec.selected != coverage_select_oracle(s, gamma)) {
      r.passed = false;
      r.detail = "selection differs from the sort oracle (n=" + std::to_string(n) + ")";
    }
  }
  return r;
}

CheckResult sigu_oracle(std::mt19937_64& rng) {
  CheckResult r{"streaming index generation vs materializing oracle", true, ""};
  const MpuConfig mpu;
  for (int t = 0; t < 6 && r.passed; ++t) {
    const size_t B = 32, S = 64 + rng() % 200, d = t % 2 == 0 ? 16 : 32;
    const QTensor q = checks::random_qtensor(rng, S, d, 0.02 + 0.01 * t);
    const QTensor k = checks::random_qtensor(rng, S, d, 0.02);
    const SigConfig cfg{B, t % 3 == 0 ? 0.0 : 1.0, 0.9};
    const SigResult a = generate_indices(0, q, k, S, cfg, mpu);
    const SigResult b = generate_indices_oracle(0, q, k, S, cfg);
    if (!(a.indices == b.indices) || a.scores.a_hat != b.scores.a_hat || a.scores.a_bar != b.scores.a_bar) {
      r.passed = false;
      r.detail = "index sets or block scores differ at S=" + std::to_string(S);
    }
    for (const auto& rec : a.coverage)
      if (r.passed && !checks::coverage_holds(rec, cfg.gamma, &r.detail)) r.passed = false;
  }
  return r;
}

CheckResult attention_refs(std::mt19937_64& rng) {
  CheckResult r{"sparse attention vs dense and double-precision references", true, ""};
  const MpuConfig mpu;
  for (int t = 0; t < 4 && r.passed; ++t) {
    AttentionInput in;
    in.shape = {static_cast<size_t>(40 + rng() % 100), 16, 16};
    for (int h = 0; h < 2; ++h) in.q.push_back(checks::random_qtensor(rng, in.shape.seq_len, 16, 0.03));
    in.k.push_back(checks::random_qtensor(rng, in.shape.seq_len, 16, 0.03));
    in.v.push_back(checks::random_qtensor(rng, in.shape.seq_len, 16, 0.01));
    const size_t nb = (in.shape.seq_len + 15) / 16;
    std::vector<BlockIndexSet> full(2), sparse = checks::random_index_sets(rng, 2, nb, 0.4);
    for (size_t h = 0; h < 2; ++h) {
      std::vector<uint32_t> all(nb);
      for (size_t i = 0; i < nb; ++i) all[i] = static_cast<uint32_t>(i);
      full[h] = expand_vertical_slash(all, {}, nb, static_cast<uint32_t>(h));
    }
    const SauResult dense_run = sparse_attention(in, full, SauConfig{8, 2}, mpu);
    const AttentionOutput dense = dense_attention(in, mpu);
    if (dense_run.out.heads != dense.heads) {
      r.passed = false;
      r.detail = "full-coverage sparse attention is not bit-exact with the dense reference";
      break;
    }
    const SauResult sp = sparse_attention(in, sparse, SauConfig{}, mpu);
    const auto oracle = masked_attention_oracle(in, sparse);
    for (size_t h = 0; h < 2; ++h) {
      const double err = normwise_error(sp.out.head_real(h), oracle[h]);
      if (err > 1.0 / 64.0) {
        r.passed = false;
        r.detail = "relative error " + std::to_string(err) + " exceeds 2^-6";
      }
    }
  }
  return r;
}

CheckResult cache_invariants(std::mt19937_64& rng) {
  CheckResult r{"cache invariants on random traces", true, ""};
  for (int t = 0; t < 20 && r.passed; ++t) {
    const checks::NamedTrace tr = checks::random_trace(rng, 1 + rng() % 3, 4 + rng() % 30, 50 + rng() % 300);
    CacheConfig cfg;
    cfg.total_capacity = tr.capacity;
    cfg.lookahead = 1 + rng() % 6;
    const checks::CacheAudit a = checks::audit_cache(tr, cfg);
    if (!a.ok) {
      r.passed = false;
      r.detail = a.detail;
    }
  }
  return r;
}

}  // namespace

std::vector<CheckResult> run_verify(const VerifyHooks& hooks, uint64_t seed) {
  auto* coverage = hooks.coverage != nullptr ? hooks.coverage : &coverage_select;
  auto* nibble = hooks.nibble != nullptr ? hooks.nibble : &nibble_mul;
  std::mt19937_64 rng(seed);
  std::vector<CheckResult> out;
  auto guarded = [&out](const char* name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, std::string("exception: ") + e.what()});
    }
  };
  guarded("exhaustive INT8 multiply", [&] { return exhaustive_multiply(nibble); });
  guarded("GEMM path equivalence", [&] { return gemm_paths(rng, nibble); });
  guarded("coverage selection", [&] { return coverage_vs_sort(rng, coverage); });
  guarded("index generation oracle", [&] { return sigu_oracle(rng); });
  guarded("sparse attention references", [&] { return attention_refs(rng); });
  guarded("cache invariants", [&] { return cache_invariants(rng); });
  return out;
}

}  // namespace fastprefill
