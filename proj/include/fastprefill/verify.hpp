// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastprefill/quant.hpp"

namespace fastprefill {

// Replaceable kernels, so that a deliberately broken variant can be checked
// for detection.
struct VerifyHooks {
  std::vector<uint32_t> (*coverage)(const FixedVec&, double) = nullptr;  // default: coverage_select
  int32_t (*nibble)(int8_t, int8_t) = nullptr;                            // default: nibble_mul
};

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Exhaustive arithmetic, GEMM path equivalence, selection against a sort
// oracle, streaming index generation against the materializing oracle, sparse
// attention against the dense references, and cache invariants.
std::vector<CheckResult> run_verify(const VerifyHooks& hooks, uint64_t seed);

}  // namespace fastprefill
