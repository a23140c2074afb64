// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

#include "fastprefill/quant.hpp"

namespace fastprefill {

// Hybrid matrix processing unit: DSP arrays multiply directly, LUT arrays use
// the nibble decomposition. Arrays [0, dsp_arrays) are DSP, the rest LUT.
struct MpuConfig {
  size_t dsp_arrays = 6;
  size_t lut_arrays = 6;
  size_t array_dim = 32;
  int accumulate_width = 32;

  size_t total_arrays() const { return dsp_arrays + lut_arrays; }
  void validate() const;
};

enum class MulPath { dsp, lut };

struct GemmResult {
  AccTile tile;
  uint64_t cycles = 0;
  uint64_t macs = 0;
};

inline constexpr size_t kMaxReduction = size_t{1} << 15;

// Sum of bit-plane partial products; plane 7 carries weight -2^7.
int32_t bitplane_mul(int8_t a, int8_t b);

// Three-term nibble expansion: signed high nibble, unsigned low nibble.
int32_t nibble_mul(int8_t a, int8_t b);

// Plain INT32 product of an m x k and a k x n tile (row-major spans).
// m, n <= array_dim and k <= 2^15.
AccTile tile_matmul(const QTensor& a, const QTensor& b, MulPath path, const MpuConfig& cfg);

// Tiled GEMM over the array grid, with cycle accounting.
GemmResult gemm(const QTensor& a, const QTensor& b, const MpuConfig& cfg);

// Cycle count of an m x k x n GEMM without computing it.
uint64_t gemm_cycles(size_t m, size_t k, size_t n, const MpuConfig& cfg);

// Fill + stream + drain occupancy of one array_dim x k_tile x array_dim pass.
inline uint64_t pass_cycles(size_t k_tile, size_t array_dim) {
  return static_cast<uint64_t>(k_tile + 2 * array_dim - 1);
}

}  // namespace fastprefill
