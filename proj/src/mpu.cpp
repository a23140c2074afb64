// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/mpu.hpp"

#include <algorithm>
#include <bit>
#include <vector>

namespace fastprefill {

void MpuConfig::validate() const {
  require(total_arrays() >= 1, "MpuConfig: at least one array is required");
  require(array_dim >= 1 && std::has_single_bit(array_dim), "MpuConfig: array_dim must be a power of two");
  require(accumulate_width == 32, "MpuConfig: only 32-bit accumulation is modeled");
}

int32_t bitplane_mul(int8_t a, int8_t b) {
  const auto ua = static_cast<uint8_t>(a);
  const auto ub = static_cast<uint8_t>(b);
  int32_t sum = 0;
  for (int i = 0; i < 8; ++i) {
    const int32_t wi = i == 7 ? -128 : (1 << i);
    for (int j = 0; j < 8; ++j) {
      const int32_t wj = j == 7 ? -128 : (1 << j);
      const int32_t bit = ((ua >> i) & 1) & ((ub >> j) & 1);
      sum += bit * wi * wj;
    }
  }
  return sum;
}

namespace {

struct Nibbles {
  int32_t high;  // signed, [-8, 7]
  int32_t low;   // unsigned, [0, 15]
};

Nibbles split(int8_t v) {
  const int32_t x = v;
  return {x >> 4, x & 15};
}

}  // namespace

int32_t nibble_mul(int8_t a, int8_t b) {
  const Nibbles na = split(a);
  const Nibbles nb = split(b);
  return na.low * nb.low + (na.high * nb.low + na.low * nb.high) * 16 + na.high * nb.high * 256;
}

AccTile tile_matmul(const QTensor& a, const QTensor& b, MulPath path, const MpuConfig& cfg) {
  cfg.validate();
  require(a.cols() == b.rows(), "tile_matmul: inner dimensions differ");
  require(a.rows() <= cfg.array_dim && b.cols() <= cfg.array_dim, "tile_matmul: tile exceeds array_dim");
  require(a.cols() <= kMaxReduction, "tile_matmul: reduction depth exceeds 2^15 (INT32 overflow guard)");
  AccTile out{a.rows(), b.cols(), std::vector<int32_t>(a.rows() * b.cols(), 0), a.scale() * b.scale()};
  for (size_t i = 0; i < a.rows(); ++i) {
    for (size_t j = 0; j < b.cols(); ++j) {
      int32_t acc = 0;
      for (size_t t = 0; t < a.cols(); ++t) {
        acc += path == MulPath::lut ? nibble_mul(a.at(i, t), b.at(t, j))
                                    : static_cast<int32_t>(a.at(i, t)) * static_cast<int32_t>(b.at(t, j));
      }
      out.data[i * out.cols + j] = acc;
    }
  }
  return out;
}

namespace {

struct PassPlan {
  size_t full_passes = 0;     // passes with k_tile == array_dim
  size_t partial_passes = 0;  // passes over the k remainder
  size_t full_chunks = 0;     // full k chunks per output tile
  uint64_t full_cost = 0;
  uint64_t partial_cost = 0;
};

PassPlan plan_passes(size_t m, size_t k, size_t n, size_t dim) {
  const size_t mt = (m + dim - 1) / dim;
  const size_t nt = (n + dim - 1) / dim;
  PassPlan p;
  p.full_chunks = k / dim;
  const size_t rem = k % dim;
  p.full_passes = mt * nt * p.full_chunks;
  p.partial_passes = rem != 0 ? mt * nt : 0;
  p.full_cost = pass_cycles(dim, dim);
  p.partial_cost = rem != 0 ? pass_cycles(rem, dim) : 0;
  return p;
}

// Passes are ordered longest first (stable) and dealt round-robin; this keeps
// the busiest-array load monotone in the array count.
uint64_t busiest_array(const PassPlan& p, size_t arrays) {
  uint64_t worst = 0;
  const size_t total = p.full_passes + p.partial_passes;
  for (size_t a = 0; a < arrays && a < total; ++a) {
    const size_t nf = p.full_passes / arrays + (a < p.full_passes % arrays ? 1 : 0);
    // Partial passes occupy sorted positions [full, full + partial).
    const size_t upto_end = total / arrays + (a < total % arrays ? 1 : 0);
    const size_t np = upto_end - nf;
    worst = std::max(worst, nf * p.full_cost + np * p.partial_cost);
  }
  return worst;
}

}  // namespace

uint64_t gemm_cycles(size_t m, size_t k, size_t n, const MpuConfig& cfg) {
  cfg.validate();
  if (m == 0 || k == 0 || n == 0) return 0;
  return busiest_array(plan_passes(m, k, n, cfg.array_dim), cfg.total_arrays());
}

GemmResult gemm(const QTensor& a, const QTensor& b, const MpuConfig& cfg) {
  cfg.validate();
  require(a.cols() == b.rows(), "gemm: inner dimensions differ");
  require(a.cols() <= kMaxReduction, "gemm: reduction depth exceeds 2^15 (INT32 overflow guard)");
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  const size_t dim = cfg.array_dim;
  const size_t arrays = cfg.total_arrays();

  GemmResult res;
  res.tile = AccTile{m, n, std::vector<int32_t>(m * n, 0), a.scale() * b.scale()};
  res.macs = static_cast<uint64_t>(m) * k * n;
  if (m == 0 || k == 0 || n == 0) return res;
  const PassPlan plan = plan_passes(m, k, n, dim);
  res.cycles = busiest_array(plan, arrays);

  // Widened operands for the DSP path, nibble planes for the LUT path.
  std::vector<int32_t> bw(k * n), bl(k * n), bh(k * n);
  for (size_t i = 0; i < k * n; ++i) {
    const int8_t v = b.data()[i];
    bw[i] = v;
    const Nibbles nb = split(v);
    bl[i] = nb.low;
    bh[i] = nb.high;
  }

  const size_t mt = (m + dim - 1) / dim;
  const size_t nt = (n + dim - 1) / dim;
  const size_t kchunks = plan.full_chunks + (plan.partial_passes != 0 ? 1 : 0);
  std::vector<int32_t> ll(dim), mid(dim), hh(dim);

  for (size_t ti = 0; ti < mt; ++ti) {
    for (size_t tj = 0; tj < nt; ++tj) {
      const size_t tile_id = ti * nt + tj;
      const size_t r0 = ti * dim, r1 = std::min(m, r0 + dim);
      const size_t c0 = tj * dim, c1 = std::min(n, c0 + dim);
      const size_t w = c1 - c0;
      for (size_t kc = 0; kc < kchunks; ++kc) {
        const size_t k0 = kc * dim, k1 = std::min(k, k0 + dim);
        const size_t sorted_pos =
            kc < plan.full_chunks ? tile_id * plan.full_chunks + kc : plan.full_passes + tile_id;
        const bool dsp = (sorted_pos % arrays) < cfg.dsp_arrays;
        for (size_t r = r0; r < r1; ++r) {
          int32_t* crow = res.tile.data.data() + r * n + c0;
          if (dsp) {
            for (size_t t = k0; t < k1; ++t) {
              const int32_t av = a.at(r, t);
              const int32_t* brow = bw.data() + t * n + c0;
              for (size_t c = 0; c < w; ++c) crow[c] += av * brow[c];
            }
          } else {
            std::fill_n(ll.begin(), w, 0);
            std::fill_n(mid.begin(), w, 0);
            std::fill_n(hh.begin(), w, 0);
            for (size_t t = k0; t < k1; ++t) {
              const Nibbles na = split(a.at(r, t));
              const int32_t* blr = bl.data() + t * n + c0;
              const int32_t* bhr = bh.data() + t * n + c0;
              for (size_t c = 0; c < w; ++c) {
                ll[c] += na.low * blr[c];
                mid[c] += na.high * blr[c] + na.low * bhr[c];
                hh[c] += na.high * bhr[c];
              }
            }
            for (size_t c = 0; c < w; ++c) crow[c] += ll[c] + mid[c] * 16 + hh[c] * 256;
          }
        }
      }
    }
  }
  return res;
}

}  // namespace fastprefill
