// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <random>

#include "fastprefill/checks.hpp"
#include "fastprefill/mpu.hpp"

using namespace fastprefill;

namespace {

AccTile triple_loop(const QTensor& a, const QTensor& b) {
  AccTile c{a.rows(), b.cols(), std::vector<int32_t>(a.rows() * b.cols(), 0), a.scale() * b.scale()};
  for (size_t i = 0; i < a.rows(); ++i)
    for (size_t j = 0; j < b.cols(); ++j)
      for (size_t t = 0; t < a.cols(); ++t) c.data[i * b.cols() + j] += int32_t{a.at(i, t)} * b.at(t, j);
  return c;
}

}  // namespace

TEST_CASE("bitplane_mul examples") {
  CHECK(bitplane_mul(0, 77) == 0);
  CHECK(bitplane_mul(-128, 1) == -128);
  CHECK(bitplane_mul(-128, -128) == 16384);
  CHECK(bitplane_mul(127, -128) == -16256);
}

TEST_CASE("nibble_mul examples") {
  CHECK(nibble_mul(-3, 5) == -15);
  CHECK(nibble_mul(16, 16) == 256);
  CHECK(nibble_mul(-128, -128) == 16384);
}

TEST_CASE("both decompositions are exact on every INT8 pair") {
  size_t bad = 0;
  for (int a = -128; a < 128; ++a)
    for (int b = -128; b < 128; ++b) {
      const auto x = static_cast<int8_t>(a), y = static_cast<int8_t>(b);
      bad += bitplane_mul(x, y) != a * b;
      bad += nibble_mul(x, y) != a * b;
    }
  CHECK(bad == 0);
}

TEST_CASE("tile_matmul: identity, zero and random tiles") {
  const MpuConfig cfg;
  std::mt19937_64 rng(8);
  const QTensor b = checks::random_qtensor(rng, 32, 32, 0.1);
  std::vector<int8_t> eye(32 * 32, 0);
  for (size_t i = 0; i < 32; ++i) eye[i * 32 + i] = 1;
  const QTensor id(32, 32, eye, 1.0);
  for (MulPath p : {MulPath::dsp, MulPath::lut}) {
    const AccTile c = tile_matmul(id, b, p, cfg);
    for (size_t i = 0; i < 32 * 32; ++i) CHECK(c.data[i] == b.data()[i]);
    const AccTile z = tile_matmul(QTensor(32, 32, 1.0), b, p, cfg);
    CHECK(std::all_of(z.data.begin(), z.data.end(), [](int32_t v) { return v == 0; }));
  }
  const QTensor a = checks::random_qtensor(rng, 32, 64, 0.1);
  const QTensor bb = checks::random_qtensor(rng, 64, 32, 0.1);
  const AccTile ref = triple_loop(a, bb);
  CHECK(tile_matmul(a, bb, MulPath::dsp, cfg) == ref);
  CHECK(tile_matmul(a, bb, MulPath::lut, cfg) == ref);
  CHECK_THROWS_AS(tile_matmul(checks::random_qtensor(rng, 33, 4), checks::random_qtensor(rng, 4, 4), MulPath::dsp, cfg),
                  Error);
}

TEST_CASE("gemm cycles: one 32x32x32 pass") {
  const MpuConfig cfg;  // 6 + 6 arrays of 32x32
  CHECK(gemm_cycles(32, 32, 32, cfg) == 95);
  CHECK(pass_cycles(32, 32) == 95);
  // 4 x 4 output tiles x 4 k-chunks = 64 passes over 12 arrays: 6 passes on the busiest.
  CHECK(gemm_cycles(128, 128, 128, cfg) == 6 * 95);
  // A k remainder adds a shorter pass per output tile.
  CHECK(gemm_cycles(32, 40, 32, cfg) == 95);
  CHECK(gemm_cycles(0, 8, 8, cfg) == 0);
}

TEST_CASE("gemm: 128^3 values vs double product") {
  std::mt19937_64 rng(9);
  const QTensor a = checks::random_qtensor(rng, 128, 128, 0.02);
  const QTensor b = checks::random_qtensor(rng, 128, 128, 0.03);
  const GemmResult g = gemm(a, b, MpuConfig{});
  CHECK(g.macs == 128ull * 128 * 128);
  for (size_t i = 0; i < 128; i += 7)
    for (size_t j = 0; j < 128; j += 5) {
      double ref = 0.0;
      for (size_t t = 0; t < 128; ++t) ref += (a.at(i, t) * a.scale()) * (b.at(t, j) * b.scale());
      CHECK(std::fabs(g.tile.at(i, j) * g.tile.scale - ref) <= a.scale() * b.scale());
    }
}

TEST_CASE("gemm: array mix changes cycles, never values") {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    const size_t m = 1 + rng() % 200, k = 1 + rng() % 200, n = 1 + rng() % 200;
    const QTensor a = checks::random_qtensor(rng, m, k);
    const QTensor b = checks::random_qtensor(rng, k, n);
    const GemmResult full = gemm(a, b, MpuConfig{6, 6, 32, 32});
    const GemmResult dsp = gemm(a, b, MpuConfig{6, 0, 32, 32});
    const GemmResult lut = gemm(a, b, MpuConfig{0, 6, 32, 32});
    CHECK(full.tile == triple_loop(a, b));
    CHECK(dsp.tile == full.tile);
    CHECK(lut.tile == full.tile);
    CHECK(dsp.cycles >= full.cycles);
    CHECK(dsp.cycles == lut.cycles);
  }
}

TEST_CASE("gemm cycles are monotone in the array count") {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 200; ++t) {
    const size_t m = 1 + rng() % 256, k = 1 + rng() % 256, n = 1 + rng() % 256;
    uint64_t prev = UINT64_MAX;
    for (size_t arrays = 1; arrays <= 16; ++arrays) {
      const uint64_t c = gemm_cycles(m, k, n, MpuConfig{arrays, 0, 32, 32});
      CHECK(c <= prev);
      prev = c;
    }
  }
}

TEST_CASE("gemm preconditions") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(gemm(checks::random_qtensor(rng, 2, 3), checks::random_qtensor(rng, 4, 2), MpuConfig{}), Error);
  CHECK_THROWS_AS(gemm(QTensor(1, kMaxReduction + 1, 1.0), QTensor(kMaxReduction + 1, 1, 1.0), MpuConfig{}), Error);
  CHECK_THROWS_AS(MpuConfig({0, 0, 32, 32}).validate(), Error);
  CHECK_THROWS_AS(MpuConfig({1, 0, 24, 32}).validate(), Error);
}
