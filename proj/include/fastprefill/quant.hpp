// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fastprefill/common.hpp"

namespace fastprefill {

struct RealMatrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  RealMatrix(size_t r, size_t c, std::vector<double> d);

  double& at(size_t r, size_t c) { return data[r * cols + c]; }
  double at(size_t r, size_t c) const { return data[r * cols + c]; }
};

// Symmetric per-tensor INT8 tensor: value ~= data * scale.
class QTensor {
 public:
  QTensor() = default;
  QTensor(size_t rows, size_t cols, std::vector<int8_t> data, double scale);
  // Zero-filled tensor of the given shape.
  QTensor(size_t rows, size_t cols, double scale);

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  double scale() const { return scale_; }
  std::span<const int8_t> data() const { return data_; }
  std::span<int8_t> data() { return data_; }

  int8_t at(size_t r, size_t c) const { return data_[r * cols_ + c]; }
  std::span<const int8_t> row(size_t r) const { return {data_.data() + r * cols_, cols_}; }

  // Rows [first, first + count); rows past the end are zero-filled.
  QTensor row_block(size_t first, size_t count) const;
  // Columns [first, first + count).
  QTensor col_slice(size_t first, size_t count) const;
  QTensor transposed() const;

  friend bool operator==(const QTensor&, const QTensor&) = default;

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<int8_t> data_;
  double scale_ = 1.0;
};

// INT32 accumulator grid; value ~= data * scale.
struct AccTile {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<int32_t> data;
  double scale = 1.0;

  int32_t at(size_t r, size_t c) const { return data[r * cols + c]; }
  friend bool operator==(const AccTile&, const AccTile&) = default;
};

// Signed Q(32-F).F vector, F = 16 unless stated.
struct FixedVec {
  std::vector<int32_t> data;
  int frac_bits = kFracBits;

  size_t size() const { return data.size(); }
  double real(size_t i) const { return static_cast<double>(data[i]) / static_cast<double>(int64_t{1} << frac_bits); }
  friend bool operator==(const FixedVec&, const FixedVec&) = default;
};

// Row-major Q16.16 matrix (residual stream, normalized activations).
struct FixedMatrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<int32_t> data;

  FixedMatrix() = default;
  FixedMatrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::span<int32_t> row(size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const int32_t> row(size_t r) const { return {data.data() + r * cols, cols}; }
  friend bool operator==(const FixedMatrix&, const FixedMatrix&) = default;
};

QTensor quantize(const RealMatrix& x);
RealMatrix dequantize(const QTensor& q);

// Per-tensor INT8 quantization of a fixed-point or INT32 grid, computed with
// exact integer rounding (half to even).
QTensor quantize_fixed(const FixedMatrix& x);
QTensor requantize(const AccTile& acc);

// acc * scale expressed in Q16.16, saturated to the int32 range.
FixedMatrix acc_to_fixed(const AccTile& acc);

// Piecewise-linear exp over [-16, 0]: 256 segments, Q16.16 in and out.
// Arguments below -16 return 0; positive arguments are clamped to 0.
int64_t exp_lut(int64_t x_q16);

// round(num * 2^frac_bits / den) through a 256-entry reciprocal table and one
// Newton step. den > 0.
int64_t fixed_div(int64_t num, int64_t den, int frac_bits);

// Q16.16 logit of an integer score: nearbyint(score * scale * 2^16).
int64_t logit_q16(int64_t score, double scale);

FixedVec softmax_fixed(std::span<const int32_t> scores, double scale);
int32_t silu_fixed(int32_t x_q16);
std::vector<int32_t> rmsnorm_fixed(std::span<const int32_t> x, std::span<const int32_t> w);

}  // namespace fastprefill
