// SPDX-License-Identifier: Apache-2.0

#include "fastprefill/quant.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdlib>

namespace fastprefill {

namespace {

// exp(-j/16) in Q16.16 for j = 0..256 (256 segments over [-16, 0]).
const std::array<int64_t, 257>& exp_knots() {
  static const std::array<int64_t, 257> table = [] {
    std::array<int64_t, 257> t{};
    for (int j = 0; j <= 256; ++j) t[j] = std::llround(std::exp(-j / 16.0) * 65536.0);
    return t;
  }();
  return table;
}

// 2^30 / m for m at the midpoint of [1 + i/256, 1 + (i+1)/256).
const std::array<int64_t, 256>& recip_seeds() {
  static const std::array<int64_t, 256> table = [] {
    std::array<int64_t, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = std::llround(1073741824.0 / (1.0 + (i + 0.5) / 256.0));
    return t;
  }();
  return table;
}

uint64_t isqrt_u64(uint64_t v) {
  auto r = static_cast<uint64_t>(std::sqrt(static_cast<long double>(v)));
  while (static_cast<unsigned __int128>(r) * r > v) --r;
  while (static_cast<unsigned __int128>(r + 1) * (r + 1) <= v) ++r;
  return r;
}

int8_t clamp_i8(int64_t v) { return static_cast<int8_t>(std::clamp<int64_t>(v, -128, 127)); }

}  // namespace

RealMatrix::RealMatrix(size_t r, size_t c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
  require(data.size() == rows * cols, "RealMatrix: data length does not match shape");
}

QTensor::QTensor(size_t rows, size_t cols, std::vector<int8_t> data, double scale)
    : rows_(rows), cols_(cols), data_(std::move(data)), scale_(scale) {
  require(data_.size() == rows_ * cols_, "QTensor: data length does not match shape");
  require(std::isfinite(scale_) && scale_ > 0.0, "QTensor: scale must be positive and finite");
}

QTensor::QTensor(size_t rows, size_t cols, double scale)
    : QTensor(rows, cols, std::vector<int8_t>(rows * cols, 0), scale) {}

QTensor QTensor::row_block(size_t first, size_t count) const {
  std::vector<int8_t> out(count * cols_, 0);
  for (size_t r = 0; r < count && first + r < rows_; ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>((first + r) * cols_), cols_,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols_));
  }
  return QTensor(count, cols_, std::move(out), scale_);
}

QTensor QTensor::col_slice(size_t first, size_t count) const {
  require(first + count <= cols_, "QTensor::col_slice: range out of bounds");
  std::vector<int8_t> out(rows_ * count);
  for (size_t r = 0; r < rows_; ++r)
    for (size_t c = 0; c < count; ++c) out[r * count + c] = data_[r * cols_ + first + c];
  return QTensor(rows_, count, std::move(out), scale_);
}

QTensor QTensor::transposed() const {
  std::vector<int8_t> out(rows_ * cols_);
  for (size_t r = 0; r < rows_; ++r)
    for (size_t c = 0; c < cols_; ++c) out[c * rows_ + r] = data_[r * cols_ + c];
  return QTensor(cols_, rows_, std::move(out), scale_);
}

QTensor quantize(const RealMatrix& x) {
  require(!x.data.empty(), "quantize: empty input");
  double maxabs = 0.0;
  for (double v : x.data) {
    require(std::isfinite(v), "quantize: non-finite input value");
    maxabs = std::max(maxabs, std::fabs(v));
  }
  std::vector<int8_t> q(x.data.size(), 0);
  if (maxabs == 0.0) return QTensor(x.rows, x.cols, std::move(q), 1.0);
  // x * 127 / max keeps exact halves exact (x / (max / 127) does not).
  for (size_t i = 0; i < q.size(); ++i) q[i] = clamp_i8(static_cast<int64_t>(std::nearbyint(x.data[i] * 127.0 / maxabs)));
  return QTensor(x.rows, x.cols, std::move(q), maxabs / 127.0);
}

RealMatrix dequantize(const QTensor& q) {
  RealMatrix out(q.rows(), q.cols());
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<double>(q.data()[i]) * q.scale();
  return out;
}

namespace {

template <typename T>
QTensor quantize_grid(size_t rows, size_t cols, std::span<const T> grid, double unit) {
  int64_t maxabs = 0;
  for (T v : grid) maxabs = std::max<int64_t>(maxabs, std::llabs(static_cast<int64_t>(v)));
  std::vector<int8_t> q(grid.size(), 0);
  if (maxabs == 0) return QTensor(rows, cols, std::move(q), 1.0);
  for (size_t i = 0; i < q.size(); ++i)
    q[i] = clamp_i8(round_half_even_div(static_cast<__int128>(grid[i]) * 127, maxabs));
  return QTensor(rows, cols, std::move(q), static_cast<double>(maxabs) * unit / 127.0);
}

}  // namespace

QTensor quantize_fixed(const FixedMatrix& x) {
  require(!x.data.empty(), "quantize_fixed: empty input");
  return quantize_grid<int32_t>(x.rows, x.cols, x.data, 1.0 / 65536.0);
}

QTensor requantize(const AccTile& acc) {
  require(!acc.data.empty(), "requantize: empty input");
  return quantize_grid<int32_t>(acc.rows, acc.cols, acc.data, acc.scale);
}

FixedMatrix acc_to_fixed(const AccTile& acc) {
  FixedMatrix out(acc.rows, acc.cols);
  const double mult = acc.scale * 65536.0;
  for (size_t i = 0; i < acc.data.size(); ++i) {
    const double v = std::nearbyint(static_cast<double>(acc.data[i]) * mult);
    out.data[i] = saturate_i32(static_cast<int64_t>(std::clamp(v, -2147483648.0, 2147483647.0)));
  }
  return out;
}

int64_t exp_lut(int64_t x_q16) {
  if (x_q16 >= 0) return kOne;
  const int64_t u = -x_q16;
  if (u > 16 * kOne) return 0;
  const auto& t = exp_knots();
  const int64_t j = u >> 12;
  const int64_t f = u & 4095;
  if (j >= 256) return t[256];
  return t[j] - (((t[j] - t[j + 1]) * f + 2048) >> 12);
}

int64_t fixed_div(int64_t num, int64_t den, int frac_bits) {
  require(den > 0, "fixed_div: denominator must be positive");
  const int n = 63 - std::countl_zero(static_cast<uint64_t>(den));
  // Normalize den to mant in [2^30, 2^31), i.e. a Q1.30 value in [1, 2).
  const int64_t mant = n >= 30 ? (den >> (n - 30)) : (den << (30 - n));
  const int64_t r0 = recip_seeds()[static_cast<size_t>((mant >> 22) & 255)];
  const int64_t prod = static_cast<int64_t>((static_cast<__int128>(mant) * r0) >> 30);
  const int64_t r1 = static_cast<int64_t>((static_cast<__int128>(r0) * ((int64_t{2} << 30) - prod)) >> 30);
  // 1/den ~= r1 * 2^(-30-n)
  return round_shift(static_cast<__int128>(num) * r1, 30 + n - frac_bits);
}

int64_t logit_q16(int64_t score, double scale) {
  const double v = std::nearbyint(static_cast<double>(score) * scale * 65536.0);
  constexpr double kLimit = 9.0e18;
  return static_cast<int64_t>(std::clamp(v, -kLimit, kLimit));
}

FixedVec softmax_fixed(std::span<const int32_t> scores, double scale) {
  require(!scores.empty(), "softmax_fixed: empty row");
  const int32_t m = *std::max_element(scores.begin(), scores.end());
  std::vector<int64_t> e(scores.size());
  int64_t sum = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    e[i] = exp_lut(logit_q16(static_cast<int64_t>(scores[i]) - m, scale));
    sum += e[i];
  }
  FixedVec out;
  out.data.resize(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) out.data[i] = static_cast<int32_t>(fixed_div(e[i], sum, kFracBits));
  return out;
}

int32_t silu_fixed(int32_t x_q16) {
  const int64_t x = x_q16;
  int64_t sig;
  if (x >= 0) {
    const int64_t e = exp_lut(-x);
    sig = fixed_div(kOne, kOne + e, kFracBits);
  } else {
    const int64_t e = exp_lut(x);
    sig = fixed_div(e, kOne + e, kFracBits);
  }
  return saturate_i32(round_shift(static_cast<__int128>(x) * sig, kFracBits));
}

std::vector<int32_t> rmsnorm_fixed(std::span<const int32_t> x, std::span<const int32_t> w) {
  require(!x.empty(), "rmsnorm_fixed: empty row");
  require(x.size() == w.size(), "rmsnorm_fixed: weight length mismatch");
  __int128 sumsq = 0;
  for (int32_t v : x) sumsq += static_cast<__int128>(v) * v;
  // mean(x^2) in Q32.32 plus eps = 2^-20.
  const auto mean = static_cast<uint64_t>(round_half_even_div(sumsq, static_cast<__int128>(x.size())));
  const uint64_t rms = isqrt_u64(mean + (uint64_t{1} << 12));  // Q16.16
  std::vector<int32_t> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const __int128 num = static_cast<__int128>(x[i]) * w[i];  // Q32.32
    out[i] = saturate_i32(round_half_even_div(num, static_cast<__int128>(rms)));
  }
  return out;
}

}  // namespace fastprefill
