// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fastprefill {

// Raised when an input violates an operation's contract.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

// Q16.16 is the fixed-point format used for probabilities, logits and the
// residual stream.
inline constexpr int kFracBits = 16;
inline constexpr int64_t kOne = int64_t{1} << kFracBits;

// round(x / 2^shift), ties away from zero.
inline int64_t round_shift(__int128 x, int shift) {
  if (shift <= 0) return static_cast<int64_t>(x << -shift);
  const __int128 half = __int128{1} << (shift - 1);
  if (x >= 0) return static_cast<int64_t>((x + half) >> shift);
  return -static_cast<int64_t>((-x + half) >> shift);
}

// round(num / den) with ties to even; den > 0.
inline int64_t round_half_even_div(__int128 num, __int128 den) {
  const bool neg = num < 0;
  if (neg) num = -num;
  __int128 q = num / den;
  const __int128 r = num % den;
  if (2 * r > den || (2 * r == den && (q & 1) != 0)) ++q;
  return static_cast<int64_t>(neg ? -q : q);
}

inline int32_t saturate_i32(int64_t v) {
  if (v > INT32_MAX) return INT32_MAX;
  if (v < INT32_MIN) return INT32_MIN;
  return static_cast<int32_t>(v);
}

}  // namespace fastprefill
