// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "fastprefill/quant.hpp"

using namespace fastprefill;

TEST_CASE("quantize: all-zero input keeps unit scale") {
  const QTensor q = quantize(RealMatrix(1, 2, {0.0, 0.0}));
  CHECK(q.scale() == 1.0);
  CHECK(q.at(0, 0) == 0);
  CHECK(q.at(0, 1) == 0);
}

TEST_CASE("quantize: 63.5 rounds half to even") {
  const QTensor q = quantize(RealMatrix(1, 2, {1.0, -2.0}));
  CHECK(q.scale() == doctest::Approx(2.0 / 127.0));
  CHECK(q.at(0, 0) == 64);
  CHECK(q.at(0, 1) == -127);
}

TEST_CASE("quantize/dequantize round trip within half a step") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int t = 0; t < 20; ++t) {
    RealMatrix x(7, 9);
    for (double& v : x.data) v = u(rng);
    const QTensor q = quantize(x);
    const RealMatrix back = dequantize(q);
    for (size_t i = 0; i < x.data.size(); ++i) CHECK(std::fabs(back.data[i] - x.data[i]) <= q.scale() / 2 + 1e-12);
  }
}

TEST_CASE("dequantize definition") {
  CHECK(dequantize(QTensor(1, 1, {127}, 0.5)).data[0] == 63.5);
  CHECK(dequantize(QTensor(1, 1, {0}, 3.25)).data[0] == 0.0);
}

TEST_CASE("quantize rejects non-finite input") {
  CHECK_THROWS_AS(quantize(RealMatrix(1, 1, {NAN})), Error);
  CHECK_THROWS_AS(quantize(RealMatrix(1, 1, {INFINITY})), Error);
}

TEST_CASE("quantize_fixed uses exact integer rounding") {
  FixedMatrix x(1, 3);
  x.data = {65536, -131072, 32768};  // 1, -2, 0.5
  const QTensor q = quantize_fixed(x);
  CHECK(q.at(0, 0) == 64);  // 63.5 -> 64
  CHECK(q.at(0, 1) == -127);
  CHECK(q.at(0, 2) == 32);  // 31.75 -> 32
  CHECK(q.scale() == doctest::Approx(2.0 / 127.0));
}

TEST_CASE("row_block zero-fills past the end") {
  const QTensor t(2, 2, {1, 2, 3, 4}, 0.25);
  const QTensor b = t.row_block(1, 3);
  CHECK(b.rows() == 3);
  CHECK(b.at(0, 0) == 3);
  CHECK(b.at(1, 1) == 0);
  CHECK(b.scale() == 0.25);
  CHECK(t.transposed().at(0, 1) == 3);
}

TEST_CASE("exp_lut: endpoints and accuracy") {
  CHECK(exp_lut(0) == kOne);
  CHECK(exp_lut(12345) == kOne);
  CHECK(exp_lut(-17 * kOne) == 0);
  // Chord error of linear interpolation: h^2 / 8 * max e^x with h = 1/16.
  for (int64_t x = -16 * kOne; x <= 0; x += 977) {
    const double ref = std::exp(static_cast<double>(x) / 65536.0);
    CHECK(std::fabs(static_cast<double>(exp_lut(x)) / 65536.0 - ref) <= std::ldexp(1.0, -11) + std::ldexp(1.0, -16));
  }
}

TEST_CASE("fixed_div matches rounded division") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 2000; ++t) {
    const int64_t den = 1 + static_cast<int64_t>(rng() % (int64_t{1} << 40));
    const int64_t num = static_cast<int64_t>(rng() % (int64_t{1} << 40));
    const double ref = static_cast<double>(num) * 65536.0 / static_cast<double>(den);
    const double got = static_cast<double>(fixed_div(num, den, 16));
    // 8-bit seed, one Newton step: relative error ~ (2^-9)^2.
    CHECK(std::fabs(got - ref) <= 1.0 + ref * std::ldexp(1.0, -17));
  }
  CHECK_THROWS_AS(fixed_div(1, 0, 16), Error);
}

TEST_CASE("softmax_fixed: symmetric pair") {
  const std::vector<int32_t> s{0, 0};
  const FixedVec p = softmax_fixed(s, 1.0 / 65536.0);
  CHECK(p.data[0] == 32768);
  CHECK(p.data[1] == 32768);
}

TEST_CASE("softmax_fixed: saturation") {
  const std::vector<int32_t> s{20 * 65536, 0};
  const FixedVec p = softmax_fixed(s, 1.0 / 65536.0);
  CHECK(p.data[0] == 65536);
  CHECK(p.data[1] == 0);
}

TEST_CASE("softmax_fixed: random rows vs double softmax") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int t = 0; t < 200; ++t) {
    const size_t n = 1 + rng() % 300;
    std::vector<int32_t> s(n);
    for (auto& v : s) v = static_cast<int32_t>(std::llround(g(rng) * 65536.0));
    const FixedVec p = softmax_fixed(s, 1.0 / 65536.0);
    double mx = -1e300, sum = 0.0;
    for (int32_t v : s) mx = std::max(mx, v / 65536.0);
    std::vector<double> ref(n);
    for (size_t i = 0; i < n; ++i) sum += ref[i] = std::exp(s[i] / 65536.0 - mx);
    int64_t total = 0;
    size_t arg_fixed = 0, arg_ref = 0;
    for (size_t i = 0; i < n; ++i) {
      ref[i] /= sum;
      CHECK(p.data[i] >= 0);
      CHECK(std::fabs(p.real(i) - ref[i]) <= std::ldexp(1.0, -8));
      total += p.data[i];
      if (p.data[i] > p.data[arg_fixed]) arg_fixed = i;
      if (ref[i] > ref[arg_ref]) arg_ref = i;
    }
    const int slack_bits = static_cast<int>(std::ceil(std::log2(static_cast<double>(n))));
    CHECK(std::llabs(total - 65536) <= (int64_t{1} << slack_bits));
    std::vector<double> sorted = ref;
    std::sort(sorted.rbegin(), sorted.rend());
    if (n == 1 || sorted[0] - sorted[1] > std::ldexp(1.0, -7)) CHECK(arg_fixed == arg_ref);
  }
}

TEST_CASE("silu_fixed") {
  CHECK(silu_fixed(0) == 0);
  CHECK(std::fabs(silu_fixed(16 * 65536) / 65536.0 - 16.0) < 1e-3);
  for (int i = -32; i < 32; ++i) {
    const double x = i * 0.25;
    const double ref = x / (1.0 + std::exp(-x));
    CHECK(std::fabs(silu_fixed(static_cast<int32_t>(x * 65536)) / 65536.0 - ref) <= std::ldexp(1.0, -8));
  }
}

TEST_CASE("rmsnorm_fixed") {
  const std::vector<int32_t> one{65536, 65536};
  const auto y = rmsnorm_fixed(std::vector<int32_t>{3 * 65536, 3 * 65536}, one);
  CHECK(std::fabs(y[0] / 65536.0 - 1.0) < 1e-4);
  CHECK(std::fabs(y[1] / 65536.0 - 1.0) < 1e-4);
  const auto z = rmsnorm_fixed(std::vector<int32_t>{0, 0}, one);
  CHECK(z[0] == 0);
  CHECK(z[1] == 0);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int t = 0; t < 50; ++t) {
    const size_t n = 8 + rng() % 120;
    std::vector<int32_t> x(n), w(n);
    std::vector<double> xr(n), wr(n);
    double ss = 0.0;
    for (size_t i = 0; i < n; ++i) {
      x[i] = static_cast<int32_t>(std::llround(g(rng) * 65536));
      w[i] = static_cast<int32_t>(std::llround((0.5 + std::fabs(g(rng))) * 65536));
      xr[i] = x[i] / 65536.0;
      wr[i] = w[i] / 65536.0;
      ss += xr[i] * xr[i];
    }
    const double rms = std::sqrt(ss / n + std::ldexp(1.0, -20));
    const auto out = rmsnorm_fixed(x, w);
    double err = 0.0, ref_norm = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double ref = xr[i] / rms * wr[i];
      err = std::max(err, std::fabs(out[i] / 65536.0 - ref));
      ref_norm = std::max(ref_norm, std::fabs(ref));
    }
    CHECK(err <= std::ldexp(1.0, -6) * ref_norm);
  }
  CHECK_THROWS_AS(rmsnorm_fixed(std::vector<int32_t>{1}, std::vector<int32_t>{1, 2}), Error);
}
