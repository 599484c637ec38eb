// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "mambamoe/ssm.hpp"
#include "test_util.hpp"

using namespace mambamoe;
using namespace testutil;

namespace {

// y_t = sum_{s<=t} C A^{t-s} B f_s + f_t, evaluated from explicit matrix powers.
std::vector<double> unrolled(const Tensor<double>& a, const Tensor<double>& b, const Tensor<double>& c,
                             const Tensor<double>& f) {
  const std::size_t d = a.dim(0), e = b.dim(1), T = f.dim(0);
  std::vector<std::vector<double>> pow{std::vector<double>(d * d, 0.0)};
  for (std::size_t i = 0; i < d; ++i) pow[0][i * d + i] = 1.0;
  for (std::size_t k = 1; k < T; ++k) {
    std::vector<double> m(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t q = 0; q < d; ++q) m[i * d + j] += a[i * d + q] * pow[k - 1][q * d + j];
    pow.push_back(std::move(m));
  }
  std::vector<double> y(T * e, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t o = 0; o < e; ++o) y[t * e + o] = f[t * e + o];
    for (std::size_t s = 0; s <= t; ++s) {
      std::vector<double> bf(d, 0.0), h(d, 0.0);
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < e; ++j) bf[i] += b[i * e + j] * f[s * e + j];
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) h[i] += pow[t - s][i * d + j] * bf[j];
      for (std::size_t o = 0; o < e; ++o)
        for (std::size_t i = 0; i < d; ++i) y[t * e + o] += c[o * d + i] * h[i];
    }
  }
  return y;
}

}  // namespace

TEST(Scan, MatchesUnrolledRecurrence200Cases) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = pick(rng, 1, 8), e = pick(rng, 1, 8), T = pick(rng, 1, 64);
    auto p = init_ssm<double>("s", d, e, rng);
    auto f = randn({T, e}, rng);
    Tape<double> tape;
    Graph<double> g(tape, false);
    auto y = ssm_recurrence(bind_ssm(g, p), tape.constant(f)).value();
    const auto ref = unrolled(p.a_bar.value, p.b_bar.value, p.c_out.value, f);
    double worst = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(ref[i] - y[i]));
    ASSERT_LT(worst, 1e-6) << "trial " << trial << " D=" << d << " E=" << e << " T=" << T;
  }
}

TEST(Scan, OrdersOnTwoByTwoGrid) {
  // grid a b / c d  ->  indices 0 1 / 2 3
  EXPECT_EQ(scan_order(ScanDirection::TL_BR, 2, 2), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(scan_order(ScanDirection::BR_TL, 2, 2), (std::vector<std::size_t>{3, 2, 1, 0}));
  EXPECT_EQ(scan_order(ScanDirection::TR_BL, 2, 2), (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_EQ(scan_order(ScanDirection::BL_TR, 2, 2), (std::vector<std::size_t>{2, 0, 3, 1}));
  EXPECT_FALSE(is_vertical(ScanDirection::TL_BR));
  EXPECT_TRUE(is_vertical(ScanDirection::BL_TR));
  EXPECT_EQ(direction_name(ScanDirection::TR_BL), "TR_BL");
}

TEST(Scan, OrdersArePermutationsAndReversalsPair) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = pick(rng, 1, 9), w = pick(rng, 1, 9);
    for (auto dir : kSpatialDirections) {
      auto o = scan_order(dir, h, w);
      auto sorted = o;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < sorted.size(); ++i) ASSERT_EQ(sorted[i], i);
    }
    auto fwd = scan_order(ScanDirection::TR_BL, h, w), bwd = scan_order(ScanDirection::BL_TR, h, w);
    std::reverse(bwd.begin(), bwd.end());
    EXPECT_EQ(fwd, bwd);
  }
}

TEST(Scan, FlattenRoundTripIsBitExact) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t e = pick(rng, 1, 5), h = pick(rng, 1, 7), w = pick(rng, 1, 7);
    auto x = randn({e, h, w}, rng);
    for (auto dir : kSpatialDirections) {
      Tape<double> t;
      auto seq = flatten_spatial(t.constant(x), dir);
      ASSERT_EQ(seq.shape(), (Shape{h * w, e}));
      auto back = unflatten_spatial(seq, dir, h, w).value();
      ASSERT_EQ(back, x) << direction_name(dir);
    }
  }
}

TEST(Scan, SpectralExpertMatchesPerPixelScans) {
  std::mt19937_64 rng(21);
  const std::size_t bands = 5, h = 2, w = 3;
  auto fwd = init_ssm<double>("f", 4, 1, rng), bwd = init_ssm<double>("b", 4, 1, rng);
  auto x = randn({bands, h, w}, rng);
  Tape<double> t;
  Graph<double> g(t, false);
  auto y = spectral_bidirectional(g, fwd, bwd, t.constant(x)).value();
  for (std::size_t p = 0; p < h * w; ++p) {
    Tensor<double> f(Shape{bands, 1}), r(Shape{bands, 1});
    for (std::size_t q = 0; q < bands; ++q) {
      f[q] = x[q * h * w + p];
      r[q] = x[(bands - 1 - q) * h * w + p];
    }
    const auto yf = unrolled(fwd.a_bar.value, fwd.b_bar.value, fwd.c_out.value, f);
    const auto yb = unrolled(bwd.a_bar.value, bwd.b_bar.value, bwd.c_out.value, r);
    for (std::size_t q = 0; q < bands; ++q) EXPECT_NEAR(y[q * h * w + p], yf[q] + yb[bands - 1 - q], 1e-12);
  }
}

TEST(Scan, InitialTransitionIsStable) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    auto p = init_ssm<double>("s", 8, 4, rng);
    EXPECT_LT(spectral_radius_estimate(p.a_bar.value), 1.0);
  }
  Tensor<double> diag(Shape{2, 2}, {0.5, 0.0, 0.0, -0.8});
  EXPECT_NEAR(spectral_radius_estimate(diag), 0.8, 1e-2);  // growth-rate estimate, slow convergence
}

TEST(Scan, KernelBatchEqualsSeparateScans) {
  std::mt19937_64 rng(4);
  auto p = init_ssm<double>("s", 3, 2, rng);
  const std::size_t T = 7, n = 3, e = 2;
  auto seq = randn({T, n * e}, rng);
  auto batched = scan_kernel(p.a_bar.value, p.b_bar.value, p.c_out.value, seq, n);
  for (std::size_t s = 0; s < n; ++s) {
    Tensor<double> one(Shape{T, e});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < e; ++j) one[t * e + j] = seq[(t * n + s) * e + j];
    auto single = scan_kernel(p.a_bar.value, p.b_bar.value, p.c_out.value, one, 1);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < e; ++j) EXPECT_EQ(single.y[t * e + j], batched.y[(t * n + s) * e + j]);
  }
}

TEST(Scan, ShapeErrors) {
  std::mt19937_64 rng(4);
  auto p = init_ssm<double>("s", 3, 2, rng);
  Tape<double> t;
  Graph<double> g(t, false);
  EXPECT_THROW(ssm_recurrence(bind_ssm(g, p), t.constant(Tensor<double>(Shape{4, 3}))), ShapeError);
}
