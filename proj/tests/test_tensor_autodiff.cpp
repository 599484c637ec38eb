// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mambamoe/grad_check.hpp"
#include "test_util.hpp"

using namespace mambamoe;
using namespace testutil;

namespace {

void expect_grad_ok(const GradCheckReport& r, const std::string& what) {
  EXPECT_LT(r.max_rel_error, 1e-4) << what;
  for (const auto& e : r.entries)
    EXPECT_LT(e.max_rel_error, 1e-4) << what << " " << e.name << " elem " << e.worst_index << " analytic "
                                     << e.worst_analytic << " numeric " << e.worst_numeric;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.shape().str(), "[2,3,4]");
  t.at(1, 2, 3) = 7.0f;
  EXPECT_EQ(t[23], 7.0f);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_THROW(t.reshaped(Shape{5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped(Shape{6, 4}).shape(), (Shape{6, 4}));
  EXPECT_THROW(Shape({2, 0}), ShapeError);
}

TEST(Tape, AddMulGradientsByHand) {
  Tape<double> t;
  auto a = t.variable(Tensor<double>(Shape{2}, {2.0, 3.0}));
  auto b = t.variable(Tensor<double>(Shape{2}, {5.0, -1.0}));
  auto loss = ops::sum(ops::mul(ops::add(a, b), a));  // sum((a+b)*a)
  t.backward(loss);
  // d/da = 2a + b, d/db = a
  EXPECT_EQ(t.grad(a).vec(), (std::vector<double>{9.0, 5.0}));
  EXPECT_EQ(t.grad(b).vec(), (std::vector<double>{2.0, 3.0}));
}

TEST(Tape, SecondBackwardIsAnError) {
  Tape<double> t;
  auto a = t.variable(Tensor<double>(Shape{1}, 1.0));
  auto l = ops::sum(a);
  t.backward(l);
  EXPECT_THROW(t.backward(l), TapeError);
}

TEST(Tape, NonScalarLossIsAnError) {
  Tape<double> t;
  auto a = t.variable(Tensor<double>(Shape{2}, 1.0));
  EXPECT_THROW(t.backward(a), TapeError);
}

TEST(Tape, ParameterMutatedAfterRecordingIsAnError) {
  Parameter<double> p("p", Tensor<double>(Shape{2}, 1.0));
  Tape<double> t;
  auto l = ops::sum(ops::mul(t.param(p), t.param(p)));
  p.value[0] = 2.0;
  p.mark_updated();
  EXPECT_THROW(t.backward(l), TapeError);
}

TEST(Tape, NonFiniteValueRaises) {
  Tape<double> t;
  auto a = t.variable(Tensor<double>(Shape{1}, 1e300));
  EXPECT_THROW(ops::mul(a, a), NumericalError);
}

TEST(Tape, GradCheckRejectsStochasticFunctions) {
  Parameter<double> p("p", Tensor<double>(Shape{1}, 1.0));
  auto fn = [&](Tape<double>& t) {
    t.mark_stochastic();
    return ops::sum(t.param(p));
  };
  EXPECT_THROW(grad_check(fn, {&p}), GradCheckError);
}

TEST(Tape, FlopConventions) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>(Shape{3, 4}, 1.0));
  auto b = t.constant(Tensor<double>(Shape{4, 5}, 1.0));
  ops::matmul(a, b);
  EXPECT_EQ(t.flops(), 2u * 3 * 4 * 5);
  const auto before = t.flops();
  ops::add(a, a);
  EXPECT_EQ(t.flops() - before, 12u);
}

TEST(Ops, Conv2dMatchesDirectLoop) {
  std::mt19937_64 rng(11);
  for (std::size_t k : {1u, 3u}) {
    const std::size_t cin = 3, cout = 2, h = 5, w = 4;
    auto x = randn({cin, h, w}, rng), wt = randn({cout, cin, k, k}, rng), b = randn({cout}, rng);
    Tape<double> t;
    auto y = ops::conv2d(t.constant(x), t.constant(wt), t.constant(b)).value();
    const long pad = static_cast<long>(k / 2);
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
          double acc = b[o];
          for (std::size_t i = 0; i < cin; ++i)
            for (std::size_t dr = 0; dr < k; ++dr)
              for (std::size_t dc = 0; dc < k; ++dc) {
                const long rr = static_cast<long>(r + dr) - pad, cc = static_cast<long>(c + dc) - pad;
                if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                acc += wt[((o * cin + i) * k + dr) * k + dc] * x.at(i, rr, cc);
              }
          EXPECT_NEAR(y.at(o, r, c), acc, 1e-12);
        }
  }
}

TEST(Ops, BilinearUpsampleHalfPixelCentres) {
  // 1x2 -> 1x4: source centres at 0.5 and 1.5 map to output samples
  // at -0.25 (clamped), 0.25, 0.75, 1.25 in source coordinates.
  Tape<double> t;
  auto x = t.constant(Tensor<double>(Shape{1, 1, 2}, {0.0, 4.0}));
  auto y = ops::bilinear_upsample(x, 1, 4).value();
  EXPECT_EQ(y.vec(), (std::vector<double>{0.0, 1.0, 3.0, 4.0}));
  auto same = ops::bilinear_upsample(x, 1, 2).value();
  EXPECT_EQ(same.vec(), (std::vector<double>{0.0, 4.0}));
  EXPECT_THROW(ops::bilinear_upsample(x, 1, 1), ShapeError);
}

TEST(Ops, LayerNormPerPixel) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>(Shape{2, 1, 1}, {1.0, 3.0}));
  auto g = t.constant(Tensor<double>(Shape{2}, {2.0, 1.0}));
  auto b = t.constant(Tensor<double>(Shape{2}, {0.5, 0.0}));
  auto y = ops::layer_norm(x, g, b, 0.0).value();
  EXPECT_DOUBLE_EQ(y[0], -2.0 + 0.5);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(Ops, AvgPoolDropsOddEdge) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>(Shape{1, 3, 3}, {1, 2, 9, 3, 4, 9, 9, 9, 9}));
  auto y = ops::avg_pool2(x).value();
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 2.5);
}

TEST(Ops, SoftmaxAndCrossEntropyByHand) {
  Tape<double> t;
  // Two pixels, three classes. Pixel 0 labeled 1, pixel 1 labeled 3 but masked out.
  auto logits = t.variable(Tensor<double>(Shape{3, 1, 2}, {2.0, 0.0, 1.0, 0.0, 1.0, 5.0}));
  LabelRaster y(1, 2, {1, 3});
  PixelMask m{1, 0};
  auto ce = ops::masked_cross_entropy(logits, y, m);
  const double z = std::exp(2.0) + std::exp(1.0) + std::exp(1.0);
  EXPECT_NEAR(ce.value()[0], -std::log(std::exp(2.0) / z), 1e-14);
  t.backward(ce);
  const auto g = t.grad(logits);
  EXPECT_NEAR(g.at(0, 0, 0), std::exp(2.0) / z - 1.0, 1e-14);
  EXPECT_NEAR(g.at(1, 0, 0), std::exp(1.0) / z, 1e-14);
  EXPECT_EQ(g.at(2, 0, 1), 0.0);

  Tape<double> t2;
  auto empty = ops::masked_cross_entropy(t2.constant(logits.value()), y, PixelMask{0, 0});
  EXPECT_EQ(empty.value()[0], 0.0);

  auto sm = ops::softmax_values(Tensor<double>(Shape{3, 1, 2}, {1, 2, 3, 4, 5, 6}), 0);
  EXPECT_NEAR(sm[0] + sm[2] + sm[4], 1.0, 1e-15);
}

TEST(Ops, ShapeMismatchThrows) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>(Shape{2, 2}));
  auto b = t.constant(Tensor<double>(Shape{4}));
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::matmul(a, t.constant(Tensor<double>(Shape{3, 1}))), ShapeError);
}

// Central-difference agreement for every primitive over random shapes.
TEST(GradientProperty, RandomShapes) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 24; ++trial) {
    const std::size_t c = pick(rng, 1, 4), h = pick(rng, 1, 5), w = pick(rng, 1, 5);
    const std::string tag = "trial " + std::to_string(trial) + " [" + std::to_string(c) + "," + std::to_string(h) +
                            "," + std::to_string(w) + "]";

    auto x = rparam("x", {c, h, w}, rng);
    auto y = rparam("y", {c, h, w}, rng);
    const std::size_t cout = pick(rng, 1, 3), k = trial % 2 ? 3 : 1;
    auto wt = rparam("w", {cout, c, k, k}, rng), b = rparam("b", {cout}, rng);
    const auto pc = randn({cout, h, w}, rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) {
      return weighted(ops::conv2d(t.param(x), t.param(wt), t.param(b)), pc);
    }, {&x, &wt, &b}), tag + " conv");

    auto gam = rparam("g", {c}, rng), bet = rparam("beta", {c}, rng);
    const auto pl = randn({c, h, w}, rng);
    if (c > 1) {
      expect_grad_ok(grad_check([&](Tape<double>& t) {
        return weighted(ops::layer_norm(t.param(x), t.param(gam), t.param(bet)), pl);
      }, {&x, &gam, &bet}), tag + " layer_norm");
    }

    const std::size_t hh = h + pick(rng, 0, 4), ww = w + pick(rng, 0, 4);
    const auto pu = randn({c, hh, ww}, rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) {
      return weighted(ops::bilinear_upsample(t.param(x), hh, ww), pu);
    }, {&x}), tag + " upsample");

    if (h >= 2 && w >= 2) {
      const auto pp = randn({c, h / 2, w / 2}, rng);
      expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::avg_pool2(t.param(x)), pp); }, {&x}),
                     tag + " avg_pool2");
    }

    const auto pg = randn({1, c}, rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::global_avg_pool(t.param(x)), pg); }, {&x}),
                   tag + " global_avg_pool");

    const std::size_t axis = trial % 3;
    expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::softmax(t.param(x), axis), pl); }, {&x}),
                   tag + " softmax");

    expect_grad_ok(grad_check([&](Tape<double>& t) {
      auto a = t.param(x), bb = t.param(y);
      return weighted(ops::sub(ops::mul(a, bb), ops::scale(ops::add(a, bb), 0.5)), pl);
    }, {&x, &y}), tag + " elementwise");

    auto m1 = rparam("m1", {h, c}, rng), m2 = rparam("m2", {c, w}, rng);
    const auto pm = randn({h, w}, rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::matmul(t.param(m1), t.param(m2)), pm); },
                              {&m1, &m2}), tag + " matmul");

    // ReLU away from its kink.
    auto r = rparam("r", {c, h, w}, rng);
    for (auto& v : r.value.vec()) v += v >= 0 ? 0.1 : -0.1;
    expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::relu(t.param(r)), pl); }, {&r}),
                   tag + " relu");

    const auto pcat = randn({2 * c, h, w}, rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) {
      auto cat = ops::concat<double>({t.param(x), t.param(y)}, 0);
      auto parts = ops::split(cat, 2, 0);
      return ops::add(weighted(ops::concat<double>({parts[1], parts[0]}, 0), pcat), weighted(parts[0], pl));
    }, {&x, &y}), tag + " concat/split");

    std::vector<std::size_t> perm(c * h * w);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    expect_grad_ok(grad_check([&](Tape<double>& t) {
      return weighted(ops::reshape(ops::gather(t.param(x), perm, Shape{c, h, w}), Shape{c, h, w}), pl);
    }, {&x}), tag + " gather");

    auto s = rparam("s", {1, 3}, rng);
    const std::size_t idx = pick(rng, 0, 2);
    expect_grad_ok(grad_check([&](Tape<double>& t) { return weighted(ops::scale_by(t.param(x), t.param(s), idx), pl); },
                              {&x, &s}), tag + " scale_by");

    const std::size_t kc = pick(rng, 2, 4);
    auto lg = rparam("logits", {kc, h, w}, rng);
    LabelRaster lab(h, w);
    PixelMask mask(h * w);
    for (std::size_t p = 0; p < h * w; ++p) {
      lab.labels[p] = static_cast<std::uint16_t>(pick(rng, 0, kc));
      mask[p] = static_cast<std::uint8_t>(pick(rng, 0, 1));
    }
    expect_grad_ok(grad_check([&](Tape<double>& t) { return ops::masked_cross_entropy(t.param(lg), lab, mask); },
                              {&lg}), tag + " cross_entropy");
  }
}

TEST(Tape, FloatAndDoubleAgree) {
  std::mt19937_64 rng(5);
  auto x = randn({3, 4, 4}, rng), w = randn({2, 3, 3, 3}, rng), b = randn({2}, rng);
  Tape<double> td;
  Tape<float> tf;
  auto yd = ops::conv2d(td.constant(x), td.constant(w), td.constant(b)).value();
  auto yf = ops::conv2d(tf.constant(x.cast<float>()), tf.constant(w.cast<float>()), tf.constant(b.cast<float>())).value();
  for (std::size_t i = 0; i < yd.numel(); ++i) EXPECT_NEAR(yd[i], yf[i], 1e-5);
}
