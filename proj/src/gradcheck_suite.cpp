// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "mambamoe/init.hpp"
#include "mambamoe/network.hpp"
#include "mambamoe/ops.hpp"

namespace mambamoe {

namespace {

using P = Parameter<double>;

struct Fixture {
  explicit Fixture(std::uint64_t seed) : rng(seed) {}

  P param(const std::string& name, Shape s, double stddev = 1.0) {
    return P(name, normal_tensor<double>(std::move(s), stddev, rng));
  }
  /// Fixed random weighting so the scalar loss depends on every output.
  Tensor<double> probe(const Shape& s) { return normal_tensor<double>(s, 1.0, rng); }

  std::mt19937_64 rng;
};

Var<double> weighted_sum(Tape<double>& t, Var<double> y, const Tensor<double>& w) {
  return ops::sum(ops::mul(y, t.constant(w)));
}

void randomize(const std::vector<P*>& params, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (auto* p : params)
    for (auto& v : p->value.vec()) v = n(rng);
}

}  // namespace

std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<BlockCheck> out;
  auto check = [&](const std::string& name, const LossBuilder& fn, const std::vector<P*>& params,
                   double floor = 1e-6) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport r = grad_check(fn, params, 1e-5, 1e-4, floor);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back({name, std::move(r), s});
  };
  Fixture f(seed);

  {
    P x = f.param("x", {2, 5, 4}), w = f.param("w", {3, 2, 3, 3}), b = f.param("b", {3});
    auto pr = f.probe({3, 5, 4});
    check("conv3x3", [&](Tape<double>& t) {
      return weighted_sum(t, ops::conv2d(t.param(x), t.param(w), t.param(b)), pr);
    }, {&x, &w, &b});
  }
  {
    P x = f.param("x", {4, 3, 3}), g = f.param("gamma", {4}), b = f.param("beta", {4});
    auto pr = f.probe({4, 3, 3});
    check("layer_norm", [&](Tape<double>& t) {
      return weighted_sum(t, ops::layer_norm(t.param(x), t.param(g), t.param(b)), pr);
    }, {&x, &g, &b});
  }
  {
    P x = f.param("x", {2, 5, 5});
    auto pr = f.probe({2, 2, 2});
    check("avg_pool2", [&](Tape<double>& t) { return weighted_sum(t, ops::avg_pool2(t.param(x)), pr); }, {&x});
  }
  {
    P x = f.param("x", {2, 3, 3});
    auto pr = f.probe({2, 7, 6});
    check("upsample", [&](Tape<double>& t) {
      return weighted_sum(t, ops::bilinear_upsample(t.param(x), 7, 6), pr);
    }, {&x});
  }
  {
    P x = f.param("x", {3, 2, 2});
    auto pr = f.probe({3, 2, 2});
    check("softmax", [&](Tape<double>& t) { return weighted_sum(t, ops::softmax(t.param(x), 0), pr); }, {&x});
  }
  {
    auto ssm = init_ssm<double>("ssm", 3, 2, f.rng);
    P x = f.param("x", {6, 2});
    auto pr = f.probe({6, 2});
    check("ssm_scan", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, ssm_recurrence(bind_ssm(g, ssm), t.param(x)), pr);
    }, {&x, &ssm.a_bar, &ssm.b_bar, &ssm.c_out});
  }
  {
    auto fwd = init_ssm<double>("fwd", 3, 1, f.rng), bwd = init_ssm<double>("bwd", 3, 1, f.rng);
    P x = f.param("x", {4, 2, 3});
    auto pr = f.probe({4, 2, 3});
    check("spectral_expert", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, spectral_bidirectional(g, fwd, bwd, t.param(x)), pr);
    }, {&x, &fwd.a_bar, &fwd.b_bar, &fwd.c_out, &bwd.a_bar, &bwd.b_bar, &bwd.c_out});
  }

  MoMebShape shape{4, 3, 2, true, true};
  {
    auto blk = init_momeb<double>("blk", shape, f.rng);
    randomize({&blk.router->w1, &blk.router->b1, &blk.router->w2, &blk.router->b2}, f.rng, 0.7);
    P x = f.param("x", {2, 3, 3});
    auto pr = f.probe({1, 4});
    check("router", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, route(g, *blk.router, t.param(x)), pr);
    }, {&x, &blk.router->w1, &blk.router->b1, &blk.router->w2, &blk.router->b2});
  }
  auto block_params = [](MoMebParams<double>& p) {
    std::vector<P*> v;
    for_each_param(p, [&](P& q) { v.push_back(&q); });
    return v;
  };
  {
    auto blk = init_momeb<double>("blk", shape, f.rng);
    randomize(block_params(blk), f.rng, 0.5);
    P x = f.param("x", {2, 3, 3});
    auto pr = f.probe({2, 3, 3});
    std::vector<P*> ps{&x};
    for (auto& e : blk.spatial) ps.insert(ps.end(), {&e.a_bar, &e.b_bar, &e.c_out});
    ps.insert(ps.end(), {&blk.router->w1, &blk.router->b1, &blk.router->w2, &blk.router->b2});
    check("routed_experts", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, sre_forward(g, blk.spatial, *blk.router, t.param(x), RoutingMode::dense()), pr);
    }, ps);
  }
  {
    auto blk = init_momeb<double>("blk", shape, f.rng);
    randomize(block_params(blk), f.rng, 0.5);
    P x = f.param("x", {4, 3, 3});
    auto pr = f.probe({4, 3, 3});
    auto ps = block_params(blk);
    ps.push_back(&x);
    check("dssem", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, dssem_forward(g, blk, t.param(x), RoutingMode::dense()), pr);
    }, ps);
  }
  {
    auto blk = init_momeb<double>("blk", shape, f.rng);
    randomize(block_params(blk), f.rng, 0.5);
    P x = f.param("x", {4, 4, 4});
    auto pr = f.probe({4, 4, 4});
    auto ps = block_params(blk);
    ps.push_back(&x);
    check("momeb", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, momeb_forward(g, blk, t.param(x), RoutingMode::dense()), pr);
    }, ps);
  }
  {
    ResidualParams<double> rp{{f.param("c1.w", {3, 3, 3, 3}, 0.4), f.param("c1.b", {3})},
                              {f.param("c2.w", {3, 3, 3, 3}, 0.4), f.param("c2.b", {3})}};
    P m = f.param("m", {3, 4, 5}), l = f.param("l", {3, 2, 2});
    auto pr = f.probe({3, 4, 5});
    check("ffb", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return weighted_sum(t, ffb<double>(g, rp, t.param(m), t.param(l)), pr);
    }, {&m, &l, &rp.conv1.weight, &rp.conv1.bias, &rp.conv2.weight, &rp.conv2.bias});
  }
  {
    ConvParams<double> head{f.param("head.w", {3, 4, 1, 1}), f.param("head.b", {3})};
    P x = f.param("x", {4, 3, 3});
    LabelRaster y(3, 3, {1, 2, 3, 0, 1, 2, 3, 3, 1});
    PixelMask mask{1, 1, 1, 1, 0, 1, 1, 1, 1};
    check("head_cross_entropy", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      return ops::masked_cross_entropy(classify_head(g, head, t.param(x)).logits, y, mask);
    }, {&x, &head.weight, &head.bias});
  }
  {
    NetworkConfig c;
    c.bands = 3;
    c.classes = 2;
    c.channels = 4;
    c.state_dim = 4;
    auto net = init_network<double>(c, seed + 1);
    auto ps = parameters(net);
    // Transition matrices keep their stable initial values; long scans through
    // random ones make the loss too curved for a 1e-5 central difference.
    std::vector<P*> free;
    for (auto* p : ps)
      if (!p->name.ends_with("a_bar")) free.push_back(p);
    randomize(free, f.rng, 0.3);
    std::uniform_int_distribution<int> lab(0, 2), bit(0, 1);
    Tensor<double> x = normal_tensor<double>(Shape{3, 16, 16}, 1.0, f.rng);
    LabelRaster y(16, 16);
    for (auto& v : y.labels) v = static_cast<std::uint16_t>(lab(f.rng));
    std::array<PixelMask, kNumStages> masks;
    for (auto& m : masks) {
      m.resize(256);
      for (auto& v : m) v = static_cast<std::uint8_t>(bit(f.rng));
    }
    check("total_loss", [&](Tape<double>& t) {
      Graph<double> g(t, true);
      TrainSupervision sup{&y, nullptr, &masks};
      auto o = forward_full(g, net, x, ForwardMode::train(), sup);
      return total_loss(o.stages, y, o.logits).total;
    }, ps, 1e-5);  // a mean over 256 pixels leaves ~1e-10 of difference roundoff
  }
  return out;
}

}  // namespace mambamoe
