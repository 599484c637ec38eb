// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/moe.hpp"

#include <algorithm>
#include <future>
#include <numeric>

#include "mambamoe/init.hpp"
#include "mambamoe/ops.hpp"

namespace mambamoe {

RoutingMode RoutingMode::top_k(std::size_t k) {
  if (k < 1 || k > kNumSpatialExperts) {
    throw std::invalid_argument("top-k must lie in [1, 4], got " + std::to_string(k));
  }
  return {Kind::TopK, k};
}

std::size_t router_hidden(std::size_t channels) { return std::max<std::size_t>(1, channels / 4); }

template <typename T>
MoMebParams<T> init_momeb(const std::string& prefix, const MoMebShape& s, std::mt19937_64& rng) {
  const std::size_t c = s.channels;
  if (c == 0 || c % 2 != 0) throw ShapeError("MoMEB channel width must be even, got " + std::to_string(c));
  const std::size_t half = c / 2, hidden = router_hidden(c), wide = s.mlp_ratio * c;
  auto param = [&](const std::string& name, Tensor<T> v) { return Parameter<T>(prefix + "." + name, std::move(v)); };

  MoMebParams<T> p;
  p.ln1_gamma = param("ln1.gamma", Tensor<T>::full(Shape{c}, T(1)));
  p.ln1_beta = param("ln1.beta", Tensor<T>(Shape{c}));
  p.ln2_gamma = param("ln2.gamma", Tensor<T>::full(Shape{c}, T(1)));
  p.ln2_beta = param("ln2.beta", Tensor<T>(Shape{c}));
  if (s.sre_on) {
    for (std::size_t j = 0; j < kNumSpatialExperts; ++j)
      p.spatial.push_back(init_ssm<T>(prefix + ".spatial" + std::to_string(j + 1), s.state_dim, half, rng));
    RouterParams<T> r;
    r.w1 = param("router.w1", normal_tensor<T>(Shape{half, hidden}, 1.0 / std::sqrt(double(half)), rng));
    r.b1 = param("router.b1", Tensor<T>(Shape{1, hidden}));
    r.w2 = param("router.w2",
                 normal_tensor<T>(Shape{hidden, kNumSpatialExperts}, 1.0 / std::sqrt(double(hidden)), rng));
    r.b2 = param("router.b2", Tensor<T>(Shape{1, kNumSpatialExperts}));
    p.router = std::move(r);
  }
  if (s.sse_on) {
    p.spectral.push_back(init_ssm<T>(prefix + ".spectral_fwd", s.state_dim, 1, rng));
    p.spectral.push_back(init_ssm<T>(prefix + ".spectral_bwd", s.state_dim, 1, rng));
  }
  p.fuse_w = param("fuse.weight", conv_weight<T>(c, c, 1, rng));
  p.fuse_b = param("fuse.bias", Tensor<T>(Shape{c}));
  p.mlp_w1 = param("mlp.w1", conv_weight<T>(wide, c, 1, rng));
  p.mlp_b1 = param("mlp.b1", Tensor<T>(Shape{wide}));
  p.mlp_w2 = param("mlp.w2", conv_weight<T>(c, wide, 1, rng));
  p.mlp_b2 = param("mlp.b2", Tensor<T>(Shape{c}));
  // Both residual branches of the block start at zero, so a fresh block is the
  // identity map.
  p.fuse_w.value = Tensor<T>(p.fuse_w.value.shape());
  p.mlp_w2.value = Tensor<T>(p.mlp_w2.value.shape());
  return p;
}

std::vector<std::size_t> top_k_experts(const std::array<double, kNumSpatialExperts>& weights, std::size_t k) {
  if (k < 1 || k > kNumSpatialExperts) throw std::invalid_argument("top_k_experts: k outside [1, 4]");
  std::array<std::size_t, kNumSpatialExperts> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  std::vector<std::size_t> picked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(picked.begin(), picked.end());
  return picked;
}

template <typename T>
Var<T> route_pooled(Graph<T>& g, RouterParams<T>& router, Var<T> pooled) {
  const std::size_t in = router.w1.value.dim(0);
  if (pooled.shape() != Shape{1, in}) {
    throw ShapeError("route: pooled features " + pooled.shape().str() + " vs router input width " +
                     std::to_string(in));
  }
  Var<T> hid = ops::relu(ops::add(ops::matmul(pooled, g.bind(router.w1)), g.bind(router.b1)));
  Var<T> logits = ops::add(ops::matmul(hid, g.bind(router.w2)), g.bind(router.b2));
  return ops::softmax(logits, 1);
}

template <typename T>
Var<T> route(Graph<T>& g, RouterParams<T>& router, Var<T> x_spa) {
  if (x_spa.shape().rank() != 3 || x_spa.shape()[0] != router.w1.value.dim(0)) {
    throw ShapeError("route: input " + x_spa.shape().str() + " vs router input width " +
                     std::to_string(router.w1.value.dim(0)));
  }
  return route_pooled(g, router, ops::global_avg_pool(x_spa));
}

namespace {

// w [1,4] -> [k] with c_i = w[sel_i] / sum_j w[sel_j].
template <typename T>
Var<T> renormalize(Var<T> w, const std::vector<std::size_t>& selected) {
  const auto& wv = w.value().vec();
  T total = 0;
  for (std::size_t s : selected) total += wv[s];
  Tensor<T> out(Shape{selected.size()});
  for (std::size_t i = 0; i < selected.size(); ++i) out[i] = wv[selected[i]] / total;
  const std::size_t iw = w.id;
  return w.tape->record("renormalize", std::move(out), {w}, [=](Tape<T>& t, std::span<const T> g) {
    const auto& wv = t.value(iw).vec();
    auto gw = t.grad_of(iw);
    T dot = 0;
    for (std::size_t i = 0; i < selected.size(); ++i) dot += g[i] * wv[selected[i]];
    for (std::size_t i = 0; i < selected.size(); ++i) gw[selected[i]] += g[i] / total - dot / (total * total);
  });
}

}  // namespace

template <typename T>
Var<T> sre_forward(Graph<T>& g, std::vector<SsmParams<T>>& experts, RouterParams<T>& router, Var<T> x_spa,
                   RoutingMode mode) {
  if (experts.size() != kNumSpatialExperts) throw std::invalid_argument("sre_forward: expected 4 spatial experts");
  const std::size_t h = x_spa.shape()[1], w = x_spa.shape()[2];
  Var<T> weights = route(g, router, x_spa);

  std::vector<std::size_t> selected(kNumSpatialExperts);
  std::iota(selected.begin(), selected.end(), std::size_t{0});
  if (mode.kind == RoutingMode::Kind::TopK) {
    std::array<double, kNumSpatialExperts> wd{};
    for (std::size_t j = 0; j < kNumSpatialExperts; ++j) wd[j] = static_cast<double>(weights.value()[j]);
    selected = top_k_experts(wd, mode.k);
  }
  // With all four selected the renormalization is the identity; skipping it
  // keeps top-4 bitwise equal to dense.
  Var<T> coef = weights;
  std::vector<std::size_t> coef_index = selected;
  if (selected.size() < kNumSpatialExperts) {
    coef = renormalize(weights, selected);
    std::iota(coef_index.begin(), coef_index.end(), std::size_t{0});
  }

  // Recording order is fixed regardless of how kernels are scheduled.
  std::vector<Var<T>> seqs;
  std::vector<SsmVars<T>> vars;
  for (std::size_t j : selected) {
    seqs.push_back(flatten_spatial(x_spa, expert_direction(j)));
    vars.push_back(bind_ssm(g, experts[j]));
  }
  auto run = [&g](SsmVars<T> v, Var<T> seq) {
    g.count_spatial_scan();
    return scan_kernel(v.a_bar.value(), v.b_bar.value(), v.c_out.value(), seq.value(), 1);
  };
  std::vector<ScanKernelResult<T>> results;
  if (g.execution() == Execution::Parallel) {
    std::vector<std::future<ScanKernelResult<T>>> pending;
    for (std::size_t i = 0; i < selected.size(); ++i)
      pending.push_back(std::async(std::launch::async, run, vars[i], seqs[i]));
    for (auto& f : pending) results.push_back(f.get());
  } else {
    for (std::size_t i = 0; i < selected.size(); ++i) results.push_back(run(vars[i], seqs[i]));
  }

  std::optional<Var<T>> acc;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    Var<T> y = record_scan(vars[i], seqs[i], 1, std::move(results[i]));
    Var<T> expert_out = unflatten_spatial(y, expert_direction(selected[i]), h, w);
    Var<T> term = ops::scale_by(expert_out, coef, coef_index[i]);
    acc = acc ? ops::add(*acc, term) : term;
  }
  return *acc;
}

template <typename T>
Var<T> dssem_forward(Graph<T>& g, MoMebParams<T>& p, Var<T> x_norm, RoutingMode mode) {
  const std::size_t c = x_norm.shape()[0];
  if (x_norm.shape().rank() != 3 || c % 2 != 0) {
    throw ShapeError("dssem_forward: channel count must be even, got " + x_norm.shape().str());
  }
  auto halves = ops::split(x_norm, 2, 0);
  Var<T> spa = halves[0];
  Var<T> spe = halves[1];
  if (!p.spatial.empty()) spa = sre_forward(g, p.spatial, *p.router, spa, mode);
  if (!p.spectral.empty()) spe = spectral_bidirectional(g, p.spectral[0], p.spectral[1], spe);
  Var<T> fused = ops::concat(std::vector<Var<T>>{spa, spe}, 0);
  return ops::conv2d(fused, g.bind(p.fuse_w), g.bind(p.fuse_b));
}

template <typename T>
Var<T> momeb_forward(Graph<T>& g, MoMebParams<T>& p, Var<T> f, RoutingMode mode) {
  if (f.shape().rank() != 3 || f.shape()[0] != p.channels()) {
    throw ShapeError("momeb_forward: input " + f.shape().str() + " vs block width " + std::to_string(p.channels()));
  }
  Var<T> x1 = ops::layer_norm(f, g.bind(p.ln1_gamma), g.bind(p.ln1_beta));
  Var<T> mid = ops::add(f, dssem_forward(g, p, x1, mode));
  Var<T> x2 = ops::layer_norm(mid, g.bind(p.ln2_gamma), g.bind(p.ln2_beta));
  Var<T> hid = ops::relu(ops::conv2d(x2, g.bind(p.mlp_w1), g.bind(p.mlp_b1)));
  return ops::add(mid, ops::conv2d(hid, g.bind(p.mlp_w2), g.bind(p.mlp_b2)));
}

std::vector<ExpertWeightRecord> expert_weight_records(const Tensor<double>& weights) {
  if (weights.numel() != kNumSpatialExperts) throw ShapeError("expert weights must have 4 entries");
  std::vector<ExpertWeightRecord> rows;
  for (std::size_t j = 0; j < kNumSpatialExperts; ++j) rows.push_back({j + 1, expert_direction(j), weights[j]});
  return rows;
}

#define MAMBAMOE_INSTANTIATE_MOE(T)                                                                          \
  template MoMebParams<T> init_momeb<T>(const std::string&, const MoMebShape&, std::mt19937_64&);            \
  template Var<T> route(Graph<T>&, RouterParams<T>&, Var<T>);                                                \
  template Var<T> route_pooled(Graph<T>&, RouterParams<T>&, Var<T>);                                         \
  template Var<T> sre_forward(Graph<T>&, std::vector<SsmParams<T>>&, RouterParams<T>&, Var<T>, RoutingMode); \
  template Var<T> dssem_forward(Graph<T>&, MoMebParams<T>&, Var<T>, RoutingMode);                            \
  template Var<T> momeb_forward(Graph<T>&, MoMebParams<T>&, Var<T>, RoutingMode);

MAMBAMOE_INSTANTIATE_MOE(float)
MAMBAMOE_INSTANTIATE_MOE(double)

}  // namespace mambamoe
