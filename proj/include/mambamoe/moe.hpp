// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mambamoe/graph.hpp"
#include "mambamoe/ssm.hpp"

namespace mambamoe {

inline constexpr std::size_t kNumSpatialExperts = 4;

/// Expert i (0-based) scans along kSpatialDirections[i].
inline ScanDirection expert_direction(std::size_t expert) { return kSpatialDirections.at(expert); }

/// Dense: every expert, softmax weights. TopK: the k highest-weight experts,
/// weights renormalized over the selection, others never evaluated.
struct RoutingMode {
  enum class Kind { Dense, TopK };
  Kind kind = Kind::Dense;
  std::size_t k = kNumSpatialExperts;

  static RoutingMode dense() { return {}; }
  static RoutingMode top_k(std::size_t k);
};

/// Two-layer perceptron on the pooled spatial view: C/2 -> C/4 (ReLU) -> 4.
template <typename T>
struct RouterParams {
  Parameter<T> w1, b1, w2, b2;
};

template <typename T>
struct MoMebParams {
  Parameter<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  std::vector<SsmParams<T>> spatial;  // 4 entries, empty when the routed expert is ablated
  std::vector<SsmParams<T>> spectral;  // {forward, backward}, empty when the shared expert is ablated
  std::optional<RouterParams<T>> router;
  Parameter<T> fuse_w, fuse_b;  // 1x1 conv C -> C
  Parameter<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // 1x1 convs C -> ratio*C -> C

  std::size_t channels() const { return ln1_gamma.value.numel(); }
};

struct MoMebShape {
  std::size_t channels = 16;
  std::size_t state_dim = 8;
  std::size_t mlp_ratio = 2;
  bool sre_on = true;
  bool sse_on = true;
};

std::size_t router_hidden(std::size_t channels);

template <typename T>
MoMebParams<T> init_momeb(const std::string& prefix, const MoMebShape& shape, std::mt19937_64& rng);

/// Calls fn(Parameter<T>&) for every parameter in a fixed order.
template <typename T, typename Fn>
void for_each_param(MoMebParams<T>& p, Fn&& fn) {
  fn(p.ln1_gamma);
  fn(p.ln1_beta);
  for (auto& e : p.spatial) {
    fn(e.a_bar);
    fn(e.b_bar);
    fn(e.c_out);
  }
  for (auto& e : p.spectral) {
    fn(e.a_bar);
    fn(e.b_bar);
    fn(e.c_out);
  }
  if (p.router) {
    fn(p.router->w1);
    fn(p.router->b1);
    fn(p.router->w2);
    fn(p.router->b2);
  }
  fn(p.fuse_w);
  fn(p.fuse_b);
  fn(p.ln2_gamma);
  fn(p.ln2_beta);
  fn(p.mlp_w1);
  fn(p.mlp_b1);
  fn(p.mlp_w2);
  fn(p.mlp_b2);
}

/// Indices of the k largest weights, ties to the lower index, returned in
/// ascending index order.
std::vector<std::size_t> top_k_experts(const std::array<double, kNumSpatialExperts>& weights, std::size_t k);

/// Global average pool -> MLP -> softmax. Returns a [1,4] weight vector.
template <typename T>
Var<T> route(Graph<T>& g, RouterParams<T>& router, Var<T> x_spa);

/// Router applied to an explicit pooled feature vector [1, C/2].
template <typename T>
Var<T> route_pooled(Graph<T>& g, RouterParams<T>& router, Var<T> pooled);

template <typename T>
Var<T> sre_forward(Graph<T>& g, std::vector<SsmParams<T>>& experts, RouterParams<T>& router, Var<T> x_spa,
                   RoutingMode mode);

/// Channel split -> (SRE, SSE) -> concat -> 1x1 fusion conv.
template <typename T>
Var<T> dssem_forward(Graph<T>& g, MoMebParams<T>& p, Var<T> x_norm, RoutingMode mode);

/// G = F + DSSEM(LN1(F)); out = G + MLP(LN2(G)).
template <typename T>
Var<T> momeb_forward(Graph<T>& g, MoMebParams<T>& p, Var<T> f, RoutingMode mode);

/// One row of the expert-weight dump.
struct ExpertWeightRecord {
  std::size_t expert = 0;  // 1-based
  ScanDirection direction = ScanDirection::TL_BR;
  double weight = 0.0;
};

std::vector<ExpertWeightRecord> expert_weight_records(const Tensor<double>& weights);

}  // namespace mambamoe
