// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mambamoe/graph.hpp"
#include "mambamoe/moe.hpp"

namespace mambamoe {

inline constexpr std::size_t kNumStages = 3;
inline constexpr double kUncertaintyEps = 1e-6;

struct NetworkConfig {
  std::size_t bands = 0;
  std::size_t classes = 0;
  std::size_t channels = 16;
  std::size_t state_dim = 8;
  std::size_t mlp_ratio = 2;
  bool momeb_on = true;
  bool sre_on = true;
  bool sse_on = true;

  MoMebShape block_shape() const { return {channels, state_dim, mlp_ratio, sre_on, sse_on}; }
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <typename T>
struct ConvParams {
  Parameter<T> weight;
  Parameter<T> bias;
};

/// Res(x) = x + conv2(relu(conv1(relu(x)))), both 3x3.
template <typename T>
struct ResidualParams {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
};

template <typename T>
struct NetworkParams {
  NetworkConfig config;
  std::array<ConvParams<T>, kNumStages> stem;
  std::vector<MoMebParams<T>> momeb;  // empty when MoMEB is ablated
  std::array<ResidualParams<T>, kNumStages> ffb;
  ConvParams<T> head;  // 1x1 conv C -> classes, shared by every stage
};

template <typename T>
NetworkParams<T> init_network(const NetworkConfig& config, std::uint64_t seed);

/// Every parameter in a fixed order (stem, blocks, decoder, head).
template <typename T>
std::vector<Parameter<T>*> parameters(NetworkParams<T>& net);

template <typename T>
std::size_t parameter_count(NetworkParams<T>& net);

/// Value-preserving copy into another scalar type.
template <typename U, typename T>
NetworkParams<U> convert_network(NetworkParams<T>& net);

/// Deterministic uniform stream for mask sampling; counts its draws.
struct SeededRng {
  explicit SeededRng(std::uint64_t s) : seed(s), engine(s) {}
  double uniform();

  std::uint64_t seed;
  std::uint64_t draws = 0;
  std::mt19937_64 engine;
};

struct ForwardMode {
  bool training = false;
  RoutingMode routing;

  static ForwardMode train() { return {true, RoutingMode::dense()}; }
  static ForwardMode infer(std::size_t k) { return {false, RoutingMode::top_k(k)}; }
};

struct StageExtent {
  std::size_t height = 0;
  std::size_t width = 0;
};

template <typename T>
struct Features {
  std::array<Var<T>, kNumStages> maps;
  std::array<StageExtent, kNumStages> extents;
};

/// Three conv3x3 -> ReLU -> 2x2 average stages.
template <typename T>
Features<T> extract_features(Graph<T>& g, NetworkParams<T>& net, Var<T> x);

template <typename T>
Var<T> residual_block(Graph<T>& g, ResidualParams<T>& p, Var<T> x);

/// Deepest stage: Res(M). Others: M + Res(Up(L_next)) at M's extent.
template <typename T>
Var<T> ffb(Graph<T>& g, ResidualParams<T>& p, Var<T> m, std::optional<Var<T>> l_next);

template <typename T>
struct HeadOutput {
  Var<T> logits;
  Var<T> probs;
};

template <typename T>
HeadOutput<T> classify_head(Graph<T>& g, ConvParams<T>& head, Var<T> features);

struct UncertaintyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> raw;  // -log(P+eps)*P before clamping
  std::vector<double> u;    // clamped to [0,1]
};

/// P = per-pixel max class probability; U = clamp(-log(P+1e-6)*P, 0, 1).
template <typename T>
UncertaintyMap uncertainty_map(const Tensor<T>& probs);

struct SampleMask {
  std::size_t height = 0;
  std::size_t width = 0;
  PixelMask mask;
  std::uint64_t seed = 0;
  std::uint64_t first_draw = 0;  // draw counter before sampling
};

/// One uniform draw per pixel in row-major order; M = 1 iff r < U.
SampleMask sample_mask(const UncertaintyMap& u, SeededRng& rng);

template <typename T>
struct StageSupervision {
  LabelRaster q;  // sampled labels, 0 where unsupervised
  Var<T> logits;  // full-resolution stage scores
  Var<T> probs;
  PixelMask mask;
};

/// Training-only refinement: upsample L to (H,W), head, uncertainty, sample,
/// Q = M * Y_trn.
template <typename T>
StageSupervision<T> uarb(Graph<T>& g, Var<T> l, ConvParams<T>& head, const LabelRaster& y_train, SeededRng& rng);

/// As uarb with a caller-supplied mask (deterministic; used by gradient checks).
template <typename T>
StageSupervision<T> uarb_with_mask(Graph<T>& g, Var<T> l, ConvParams<T>& head, const LabelRaster& y_train,
                                   const PixelMask& mask);

template <typename T>
struct ForwardOutput {
  Var<T> logits;  // [K,H,W] final scores
  Var<T> probs;
  std::array<Var<T>, kNumStages> decoder;  // L_1..L_3
  std::vector<StageSupervision<T>> stages;  // training with refinement only
};

/// Supervision inputs of a training forward pass.
struct TrainSupervision {
  const LabelRaster* y_train = nullptr;
  SeededRng* rng = nullptr;                          // sampled masks
  const std::array<PixelMask, kNumStages>* frozen = nullptr;  // or fixed masks
};

template <typename T>
ForwardOutput<T> forward_full(Graph<T>& g, NetworkParams<T>& net, const Tensor<T>& x, const ForwardMode& mode,
                              std::optional<TrainSupervision> sup = std::nullopt);

template <typename T>
struct LossTerms {
  Var<T> total;
  std::vector<double> stage_terms;
  double final_term = 0.0;
};

/// Sum of stage CE(Q_i, A_i) plus CE(GT, A_final), each a masked mean.
template <typename T>
LossTerms<T> total_loss(std::vector<StageSupervision<T>>& stages, const LabelRaster& gt, Var<T> final_logits);

/// Router weights of each MoMEB stage for a whole scene (inference path).
std::vector<std::array<double, kNumSpatialExperts>> stage_routing(NetworkParams<float>& net, const Tensor<float>& x);

/// Stage-1 router applied to the spatial-half features pooled over the
/// stage-1 cells under each class's labeled pixels (pixel (r,c) -> cell
/// (r/2,c/2), counted once per pixel). Row c-1 belongs to class c; classes
/// without labeled pixels inside the stage-1 grid get an all-NaN row.
std::vector<std::array<double, kNumSpatialExperts>> class_routing(NetworkParams<float>& net, const Tensor<float>& x,
                                                                  const LabelRaster& labels, std::size_t classes);

/// Checkpoint container: "MMOE1\n", a textual manifest, then little-endian
/// payloads.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::string& path, NetworkParams<float>& net);
NetworkParams<float> load_checkpoint(const std::string& path);

std::map<std::string, std::string> config_fields(const NetworkConfig& c);

}  // namespace mambamoe
