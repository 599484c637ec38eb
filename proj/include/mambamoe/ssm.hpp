// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "mambamoe/graph.hpp"
#include "mambamoe/tape.hpp"

namespace mambamoe {

/// Scan paths. The four spatial paths are corner to corner:
///   TL_BR  rows top to bottom, each row left to right
///   BR_TL  exact reversal of TL_BR
///   TR_BL  columns right to left, each column top to bottom
///   BL_TR  exact reversal of TR_BL
/// TL_BR/BR_TL are the horizontal pair and TR_BL/BL_TR the vertical pair.
/// SPEC_FWD/SPEC_BWD run along the band axis.
enum class ScanDirection { TL_BR, BR_TL, TR_BL, BL_TR, SPEC_FWD, SPEC_BWD };

inline constexpr std::array<ScanDirection, 4> kSpatialDirections = {ScanDirection::TL_BR, ScanDirection::BR_TL,
                                                                    ScanDirection::TR_BL, ScanDirection::BL_TR};

std::string_view direction_name(ScanDirection dir);
bool is_spatial(ScanDirection dir);
bool is_vertical(ScanDirection dir);

/// Sequence position t -> grid index r*w+c for a spatial direction.
std::vector<std::size_t> scan_order(ScanDirection dir, std::size_t height, std::size_t width);

/// Time-invariant linear state space model
///   h_t = A h_{t-1} + B f_t,   y_t = C h_t + f_t,   h_0 = 0
/// with A [D,D], B [D,E], C [E,D].
template <typename T>
struct SsmParams {
  Parameter<T> a_bar;
  Parameter<T> b_bar;
  Parameter<T> c_out;

  std::size_t state_dim() const { return a_bar.value.dim(0); }
  std::size_t embed_dim() const { return b_bar.value.dim(1); }
};

/// A = 0.9 I + N(0, 0.01^2), B and C ~ N(0, 1/D).
template <typename T>
SsmParams<T> init_ssm(const std::string& prefix, std::size_t state_dim, std::size_t embed_dim, std::mt19937_64& rng);

template <typename T>
SsmParams<T> zero_ssm(const std::string& prefix, std::size_t state_dim, std::size_t embed_dim);

/// Growth-rate estimate of rho(A) by power iteration.
double spectral_radius_estimate(const Tensor<double>& a, std::size_t iterations = 400);

template <typename T>
struct SsmVars {
  Var<T> a_bar, b_bar, c_out;
};

template <typename T>
SsmVars<T> bind_ssm(Graph<T>& g, SsmParams<T>& p) {
  return {g.bind(p.a_bar), g.bind(p.b_bar), g.bind(p.c_out)};
}

/// Output and hidden states of a batch of independent scans sharing one SSM.
template <typename T>
struct ScanKernelResult {
  Tensor<T> y;            // [T,N,E]
  std::vector<T> states;  // [N,T,D]
};

/// Pure forward kernel over `seq` viewed as [T, N, E] (N independent
/// sequences interleaved along the second axis). Safe to run concurrently.
template <typename T>
ScanKernelResult<T> scan_kernel(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& seq,
                                std::size_t batch);

/// Records a precomputed kernel result as one tape node.
template <typename T>
Var<T> record_scan(SsmVars<T> p, Var<T> seq, std::size_t batch, ScanKernelResult<T> result);

/// seq [T,E] -> [T,E].
template <typename T>
Var<T> ssm_recurrence(SsmVars<T> p, Var<T> seq);

/// x [E,h,w] -> [h*w, E] in the order of `dir`.
template <typename T>
Var<T> flatten_spatial(Var<T> x, ScanDirection dir);

/// seq [h*w, E] -> [E,h,w]; inverse of flatten_spatial.
template <typename T>
Var<T> unflatten_spatial(Var<T> seq, ScanDirection dir, std::size_t height, std::size_t width);

/// flatten -> recurrence -> unflatten along one spatial path.
template <typename T>
Var<T> spatial_expert_forward(Graph<T>& g, SsmParams<T>& p, Var<T> x, ScanDirection dir);

/// Per-pixel band sequences (embedding width 1, parameters shared across
/// pixels) scanned forward and backward; the two outputs are summed.
template <typename T>
Var<T> spectral_bidirectional(Graph<T>& g, SsmParams<T>& fwd, SsmParams<T>& bwd, Var<T> x);

}  // namespace mambamoe
