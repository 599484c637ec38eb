// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>

#include "mambamoe/moe.hpp"
#include "mambamoe/network.hpp"

namespace mambamoe {

// Closed-form cost model of one inference forward pass. A multiply-accumulate
// counts as 2 FLOPs; elementwise ops, bias adds and ReLU count 1 per scalar,
// layer norm 8, bilinear upsampling 8 and softmax 4 per output scalar, 2x2
// average pooling 4 per output scalar. Reshapes, splits, concatenations and
// scan reorderings are free. These are the same constants the tape records.

struct InputShape {
  std::size_t bands = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

struct CostReport {
  NetworkConfig config;
  InputShape input;
  std::uint64_t params_total = 0;
  std::map<std::string, std::uint64_t> params_by_module;  // stem, momeb, ffb, head
  std::uint64_t flops_dense = 0;
  std::array<std::uint64_t, kNumSpatialExperts> flops_topk{};  // index k-1
  std::uint64_t spatial_scan_dense = 0;                         // spatial-expert scan FLOPs only
  std::array<std::uint64_t, kNumSpatialExperts> spatial_scan_topk{};
};

std::uint64_t conv_params(std::size_t cin, std::size_t cout, std::size_t k);
std::uint64_t ssm_params(std::size_t state_dim, std::size_t embed_dim);
/// Per-step cost of h = A h + B f, y = C h + f.
std::uint64_t scan_step_flops(std::size_t state_dim, std::size_t embed_dim);

/// Parameter fields only. Equals parameter_count(init_network(config)).
CostReport count_params(const NetworkConfig& config);

/// Total inference FLOPs; mode Dense or TopK(k).
std::uint64_t count_flops(const NetworkConfig& config, const InputShape& input, const RoutingMode& mode);
/// Spatial-expert scan component of count_flops.
std::uint64_t count_spatial_scan_flops(const NetworkConfig& config, const InputShape& input, const RoutingMode& mode);

/// Parameters plus dense and k=1..4 FLOPs. config.bands is taken from input.
CostReport profile(NetworkConfig config, const InputShape& input);

/// The configuration used to compare against the reference model size:
/// C=48, D=16, MLP ratio 2, 103 bands, 9 classes, input 103x13x13.
NetworkConfig reference_scale_config();
InputShape reference_scale_input();

void write_cost_table(std::ostream& os, const CostReport& r);
void write_cost_csv(std::ostream& os, const CostReport& r);

}  // namespace mambamoe
