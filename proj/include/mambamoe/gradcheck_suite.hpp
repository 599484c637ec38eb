// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "mambamoe/grad_check.hpp"

namespace mambamoe {

struct BlockCheck {
  std::string block;
  GradCheckReport report;
  double seconds = 0.0;
};

/// Finite-difference check of every differentiable block in 64-bit with
/// step 1e-5 and threshold 1e-4: conv, layer norm, pooling, upsampling,
/// softmax, SSM scan, spectral expert, router, routed experts, DSSEM, MoMEB,
/// FFB, head + cross-entropy, and the full training loss with frozen masks.
/// The full loss compares gradients below 1e-5 against a 1e-5 floor.
std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed = 1);

}  // namespace mambamoe
