// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambamoe/tape.hpp"

namespace mambamoe {

/// The checked function is not a deterministic differentiable map (it drew
/// random numbers, or two evaluations disagreed).
class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // element with the largest error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double threshold = 1e-4;
  bool passed() const { return max_rel_error < threshold; }
};

/// Builds a scalar loss on a fresh tape from parameters it has captured.
using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// Compares reverse-mode gradients against central differences, element by
/// element. Relative error is |a-n| / max(|a|, |n|, floor); the floor keeps
/// gradients at the finite-difference roundoff level from dominating.
GradCheckReport grad_check(const LossBuilder& fn, const std::vector<Parameter<double>*>& params,
                           double step = 1e-5, double threshold = 1e-4, double floor = 1e-6);

}  // namespace mambamoe
