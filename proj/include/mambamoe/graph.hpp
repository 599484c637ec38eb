// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <unordered_map>

#include "mambamoe/tape.hpp"

namespace mambamoe {

/// How independent expert kernels are scheduled within one forward pass.
/// Both policies record identical tapes and produce bitwise-identical results.
enum class Execution { Serial, Parallel };

/// Per-forward-pass state: the tape, whether parameters are trainable, the
/// execution policy and the scan instrumentation counter.
template <typename T>
class Graph {
 public:
  Graph(Tape<T>& tape, bool training, Execution exec = Execution::Serial)
      : tape_(tape), training_(training), exec_(exec) {}

  Tape<T>& tape() { return tape_; }
  bool training() const { return training_; }
  Execution execution() const { return exec_; }

  /// Records the parameter once per graph; later calls reuse the same node.
  Var<T> bind(Parameter<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_.param(p, training_);
    bound_.emplace(&p, v);
    return v;
  }

  Var<T> constant(Tensor<T> value) { return tape_.constant(std::move(value)); }

  /// Number of spatial-expert scans evaluated so far.
  std::size_t spatial_scans() const { return spatial_scans_.load(); }
  void count_spatial_scan() { spatial_scans_.fetch_add(1); }

 private:
  Tape<T>& tape_;
  bool training_;
  Execution exec_;
  std::unordered_map<const Parameter<T>*, Var<T>> bound_;
  std::atomic<std::size_t> spatial_scans_{0};
};

}  // namespace mambamoe
