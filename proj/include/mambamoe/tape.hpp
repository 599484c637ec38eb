// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambamoe/tensor.hpp"

namespace mambamoe {

/// Misuse of the recording tape: non-scalar loss, second replay, or a leaf
/// parameter mutated between recording and backward.
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A trainable tensor with its gradient accumulator. `version` is bumped on
/// every in-place update so stale tapes can be detected.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  std::uint64_t version = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), T(0)); }
  void mark_updated() { ++version; }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Ordered record of forward operations. Node ids are assigned in execution
/// order, so every node's inputs precede it and reverse id order is a valid
/// topological order for the backward sweep.
///
/// Not thread-safe: record from one thread. Pure kernels may run concurrently
/// and be recorded afterwards in a fixed order.
template <typename T>
class Tape {
 public:
  /// Receives the gradient of the node's output; accumulates into inputs via
  /// Tape::grad_of.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient stays on the tape (read it with grad()).
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a parameter. If `trainable`, backward adds into p.grad.
  Var<T> param(Parameter<T>& p, bool trainable = true);

  /// Appends an operation result. `fn` is dropped when no input needs a
  /// gradient. Throws NumericalError if the value is not finite.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn,
                std::uint64_t flops = 0);
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn,
                std::uint64_t flops = 0);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

  /// Gradient accumulator of a node, allocated zeroed on first use. Empty
  /// span if the node does not require a gradient.
  std::span<T> grad_of(std::size_t id);
  /// Gradient of a node after backward (zeros if nothing reached it).
  Tensor<T> grad(Var<T> v) const;

  /// Reverse sweep from a scalar loss. A tape can be replayed once.
  void backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t flops() const { return flops_; }
  std::size_t backward_visits() const { return backward_visits_; }

  /// Set by operations that consume random draws. Finite-difference checks
  /// refuse such tapes.
  void mark_stochastic() { stochastic_ = true; }
  bool stochastic() const { return stochastic_; }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    std::vector<T> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::uint64_t param_version = 0;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
  std::uint64_t flops_ = 0;
  std::size_t backward_visits_ = 0;
  bool consumed_ = false;
  bool stochastic_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mambamoe
