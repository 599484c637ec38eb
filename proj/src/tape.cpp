// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/tape.hpp"

#include <algorithm>

namespace mambamoe {

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>{this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p, bool trainable) {
  Node n;
  n.op = "param";
  n.value = p.value;
  n.requires_grad = trainable;
  if (trainable) {
    n.param = &p;
    n.param_version = p.version;
  }
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn fn, std::uint64_t flops) {
  return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(fn), flops);
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn fn, std::uint64_t flops) {
  if (consumed_) throw TapeError(std::string(op) + ": recording onto a replayed tape");
  if (!value.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite value in output " + value.shape().str());
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (const Var<T>& in : inputs) {
    if (in.tape != this) throw TapeError(std::string(op) + ": input recorded on a different tape");
    n.inputs.push_back(in.id);
    n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  flops_ += flops;
  return push(std::move(n));
}

template <typename T>
std::span<T> Tape<T>::grad_of(std::size_t id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return Tensor<T>(n.value.shape(), n.grad);
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw TapeError("backward: loss recorded on a different tape");
  if (consumed_) throw TapeError("backward: tape already replayed");
  const Node& ln = nodes_.at(loss.id);
  if (ln.value.numel() != 1) {
    throw TapeError("backward: loss must be scalar, got shape " + ln.value.shape().str());
  }
  for (const Node& n : nodes_) {
    if (n.param != nullptr && n.param->version != n.param_version) {
      throw TapeError("backward: parameter '" + n.param->name + "' mutated after recording");
    }
  }
  consumed_ = true;
  if (!ln.requires_grad) return;

  grad_of(loss.id)[0] = T(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    ++backward_visits_;
    // The callback may allocate grads of earlier nodes; deque keeps n stable.
    n.backward(*this, std::span<const T>(n.grad));
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto& g = n.param->grad.vec();
    if (g.size() != n.grad.size()) n.param->grad = Tensor<T>(n.param->value.shape());
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad.vec()[i] += n.grad[i];
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mambamoe
