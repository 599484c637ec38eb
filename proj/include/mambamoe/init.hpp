// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>

#include "mambamoe/tensor.hpp"

namespace mambamoe {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

/// He-normal conv weight [out, in, k, k].
template <typename T>
Tensor<T> conv_weight(std::size_t out, std::size_t in, std::size_t k, std::mt19937_64& rng) {
  return normal_tensor<T>(Shape{out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)), rng);
}

}  // namespace mambamoe
