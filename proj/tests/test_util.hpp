// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "mambamoe/init.hpp"
#include "mambamoe/ops.hpp"
#include "mambamoe/tape.hpp"

namespace testutil {

using namespace mambamoe;

inline Tensor<double> randn(Shape s, std::mt19937_64& rng, double sd = 1.0) {
  return normal_tensor<double>(std::move(s), sd, rng);
}

inline Parameter<double> rparam(const std::string& name, Shape s, std::mt19937_64& rng, double sd = 1.0) {
  return Parameter<double>(name, randn(std::move(s), rng, sd));
}

/// Scalar loss sum(y * w); with a random w every output element reaches the
/// gradient.
inline Var<double> weighted(Var<double> y, const Tensor<double>& w) {
  return ops::sum(ops::mul(y, y.tape->constant(w)));
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::mt19937_64 rng(std::random_device{}());
  auto p = std::filesystem::temp_directory_path() / ("mambamoe_" + tag + "_" + std::to_string(rng()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
