// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mambamoe/tape.hpp"
#include "mambamoe/tensor.hpp"

// Differentiable primitives. Every function records its result on the tape of
// its first operand. Shapes must match exactly; nothing broadcasts.
namespace mambamoe::ops {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> x, T factor);
/// x * s[index], where s is a vector variable (e.g. router weights).
template <typename T> Var<T> scale_by(Var<T> x, Var<T> s, std::size_t index);
/// [m,n] x [n,p] -> [m,p]
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> reshape(Var<T> x, Shape shape);

template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis);
/// Splits into `parts` equal pieces along `axis`.
template <typename T> std::vector<Var<T>> split(Var<T> x, std::size_t parts, std::size_t axis);

/// out[i] = x[index[i]]. Used for every scan reordering.
template <typename T> Var<T> gather(Var<T> x, std::vector<std::size_t> index, Shape out_shape);

/// Stride-1 cross-correlation with zero padding (k-1)/2, k in {1,3}.
/// x [Cin,h,w], weight [Cout,Cin,k,k], bias [Cout] -> [Cout,h,w]
template <typename T> Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias);

/// Non-overlapping 2x2 mean, trailing odd row/column dropped.
template <typename T> Var<T> avg_pool2(Var<T> x);

/// [C,h,w] -> [1,C] spatial mean.
template <typename T> Var<T> global_avg_pool(Var<T> x);

/// Channel-axis layer normalization at every spatial location of [C,h,w].
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

/// Half-pixel-centre bilinear resize of [C,h,w] to [C,H,W], H>=h, W>=w.
template <typename T> Var<T> bilinear_upsample(Var<T> x, std::size_t height, std::size_t width);

/// Max-subtracted softmax along `axis`.
template <typename T> Var<T> softmax(Var<T> x, std::size_t axis);

/// Mean negative log-likelihood of logits [K,h,w] over pixels with mask=1 and
/// label>0. Returns exactly 0 when that set is empty.
template <typename T>
Var<T> masked_cross_entropy(Var<T> logits, const LabelRaster& labels, std::span<const std::uint8_t> mask);

// Forward-only kernels shared with reference code.
template <typename T> Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis);

}  // namespace mambamoe::ops
