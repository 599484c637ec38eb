// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mambamoe::ops {
namespace {

template <typename T>
void check_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw TapeError(std::string(op) + ": operands on different tapes");
}

// Shape of an [outer, axis, inner] view around `axis`.
struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + s.str());
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) v.inner *= s[i];
  return v;
}

void require_chw(const Shape& s, const char* op) {
  if (s.rank() != 3) throw ShapeError(std::string(op) + ": expected [C,h,w], got " + s.str());
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "add");
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {a, b},
                        [ia, ib](Tape<T>& t, std::span<const T> g) {
                          for (std::size_t id : {ia, ib}) {
                            auto gi = t.grad_of(id);
                            for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
                          }
                        },
                        out.numel());
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "sub");
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("sub", std::move(out), {a, b},
                        [ia, ib](Tape<T>& t, std::span<const T> g) {
                          auto ga = t.grad_of(ia);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                          auto gb = t.grad_of(ib);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                        },
                        out.numel());
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "mul");
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {a, b},
                        [ia, ib](Tape<T>& t, std::span<const T> g) {
                          const auto& av = t.value(ia).vec();
                          const auto& bv = t.value(ib).vec();
                          auto ga = t.grad_of(ia);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
                          auto gb = t.grad_of(ib);
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
                        },
                        out.numel());
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (T& v : out.vec()) v *= factor;
  const std::size_t ix = x.id;
  return x.tape->record("scale", std::move(out), {x},
                        [ix, factor](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
                        },
                        out.numel());
}

template <typename T>
Var<T> scale_by(Var<T> x, Var<T> s, std::size_t index) {
  check_same_tape(x, s, "scale_by");
  if (index >= s.value().numel()) {
    throw ShapeError("scale_by: index " + std::to_string(index) + " outside " + s.shape().str());
  }
  const T factor = s.value()[index];
  Tensor<T> out = x.value();
  for (T& v : out.vec()) v *= factor;
  const std::size_t ix = x.id, is = s.id;
  return x.tape->record("scale_by", std::move(out), {x, s},
                        [ix, is, index](Tape<T>& t, std::span<const T> g) {
                          const T f = t.value(is)[index];
                          const auto& xv = t.value(ix).vec();
                          auto gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * f;
                          auto gs = t.grad_of(is);
                          if (!gs.empty()) {
                            T acc = 0;
                            for (std::size_t i = 0; i < xv.size(); ++i) acc += g[i] * xv[i];
                            gs[index] += acc;
                          }
                        },
                        out.numel());
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.rank() != 2 || sb.rank() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: shape mismatch " + sa.str() + " x " + sb.str());
  }
  const std::size_t m = sa[0], n = sa[1], p = sb[1];
  Tensor<T> out(Shape{m, p});
  const auto& av = a.value().vec();
  const auto& bv = b.value().vec();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = av[i * n + k];
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += aik * bv[k * p + j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {a, b},
                        [ia, ib, m, n, p](Tape<T>& t, std::span<const T> g) {
                          const auto& av = t.value(ia).vec();
                          const auto& bv = t.value(ib).vec();
                          auto ga = t.grad_of(ia);
                          if (!ga.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t k = 0; k < n; ++k) {
                                T acc = 0;
                                for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bv[k * p + j];
                                ga[i * n + k] += acc;
                              }
                          }
                          auto gb = t.grad_of(ib);
                          if (!gb.empty()) {
                            for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t k = 0; k < n; ++k) {
                                const T aik = av[i * n + k];
                                for (std::size_t j = 0; j < p; ++j) gb[k * p + j] += aik * g[i * p + j];
                              }
                          }
                        },
                        2ULL * m * n * p);
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (T& v : out.vec()) v = v > T(0) ? v : T(0);
  const std::size_t ix = x.id;
  return x.tape->record("relu", std::move(out), {x},
                        [ix](Tape<T>& t, std::span<const T> g) {
                          const auto& xv = t.value(ix).vec();
                          auto gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            if (xv[i] > T(0)) gx[i] += g[i];
                        },
                        out.numel());
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc = 0;
  for (T v : x.value().vec()) acc += v;
  const std::size_t ix = x.id;
  return x.tape->record("sum", Tensor<T>(Shape{1}, std::vector<T>{acc}), {x},
                        [ix](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (T& v : gx) v += g[0];
                        },
                        x.value().numel());
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.tape->record("reshape", std::move(out), {x}, [ix](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_of(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no operands");
  const Shape& s0 = xs[0].shape();
  std::vector<std::size_t> dims = s0.dims();
  if (axis >= dims.size()) throw ShapeError("concat: axis out of range for " + s0.str());
  std::size_t total = 0;
  for (const auto& x : xs) {
    check_same_tape(xs[0], x, "concat");
    const Shape& s = x.shape();
    bool ok = s.rank() == s0.rank();
    for (std::size_t i = 0; ok && i < s.rank(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shape mismatch " + s0.str() + " vs " + s.str());
    total += s[axis];
  }
  dims[axis] = total;
  Shape out_shape(dims);
  const AxisView ov = axis_view(out_shape, axis, "concat");
  Tensor<T> out(out_shape);
  std::vector<std::size_t> ids, offsets, extents;
  std::size_t off = 0;
  for (const auto& x : xs) {
    const std::size_t e = x.shape()[axis];
    const auto& xv = x.value().vec();
    for (std::size_t o = 0; o < ov.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * e * ov.inner), e * ov.inner,
                  out.vec().begin() + static_cast<std::ptrdiff_t>((o * ov.extent + off) * ov.inner));
    ids.push_back(x.id);
    offsets.push_back(off);
    extents.push_back(e);
    off += e;
  }
  return xs[0].tape->record("concat", std::move(out), xs,
                            [ids, offsets, extents, ov](Tape<T>& t, std::span<const T> g) {
                              for (std::size_t k = 0; k < ids.size(); ++k) {
                                auto gx = t.grad_of(ids[k]);
                                if (gx.empty()) continue;
                                const std::size_t e = extents[k];
                                for (std::size_t o = 0; o < ov.outer; ++o)
                                  for (std::size_t i = 0; i < e * ov.inner; ++i)
                                    gx[o * e * ov.inner + i] += g[(o * ov.extent + offsets[k]) * ov.inner + i];
                              }
                            });
}

template <typename T>
std::vector<Var<T>> split(Var<T> x, std::size_t parts, std::size_t axis) {
  const Shape& s = x.shape();
  const AxisView v = axis_view(s, axis, "split");
  if (parts == 0 || v.extent % parts != 0) {
    throw ShapeError("split: extent " + std::to_string(v.extent) + " of " + s.str() + " not divisible into " +
                     std::to_string(parts) + " parts");
  }
  const std::size_t e = v.extent / parts;
  std::vector<std::size_t> dims = s.dims();
  dims[axis] = e;
  std::vector<Var<T>> outs;
  for (std::size_t k = 0; k < parts; ++k) {
    Tensor<T> out{Shape(dims)};
    const auto& xv = x.value().vec();
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.extent + k * e) * v.inner), e * v.inner,
                  out.vec().begin() + static_cast<std::ptrdiff_t>(o * e * v.inner));
    const std::size_t ix = x.id;
    outs.push_back(x.tape->record("split", std::move(out), {x},
                                  [ix, v, e, k](Tape<T>& t, std::span<const T> g) {
                                    auto gx = t.grad_of(ix);
                                    for (std::size_t o = 0; o < v.outer; ++o)
                                      for (std::size_t i = 0; i < e * v.inner; ++i)
                                        gx[(o * v.extent + k * e) * v.inner + i] += g[o * e * v.inner + i];
                                  }));
  }
  return outs;
}

template <typename T>
Var<T> gather(Var<T> x, std::vector<std::size_t> index, Shape out_shape) {
  if (index.size() != out_shape.numel()) {
    throw ShapeError("gather: index length " + std::to_string(index.size()) + " does not match " +
                     out_shape.str());
  }
  const auto& xv = x.value().vec();
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw ShapeError("gather: index out of range for " + x.shape().str());
    out[i] = xv[index[i]];
  }
  const std::size_t ix = x.id;
  return x.tape->record("gather", std::move(out), {x},
                        [ix, index = std::move(index)](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
                        });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias) {
  check_same_tape(x, weight, "conv2d");
  check_same_tape(x, bias, "conv2d");
  require_chw(x.shape(), "conv2d");
  const Shape& ws = weight.shape();
  if (ws.rank() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d: weight must be [Cout,Cin,k,k], got " + ws.str());
  const std::size_t k = ws[2];
  if (k != 1 && k != 3) throw ShapeError("conv2d: kernel size " + std::to_string(k) + " not in {1,3}");
  const std::size_t cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2], cout = ws[0];
  if (ws[1] != cin) {
    throw ShapeError("conv2d: channel mismatch, input " + x.shape().str() + " vs weight " + ws.str());
  }
  if (bias.shape() != Shape{cout}) {
    throw ShapeError("conv2d: bias shape " + bias.shape().str() + " vs " + std::to_string(cout) + " outputs");
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  const auto& xv = x.value().vec();
  const auto& wv = weight.value().vec();
  const auto& bv = bias.value().vec();
  Tensor<T> out(Shape{cout, h, w});
  auto& ov = out.vec();

  // Visits (output index, input index) pairs for tap (dr,dc) over the valid
  // output window.
  auto for_tap = [=](std::size_t dr, std::size_t dc, auto&& body) {
    const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(dr) - pad;
    const std::ptrdiff_t sc = static_cast<std::ptrdiff_t>(dc) - pad;
    const std::ptrdiff_t r0 = std::max<std::ptrdiff_t>(0, -sr), r1 = std::min(H, H - sr);
    const std::ptrdiff_t c0 = std::max<std::ptrdiff_t>(0, -sc), c1 = std::min(W, W - sc);
    for (std::ptrdiff_t r = r0; r < r1; ++r)
      for (std::ptrdiff_t c = c0; c < c1; ++c)
        body(static_cast<std::size_t>(r * W + c), static_cast<std::size_t>((r + sr) * W + (c + sc)));
  };

  for (std::size_t o = 0; o < cout; ++o) {
    T* yo = ov.data() + o * h * w;
    std::fill(yo, yo + h * w, bv[o]);
    for (std::size_t i = 0; i < cin; ++i) {
      const T* xi = xv.data() + i * h * w;
      for (std::size_t dr = 0; dr < k; ++dr)
        for (std::size_t dc = 0; dc < k; ++dc) {
          const T wk = wv[((o * cin + i) * k + dr) * k + dc];
          for_tap(dr, dc, [&](std::size_t yi, std::size_t xi_idx) { yo[yi] += wk * xi[xi_idx]; });
        }
    }
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  const std::uint64_t flops = 2ULL * cin * k * k * cout * h * w + 1ULL * cout * h * w;
  return x.tape->record(
      "conv2d", std::move(out), {x, weight, bias},
      [=](Tape<T>& t, std::span<const T> g) {
        const auto& xv = t.value(ix).vec();
        const auto& wv = t.value(iw).vec();
        auto gx = t.grad_of(ix);
        auto gw = t.grad_of(iw);
        auto gb = t.grad_of(ib);
        for (std::size_t o = 0; o < cout; ++o) {
          const T* go = g.data() + o * h * w;
          if (!gb.empty()) {
            T acc = 0;
            for (std::size_t p = 0; p < h * w; ++p) acc += go[p];
            gb[o] += acc;
          }
          for (std::size_t i = 0; i < cin; ++i) {
            const T* xi = xv.data() + i * h * w;
            for (std::size_t dr = 0; dr < k; ++dr)
              for (std::size_t dc = 0; dc < k; ++dc) {
                const std::size_t widx = ((o * cin + i) * k + dr) * k + dc;
                if (!gx.empty()) {
                  const T wk = wv[widx];
                  T* gxi = gx.data() + i * h * w;
                  for_tap(dr, dc, [&](std::size_t yi, std::size_t xi_idx) { gxi[xi_idx] += wk * go[yi]; });
                }
                if (!gw.empty()) {
                  T acc = 0;
                  for_tap(dr, dc, [&](std::size_t yi, std::size_t xi_idx) { acc += go[yi] * xi[xi_idx]; });
                  gw[widx] += acc;
                }
              }
          }
        }
      },
      flops);
}

template <typename T>
Var<T> avg_pool2(Var<T> x) {
  require_chw(x.shape(), "avg_pool2");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (h < 2 || w < 2) throw ShapeError("avg_pool2: spatial extent below 2 in " + x.shape().str());
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{c, oh, ow});
  const Tensor<T>& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t col = 0; col < ow; ++col)
        out.at(ch, r, col) = (xv.at(ch, 2 * r, 2 * col) + xv.at(ch, 2 * r, 2 * col + 1) +
                              xv.at(ch, 2 * r + 1, 2 * col) + xv.at(ch, 2 * r + 1, 2 * col + 1)) *
                             T(0.25);
  const std::size_t ix = x.id;
  return x.tape->record("avg_pool2", std::move(out), {x},
                        [=](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t r = 0; r < oh; ++r)
                              for (std::size_t col = 0; col < ow; ++col) {
                                const T q = g[(ch * oh + r) * ow + col] * T(0.25);
                                for (std::size_t dr = 0; dr < 2; ++dr)
                                  for (std::size_t dc = 0; dc < 2; ++dc)
                                    gx[(ch * h + 2 * r + dr) * w + 2 * col + dc] += q;
                              }
                        },
                        4ULL * c * oh * ow);
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  require_chw(x.shape(), "global_avg_pool");
  const std::size_t c = x.shape()[0], n = x.shape()[1] * x.shape()[2];
  Tensor<T> out(Shape{1, c});
  const auto& xv = x.value().vec();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < n; ++p) acc += xv[ch * n + p];
    out[ch] = acc / static_cast<T>(n);
  }
  const std::size_t ix = x.id;
  return x.tape->record("global_avg_pool", std::move(out), {x},
                        [=](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            const T q = g[ch] / static_cast<T>(n);
                            for (std::size_t p = 0; p < n; ++p) gx[ch * n + p] += q;
                          }
                        },
                        1ULL * c * n + c);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  require_chw(x.shape(), "layer_norm");
  const std::size_t c = x.shape()[0], n = x.shape()[1] * x.shape()[2];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine shapes " + gamma.shape().str() + "/" + beta.shape().str() +
                     " vs channels of " + x.shape().str());
  }
  const auto& xv = x.value().vec();
  const auto& gv = gamma.value().vec();
  const auto& bv = beta.value().vec();
  std::vector<T> xhat(c * n), inv_std(n);
  Tensor<T> out(x.shape());
  for (std::size_t p = 0; p < n; ++p) {
    T mean = 0;
    for (std::size_t ch = 0; ch < c; ++ch) mean += xv[ch * n + p];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = xv[ch * n + p] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[p] = is;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T xh = (xv[ch * n + p] - mean) * is;
      xhat[ch * n + p] = xh;
      out[ch * n + p] = gv[ch] * xh + bv[ch];
    }
  }
  const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::span<const T> g) {
        const auto& gv = t.value(ig).vec();
        auto gx = t.grad_of(ix);
        auto gg = t.grad_of(ig);
        auto gb = t.grad_of(ib);
        for (std::size_t p = 0; p < n; ++p) {
          T mean_d = 0, mean_dx = 0;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t q = ch * n + p;
            const T d = g[q] * gv[ch];
            mean_d += d;
            mean_dx += d * xhat[q];
            if (!gg.empty()) gg[ch] += g[q] * xhat[q];
            if (!gb.empty()) gb[ch] += g[q];
          }
          if (gx.empty()) continue;
          mean_d /= static_cast<T>(c);
          mean_dx /= static_cast<T>(c);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t q = ch * n + p;
            gx[q] += inv_std[p] * (g[q] * gv[ch] - mean_d - xhat[q] * mean_dx);
          }
        }
      },
      8ULL * c * n);
}

namespace {

struct LerpTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
};

// Half-pixel centres: src = (dst + 0.5) * in / out - 0.5, clamped at 0.
std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    taps[d].lo = lo;
    taps[d].hi = std::min(lo + 1, in - 1);
    taps[d].frac = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace

template <typename T>
Var<T> bilinear_upsample(Var<T> x, std::size_t height, std::size_t width) {
  require_chw(x.shape(), "bilinear_upsample");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (height < h || width < w) {
    throw ShapeError("bilinear_upsample: target " + std::to_string(height) + "x" + std::to_string(width) +
                     " smaller than source " + x.shape().str());
  }
  const auto rows = lerp_taps(h, height);
  const auto cols = lerp_taps(w, width);
  const Tensor<T>& xv = x.value();
  Tensor<T> out(Shape{c, height, width});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < height; ++r) {
      const T fr = static_cast<T>(rows[r].frac);
      for (std::size_t col = 0; col < width; ++col) {
        const T fc = static_cast<T>(cols[col].frac);
        const T top = xv.at(ch, rows[r].lo, cols[col].lo) * (T(1) - fc) + xv.at(ch, rows[r].lo, cols[col].hi) * fc;
        const T bot = xv.at(ch, rows[r].hi, cols[col].lo) * (T(1) - fc) + xv.at(ch, rows[r].hi, cols[col].hi) * fc;
        out.at(ch, r, col) = top * (T(1) - fr) + bot * fr;
      }
    }
  const std::size_t ix = x.id;
  return x.tape->record("bilinear_upsample", std::move(out), {x},
                        [=](Tape<T>& t, std::span<const T> g) {
                          auto gx = t.grad_of(ix);
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t r = 0; r < height; ++r) {
                              const T fr = static_cast<T>(rows[r].frac);
                              for (std::size_t col = 0; col < width; ++col) {
                                const T fc = static_cast<T>(cols[col].frac);
                                const T go = g[(ch * height + r) * width + col];
                                auto acc = [&](std::size_t rr, std::size_t cc, T wgt) {
                                  gx[(ch * h + rr) * w + cc] += go * wgt;
                                };
                                acc(rows[r].lo, cols[col].lo, (T(1) - fr) * (T(1) - fc));
                                acc(rows[r].lo, cols[col].hi, (T(1) - fr) * fc);
                                acc(rows[r].hi, cols[col].lo, fr * (T(1) - fc));
                                acc(rows[r].hi, cols[col].hi, fr * fc);
                              }
                            }
                        },
                        8ULL * c * height * width);
}

template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "softmax");
  Tensor<T> out(x.shape());
  const auto& xv = x.vec();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < v.extent; ++k) mx = std::max(mx, xv[base + k * v.inner]);
      T denom = 0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const T e = std::exp(xv[base + k * v.inner] - mx);
        out[base + k * v.inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] /= denom;
    }
  return out;
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis, "softmax");
  Tensor<T> out = softmax_values(x.value(), axis);
  const std::size_t ix = x.id, self = x.tape->size();
  return x.tape->record("softmax", std::move(out), {x},
                        [=](Tape<T>& t, std::span<const T> g) {
                          const auto& y = t.value(self).vec();
                          auto gx = t.grad_of(ix);
                          for (std::size_t o = 0; o < v.outer; ++o)
                            for (std::size_t i = 0; i < v.inner; ++i) {
                              const std::size_t base = o * v.extent * v.inner + i;
                              T dot = 0;
                              for (std::size_t k = 0; k < v.extent; ++k)
                                dot += g[base + k * v.inner] * y[base + k * v.inner];
                              for (std::size_t k = 0; k < v.extent; ++k) {
                                const std::size_t q = base + k * v.inner;
                                gx[q] += y[q] * (g[q] - dot);
                              }
                            }
                        },
                        4ULL * x.value().numel());
}

template <typename T>
Var<T> masked_cross_entropy(Var<T> logits, const LabelRaster& labels, std::span<const std::uint8_t> mask) {
  require_chw(logits.shape(), "masked_cross_entropy");
  const std::size_t k = logits.shape()[0], h = logits.shape()[1], w = logits.shape()[2];
  if (labels.height != h || labels.width != w || mask.size() != h * w) {
    throw ShapeError("masked_cross_entropy: logits " + logits.shape().str() + " vs labels [" +
                     std::to_string(labels.height) + "," + std::to_string(labels.width) + "] / mask of " +
                     std::to_string(mask.size()));
  }
  const std::size_t n = h * w;
  std::vector<std::size_t> positions;
  for (std::size_t p = 0; p < n; ++p) {
    const std::uint16_t y = labels.labels[p];
    if (y > k) {
      throw ShapeError("masked_cross_entropy: label " + std::to_string(y) + " exceeds class count " +
                       std::to_string(k));
    }
    if (mask[p] != 0 && y > 0) positions.push_back(p);
  }
  const Tensor<T> probs = softmax_values(logits.value(), 0);
  const auto& sv = logits.value().vec();
  T loss = 0;
  for (std::size_t p : positions) {
    T mx = sv[p];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, sv[c * n + p]);
    T denom = 0;
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(sv[c * n + p] - mx);
    const std::size_t y = labels.labels[p] - 1u;
    loss -= sv[y * n + p] - mx - std::log(denom);
  }
  const std::size_t count = positions.size();
  if (count > 0) loss /= static_cast<T>(count);
  const std::size_t il = logits.id;
  std::vector<std::uint16_t> targets;
  for (std::size_t p : positions) targets.push_back(labels.labels[p]);
  return logits.tape->record(
      "masked_cross_entropy", Tensor<T>(Shape{1}, std::vector<T>{loss}), {logits},
      [=, positions = std::move(positions), targets = std::move(targets)](Tape<T>& t, std::span<const T> g) {
        if (count == 0) return;
        auto gl = t.grad_of(il);
        const T q = g[0] / static_cast<T>(count);
        for (std::size_t j = 0; j < positions.size(); ++j) {
          const std::size_t p = positions[j];
          for (std::size_t c = 0; c < k; ++c) gl[c * n + p] += q * probs[c * n + p];
          gl[(targets[j] - 1u) * n + p] -= q;
        }
      },
      4ULL * k * count);
}

#define MAMBAMOE_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add(Var<T>, Var<T>);                                                               \
  template Var<T> sub(Var<T>, Var<T>);                                                               \
  template Var<T> mul(Var<T>, Var<T>);                                                               \
  template Var<T> scale(Var<T>, T);                                                                  \
  template Var<T> scale_by(Var<T>, Var<T>, std::size_t);                                             \
  template Var<T> matmul(Var<T>, Var<T>);                                                            \
  template Var<T> relu(Var<T>);                                                                      \
  template Var<T> sum(Var<T>);                                                                       \
  template Var<T> reshape(Var<T>, Shape);                                                            \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                   \
  template std::vector<Var<T>> split(Var<T>, std::size_t, std::size_t);                              \
  template Var<T> gather(Var<T>, std::vector<std::size_t>, Shape);                                   \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>);                                                    \
  template Var<T> avg_pool2(Var<T>);                                                                 \
  template Var<T> global_avg_pool(Var<T>);                                                           \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                             \
  template Var<T> bilinear_upsample(Var<T>, std::size_t, std::size_t);                               \
  template Var<T> softmax(Var<T>, std::size_t);                                                      \
  template Var<T> masked_cross_entropy(Var<T>, const LabelRaster&, std::span<const std::uint8_t>);   \
  template Tensor<T> softmax_values(const Tensor<T>&, std::size_t);

MAMBAMOE_INSTANTIATE_OPS(float)
MAMBAMOE_INSTANTIATE_OPS(double)

}  // namespace mambamoe::ops
