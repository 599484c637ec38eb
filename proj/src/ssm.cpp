// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mambamoe/ops.hpp"

namespace mambamoe {

std::string_view direction_name(ScanDirection dir) {
  switch (dir) {
    case ScanDirection::TL_BR: return "TL_BR";
    case ScanDirection::BR_TL: return "BR_TL";
    case ScanDirection::TR_BL: return "TR_BL";
    case ScanDirection::BL_TR: return "BL_TR";
    case ScanDirection::SPEC_FWD: return "SPEC_FWD";
    case ScanDirection::SPEC_BWD: return "SPEC_BWD";
  }
  return "?";
}

bool is_spatial(ScanDirection dir) { return dir != ScanDirection::SPEC_FWD && dir != ScanDirection::SPEC_BWD; }

bool is_vertical(ScanDirection dir) { return dir == ScanDirection::TR_BL || dir == ScanDirection::BL_TR; }

std::vector<std::size_t> scan_order(ScanDirection dir, std::size_t height, std::size_t width) {
  if (!is_spatial(dir)) {
    throw std::invalid_argument("scan_order: " + std::string(direction_name(dir)) + " is not a spatial direction");
  }
  std::vector<std::size_t> order;
  order.reserve(height * width);
  switch (dir) {
    case ScanDirection::TL_BR:
    case ScanDirection::BR_TL:
      order.resize(height * width);
      std::iota(order.begin(), order.end(), std::size_t{0});
      break;
    default:
      for (std::size_t c = width; c-- > 0;)
        for (std::size_t r = 0; r < height; ++r) order.push_back(r * width + c);
      break;
  }
  if (dir == ScanDirection::BR_TL || dir == ScanDirection::BL_TR) std::reverse(order.begin(), order.end());
  return order;
}

template <typename T>
SsmParams<T> init_ssm(const std::string& prefix, std::size_t state_dim, std::size_t embed_dim,
                      std::mt19937_64& rng) {
  SsmParams<T> p = zero_ssm<T>(prefix, state_dim, embed_dim);
  std::normal_distribution<double> jitter(0.0, 0.01);
  std::normal_distribution<double> proj(0.0, 1.0 / std::sqrt(static_cast<double>(state_dim)));
  for (std::size_t i = 0; i < state_dim; ++i)
    for (std::size_t j = 0; j < state_dim; ++j)
      p.a_bar.value.at(i, j) = static_cast<T>((i == j ? 0.9 : 0.0) + jitter(rng));
  for (T& v : p.b_bar.value.vec()) v = static_cast<T>(proj(rng));
  for (T& v : p.c_out.value.vec()) v = static_cast<T>(proj(rng));
  return p;
}

template <typename T>
SsmParams<T> zero_ssm(const std::string& prefix, std::size_t state_dim, std::size_t embed_dim) {
  return SsmParams<T>{Parameter<T>(prefix + ".a_bar", Tensor<T>(Shape{state_dim, state_dim})),
                      Parameter<T>(prefix + ".b_bar", Tensor<T>(Shape{state_dim, embed_dim})),
                      Parameter<T>(prefix + ".c_out", Tensor<T>(Shape{embed_dim, state_dim}))};
}

double spectral_radius_estimate(const Tensor<double>& a, std::size_t iterations) {
  const std::size_t d = a.dim(0);
  std::vector<double> v(d), next(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 / std::sqrt(static_cast<double>(d)) * (1.0 + 0.01 * i);
  double log_growth = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += a.at(i, j) * v[j];
      next[i] = acc;
      norm += acc * acc;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    log_growth += std::log(norm);
    for (std::size_t i = 0; i < d; ++i) v[i] = next[i] / norm;
  }
  return std::exp(log_growth / static_cast<double>(iterations));
}

namespace {

void check_ssm_shapes(const Shape& a, const Shape& b, const Shape& c, std::size_t embed, const char* op) {
  if (a.rank() != 2 || a[0] != a[1]) throw ShapeError(std::string(op) + ": A must be square, got " + a.str());
  const std::size_t d = a[0];
  if (b != Shape{d, embed} || c != Shape{embed, d}) {
    throw ShapeError(std::string(op) + ": embedding width " + std::to_string(embed) + " incompatible with B " +
                     b.str() + " / C " + c.str());
  }
}

}  // namespace

template <typename T>
ScanKernelResult<T> scan_kernel(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& seq,
                                std::size_t batch) {
  if (seq.rank() < 2 || batch == 0 || seq.numel() % batch != 0) {
    throw ShapeError("ssm scan: sequence " + seq.shape().str() + " not divisible into " + std::to_string(batch) +
                     " streams");
  }
  const std::size_t steps = seq.dim(0);
  const std::size_t embed = seq.numel() / (steps * batch);
  check_ssm_shapes(a.shape(), b.shape(), c.shape(), embed, "ssm scan");
  const std::size_t d = a.dim(0);
  const auto& av = a.vec();
  const auto& bv = b.vec();
  const auto& cv = c.vec();
  const auto& f = seq.vec();

  ScanKernelResult<T> res{Tensor<T>(seq.shape()), std::vector<T>(batch * steps * d, T(0))};
  auto& y = res.y.vec();
  std::vector<T> prev(d);
  for (std::size_t n = 0; n < batch; ++n) {
    std::fill(prev.begin(), prev.end(), T(0));
    for (std::size_t t = 0; t < steps; ++t) {
      const T* ft = f.data() + (t * batch + n) * embed;
      T* h = res.states.data() + (n * steps + t) * d;
      for (std::size_t i = 0; i < d; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += av[i * d + j] * prev[j];
        for (std::size_t e = 0; e < embed; ++e) acc += bv[i * embed + e] * ft[e];
        h[i] = acc;
      }
      T* yt = y.data() + (t * batch + n) * embed;
      for (std::size_t e = 0; e < embed; ++e) {
        T acc = 0;
        for (std::size_t j = 0; j < d; ++j) acc += cv[e * d + j] * h[j];
        yt[e] = acc + ft[e];
      }
      std::copy(h, h + d, prev.begin());
    }
  }
  return res;
}

template <typename T>
Var<T> record_scan(SsmVars<T> p, Var<T> seq, std::size_t batch, ScanKernelResult<T> result) {
  const std::size_t steps = seq.shape()[0];
  const std::size_t embed = seq.value().numel() / (steps * batch);
  const std::size_t d = p.a_bar.shape()[0];
  const std::size_t ia = p.a_bar.id, ib = p.b_bar.id, ic = p.c_out.id, is = seq.id;
  const std::uint64_t flops = 1ULL * steps * batch * (2 * d * d + 2 * d * embed + 2 * embed * d + embed);
  return seq.tape->record(
      "ssm_scan", std::move(result.y), {seq, p.a_bar, p.b_bar, p.c_out},
      [=, states = std::move(result.states)](Tape<T>& t, std::span<const T> gy) {
        const auto& av = t.value(ia).vec();
        const auto& bv = t.value(ib).vec();
        const auto& cv = t.value(ic).vec();
        const auto& f = t.value(is).vec();
        auto ga = t.grad_of(ia);
        auto gb = t.grad_of(ib);
        auto gc = t.grad_of(ic);
        auto gf = t.grad_of(is);
        std::vector<T> gh(d), carry(d);
        for (std::size_t n = 0; n < batch; ++n) {
          std::fill(carry.begin(), carry.end(), T(0));
          for (std::size_t t_ = steps; t_-- > 0;) {
            const std::size_t tok = (t_ * batch + n) * embed;
            const T* h = states.data() + (n * steps + t_) * d;
            const T* hprev = t_ > 0 ? states.data() + (n * steps + t_ - 1) * d : nullptr;
            for (std::size_t j = 0; j < d; ++j) {
              T acc = carry[j];
              for (std::size_t e = 0; e < embed; ++e) acc += cv[e * d + j] * gy[tok + e];
              gh[j] = acc;
            }
            if (!gc.empty())
              for (std::size_t e = 0; e < embed; ++e)
                for (std::size_t j = 0; j < d; ++j) gc[e * d + j] += gy[tok + e] * h[j];
            if (!ga.empty() && hprev != nullptr)
              for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += gh[i] * hprev[j];
            if (!gb.empty())
              for (std::size_t i = 0; i < d; ++i)
                for (std::size_t e = 0; e < embed; ++e) gb[i * embed + e] += gh[i] * f[tok + e];
            if (!gf.empty())
              for (std::size_t e = 0; e < embed; ++e) {
                T acc = gy[tok + e];
                for (std::size_t i = 0; i < d; ++i) acc += bv[i * embed + e] * gh[i];
                gf[tok + e] += acc;
              }
            for (std::size_t j = 0; j < d; ++j) {
              T acc = 0;
              for (std::size_t i = 0; i < d; ++i) acc += av[i * d + j] * gh[i];
              carry[j] = acc;
            }
          }
        }
      },
      flops);
}

template <typename T>
Var<T> ssm_recurrence(SsmVars<T> p, Var<T> seq) {
  if (seq.shape().rank() != 2) throw ShapeError("ssm_recurrence: expected [T,E], got " + seq.shape().str());
  auto res = scan_kernel(p.a_bar.value(), p.b_bar.value(), p.c_out.value(), seq.value(), 1);
  return record_scan(p, seq, 1, std::move(res));
}

template <typename T>
Var<T> flatten_spatial(Var<T> x, ScanDirection dir) {
  const Shape& s = x.shape();
  if (s.rank() != 3) throw ShapeError("flatten_spatial: expected [E,h,w], got " + s.str());
  const std::size_t e = s[0], h = s[1], w = s[2];
  const auto order = scan_order(dir, h, w);
  std::vector<std::size_t> index(h * w * e);
  for (std::size_t t = 0; t < h * w; ++t)
    for (std::size_t ch = 0; ch < e; ++ch) index[t * e + ch] = ch * h * w + order[t];
  return ops::gather(x, std::move(index), Shape{h * w, e});
}

template <typename T>
Var<T> unflatten_spatial(Var<T> seq, ScanDirection dir, std::size_t height, std::size_t width) {
  const Shape& s = seq.shape();
  if (s.rank() != 2 || s[0] != height * width) {
    throw ShapeError("unflatten_spatial: sequence " + s.str() + " does not cover a " + std::to_string(height) +
                     "x" + std::to_string(width) + " grid");
  }
  const std::size_t e = s[1];
  const auto order = scan_order(dir, height, width);
  std::vector<std::size_t> index(height * width * e);
  for (std::size_t t = 0; t < height * width; ++t)
    for (std::size_t ch = 0; ch < e; ++ch) index[ch * height * width + order[t]] = t * e + ch;
  return ops::gather(seq, std::move(index), Shape{e, height, width});
}

template <typename T>
Var<T> spatial_expert_forward(Graph<T>& g, SsmParams<T>& p, Var<T> x, ScanDirection dir) {
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  Var<T> seq = flatten_spatial(x, dir);
  g.count_spatial_scan();
  Var<T> y = ssm_recurrence(bind_ssm(g, p), seq);
  return unflatten_spatial(y, dir, h, w);
}

template <typename T>
Var<T> spectral_bidirectional(Graph<T>& g, SsmParams<T>& fwd, SsmParams<T>& bwd, Var<T> x) {
  const Shape& s = x.shape();
  if (s.rank() != 3) throw ShapeError("spectral_bidirectional: expected [C,h,w], got " + s.str());
  const std::size_t bands = s[0], pixels = s[1] * s[2];
  // [bands, h, w] is already [T, N, 1] with T = band index.
  Var<T> seq = ops::reshape(x, Shape{bands, pixels, 1});
  SsmVars<T> fv = bind_ssm(g, fwd);
  Var<T> y_fwd = record_scan(fv, seq, pixels, scan_kernel(fv.a_bar.value(), fv.b_bar.value(), fv.c_out.value(),
                                                           seq.value(), pixels));

  std::vector<std::size_t> flip(bands * pixels);
  for (std::size_t t = 0; t < bands; ++t)
    for (std::size_t n = 0; n < pixels; ++n) flip[t * pixels + n] = (bands - 1 - t) * pixels + n;
  Var<T> rev = ops::gather(seq, flip, Shape{bands, pixels, 1});
  SsmVars<T> bv = bind_ssm(g, bwd);
  Var<T> y_rev = record_scan(bv, rev, pixels, scan_kernel(bv.a_bar.value(), bv.b_bar.value(), bv.c_out.value(),
                                                          rev.value(), pixels));
  Var<T> y_bwd = ops::gather(y_rev, flip, Shape{bands, pixels, 1});
  return ops::reshape(ops::add(y_fwd, y_bwd), s);
}

#define MAMBAMOE_INSTANTIATE_SSM(T)                                                                          \
  template SsmParams<T> init_ssm<T>(const std::string&, std::size_t, std::size_t, std::mt19937_64&);         \
  template SsmParams<T> zero_ssm<T>(const std::string&, std::size_t, std::size_t);                           \
  template ScanKernelResult<T> scan_kernel(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                           const Tensor<T>&, std::size_t);                                   \
  template Var<T> record_scan(SsmVars<T>, Var<T>, std::size_t, ScanKernelResult<T>);                         \
  template Var<T> ssm_recurrence(SsmVars<T>, Var<T>);                                                        \
  template Var<T> flatten_spatial(Var<T>, ScanDirection);                                                    \
  template Var<T> unflatten_spatial(Var<T>, ScanDirection, std::size_t, std::size_t);                        \
  template Var<T> spatial_expert_forward(Graph<T>&, SsmParams<T>&, Var<T>, ScanDirection);                   \
  template Var<T> spectral_bidirectional(Graph<T>&, SsmParams<T>&, SsmParams<T>&, Var<T>);

MAMBAMOE_INSTANTIATE_SSM(float)
MAMBAMOE_INSTANTIATE_SSM(double)

}  // namespace mambamoe
