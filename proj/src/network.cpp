// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "byte_io.hpp"
#include "mambamoe/init.hpp"
#include "mambamoe/ops.hpp"

namespace mambamoe {

double SeededRng::uniform() {
  ++draws;
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine);
}

template <typename T>
NetworkParams<T> init_network(const NetworkConfig& c, std::uint64_t seed) {
  if (c.bands == 0 || c.classes == 0) throw std::invalid_argument("network needs bands and classes");
  if (c.channels == 0 || c.channels % 2 != 0) {
    throw ShapeError("channel width C must be even, got " + std::to_string(c.channels));
  }
  std::mt19937_64 rng(seed);
  NetworkParams<T> net;
  net.config = c;
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
    return ConvParams<T>{Parameter<T>(name + ".weight", conv_weight<T>(out, in, k, rng)),
                         Parameter<T>(name + ".bias", Tensor<T>(Shape{out}))};
  };
  for (std::size_t i = 0; i < kNumStages; ++i) {
    net.stem[i] = conv("stem" + std::to_string(i + 1), c.channels, i == 0 ? c.bands : c.channels, 3);
  }
  if (c.momeb_on) {
    for (std::size_t i = 0; i < kNumStages; ++i)
      net.momeb.push_back(init_momeb<T>("momeb" + std::to_string(i + 1), c.block_shape(), rng));
  }
  for (std::size_t i = 0; i < kNumStages; ++i) {
    const std::string name = "ffb" + std::to_string(i + 1);
    net.ffb[i].conv1 = conv(name + ".conv1", c.channels, c.channels, 3);
    net.ffb[i].conv2 = conv(name + ".conv2", c.channels, c.channels, 3);
    // Residual branches start as the identity.
    net.ffb[i].conv2.weight.value = Tensor<T>(net.ffb[i].conv2.weight.value.shape());
  }
  net.head = conv("head", c.classes, c.channels, 1);
  return net;
}

template <typename T>
std::vector<Parameter<T>*> parameters(NetworkParams<T>& net) {
  std::vector<Parameter<T>*> out;
  auto push = [&](Parameter<T>& p) { out.push_back(&p); };
  for (auto& s : net.stem) {
    push(s.weight);
    push(s.bias);
  }
  for (auto& b : net.momeb) for_each_param(b, push);
  for (auto& r : net.ffb) {
    push(r.conv1.weight);
    push(r.conv1.bias);
    push(r.conv2.weight);
    push(r.conv2.bias);
  }
  push(net.head.weight);
  push(net.head.bias);
  return out;
}

template <typename T>
std::size_t parameter_count(NetworkParams<T>& net) {
  std::size_t n = 0;
  for (auto* p : parameters(net)) n += p->value.numel();
  return n;
}

template <typename U, typename T>
NetworkParams<U> convert_network(NetworkParams<T>& net) {
  NetworkParams<U> out = init_network<U>(net.config, 0);
  auto src = parameters(net);
  auto dst = parameters(out);
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->grad = Tensor<U>(dst[i]->value.shape());
  }
  return out;
}

template <typename T>
Features<T> extract_features(Graph<T>& g, NetworkParams<T>& net, Var<T> x) {
  const Shape& s = x.shape();
  if (s.rank() != 3) throw ShapeError("extract_features: expected [B,H,W], got " + s.str());
  if (s[1] < 8 || s[2] < 8) {
    throw ShapeError("extract_features: scene " + s.str() + " too small, need H and W >= 8 for three stages");
  }
  if (s[0] != net.config.bands) {
    throw ShapeError("extract_features: scene has " + std::to_string(s[0]) + " bands, network expects " +
                     std::to_string(net.config.bands));
  }
  Features<T> f;
  Var<T> cur = x;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    cur = ops::conv2d(cur, g.bind(net.stem[i].weight), g.bind(net.stem[i].bias));
    cur = ops::avg_pool2(ops::relu(cur));
    f.maps[i] = cur;
    f.extents[i] = {cur.shape()[1], cur.shape()[2]};
  }
  return f;
}

template <typename T>
Var<T> residual_block(Graph<T>& g, ResidualParams<T>& p, Var<T> x) {
  Var<T> y = ops::conv2d(ops::relu(x), g.bind(p.conv1.weight), g.bind(p.conv1.bias));
  y = ops::conv2d(ops::relu(y), g.bind(p.conv2.weight), g.bind(p.conv2.bias));
  return ops::add(x, y);
}

template <typename T>
Var<T> ffb(Graph<T>& g, ResidualParams<T>& p, Var<T> m, std::optional<Var<T>> l_next) {
  if (!l_next) return residual_block(g, p, m);
  const Shape& ms = m.shape();
  const Shape& ls = l_next->shape();
  if (ms.rank() != 3 || ls.rank() != 3 || ms[0] != ls[0] || ls[1] > ms[1] || ls[2] > ms[2]) {
    throw ShapeError("ffb: stage feature " + ms.str() + " incompatible with deeper output " + ls.str());
  }
  Var<T> up = ops::bilinear_upsample(*l_next, ms[1], ms[2]);
  return ops::add(m, residual_block(g, p, up));
}

template <typename T>
HeadOutput<T> classify_head(Graph<T>& g, ConvParams<T>& head, Var<T> features) {
  Var<T> logits = ops::conv2d(features, g.bind(head.weight), g.bind(head.bias));
  return {logits, ops::softmax(logits, 0)};
}

template <typename T>
UncertaintyMap uncertainty_map(const Tensor<T>& probs) {
  if (probs.rank() != 3) throw ShapeError("uncertainty_map: expected [K,h,w], got " + probs.shape().str());
  const std::size_t k = probs.dim(0), h = probs.dim(1), w = probs.dim(2), n = h * w;
  UncertaintyMap out{h, w, std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t p = 0; p < n; ++p) {
    double best = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = static_cast<double>(probs[c * n + p]);
      if (v < -1e-6 || v > 1.0 + 1e-6) {
        throw std::domain_error("uncertainty_map: probability " + std::to_string(v) + " outside [0,1]");
      }
      best = std::max(best, v);
    }
    const double raw = -std::log(best + kUncertaintyEps) * best;
    out.raw[p] = raw;
    out.u[p] = std::clamp(raw, 0.0, 1.0);
  }
  return out;
}

SampleMask sample_mask(const UncertaintyMap& u, SeededRng& rng) {
  SampleMask m{u.height, u.width, PixelMask(u.u.size(), 0), rng.seed, rng.draws};
  for (std::size_t p = 0; p < u.u.size(); ++p) m.mask[p] = rng.uniform() < u.u[p] ? 1 : 0;
  return m;
}

namespace {

template <typename T>
HeadOutput<T> full_resolution_head(Graph<T>& g, Var<T> l, ConvParams<T>& head, std::size_t height,
                                   std::size_t width) {
  return classify_head(g, head, ops::bilinear_upsample(l, height, width));
}

LabelRaster apply_mask(const LabelRaster& y, const PixelMask& mask) {
  if (mask.size() != y.size()) throw ShapeError("UARB mask size does not match label raster");
  LabelRaster q(y.height, y.width);
  for (std::size_t p = 0; p < y.size(); ++p) q.labels[p] = mask[p] ? y.labels[p] : 0;
  return q;
}

template <typename T>
StageSupervision<T> supervise(const HeadOutput<T>& head_out, const LabelRaster& y_train, PixelMask mask) {
  return {apply_mask(y_train, mask), head_out.logits, head_out.probs, std::move(mask)};
}

template <typename T>
StageSupervision<T> sample_stage(Graph<T>& g, const HeadOutput<T>& head_out, const LabelRaster& y_train,
                                 SeededRng& rng) {
  if (!g.training()) throw std::logic_error("UARB is training-only and must not run during inference");
  g.tape().mark_stochastic();
  SampleMask m = sample_mask(uncertainty_map(head_out.probs.value()), rng);
  return supervise(head_out, y_train, std::move(m.mask));
}

}  // namespace

template <typename T>
StageSupervision<T> uarb(Graph<T>& g, Var<T> l, ConvParams<T>& head, const LabelRaster& y_train, SeededRng& rng) {
  if (!g.training()) throw std::logic_error("UARB is training-only and must not run during inference");
  return sample_stage(g, full_resolution_head(g, l, head, y_train.height, y_train.width), y_train, rng);
}

template <typename T>
StageSupervision<T> uarb_with_mask(Graph<T>& g, Var<T> l, ConvParams<T>& head, const LabelRaster& y_train,
                                   const PixelMask& mask) {
  if (!g.training()) throw std::logic_error("UARB is training-only and must not run during inference");
  return supervise(full_resolution_head(g, l, head, y_train.height, y_train.width), y_train, mask);
}

template <typename T>
ForwardOutput<T> forward_full(Graph<T>& g, NetworkParams<T>& net, const Tensor<T>& x, const ForwardMode& mode,
                              std::optional<TrainSupervision> sup) {
  if (mode.training != g.training()) throw std::logic_error("forward_full: mode and graph disagree on training");
  if (sup && !mode.training) throw std::logic_error("forward_full: supervision supplied in inference mode");
  const std::size_t height = x.dim(1), width = x.dim(2);
  Features<T> feats = extract_features(g, net, g.constant(x));

  std::array<Var<T>, kNumStages> m = feats.maps;
  if (!net.momeb.empty()) {
    for (std::size_t i = 0; i < kNumStages; ++i) m[i] = momeb_forward(g, net.momeb[i], m[i], mode.routing);
  }

  ForwardOutput<T> out;
  out.decoder[2] = ffb<T>(g, net.ffb[2], m[2], std::nullopt);
  out.decoder[1] = ffb<T>(g, net.ffb[1], m[1], out.decoder[2]);
  out.decoder[0] = ffb<T>(g, net.ffb[0], m[0], out.decoder[1]);

  HeadOutput<T> final_head = full_resolution_head(g, out.decoder[0], net.head, height, width);
  out.logits = final_head.logits;
  out.probs = final_head.probs;

  if (sup && (sup->rng != nullptr || sup->frozen != nullptr)) {
    const LabelRaster& y = *sup->y_train;
    if (y.height != height || y.width != width) throw ShapeError("forward_full: label raster does not match scene");
    for (std::size_t i = 0; i < kNumStages; ++i) {
      // Stage 1 at full resolution is the final head itself.
      HeadOutput<T> ho = i == 0 ? final_head : full_resolution_head(g, out.decoder[i], net.head, height, width);
      if (sup->frozen != nullptr) {
        out.stages.push_back(supervise(ho, y, (*sup->frozen)[i]));
      } else {
        out.stages.push_back(sample_stage(g, ho, y, *sup->rng));
      }
    }
  }
  return out;
}

template <typename T>
LossTerms<T> total_loss(std::vector<StageSupervision<T>>& stages, const LabelRaster& gt, Var<T> final_logits) {
  const PixelMask all(gt.size(), 1);
  LossTerms<T> terms;
  terms.total = ops::masked_cross_entropy(final_logits, gt, all);
  terms.final_term = static_cast<double>(terms.total.value()[0]);
  for (auto& s : stages) {
    Var<T> ce = ops::masked_cross_entropy(s.logits, s.q, all);
    terms.stage_terms.push_back(static_cast<double>(ce.value()[0]));
    terms.total = ops::add(terms.total, ce);
  }
  return terms;
}

namespace {

void require_router(NetworkParams<float>& net) {
  if (net.momeb.empty() || !net.momeb.front().router) {
    throw std::invalid_argument("network has no routed experts (MoMEB or SRE ablated)");
  }
}

std::array<double, kNumSpatialExperts> to_array(const Tensor<float>& w) {
  std::array<double, kNumSpatialExperts> out{};
  for (std::size_t j = 0; j < kNumSpatialExperts; ++j) out[j] = static_cast<double>(w[j]);
  return out;
}

Var<float> spatial_half(Graph<float>& g, MoMebParams<float>& p, Var<float> f) {
  Var<float> x1 = ops::layer_norm(f, g.bind(p.ln1_gamma), g.bind(p.ln1_beta));
  return ops::split(x1, 2, 0)[0];
}

}  // namespace

std::vector<std::array<double, kNumSpatialExperts>> stage_routing(NetworkParams<float>& net, const Tensor<float>& x) {
  require_router(net);
  Tape<float> tape;
  Graph<float> g(tape, false);
  Features<float> f = extract_features(g, net, g.constant(x));
  std::vector<std::array<double, kNumSpatialExperts>> rows;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    auto& p = net.momeb[i];
    rows.push_back(to_array(route(g, *p.router, spatial_half(g, p, f.maps[i])).value()));
  }
  return rows;
}

std::vector<std::array<double, kNumSpatialExperts>> class_routing(NetworkParams<float>& net, const Tensor<float>& x,
                                                                  const LabelRaster& labels, std::size_t classes) {
  require_router(net);
  if (labels.height != x.dim(1) || labels.width != x.dim(2)) throw ShapeError("class_routing: labels do not match scene");
  Tape<float> tape;
  Graph<float> g(tape, false);
  Features<float> f = extract_features(g, net, g.constant(x));
  auto& p = net.momeb[0];
  const Tensor<float> spa = spatial_half(g, p, f.maps[0]).value();
  const std::size_t half = spa.dim(0), h = spa.dim(1), w = spa.dim(2);
  std::vector<std::array<double, kNumSpatialExperts>> rows;
  for (std::size_t c = 1; c <= classes; ++c) {
    std::vector<double> acc(half, 0.0);
    std::size_t n = 0;
    for (std::size_t r = 0; r < labels.height; ++r) {
      for (std::size_t col = 0; col < labels.width; ++col) {
        if (labels.at(r, col) != c || r / 2 >= h || col / 2 >= w) continue;
        for (std::size_t ch = 0; ch < half; ++ch) acc[ch] += spa.at(ch, r / 2, col / 2);
        ++n;
      }
    }
    if (n == 0) {
      std::array<double, kNumSpatialExperts> nan{};
      nan.fill(std::numeric_limits<double>::quiet_NaN());
      rows.push_back(nan);
      continue;
    }
    Tensor<float> pooled(Shape{1, half});
    for (std::size_t ch = 0; ch < half; ++ch) pooled[ch] = static_cast<float>(acc[ch] / static_cast<double>(n));
    rows.push_back(to_array(route_pooled(g, *p.router, g.constant(pooled)).value()));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[] = "MMOE1\n";

std::size_t parse_size(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw CheckpointError("checkpoint: malformed " + what + " '" + s + "'");
  }
}

bool parse_flag(const std::string& s, const std::string& key) {
  if (s == "1") return true;
  if (s == "0") return false;
  throw CheckpointError("checkpoint: malformed flag " + key + "='" + s + "'");
}

}  // namespace

std::map<std::string, std::string> config_fields(const NetworkConfig& c) {
  return {{"B", std::to_string(c.bands)},          {"K", std::to_string(c.classes)},
          {"C", std::to_string(c.channels)},       {"D", std::to_string(c.state_dim)},
          {"mlp_ratio", std::to_string(c.mlp_ratio)}, {"momeb", c.momeb_on ? "1" : "0"},
          {"sre", c.sre_on ? "1" : "0"},           {"sse", c.sse_on ? "1" : "0"}};
}

void save_checkpoint(const std::string& path, NetworkParams<float>& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  os << kCheckpointMagic;
  const auto fields = config_fields(net.config);
  os << "config " << fields.size() << '\n';
  for (const auto& [k, v] : fields) os << k << ' ' << v << '\n';
  const auto params = parameters(net);
  os << "tensors " << params.size() << '\n';
  for (const auto* p : params) {
    os << p->name << " f32 " << p->value.rank();
    for (std::size_t d : p->value.shape().dims()) os << ' ' << d;
    os << '\n';
  }
  for (const auto* p : params) detail::write_le<std::uint32_t, float>(os, p->value.data());
  if (!os) throw CheckpointError("checkpoint: write failed for '" + path + "'");
}

NetworkParams<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  std::string magic(sizeof(kCheckpointMagic) - 1, '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic in '" + path + "'");

  auto header_line = [&](const std::string& keyword) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint: truncated manifest");
    std::istringstream ls(line);
    std::string kw, count;
    ls >> kw >> count;
    if (kw != keyword) throw CheckpointError("checkpoint: expected '" + keyword + "' section, got '" + line + "'");
    return parse_size(count, keyword + " count");
  };

  std::map<std::string, std::string> fields;
  const std::size_t n_fields = header_line("config");
  for (std::size_t i = 0; i < n_fields; ++i) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint: truncated config section");
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw CheckpointError("checkpoint: malformed config line '" + line + "'");
    fields[line.substr(0, sp)] = line.substr(sp + 1);
  }
  auto field = [&](const std::string& k) {
    auto it = fields.find(k);
    if (it == fields.end()) throw CheckpointError("checkpoint: config field '" + k + "' missing");
    return it->second;
  };
  NetworkConfig cfg;
  cfg.bands = parse_size(field("B"), "B");
  cfg.classes = parse_size(field("K"), "K");
  cfg.channels = parse_size(field("C"), "C");
  cfg.state_dim = parse_size(field("D"), "D");
  cfg.mlp_ratio = parse_size(field("mlp_ratio"), "mlp_ratio");
  cfg.momeb_on = parse_flag(field("momeb"), "momeb");
  cfg.sre_on = parse_flag(field("sre"), "sre");
  cfg.sse_on = parse_flag(field("sse"), "sse");

  NetworkParams<float> net = init_network<float>(cfg, 0);
  auto params = parameters(net);
  const std::size_t n_tensors = header_line("tensors");
  if (n_tensors != params.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(n_tensors) + " tensors, configuration implies " +
                          std::to_string(params.size()));
  }
  for (auto* p : params) {
    std::string line;
    if (!std::getline(is, line)) throw CheckpointError("checkpoint: truncated tensor manifest");
    std::istringstream ls(line);
    std::string name, dtype, rank_s;
    ls >> name >> dtype >> rank_s;
    if (name != p->name) throw CheckpointError("checkpoint: expected tensor '" + p->name + "', found '" + name + "'");
    if (dtype != "f32") throw CheckpointError("checkpoint: unsupported dtype '" + dtype + "' for " + name);
    std::vector<std::size_t> dims(parse_size(rank_s, "rank"));
    for (auto& d : dims) {
      std::string ds;
      ls >> ds;
      d = parse_size(ds, "extent");
    }
    if (dims != p->value.shape().dims()) throw CheckpointError("checkpoint: shape mismatch for " + name);
  }
  for (auto* p : params) {
    if (!detail::read_le<std::uint32_t, float>(is, p->value.data())) throw CheckpointError("checkpoint: truncated payload at " + p->name);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return net;
}

#define MAMBAMOE_INSTANTIATE_NET(T)                                                                              \
  template NetworkParams<T> init_network<T>(const NetworkConfig&, std::uint64_t);                                \
  template std::vector<Parameter<T>*> parameters(NetworkParams<T>&);                                             \
  template std::size_t parameter_count(NetworkParams<T>&);                                                       \
  template Features<T> extract_features(Graph<T>&, NetworkParams<T>&, Var<T>);                                   \
  template Var<T> residual_block(Graph<T>&, ResidualParams<T>&, Var<T>);                                         \
  template Var<T> ffb(Graph<T>&, ResidualParams<T>&, Var<T>, std::optional<Var<T>>);                             \
  template HeadOutput<T> classify_head(Graph<T>&, ConvParams<T>&, Var<T>);                                       \
  template UncertaintyMap uncertainty_map(const Tensor<T>&);                                                     \
  template StageSupervision<T> uarb(Graph<T>&, Var<T>, ConvParams<T>&, const LabelRaster&, SeededRng&);          \
  template StageSupervision<T> uarb_with_mask(Graph<T>&, Var<T>, ConvParams<T>&, const LabelRaster&,             \
                                              const PixelMask&);                                                 \
  template ForwardOutput<T> forward_full(Graph<T>&, NetworkParams<T>&, const Tensor<T>&, const ForwardMode&,     \
                                         std::optional<TrainSupervision>);                                       \
  template LossTerms<T> total_loss(std::vector<StageSupervision<T>>&, const LabelRaster&, Var<T>);

MAMBAMOE_INSTANTIATE_NET(float)
MAMBAMOE_INSTANTIATE_NET(double)

template NetworkParams<double> convert_network<double, float>(NetworkParams<float>&);
template NetworkParams<float> convert_network<float, double>(NetworkParams<double>&);
template NetworkParams<double> convert_network<double, double>(NetworkParams<double>&);
template NetworkParams<float> convert_network<float, float>(NetworkParams<float>&);

}  // namespace mambamoe
