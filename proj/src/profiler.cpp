// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/profiler.hpp"

#include <iomanip>
#include <vector>

namespace mambamoe {

std::uint64_t conv_params(std::size_t cin, std::size_t cout, std::size_t k) { return 1ULL * cin * cout * k * k + cout; }

std::uint64_t ssm_params(std::size_t d, std::size_t e) { return 1ULL * d * d + 2ULL * d * e; }

std::uint64_t scan_step_flops(std::size_t d, std::size_t e) { return 2ULL * d * d + 4ULL * d * e + e; }

CostReport count_params(const NetworkConfig& c) {
  CostReport r;
  r.config = c;
  const std::size_t ch = c.channels, half = ch / 2, hidden = router_hidden(ch), wide = c.mlp_ratio * ch;
  std::uint64_t stem = conv_params(c.bands, ch, 3) + 2 * conv_params(ch, ch, 3);
  std::uint64_t block = 4ULL * ch + conv_params(ch, ch, 1) + conv_params(ch, wide, 1) + conv_params(wide, ch, 1);
  if (c.sre_on) {
    block += kNumSpatialExperts * ssm_params(c.state_dim, half);
    block += 1ULL * half * hidden + hidden + 1ULL * hidden * kNumSpatialExperts + kNumSpatialExperts;
  }
  if (c.sse_on) block += 2 * ssm_params(c.state_dim, 1);
  const std::uint64_t momeb = c.momeb_on ? kNumStages * block : 0;
  const std::uint64_t ffb = kNumStages * 2 * conv_params(ch, ch, 3);
  const std::uint64_t head = conv_params(ch, c.classes, 1);
  r.params_by_module = {{"stem", stem}, {"momeb", momeb}, {"ffb", ffb}, {"head", head}};
  r.params_total = stem + momeb + ffb + head;
  return r;
}

namespace {

struct Flops {
  std::uint64_t total = 0;
  std::uint64_t spatial_scan = 0;
};

std::uint64_t conv_flops(std::size_t cin, std::size_t cout, std::size_t k, std::uint64_t n) {
  return 2ULL * cin * k * k * cout * n + 1ULL * cout * n;
}

std::uint64_t residual_flops(std::size_t c, std::uint64_t n) {
  // relu, conv, relu, conv, add
  return 3ULL * c * n + 2 * conv_flops(c, c, 3, n);
}

Flops momeb_flops(const NetworkConfig& cfg, std::uint64_t n, const RoutingMode& mode) {
  const std::size_t c = cfg.channels, half = c / 2, hidden = router_hidden(c), wide = cfg.mlp_ratio * c;
  Flops f;
  f.total += 2 * 8ULL * c * n;  // two layer norms
  if (cfg.sre_on) {
    const std::size_t k = mode.kind == RoutingMode::Kind::Dense ? kNumSpatialExperts : mode.k;
    // pool, matmul, bias, relu, matmul, bias, softmax
    f.total += 1ULL * half * n + half + 2ULL * half * hidden + 2ULL * hidden + 2ULL * hidden * kNumSpatialExperts +
               kNumSpatialExperts + 4ULL * kNumSpatialExperts;
    f.spatial_scan = k * n * scan_step_flops(cfg.state_dim, half);
    f.total += f.spatial_scan;
    f.total += k * half * n + (k - 1) * half * n;  // weighting and accumulation
  }
  if (cfg.sse_on) f.total += 2ULL * half * n * scan_step_flops(cfg.state_dim, 1) + 1ULL * half * n;
  f.total += conv_flops(c, c, 1, n) + 1ULL * c * n;                                     // fuse, residual
  f.total += conv_flops(c, wide, 1, n) + 1ULL * wide * n + conv_flops(wide, c, 1, n) + 1ULL * c * n;  // MLP, residual
  return f;
}

Flops forward_flops(const NetworkConfig& cfg, const InputShape& in, const RoutingMode& mode) {
  const std::size_t c = cfg.channels;
  Flops f;
  std::array<std::uint64_t, kNumStages> n{};
  std::size_t h = in.height, w = in.width, cin = in.bands;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    f.total += conv_flops(cin, c, 3, 1ULL * h * w) + 1ULL * c * h * w;  // conv, relu
    h /= 2;
    w /= 2;
    f.total += 4ULL * c * h * w;
    n[i] = 1ULL * h * w;
    cin = c;
  }
  if (cfg.momeb_on) {
    for (std::size_t i = 0; i < kNumStages; ++i) {
      const Flops b = momeb_flops(cfg, n[i], mode);
      f.total += b.total;
      f.spatial_scan += b.spatial_scan;
    }
  }
  f.total += residual_flops(c, n[2]);
  for (std::size_t i = 0; i < 2; ++i) f.total += 8ULL * c * n[i] + residual_flops(c, n[i]) + 1ULL * c * n[i];
  const std::uint64_t full = 1ULL * in.height * in.width;
  f.total += 8ULL * c * full + conv_flops(c, cfg.classes, 1, full) + 4ULL * cfg.classes * full;
  return f;
}

}  // namespace

std::uint64_t count_flops(const NetworkConfig& config, const InputShape& input, const RoutingMode& mode) {
  return forward_flops(config, input, mode).total;
}

std::uint64_t count_spatial_scan_flops(const NetworkConfig& config, const InputShape& input, const RoutingMode& mode) {
  return forward_flops(config, input, mode).spatial_scan;
}

CostReport profile(NetworkConfig config, const InputShape& input) {
  config.bands = input.bands;
  CostReport r = count_params(config);
  r.input = input;
  const Flops dense = forward_flops(config, input, RoutingMode::dense());
  r.flops_dense = dense.total;
  r.spatial_scan_dense = dense.spatial_scan;
  for (std::size_t k = 1; k <= kNumSpatialExperts; ++k) {
    const Flops t = forward_flops(config, input, RoutingMode::top_k(k));
    r.flops_topk[k - 1] = t.total;
    r.spatial_scan_topk[k - 1] = t.spatial_scan;
  }
  return r;
}

NetworkConfig reference_scale_config() {
  NetworkConfig c;
  c.bands = 103;
  c.classes = 9;
  c.channels = 48;
  c.state_dim = 16;
  c.mlp_ratio = 2;
  return c;
}

InputShape reference_scale_input() { return {103, 13, 13}; }

void write_cost_table(std::ostream& os, const CostReport& r) {
  const auto& c = r.config;
  os << "input " << r.input.bands << "x" << r.input.height << "x" << r.input.width << "  C=" << c.channels
     << " D=" << c.state_dim << " mlp_ratio=" << c.mlp_ratio << " K=" << c.classes << '\n';
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& [m, n] : r.params_by_module) rows.emplace_back("params." + m, std::to_string(n));
  rows.emplace_back("params.total", std::to_string(r.params_total));
  rows.emplace_back("flops.dense", std::to_string(r.flops_dense));
  for (std::size_t k = 1; k <= kNumSpatialExperts; ++k)
    rows.emplace_back("flops.top" + std::to_string(k), std::to_string(r.flops_topk[k - 1]));
  rows.emplace_back("scan.dense", std::to_string(r.spatial_scan_dense));
  for (std::size_t k = 1; k <= kNumSpatialExperts; ++k)
    rows.emplace_back("scan.top" + std::to_string(k), std::to_string(r.spatial_scan_topk[k - 1]));
  std::size_t kw = 0, vw = 0;
  for (const auto& [k, v] : rows) {
    kw = std::max(kw, k.size());
    vw = std::max(vw, v.size());
  }
  for (const auto& [k, v] : rows) {
    os << std::left << std::setw(static_cast<int>(kw) + 2) << k << std::right << std::setw(static_cast<int>(vw)) << v
       << '\n';
  }
  os << std::left;
}

void write_cost_csv(std::ostream& os, const CostReport& r) {
  os << "metric,value\n";
  for (const auto& [m, n] : r.params_by_module) os << "params." << m << ',' << n << '\n';
  os << "params.total," << r.params_total << '\n' << "flops.dense," << r.flops_dense << '\n';
  for (std::size_t k = 1; k <= kNumSpatialExperts; ++k) os << "flops.top" << k << ',' << r.flops_topk[k - 1] << '\n';
  os << "scan.dense," << r.spatial_scan_dense << '\n';
  for (std::size_t k = 1; k <= kNumSpatialExperts; ++k) os << "scan.top" << k << ',' << r.spatial_scan_topk[k - 1] << '\n';
}

}  // namespace mambamoe
