// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "mambamoe/profiler.hpp"
#include "test_util.hpp"

using namespace mambamoe;
using namespace testutil;

namespace {

NetworkConfig random_config(std::mt19937_64& rng) {
  NetworkConfig c;
  c.bands = pick(rng, 1, 40);
  c.classes = pick(rng, 1, 12);
  c.channels = 2 * pick(rng, 1, 16);
  c.state_dim = pick(rng, 1, 16);
  c.mlp_ratio = pick(rng, 1, 4);
  c.momeb_on = pick(rng, 0, 4) != 0;
  c.sre_on = pick(rng, 0, 3) != 0;
  c.sse_on = pick(rng, 0, 3) != 0;
  return c;
}

}  // namespace

TEST(Profiler, HandCountedPieces) {
  EXPECT_EQ(conv_params(3, 5, 3), 3u * 5 * 9 + 5);
  EXPECT_EQ(conv_params(4, 2, 1), 4u * 2 + 2);
  EXPECT_EQ(ssm_params(8, 4), 64u + 2 * 32);
  EXPECT_EQ(scan_step_flops(8, 4), 2u * 64 + 4 * 32 + 4);
}

TEST(Profiler, ParamsMatchConstructedNetwork20Configs) {
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = random_config(rng);
    auto net = init_network<float>(c, trial);
    const auto r = count_params(c);
    EXPECT_EQ(r.params_total, parameter_count(net)) << "trial " << trial;
    std::uint64_t parts = 0;
    for (const auto& [k, v] : r.params_by_module) parts += v;
    EXPECT_EQ(parts, r.params_total);
  }
}

TEST(Profiler, FlopsMatchRecordedTape) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 8; ++trial) {
    auto c = random_config(rng);
    c.channels = 2 * pick(rng, 1, 4);
    c.state_dim = pick(rng, 1, 4);
    auto net = init_network<double>(c, trial);
    const InputShape in{c.bands, pick(rng, 8, 14), pick(rng, 8, 14)};
    auto x = randn({in.bands, in.height, in.width}, rng);
    for (std::size_t k = 1; k <= 4; ++k) {
      Tape<double> t;
      Graph<double> g(t, false);
      forward_full(g, net, x, ForwardMode::infer(k));
      EXPECT_EQ(count_flops(c, in, RoutingMode::top_k(k)), t.flops()) << "trial " << trial << " k=" << k;
    }
    Tape<double> t;
    Graph<double> g(t, false);
    forward_full(g, net, x, ForwardMode{false, RoutingMode::dense()});
    EXPECT_EQ(count_flops(c, in, RoutingMode::dense()), t.flops());
  }
}

TEST(Profiler, ReferenceScale) {
  const auto r = profile(reference_scale_config(), reference_scale_input());
  EXPECT_GE(r.params_total, 140000u);
  EXPECT_LE(r.params_total, 560000u);
  EXPECT_LT(r.spatial_scan_topk[2], r.spatial_scan_dense);
  EXPECT_EQ(r.spatial_scan_topk[3], r.spatial_scan_dense);
  EXPECT_EQ(r.flops_topk[3], r.flops_dense);
  for (std::size_t k = 1; k < 4; ++k) EXPECT_LT(r.flops_topk[k - 1], r.flops_topk[k]);
}

TEST(Profiler, Reports) {
  const auto r = profile(reference_scale_config(), reference_scale_input());
  std::ostringstream table, csv;
  write_cost_table(table, r);
  write_cost_csv(csv, r);
  EXPECT_NE(table.str().find("103x13x13"), std::string::npos);
  EXPECT_EQ(csv.str().substr(0, 12), "metric,value");
  EXPECT_NE(csv.str().find("params.total," + std::to_string(r.params_total)), std::string::npos);
  for (const char* key : {"flops.dense", "flops.top1", "flops.top4", "scan.top3"})
    EXPECT_NE(csv.str().find(key), std::string::npos) << key;
}
