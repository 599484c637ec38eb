// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "mambamoe/cli.hpp"
#include "mambamoe/config.hpp"
#include "mambamoe/network.hpp"
#include "test_util.hpp"

using namespace mambamoe;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

std::vector<char> bytes_of(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = temp_dir("cli");
    cfg = (dir / "tiny.cfg").string();
    std::ofstream(cfg) << "# small and quick\nepochs = 4\nC = 4\nD = 4\nsamples_per_class = 5\nrepeats = 2\n"
                          "synth.height = 16\nsynth.width = 16\nsynth.bands = 4\n";
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string at(const std::string& name) const { return (dir / name).string(); }

  fs::path dir;
  std::string cfg;
};

TEST(Config, DefaultsAndComments) {
  const auto c = parse_config("# nothing\n\n  lr = 0.01  # inline\nC=32\nmomeb = false\nexecution = parallel\n");
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.train.channels, 32u);
  EXPECT_FALSE(c.train.momeb_on);
  EXPECT_EQ(c.train.execution, Execution::Parallel);
  EXPECT_EQ(c.train.epochs, 200u);
  EXPECT_EQ(c.train.topk_infer, 3u);
  EXPECT_EQ(c.checkpoint_path(), "out/model.ckpt");
}

TEST(Config, ErrorsNameTheLine) {
  auto msg = [](const std::string& text) {
    try {
      parse_config(text, "x.cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(msg("lr = 1\nepoch = 3\n").rfind("x.cfg:2:", 0), 0u);
  EXPECT_NE(msg("lr = 1\nepoch = 3\n").find("unknown key 'epoch'"), std::string::npos);
  EXPECT_NE(msg("C = 4\nC = 8\n").find("given twice"), std::string::npos);
  EXPECT_NE(msg("C = four\n").find("x.cfg:1:"), std::string::npos);
  EXPECT_NE(msg("momeb = maybe\n").find("true/false"), std::string::npos);
  EXPECT_NE(msg("just words\n").find("key = value"), std::string::npos);
  EXPECT_NE(msg("C = 5\n").find("C must be"), std::string::npos);
  EXPECT_NE(msg("topk = 7\n").find("topk"), std::string::npos);
}

TEST(Config, RenderRoundTrips) {
  RunConfig c = parse_config("lr = 0.003\nsynth.noise = 0.25\nscene = a b.hsc\nsse = false\n");
  const RunConfig back = parse_config(render_config(c));
  EXPECT_EQ(render_config(back), render_config(c));
  EXPECT_EQ(back.scene, "a b.hsc");
  EXPECT_EQ(back.synth_noise, 0.25);
  EXPECT_EQ(config_keys().size(), 24u);
}

TEST(Config, SyntheticSpecFile) {
  const auto s = parse_synthetic_spec(
      "height = 20\nwidth = 24\nbands = 6\nseed = 3\nperiod = 6\n"
      "class = v vertical\nclass = rock blob\nclass = h horizontal 4\nclass = field background\n");
  EXPECT_EQ(s.height, 20u);
  ASSERT_EQ(s.classes.size(), 4u);
  EXPECT_EQ(s.classes[0].period, 6u);
  EXPECT_EQ(s.classes[2].period, 4u);
  EXPECT_EQ(s.classes[1].orientation, Orientation::Blob);
  EXPECT_EQ(s.classes[3].signature.size(), 6u);
  EXPECT_THROW(parse_synthetic_spec("class = a vertical\n"), ConfigError);  // no background
  EXPECT_THROW(parse_synthetic_spec("class = a sideways\nclass = b background\n"), ConfigError);
  EXPECT_THROW(parse_synthetic_spec("colour = red\n"), ConfigError);
}

TEST(Config, TopkLists) {
  EXPECT_EQ(parse_topk_list("3"), (std::vector<std::size_t>{3}));
  EXPECT_EQ(parse_topk_list("1..4"), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(parse_topk_list("1,3"), (std::vector<std::size_t>{1, 3}));
  for (const char* bad : {"0", "5", "4..1", "x", "", "1,,2", "12"}) EXPECT_THROW(parse_topk_list(bad), ConfigError) << bad;
}

TEST_F(Cli, HelpListsEveryKeyWithDefault) {
  const auto r = cli({"--help"});
  EXPECT_EQ(r.code, 0);
  const auto keys = r.out.find("Config file keys");
  ASSERT_NE(keys, std::string::npos);
  for (const auto& k : config_keys()) {
    const auto pos = r.out.find("  " + k.name + " ", keys);
    ASSERT_NE(pos, std::string::npos) << k.name;
    const auto line = r.out.substr(pos, r.out.find('\n', pos) - pos);
    EXPECT_NE(line.find(k.default_value.empty() ? "\"\"" : k.default_value), std::string::npos) << line;
  }
}

TEST_F(Cli, TrainWritesArtifactsAndIsDeterministic) {
  const auto a = cli({"train", "--config", cfg, "--seed", "7", "--out", at("a")});
  ASSERT_EQ(a.code, 0) << a.err;
  for (const char* f : {"model.ckpt", "history.csv", "report.txt", "map.ppm", "config.txt"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  const auto b = cli({"train", "--config", cfg, "--seed", "7", "--out", at("b")});
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(bytes_of(dir / "a" / "model.ckpt"), bytes_of(dir / "b" / "model.ckpt"));
  EXPECT_EQ(bytes_of(dir / "a" / "report.txt"), bytes_of(dir / "b" / "report.txt"));
  EXPECT_NE(bytes_of(dir / "a" / "report.txt").size(), 0u);

  // Archived config reproduces the run.
  const auto c = cli({"train", "--config", at("a/config.txt"), "--out", at("c")});
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(bytes_of(dir / "a" / "model.ckpt"), bytes_of(dir / "c" / "model.ckpt"));
}

TEST_F(Cli, EvalPredictInspect) {
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", at("m")}).code, 0);
  const auto ev = cli({"eval", "--config", cfg, "--out", at("m"), "--topk", "1..4"});
  ASSERT_EQ(ev.code, 0) << ev.err;
  for (int k = 1; k <= 4; ++k) EXPECT_NE(ev.out.find("\nk=" + std::to_string(k) + " "), std::string::npos);

  const auto pr = cli({"predict", "--config", cfg, "--out", at("m"), "--topk", "2"});
  ASSERT_EQ(pr.code, 0) << pr.err;
  EXPECT_TRUE(fs::exists(dir / "m" / "prediction_k2.ppm"));
  // Same pixels as predict() on the checkpoint.
  auto net = load_checkpoint(at("m/model.ckpt"));
  RunConfig rc = load_config(cfg);
  const auto scene = generate_synthetic(rc.synthetic_spec());
  const auto labels = predict(net, normalize_scene(scene), 2);
  std::ifstream is(dir / "m" / "prediction_k2.ppm", std::ios::binary);
  std::vector<std::uint8_t> file{std::istreambuf_iterator<char>(is), {}};
  EXPECT_EQ(file, encode_ppm(labels, default_palette(4)));

  const auto in = cli({"inspect", "--config", cfg, "--out", at("m")});
  ASSERT_EQ(in.code, 0) << in.err;
  std::istringstream rows(in.out);
  std::string line;
  int checked = 0;
  while (std::getline(rows, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("stage ", 0) == 0 || line.rfind("class ", 0) == 0) continue;
    std::istringstream ls(line);
    std::string name;
    double w[4];
    ls >> name >> w[0] >> w[1] >> w[2] >> w[3];
    EXPECT_NEAR(w[0] + w[1] + w[2] + w[3], 1.0, 1e-5) << line;
    ++checked;
  }
  EXPECT_EQ(checked, 3 + 4);
}

TEST_F(Cli, IncompatibleCheckpointNamesField) {
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", at("m")}).code, 0);
  std::ofstream(at("wide.cfg")) << "C = 8\nD = 4\nsynth.height = 16\nsynth.width = 16\nsynth.bands = 4\n";
  const auto r = cli({"eval", "--config", at("wide.cfg"), "--checkpoint", at("m/model.ckpt")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: data: incompatible checkpoint: C: checkpoint=4 expected=8", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST_F(Cli, MissingSceneFailsBeforeAnyOutput) {
  const auto r = cli({"train", "--config", cfg, "--scene", at("nope.hsc"), "--out", at("never")});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: data:", 0), 0u);
  EXPECT_FALSE(fs::exists(dir / "never"));
}

TEST_F(Cli, ConfigErrorsExitOne) {
  std::ofstream(at("bad.cfg")) << "epoch = 3\n";
  const auto r = cli({"train", "--config", at("bad.cfg"), "--out", at("never")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("unknown key 'epoch'"), std::string::npos);
  EXPECT_EQ(cli({"frobnicate"}).code, 1);
  EXPECT_EQ(cli({"train", "--config", at("missing.cfg")}).code, 1);
  EXPECT_EQ(cli({"predict", "--config", cfg, "--topk", "1..4"}).code, 1);
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_FALSE(fs::exists(dir / "never"));
}

TEST_F(Cli, NumericalAbortExitsThree) {
  std::ofstream(at("hot.cfg")) << "lr = 1e30\nepochs = 30\nC = 4\nD = 4\nsamples_per_class = 5\nrepeats = 1\n"
                                  "synth.height = 16\nsynth.width = 16\nsynth.bands = 4\n";
  const auto r = cli({"train", "--config", at("hot.cfg"), "--out", at("hot")});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(r.err.rfind("error: numerical:", 0), 0u);
  EXPECT_FALSE(fs::exists(dir / "hot"));
}

TEST_F(Cli, WritesOnlyInsideOutDir) {
  const auto before = std::distance(fs::directory_iterator(dir), fs::directory_iterator{});
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", at("only")}).code, 0);
  ASSERT_EQ(cli({"predict", "--config", cfg, "--out", at("only")}).code, 0);
  ASSERT_EQ(cli({"synth", "--out", at("only")}).code, 0);
  ASSERT_EQ(cli({"profile", "--csv", "--out", at("only")}).code, 0);
  const auto after = std::distance(fs::directory_iterator(dir), fs::directory_iterator{});
  EXPECT_EQ(after, before + 1);
}

TEST_F(Cli, SynthIsDeterministicAndLoadable) {
  ASSERT_EQ(cli({"synth", "--spec", "default", "--seed", "4", "--out", at("s1")}).code, 0);
  ASSERT_EQ(cli({"synth", "--spec", "default", "--seed", "4", "--out", at("s2")}).code, 0);
  EXPECT_EQ(bytes_of(dir / "s1" / "scene.hsc"), bytes_of(dir / "s2" / "scene.hsc"));
  const auto scene = load_hsc(at("s1/scene.hsc"));
  EXPECT_EQ(scene.num_classes(), 4u);

  std::ofstream(at("spec.txt")) << "height = 16\nwidth = 16\nbands = 5\nclass = a horizontal\nclass = b background\n";
  const auto r = cli({"synth", "--spec", at("spec.txt"), "--out", at("s3")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_hsc(at("s3/scene.hsc")).bands, 5u);

  // A scene file feeds training directly.
  std::ofstream(at("scene.cfg")) << "epochs = 2\nC = 4\nD = 4\nsamples_per_class = 5\nrepeats = 1\n";
  EXPECT_EQ(cli({"train", "--config", at("scene.cfg"), "--scene", at("s3/scene.hsc"), "--out", at("t")}).code, 0);
}

TEST_F(Cli, ProfileAndGradcheck) {
  const auto p = cli({"profile", "--input", "103x13x13"});
  ASSERT_EQ(p.code, 0) << p.err;
  for (const char* key : {"params.total", "flops.dense", "flops.top1", "flops.top2", "flops.top3", "flops.top4"})
    EXPECT_NE(p.out.find(key), std::string::npos) << key;
  EXPECT_EQ(cli({"profile", "--input", "103x13"}).code, 1);
  const auto g = cli({"gradcheck"});
  EXPECT_EQ(g.code, 0) << g.out;
  EXPECT_NE(g.out.find("total_loss"), std::string::npos);
}
