// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "mambamoe/config.hpp"
#include "mambamoe/data_io.hpp"
#include "mambamoe/gradcheck_suite.hpp"
#include "mambamoe/network.hpp"
#include "mambamoe/profiler.hpp"
#include "mambamoe/train.hpp"

namespace mambamoe {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string command;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string topk;
  std::string out;
  std::string scene;
  std::string checkpoint;
  std::string spec = "default";
  std::string input;
  std::optional<std::size_t> classes;
  bool csv = false;
  bool reference_scale = false;
};

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void validate_train(const RunConfig& cfg) {
  try {
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) cfg.train.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.scene.empty()) cfg.scene = o.scene;
  if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
  validate_train(cfg);
  return cfg;
}

std::size_t single_topk(const Options& o, const RunConfig& cfg) {
  if (o.topk.empty()) return cfg.train.topk_infer;
  const auto ks = parse_topk_list(o.topk);
  if (ks.size() != 1) throw ConfigError("--topk: this command takes a single k, got '" + o.topk + "'");
  return ks[0];
}

HsiScene load_scene(const RunConfig& cfg) {
  if (cfg.scene.empty()) return generate_synthetic(cfg.synthetic_spec());
  return load_hsc(cfg.scene);
}

Palette resolve_palette(const RunConfig& cfg, std::size_t classes) {
  if (cfg.palette.empty()) return default_palette(classes);
  Palette p = load_palette(cfg.palette);
  for (std::size_t id = 1; id <= classes; ++id)
    if (!p.count(static_cast<std::uint16_t>(id))) throw DataError("palette: no colour for class id " + std::to_string(id));
  return p;
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string in_out(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.out) / name).string(); }

template <typename Fn>
void write_text(const std::string& path, Fn&& fn) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  fn(os);
  if (!os) throw DataError("write failed for '" + path + "'");
}

/// Throws DataError listing every field where checkpoint and expectation differ.
void check_compatible(const NetworkConfig& stored, const NetworkConfig& expected) {
  const auto a = config_fields(stored), b = config_fields(expected);
  std::string diff;
  for (const auto& [key, value] : b) {
    const auto it = a.find(key);
    const std::string have = it == a.end() ? "<missing>" : it->second;
    if (have != value) diff += (diff.empty() ? "" : ", ") + key + ": checkpoint=" + have + " expected=" + value;
  }
  if (!diff.empty()) throw DataError("incompatible checkpoint: " + diff);
}

NetworkParams<float> load_compatible(const RunConfig& cfg, const HsiScene& scene) {
  NetworkParams<float> net = load_checkpoint(cfg.checkpoint_path());
  check_compatible(net.config, cfg.train.network(scene.bands, scene.num_classes()));
  return net;
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  cfg.train.topk_infer = single_topk(o, cfg);
  const HsiScene scene = load_scene(cfg);
  const Palette palette = resolve_palette(cfg, scene.num_classes());

  TrainResult r = train(cfg.train, scene);
  const std::size_t k = cfg.train.topk_infer;
  std::vector<Metrics> runs{evaluate(r.net, scene, r.split.test, k, cfg.train.execution)};
  std::vector<std::uint64_t> seeds{cfg.train.seed};
  if (cfg.train.repeats > 1) {
    TrainConfig rest = cfg.train;
    rest.seed = cfg.train.seed + 1;
    rest.repeats = cfg.train.repeats - 1;
    const RepeatSummary more = run_repeats(rest, scene);
    runs.insert(runs.end(), more.runs.begin(), more.runs.end());
    seeds.insert(seeds.end(), more.seeds.begin(), more.seeds.end());
  }
  const RepeatSummary summary = summarize(runs, seeds);
  const LabelRaster map = predict(r.net, normalize_scene(scene), k, cfg.train.execution);

  make_out_dir(cfg.out);
  save_checkpoint(in_out(cfg, "model.ckpt"), r.net);
  write_text(in_out(cfg, "history.csv"), [&](std::ostream& os) { write_history_csv(os, r.history); });
  write_text(in_out(cfg, "report.txt"), [&](std::ostream& os) { write_metrics_report(os, summary, scene.class_names); });
  write_text(in_out(cfg, "config.txt"), [&](std::ostream& os) { os << render_config(cfg); });
  render_map(map, palette, in_out(cfg, "map.ppm"));

  out << "seed " << cfg.train.seed << " test OA " << pct(runs[0].oa) << " AA " << pct(runs[0].aa) << " kappa "
      << pct(runs[0].kappa) << " (k=" << k << ")\n";
  write_metrics_report(out, summary, scene.class_names);
  out << "wrote " << cfg.out << "/{model.ckpt,history.csv,report.txt,config.txt,map.ppm}\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const auto ks = o.topk.empty() ? std::vector<std::size_t>{cfg.train.topk_infer} : parse_topk_list(o.topk);
  const HsiScene scene = load_scene(cfg);
  NetworkParams<float> net = load_compatible(cfg, scene);
  const Split split =
      split_per_class(scene.labels, cfg.train.samples_per_class, derive_seed(cfg.train.seed, SeedStream::Split));
  const auto rows = topk_sweep(net, scene, split.test, ks, cfg.train.execution);
  write_topk_table(out, rows);
  out << '\n' << std::left << std::setw(24) << "class";
  for (const auto& row : rows) out << std::right << std::setw(9) << ("k=" + std::to_string(row.k));
  out << '\n';
  for (std::size_t c = 0; c < scene.num_classes(); ++c) {
    out << std::left << std::setw(24) << scene.class_names[c];
    for (const auto& row : rows) out << std::right << std::setw(9) << pct(row.metrics.per_class_acc[c]);
    out << '\n';
  }
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const std::size_t k = single_topk(o, cfg);
  const HsiScene scene = load_scene(cfg);
  const Palette palette = resolve_palette(cfg, scene.num_classes());
  NetworkParams<float> net = load_compatible(cfg, scene);
  const LabelRaster map = predict(net, normalize_scene(scene), k, cfg.train.execution);
  make_out_dir(cfg.out);
  const std::string path = in_out(cfg, "prediction_k" + std::to_string(k) + ".ppm");
  render_map(map, palette, path);
  std::vector<std::size_t> counts(scene.num_classes() + 1, 0);
  for (auto v : map.labels) ++counts[v];
  for (std::size_t c = 1; c <= scene.num_classes(); ++c)
    out << std::left << std::setw(24) << scene.class_names[c - 1] << counts[c] << '\n';
  out << "wrote " << path << '\n';
  return kExitOk;
}

void routing_header(std::ostream& os, const std::string& first) {
  os << std::left << std::setw(24) << first;
  for (std::size_t e = 0; e < kNumSpatialExperts; ++e)
    os << std::right << std::setw(10) << direction_name(static_cast<ScanDirection>(e));
  os << std::setw(12) << "horizontal" << std::setw(10) << "vertical" << '\n';
}

void routing_row(std::ostream& os, const std::string& first, const std::array<double, kNumSpatialExperts>& w) {
  os << std::left << std::setw(24) << first << std::right << std::fixed << std::setprecision(6);
  for (double v : w) os << std::setw(10) << v;
  os << std::setw(12) << w[0] + w[1] << std::setw(10) << w[2] + w[3] << '\n';
  os.unsetf(std::ios::floatfield);
}

int cmd_inspect(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const HsiScene scene = load_scene(cfg);
  NetworkParams<float> net = load_compatible(cfg, scene);
  const Tensor<float> x = normalize_scene(scene);
  const auto stages = stage_routing(net, x);
  const auto classes = class_routing(net, x, scene.labels, scene.num_classes());
  out << "# router weights per stage (whole scene)\n";
  routing_header(out, "stage");
  for (std::size_t s = 0; s < stages.size(); ++s) routing_row(out, std::to_string(s + 1), stages[s]);
  out << "# stage-1 router weights per class\n";
  routing_header(out, "class");
  for (std::size_t c = 0; c < classes.size(); ++c) routing_row(out, scene.class_names[c], classes[c]);
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto blocks = run_gradcheck_suite(o.seed.value_or(1));
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  out << std::left << std::setw(22) << "block" << std::right << std::setw(14) << "max_rel_err" << std::setw(10)
      << "seconds" << "  status\n";
  for (const auto& b : blocks) {
    ok = ok && b.report.passed();
    out << std::left << std::setw(22) << b.block << std::right << std::scientific << std::setprecision(3)
        << std::setw(14) << b.report.max_rel_error << std::fixed << std::setw(10) << b.seconds << "  "
        << (b.report.passed() ? "ok" : "FAIL") << '\n';
  }
  out << std::fixed << std::setprecision(2) << "total " << total << " s, threshold 1e-4\n";
  if (!ok) throw NumericalError("gradcheck: analytic and numerical gradients disagree");
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (!o.out.empty()) cfg.out = o.out;
  if (o.seed) cfg.synth_seed = *o.seed;
  SyntheticSpec spec;
  if (o.spec == "default") {
    spec = cfg.synthetic_spec();
  } else {
    spec = load_synthetic_spec(o.spec);
    if (o.seed) {
      spec.seed = *o.seed;
      draw_signatures(spec);
    }
  }
  const HsiScene scene = generate_synthetic(spec);
  make_out_dir(cfg.out);
  const std::string path = in_out(cfg, "scene.hsc");
  save_hsc(scene, path);
  render_map(scene.labels, default_palette(scene.num_classes()), in_out(cfg, "labels.ppm"));
  out << scene.provenance << '\n';
  std::vector<std::size_t> counts(scene.num_classes() + 1, 0);
  for (auto v : scene.labels.labels) ++counts[v];
  for (std::size_t c = 0; c < spec.classes.size(); ++c)
    out << std::left << std::setw(24) << spec.classes[c].name << std::setw(12)
        << orientation_name(spec.classes[c].orientation) << counts[c + 1] << '\n';
  out << "wrote " << path << '\n';
  return kExitOk;
}

InputShape parse_input(const std::string& text) {
  InputShape s;
  char x1 = 0, x2 = 0;
  std::istringstream is(text);
  std::string rest;
  if (!(is >> s.bands >> x1 >> s.height >> x2 >> s.width) || x1 != 'x' || x2 != 'x' || (is >> rest) ||
      s.bands == 0 || s.height == 0 || s.width == 0)
    throw ConfigError("--input: expected BxHxW with positive extents, got '" + text + "'");
  return s;
}

int cmd_profile(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  NetworkConfig nc;
  InputShape in;
  if (o.reference_scale) {
    nc = reference_scale_config();
    in = reference_scale_input();
  } else {
    nc = cfg.train.network(cfg.synth_bands, o.classes.value_or(4));
    in = {cfg.synth_bands, cfg.synth_height, cfg.synth_width};
  }
  if (o.classes) nc.classes = *o.classes;
  if (!o.input.empty()) in = parse_input(o.input);
  const CostReport r = profile(nc, in);
  write_cost_table(out, r);
  if (o.csv) {
    make_out_dir(cfg.out);
    write_text(in_out(cfg, "cost.csv"), [&](std::ostream& os) { write_cost_csv(os, r); });
    out << "wrote " << in_out(cfg, "cost.csv") << '\n';
  }
  return kExitOk;
}

std::string keys_help() {
  std::ostringstream os;
  os << "Config file keys (`key = value`, `#` comments):\n";
  for (const auto& k : config_keys()) {
    const std::string def = k.default_value.empty() ? "\"\"" : k.default_value;
    os << "  " << std::left << std::setw(20) << k.name << std::setw(10) << def << k.help << '\n';
  }
  os << "Exit codes: 0 ok, 1 config error, 2 data error, 3 numerical failure.";
  return os.str();
}

int fail(std::ostream& err, int code, const std::string& kind, const std::string& what) {
  err << "error: " << kind << ": " << one_line(what) << '\n';
  return code;
}

}  // namespace

std::vector<std::size_t> parse_topk_list(const std::string& text) {
  auto one = [&](const std::string& t) -> std::size_t {
    if (t.size() != 1 || t[0] < '1' || t[0] > '0' + static_cast<int>(kNumSpatialExperts))
      throw ConfigError("--topk: expected k in 1..4, '1..4' or a comma list, got '" + text + "'");
    return static_cast<std::size_t>(t[0] - '0');
  };
  std::vector<std::size_t> ks;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const std::size_t lo = one(text.substr(0, dots)), hi = one(text.substr(dots + 2));
    if (lo > hi) throw ConfigError("--topk: empty range '" + text + "'");
    for (std::size_t k = lo; k <= hi; ++k) ks.push_back(k);
    return ks;
  }
  std::istringstream is(text);
  for (std::string part; std::getline(is, part, ',');) ks.push_back(one(part));
  if (ks.empty()) one("");
  return ks;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Hyperspectral scene classifier with mixture-of-scan-experts blocks", "mambamoe"};
  app.footer(keys_help());
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--config", o.config, "config file");
  app.add_option("--seed", o.seed, "override the run seed (synth: the scene seed)");
  app.add_option("--topk", o.topk, "experts kept at inference: k, 'a..b' or 'a,b,...'");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--scene", o.scene, "scene file (.hsc)");
  app.add_option("--checkpoint", o.checkpoint, "checkpoint to read");

  app.add_subcommand("train", "train, evaluate repeats, write checkpoint/history/report/map");
  app.add_subcommand("eval", "metrics of a checkpoint on its seed's test split, one row per k");
  app.add_subcommand("predict", "write the predicted class map");
  app.add_subcommand("inspect", "router weights per stage and per class");
  app.add_subcommand("gradcheck", "finite-difference check of every block");
  auto* synth = app.add_subcommand("synth", "write a synthetic .hsc scene");
  synth->add_option("--spec", o.spec, "'default' or a scene spec file");
  auto* prof = app.add_subcommand("profile", "parameter and FLOP counts");
  prof->add_option("--input", o.input, "input extent BxHxW");
  prof->add_option("--classes", o.classes, "class count (default 4)");
  prof->add_flag("--reference-scale", o.reference_scale, "C=48 D=16 network on a 103x13x13 input with 9 classes");
  prof->add_flag("--csv", o.csv, "also write <out>/cost.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return fail(err, kExitConfig, "config", e.what());
  }
  o.command = app.get_subcommands().front()->get_name();

  try {
    if (o.command == "train") return cmd_train(o, out);
    if (o.command == "eval") return cmd_eval(o, out);
    if (o.command == "predict") return cmd_predict(o, out);
    if (o.command == "inspect") return cmd_inspect(o, out);
    if (o.command == "gradcheck") return cmd_gradcheck(o, out);
    if (o.command == "synth") return cmd_synth(o, out);
    return cmd_profile(o, out);
  } catch (const ConfigError& e) {
    return fail(err, kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(err, kExitData, "data", e.what());
  } catch (const CheckpointError& e) {
    return fail(err, kExitData, "data", e.what());
  } catch (const ShapeError& e) {
    return fail(err, kExitData, "data", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(err, kExitData, "data", e.what());
  } catch (const TrainingAborted& e) {
    std::string terms;
    for (double t : e.last_terms) terms += " " + std::to_string(t);
    return fail(err, kExitNumerical, "numerical",
                std::string(e.what()) + " (epoch " + std::to_string(e.epoch) + ", last finite terms:" + terms + ")");
  } catch (const NumericalError& e) {
    return fail(err, kExitNumerical, "numerical", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(err, kExitConfig, "config", e.what());
  } catch (const std::exception& e) {
    return fail(err, kExitData, "data", e.what());
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"mambamoe"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace mambamoe
