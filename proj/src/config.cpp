// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace mambamoe {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& expect) {
  throw ConfigError("key '" + key + "': expected " + expect + ", got '" + value + "'");
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) bad(key, v, "a non-negative integer");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad(key, v, "a 64-bit integer");
  }
}

std::size_t as_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(as_u64(key, v)); }

double as_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) bad(key, v, "a real number");
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad(key, v, "a real number");
  }
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad(key, v, "true/false");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_real(double d) {
  std::ostringstream os;
  os << d;
  return os.str();
}

struct KeyDef {
  ConfigKey doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    auto add = [&](std::string name, std::string help, std::function<void(RunConfig&, const std::string&)> set,
                   std::function<std::string(const RunConfig&)> get) {
      d.push_back({{name, get(RunConfig{}), std::move(help)}, std::move(set), std::move(get)});
    };
    add("scene", "scene file (.hsc); empty uses the built-in synthetic scene",
        [](RunConfig& c, const std::string& v) { c.scene = v; }, [](const RunConfig& c) { return c.scene; });
    add("out", "output directory; every command writes only inside it",
        [](RunConfig& c, const std::string& v) {
          if (v.empty()) bad("out", v, "a directory");
          c.out = v;
        },
        [](const RunConfig& c) { return c.out; });
    add("checkpoint", "checkpoint to read for eval/predict/inspect; empty means <out>/model.ckpt",
        [](RunConfig& c, const std::string& v) { c.checkpoint = v; }, [](const RunConfig& c) { return c.checkpoint; });
    add("palette", "palette file of 'id r g b' lines; empty uses the built-in colours",
        [](RunConfig& c, const std::string& v) { c.palette = v; }, [](const RunConfig& c) { return c.palette; });
    add("seed", "base random seed (init, split, masks)",
        [](RunConfig& c, const std::string& v) { c.train.seed = as_u64("seed", v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); });
    add("lr", "Adam learning rate", [](RunConfig& c, const std::string& v) { c.train.lr = as_real("lr", v); },
        [](const RunConfig& c) { return fmt_real(c.train.lr); });
    add("epochs", "full-scene optimization steps",
        [](RunConfig& c, const std::string& v) { c.train.epochs = as_size("epochs", v); },
        [](const RunConfig& c) { return std::to_string(c.train.epochs); });
    add("samples_per_class", "training pixels drawn per class",
        [](RunConfig& c, const std::string& v) { c.train.samples_per_class = as_size("samples_per_class", v); },
        [](const RunConfig& c) { return std::to_string(c.train.samples_per_class); });
    add("topk", "experts kept at inference (1..4)",
        [](RunConfig& c, const std::string& v) { c.train.topk_infer = as_size("topk", v); },
        [](const RunConfig& c) { return std::to_string(c.train.topk_infer); });
    add("C", "channel width (even)", [](RunConfig& c, const std::string& v) { c.train.channels = as_size("C", v); },
        [](const RunConfig& c) { return std::to_string(c.train.channels); });
    add("D", "SSM state size", [](RunConfig& c, const std::string& v) { c.train.state_dim = as_size("D", v); },
        [](const RunConfig& c) { return std::to_string(c.train.state_dim); });
    add("mlp_ratio", "MLP expansion ratio inside each block",
        [](RunConfig& c, const std::string& v) { c.train.mlp_ratio = as_size("mlp_ratio", v); },
        [](const RunConfig& c) { return std::to_string(c.train.mlp_ratio); });
    add("momeb", "enable the expert blocks", [](RunConfig& c, const std::string& v) { c.train.momeb_on = as_bool("momeb", v); },
        [](const RunConfig& c) { return fmt_bool(c.train.momeb_on); });
    add("uarb", "enable uncertainty-sampled stage supervision",
        [](RunConfig& c, const std::string& v) { c.train.uarb_on = as_bool("uarb", v); },
        [](const RunConfig& c) { return fmt_bool(c.train.uarb_on); });
    add("sre", "enable the routed spatial experts",
        [](RunConfig& c, const std::string& v) { c.train.sre_on = as_bool("sre", v); },
        [](const RunConfig& c) { return fmt_bool(c.train.sre_on); });
    add("sse", "enable the shared spectral expert",
        [](RunConfig& c, const std::string& v) { c.train.sse_on = as_bool("sse", v); },
        [](const RunConfig& c) { return fmt_bool(c.train.sse_on); });
    add("repeats", "training repeats for the metrics report (seeds seed..seed+repeats-1)",
        [](RunConfig& c, const std::string& v) { c.train.repeats = as_size("repeats", v); },
        [](const RunConfig& c) { return std::to_string(c.train.repeats); });
    add("execution", "serial or parallel expert/repeat scheduling (results are identical)",
        [](RunConfig& c, const std::string& v) {
          if (v == "serial") c.train.execution = Execution::Serial;
          else if (v == "parallel") c.train.execution = Execution::Parallel;
          else bad("execution", v, "serial or parallel");
        },
        [](const RunConfig& c) { return std::string(c.train.execution == Execution::Serial ? "serial" : "parallel"); });
    add("synth.height", "synthetic scene rows",
        [](RunConfig& c, const std::string& v) { c.synth_height = as_size("synth.height", v); },
        [](const RunConfig& c) { return std::to_string(c.synth_height); });
    add("synth.width", "synthetic scene columns",
        [](RunConfig& c, const std::string& v) { c.synth_width = as_size("synth.width", v); },
        [](const RunConfig& c) { return std::to_string(c.synth_width); });
    add("synth.bands", "synthetic scene bands",
        [](RunConfig& c, const std::string& v) { c.synth_bands = as_size("synth.bands", v); },
        [](const RunConfig& c) { return std::to_string(c.synth_bands); });
    add("synth.period", "stripe period in pixels",
        [](RunConfig& c, const std::string& v) { c.synth_period = as_size("synth.period", v); },
        [](const RunConfig& c) { return std::to_string(c.synth_period); });
    add("synth.noise", "per-band Gaussian noise sigma",
        [](RunConfig& c, const std::string& v) { c.synth_noise = as_real("synth.noise", v); },
        [](const RunConfig& c) { return fmt_real(c.synth_noise); });
    add("synth.seed", "synthetic scene seed (signatures and noise)",
        [](RunConfig& c, const std::string& v) { c.synth_seed = as_u64("synth.seed", v); },
        [](const RunConfig& c) { return std::to_string(c.synth_seed); });
    return d;
  }();
  return defs;
}

}  // namespace

std::string RunConfig::checkpoint_path() const { return checkpoint.empty() ? out + "/model.ckpt" : checkpoint; }

SyntheticSpec RunConfig::synthetic_spec() const {
  SyntheticSpec s = default_synthetic_spec(synth_seed, synth_height, synth_width, synth_bands, synth_noise);
  for (auto& c : s.classes) c.period = synth_period;
  return s;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& d : key_defs()) k.push_back(d.doc);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& d : key_defs()) {
    if (d.doc.name == key) {
      d.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string raw;
  std::set<std::string> seen;
  for (std::size_t lineno = 1; std::getline(is, raw); ++lineno) {
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "missing key");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

std::string render_config(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& d : key_defs()) os << d.doc.name << " = " << d.get(cfg) << '\n';
  return os.str();
}

SyntheticSpec parse_synthetic_spec(const std::string& text, const std::string& origin) {
  SyntheticSpec spec = default_synthetic_spec(0);
  std::size_t period = 8;
  std::vector<SyntheticClass> classes;
  std::vector<bool> own_period;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::string raw;
  for (std::size_t lineno = 1; std::getline(is, raw); ++lineno) {
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      if (key != "class" && !seen.insert(key).second) throw ConfigError("key '" + key + "' given twice");
      if (key == "height") spec.height = as_size(key, value);
      else if (key == "width") spec.width = as_size(key, value);
      else if (key == "bands") spec.bands = as_size(key, value);
      else if (key == "noise") spec.noise_sigma = as_real(key, value);
      else if (key == "seed") spec.seed = as_u64(key, value);
      else if (key == "period") period = as_size(key, value);
      else if (key == "class") {
        std::istringstream fs(value);
        std::string name, orient, per, extra;
        fs >> name >> orient >> per >> extra;
        if (name.empty() || orient.empty() || !extra.empty()) bad(key, value, "'<name> <orientation> [period]'");
        SyntheticClass c;
        c.name = name;
        try {
          c.orientation = parse_orientation(orient);
        } catch (const std::invalid_argument&) {
          bad(key, orient, "vertical, horizontal, blob or background");
        }
        own_period.push_back(!per.empty());
        if (!per.empty()) c.period = as_size(key, per);
        classes.push_back(std::move(c));
      } else {
        throw ConfigError("unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  if (!classes.empty()) spec.classes = std::move(classes);
  for (std::size_t i = 0; i < spec.classes.size(); ++i)
    if (i >= own_period.size() || !own_period[i]) spec.classes[i].period = period;
  if (spec.height == 0 || spec.width == 0 || spec.bands == 0) throw ConfigError(origin + ": extents must be positive");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError(origin + ": noise must be >= 0");
  for (const auto& c : spec.classes)
    if (c.period < 2) throw ConfigError(origin + ": period of '" + c.name + "' must be >= 2");
  std::size_t backgrounds = 0;
  for (const auto& c : spec.classes) backgrounds += c.orientation == Orientation::Background;
  if (backgrounds != 1) throw ConfigError(origin + ": exactly one background class is required");
  try {
    draw_signatures(spec);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return spec;
}

SyntheticSpec load_synthetic_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read spec '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_synthetic_spec(ss.str(), path);
}

}  // namespace mambamoe
