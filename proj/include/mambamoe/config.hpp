// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambamoe/data_io.hpp"
#include "mambamoe/train.hpp"

namespace mambamoe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command needs. Loaded from a text file of `key = value`
/// lines; `#` starts a comment; blank lines are ignored; unknown keys and
/// repeated keys are errors.
struct RunConfig {
  TrainConfig train;
  std::string scene;       // .hsc path; empty = built-in synthetic scene
  std::string out = "out";
  std::string checkpoint;  // empty = <out>/model.ckpt
  std::string palette;     // empty = built-in palette
  std::size_t synth_height = 32;
  std::size_t synth_width = 32;
  std::size_t synth_bands = 16;
  std::size_t synth_period = 8;
  double synth_noise = 0.1;
  std::uint64_t synth_seed = 0;

  std::string checkpoint_path() const;
  SyntheticSpec synthetic_spec() const;
};

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

/// Every accepted key with its default, in documentation order.
const std::vector<ConfigKey>& config_keys();

/// Parses file contents; `origin` names the source in error messages.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);

/// Applies one key; throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Canonical `key = value` rendering, parseable by parse_config.
std::string render_config(const RunConfig& cfg);

/// Synthetic scene description for `synth --spec PATH`:
///   height = 32 / width = 32 / bands = 16 / noise = 0.1 / seed = 0 / period = 8
///   class = <name> <vertical|horizontal|blob|background> [period]   (repeated, in id order)
/// Signatures are drawn from the seed. Without class lines the four default
/// classes are used.
SyntheticSpec parse_synthetic_spec(const std::string& text, const std::string& origin = "<spec>");
SyntheticSpec load_synthetic_spec(const std::string& path);

}  // namespace mambamoe
