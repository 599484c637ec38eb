// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambamoe/tensor.hpp"

namespace mambamoe {

/// Base of every scene/file error. The CLI maps it to the data exit code.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public DataError {
 public:
  using DataError::DataError;
};
class TruncatedError : public DataError {
 public:
  using DataError::DataError;
};
class ExtentOverflowError : public DataError {
 public:
  using DataError::DataError;
};
/// Header or content violates the scene invariants.
class SceneFormatError : public DataError {
 public:
  using DataError::DataError;
};

struct HsiScene {
  std::size_t bands = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> class_names;  // K entries, class id = index + 1
  std::string provenance;
  Tensor<float> cube;  // [B,H,W]
  LabelRaster labels;  // 0 = unlabeled

  std::size_t num_classes() const { return class_names.size(); }
  friend bool operator==(const HsiScene&, const HsiScene&) = default;
};

/// Checks extents, label range and per-class presence. Throws SceneFormatError.
void validate_scene(const HsiScene& scene);

/// .hsc container:
///   "HSC1\n"
///   "B H W K\n"
///   K lines of class names
///   one provenance line
///   B*H*W float32 LE, band-major (band, row, col)
///   H*W uint16 LE labels, row-major
void save_hsc(const HsiScene& scene, const std::string& path);
HsiScene load_hsc(const std::string& path);

/// Parses the "B H W K" header line; rejects extents whose payload size
/// overflows.
std::array<std::size_t, 4> parse_hsc_header(const std::string& line);

enum class Orientation { Vertical, Horizontal, Blob, Background };

std::string orientation_name(Orientation o);
Orientation parse_orientation(const std::string& s);

struct SyntheticClass {
  std::string name;
  Orientation orientation = Orientation::Background;
  std::vector<double> signature;  // B entries
  std::size_t period = 8;         // stripe period in pixels; stripes are period/2 wide
};

/// Layout: the top half is split into equal column bands, one per striped
/// class in list order; blob classes are discs spread along the bottom half;
/// the single background class takes every remaining pixel.
struct SyntheticSpec {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t bands = 16;
  std::vector<SyntheticClass> classes;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

/// Fills every class signature from N(0,1) per band, seeded by spec.seed,
/// redrawing until every pair is at least max(1, 5*noise) apart.
void draw_signatures(SyntheticSpec& spec);

/// Four classes: vertical stripes, horizontal stripes, blob, background.
/// Signatures are drawn from N(0,1) per band (seeded) and redrawn until every
/// pair is at least max(1, 5*noise) apart.
SyntheticSpec default_synthetic_spec(std::uint64_t seed, std::size_t height = 32, std::size_t width = 32,
                                     std::size_t bands = 16, double noise_sigma = 0.1);

/// Class id per pixel implied by the layout (no noise, no RNG).
LabelRaster synthetic_layout(const SyntheticSpec& spec);

/// Expected pixel count per class id (index 0 unused) from the layout rules in
/// closed form.
std::vector<double> synthetic_expected_areas(const SyntheticSpec& spec);

HsiScene generate_synthetic(const SyntheticSpec& spec);

/// Per-band z-score over the whole scene, sigma floored at 1e-8.
Tensor<float> normalize_scene(const HsiScene& scene);
Tensor<float> normalize_bands(const Tensor<float>& cube);

using Rgb = std::array<std::uint8_t, 3>;
using Palette = std::map<std::uint16_t, Rgb>;

/// Fixed distinct colours for ids 1..classes; 0 is black.
Palette default_palette(std::size_t classes);
/// Text file, one "id r g b" per line, '#' comments.
Palette load_palette(const std::string& path);
void save_palette(const Palette& palette, const std::string& path);

/// P6 bytes for the raster. Id 0 without a palette entry renders black; any
/// other id without an entry throws DataError.
std::vector<std::uint8_t> encode_ppm(const LabelRaster& labels, const Palette& palette);
void render_map(const LabelRaster& labels, const Palette& palette, const std::string& path);

}  // namespace mambamoe
