// SPDX-License-Identifier: Apache-2.0
#include "mambamoe/data_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "byte_io.hpp"

namespace mambamoe {

namespace {

constexpr char kHscMagic[] = "HSC1\n";
constexpr std::size_t kMaxExtent = std::size_t{1} << 31;

bool checked_mul(std::size_t a, std::size_t b, std::size_t& out) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) return false;
  out = a * b;
  return true;
}

std::size_t parse_count(const std::string& tok, const std::string& what) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
    throw SceneFormatError("hsc: malformed " + what + " '" + tok + "'");
  }
  try {
    return static_cast<std::size_t>(std::stoull(tok));
  } catch (const std::out_of_range&) {
    throw ExtentOverflowError("hsc: " + what + " '" + tok + "' out of range");
  }
}

}  // namespace

void validate_scene(const HsiScene& s) {
  if (s.bands == 0 || s.height == 0 || s.width == 0) throw SceneFormatError("scene extents must be positive");
  if (s.cube.shape() != Shape{s.bands, s.height, s.width}) {
    throw SceneFormatError("scene cube " + s.cube.shape().str() + " does not match header " +
                           Shape{s.bands, s.height, s.width}.str());
  }
  if (s.labels.height != s.height || s.labels.width != s.width || s.labels.size() != s.height * s.width) {
    throw SceneFormatError("label raster does not match scene extents");
  }
  const std::size_t k = s.num_classes();
  if (k == 0 || k > std::numeric_limits<std::uint16_t>::max()) {
    throw SceneFormatError("scene must declare between 1 and 65535 classes");
  }
  std::vector<std::size_t> count(k + 1, 0);
  for (std::uint16_t l : s.labels.labels) {
    if (l > k) throw SceneFormatError("label " + std::to_string(l) + " exceeds class count " + std::to_string(k));
    ++count[l];
  }
  for (std::size_t c = 1; c <= k; ++c) {
    if (count[c] == 0) throw SceneFormatError("class " + std::to_string(c) + " (" + s.class_names[c - 1] + ") has no labeled pixels");
  }
  for (const auto& n : s.class_names) {
    if (n.find('\n') != std::string::npos) throw SceneFormatError("class names must be single-line");
  }
  if (s.provenance.find('\n') != std::string::npos) throw SceneFormatError("provenance must be single-line");
}

std::array<std::size_t, 4> parse_hsc_header(const std::string& line) {
  std::istringstream ls(line);
  std::array<std::string, 4> tok;
  for (auto& t : tok) {
    if (!(ls >> t)) throw SceneFormatError("hsc: header needs 'B H W K', got '" + line + "'");
  }
  std::string extra;
  if (ls >> extra) throw SceneFormatError("hsc: trailing token in header '" + line + "'");
  const std::array<std::string, 4> names{"B", "H", "W", "K"};
  std::array<std::size_t, 4> v{};
  for (std::size_t i = 0; i < 4; ++i) {
    v[i] = parse_count(tok[i], names[i]);
    if (v[i] == 0) throw SceneFormatError("hsc: " + names[i] + " must be positive");
    if (v[i] > kMaxExtent) throw ExtentOverflowError("hsc: " + names[i] + "=" + tok[i] + " exceeds 2^31");
  }
  std::size_t hw = 0, cube = 0, bytes = 0;
  if (!checked_mul(v[1], v[2], hw) || !checked_mul(hw, v[0], cube) || !checked_mul(cube, 4, bytes)) {
    throw ExtentOverflowError("hsc: payload size for '" + line + "' overflows");
  }
  if (v[3] > std::numeric_limits<std::uint16_t>::max()) throw ExtentOverflowError("hsc: K exceeds 16-bit labels");
  return v;
}

void save_hsc(const HsiScene& scene, const std::string& path) {
  validate_scene(scene);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("hsc: cannot open '" + path + "' for writing");
  os << kHscMagic << scene.bands << ' ' << scene.height << ' ' << scene.width << ' ' << scene.num_classes() << '\n';
  for (const auto& n : scene.class_names) os << n << '\n';
  os << scene.provenance << '\n';
  detail::write_le<std::uint32_t, float>(os, scene.cube.data());
  detail::write_le<std::uint16_t, std::uint16_t>(os, std::span<const std::uint16_t>(scene.labels.labels));
  if (!os) throw DataError("hsc: write failed for '" + path + "'");
}

HsiScene load_hsc(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("hsc: cannot open '" + path + "'");
  is.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(is.tellg());
  is.seekg(0);

  std::string magic(sizeof(kHscMagic) - 1, '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (static_cast<std::size_t>(is.gcount()) != magic.size() || magic != kHscMagic) {
    throw BadMagicError("hsc: '" + path + "' does not start with HSC1");
  }
  auto line = [&](const char* what) {
    std::string l;
    if (!std::getline(is, l)) throw TruncatedError(std::string("hsc: file ends inside ") + what);
    return l;
  };
  const auto [b, h, w, k] = parse_hsc_header(line("header"));
  HsiScene s;
  s.bands = b;
  s.height = h;
  s.width = w;
  for (std::size_t i = 0; i < k; ++i) s.class_names.push_back(line("class names"));
  s.provenance = line("provenance");

  const std::size_t payload = b * h * w * 4 + h * w * 2;
  const auto offset = static_cast<std::size_t>(is.tellg());
  if (file_size - offset < payload) {
    throw TruncatedError("hsc: payload has " + std::to_string(file_size - offset) + " bytes, header implies " +
                         std::to_string(payload));
  }
  if (file_size - offset > payload) throw SceneFormatError("hsc: trailing bytes after label payload");
  s.cube = Tensor<float>(Shape{b, h, w});
  s.labels = LabelRaster(h, w);
  if (!detail::read_le<std::uint32_t, float>(is, s.cube.data()) ||
      !detail::read_le<std::uint16_t, std::uint16_t>(is, std::span<std::uint16_t>(s.labels.labels))) {
    throw TruncatedError("hsc: payload ended early");
  }
  validate_scene(s);
  return s;
}

std::string orientation_name(Orientation o) {
  switch (o) {
    case Orientation::Vertical: return "vertical";
    case Orientation::Horizontal: return "horizontal";
    case Orientation::Blob: return "blob";
    case Orientation::Background: return "background";
  }
  return "?";
}

Orientation parse_orientation(const std::string& s) {
  for (auto o : {Orientation::Vertical, Orientation::Horizontal, Orientation::Blob, Orientation::Background}) {
    if (orientation_name(o) == s) return o;
  }
  throw std::invalid_argument("unknown orientation '" + s + "'");
}

void draw_signatures(SyntheticSpec& spec) {
  const double min_dist = std::max(1.0, 5.0 * spec.noise_sigma);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t attempt = 0, ok = 0; !ok; ++attempt) {
    if (attempt == 100000) throw std::invalid_argument("cannot separate class signatures; add bands or lower noise");
    for (auto& c : spec.classes) {
      c.signature.resize(spec.bands);
      for (double& v : c.signature) v = n01(rng);
    }
    ok = 1;
    for (std::size_t i = 0; i < spec.classes.size() && ok; ++i) {
      for (std::size_t j = i + 1; j < spec.classes.size() && ok; ++j) {
        double d2 = 0;
        for (std::size_t q = 0; q < spec.bands; ++q) {
          const double d = spec.classes[i].signature[q] - spec.classes[j].signature[q];
          d2 += d * d;
        }
        ok = std::sqrt(d2) >= min_dist;
      }
    }
  }
}

SyntheticSpec default_synthetic_spec(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t bands,
                                     double noise_sigma) {
  SyntheticSpec spec;
  spec.height = height;
  spec.width = width;
  spec.bands = bands;
  spec.noise_sigma = noise_sigma;
  spec.seed = seed;
  spec.classes = {{"vertical_stripes", Orientation::Vertical, {}, 8},
                  {"horizontal_stripes", Orientation::Horizontal, {}, 8},
                  {"blob", Orientation::Blob, {}, 8},
                  {"background", Orientation::Background, {}, 8}};
  draw_signatures(spec);
  return spec;
}

namespace {

struct Layout {
  std::vector<std::size_t> striped;  // class indices, top half
  std::vector<std::size_t> blobs;
  std::size_t background = 0;
};

Layout plan_layout(const SyntheticSpec& spec) {
  if (spec.height == 0 || spec.width == 0 || spec.bands == 0) throw std::invalid_argument("synthetic extents must be positive");
  if (spec.classes.empty() || spec.classes.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw std::invalid_argument("synthetic spec needs at least one class");
  }
  if (!(spec.noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
  Layout l;
  std::size_t n_background = 0;
  for (std::size_t i = 0; i < spec.classes.size(); ++i) {
    const auto& c = spec.classes[i];
    if (c.signature.size() != spec.bands) {
      throw std::invalid_argument("class '" + c.name + "' signature has " + std::to_string(c.signature.size()) +
                                  " bands, scene has " + std::to_string(spec.bands));
    }
    switch (c.orientation) {
      case Orientation::Vertical:
      case Orientation::Horizontal:
        if (c.period < 2) throw std::invalid_argument("stripe period must be >= 2 for class '" + c.name + "'");
        l.striped.push_back(i);
        break;
      case Orientation::Blob: l.blobs.push_back(i); break;
      case Orientation::Background:
        l.background = i;
        ++n_background;
        break;
    }
  }
  if (n_background != 1) throw std::invalid_argument("synthetic spec needs exactly one background class");
  return l;
}

std::size_t stripe_cover(std::size_t extent, std::size_t period) {
  const std::size_t width = period / 2;
  return (extent / period) * width + std::min(extent % period, width);
}

struct Disc {
  double row, col, radius;
};

std::vector<Disc> blob_discs(const SyntheticSpec& spec, const Layout& l) {
  std::vector<Disc> d;
  const double nb = static_cast<double>(l.blobs.size());
  for (std::size_t j = 0; j < l.blobs.size(); ++j) {
    const double radius = std::min(spec.height / 4.0, spec.width / (2.0 * nb)) - 1.0;
    d.push_back({spec.height / 2.0 + spec.height / 4.0, (2.0 * j + 1.0) * spec.width / (2.0 * nb), radius});
  }
  return d;
}

}  // namespace

LabelRaster synthetic_layout(const SyntheticSpec& spec) {
  const Layout l = plan_layout(spec);
  const std::size_t h = spec.height, w = spec.width, top = h / 2;
  LabelRaster out(h, w);
  for (auto& v : out.labels) v = static_cast<std::uint16_t>(l.background + 1);
  const std::size_t ns = l.striped.size();
  for (std::size_t j = 0; j < ns; ++j) {
    const auto& c = spec.classes[l.striped[j]];
    const std::size_t c0 = j * w / ns, c1 = (j + 1) * w / ns, sw = c.period / 2;
    for (std::size_t r = 0; r < top; ++r) {
      for (std::size_t col = c0; col < c1; ++col) {
        const bool on = c.orientation == Orientation::Vertical ? (col - c0) % c.period < sw : r % c.period < sw;
        if (on) out.at(r, col) = static_cast<std::uint16_t>(l.striped[j] + 1);
      }
    }
  }
  const auto discs = blob_discs(spec, l);
  for (std::size_t j = 0; j < discs.size(); ++j) {
    for (std::size_t r = top; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        const double dr = r - discs[j].row, dc = col - discs[j].col;
        if (dr * dr + dc * dc <= discs[j].radius * discs[j].radius) {
          out.at(r, col) = static_cast<std::uint16_t>(l.blobs[j] + 1);
        }
      }
    }
  }
  return out;
}

std::vector<double> synthetic_expected_areas(const SyntheticSpec& spec) {
  const Layout l = plan_layout(spec);
  const std::size_t h = spec.height, w = spec.width, top = h / 2;
  std::vector<double> area(spec.classes.size() + 1, 0.0);
  const std::size_t ns = l.striped.size();
  double used = 0;
  for (std::size_t j = 0; j < ns; ++j) {
    const auto& c = spec.classes[l.striped[j]];
    const std::size_t bw = (j + 1) * w / ns - j * w / ns;
    const double a = c.orientation == Orientation::Vertical
                         ? static_cast<double>(top * stripe_cover(bw, c.period))
                         : static_cast<double>(bw * stripe_cover(top, c.period));
    area[l.striped[j] + 1] = a;
    used += a;
  }
  const auto discs = blob_discs(spec, l);
  for (std::size_t j = 0; j < discs.size(); ++j) {
    const double r = std::max(0.0, discs[j].radius);
    area[l.blobs[j] + 1] = std::numbers::pi * r * r;
    used += area[l.blobs[j] + 1];
  }
  area[l.background + 1] = static_cast<double>(h * w) - used;
  return area;
}

HsiScene generate_synthetic(const SyntheticSpec& spec) {
  HsiScene s;
  s.labels = synthetic_layout(spec);
  s.bands = spec.bands;
  s.height = spec.height;
  s.width = spec.width;
  for (const auto& c : spec.classes) s.class_names.push_back(c.name);
  std::ostringstream prov;
  prov << "synthetic seed=" << spec.seed << " sigma=" << spec.noise_sigma << " size=" << spec.height << "x"
       << spec.width << "x" << spec.bands;
  s.provenance = prov.str();

  s.cube = Tensor<float>(Shape{spec.bands, spec.height, spec.width});
  // Separate stream from the one default_synthetic_spec draws signatures from.
  std::mt19937_64 rng(spec.seed ^ 0x6e6f697365ULL);
  std::normal_distribution<double> n01(0.0, 1.0);
  const std::size_t n = spec.height * spec.width;
  for (std::size_t p = 0; p < n; ++p) {
    const auto& sig = spec.classes[s.labels.labels[p] - 1].signature;
    for (std::size_t b = 0; b < spec.bands; ++b) {
      const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * n01(rng) : 0.0;
      s.cube[b * n + p] = static_cast<float>(sig[b] + noise);
    }
  }
  validate_scene(s);
  return s;
}

Tensor<float> normalize_bands(const Tensor<float>& cube) {
  if (cube.rank() != 3) throw ShapeError("normalize: expected [B,H,W], got " + cube.shape().str());
  const std::size_t bands = cube.dim(0), n = cube.dim(1) * cube.dim(2);
  Tensor<float> out(cube.shape());
  for (std::size_t b = 0; b < bands; ++b) {
    const float* x = cube.data().data() + b * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    const double sigma = std::max(std::sqrt(var / static_cast<double>(n)), 1e-8);
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = static_cast<float>((x[i] - mean) / sigma);
  }
  return out;
}

Tensor<float> normalize_scene(const HsiScene& scene) { return normalize_bands(scene.cube); }

Palette default_palette(std::size_t classes) {
  static constexpr std::array<Rgb, 16> kBase{{{230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
                                              {245, 130, 48}, {145, 30, 180},  {70, 240, 240}, {240, 50, 230},
                                              {210, 245, 60}, {250, 190, 212}, {0, 128, 128},  {220, 190, 255},
                                              {170, 110, 40}, {255, 250, 200}, {128, 0, 0},    {170, 255, 195}}};
  Palette p{{0, Rgb{0, 0, 0}}};
  for (std::size_t c = 1; c <= classes; ++c) {
    Rgb col = kBase[(c - 1) % kBase.size()];
    // Later cycles are darkened so ids stay distinguishable.
    const std::size_t cycle = (c - 1) / kBase.size();
    for (auto& v : col) v = static_cast<std::uint8_t>(v >> std::min<std::size_t>(cycle, 7));
    p[static_cast<std::uint16_t>(c)] = col;
  }
  return p;
}

Palette load_palette(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("palette: cannot open '" + path + "'");
  Palette p;
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    long id = 0, r = 0, g = 0, b = 0;
    if (!(ls >> id)) continue;
    std::string extra;
    if (!(ls >> r >> g >> b) || (ls >> extra) || id < 0 || id > 65535 || r < 0 || r > 255 || g < 0 || g > 255 ||
        b < 0 || b > 255) {
      throw DataError("palette: bad entry on line " + std::to_string(lineno) + " of '" + path + "'");
    }
    p[static_cast<std::uint16_t>(id)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                         static_cast<std::uint8_t>(b)};
  }
  return p;
}

void save_palette(const Palette& palette, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("palette: cannot open '" + path + "' for writing");
  for (const auto& [id, c] : palette) os << id << ' ' << int(c[0]) << ' ' << int(c[1]) << ' ' << int(c[2]) << '\n';
}

std::vector<std::uint8_t> encode_ppm(const LabelRaster& labels, const Palette& palette) {
  if (labels.height == 0 || labels.width == 0) throw DataError("ppm: empty raster");
  const std::string header = "P6\n" + std::to_string(labels.width) + " " + std::to_string(labels.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + 3 * labels.size());
  for (std::uint16_t id : labels.labels) {
    auto it = palette.find(id);
    Rgb c{0, 0, 0};
    if (it != palette.end()) {
      c = it->second;
    } else if (id != 0) {
      throw DataError("ppm: class id " + std::to_string(id) + " has no palette entry");
    }
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

void render_map(const LabelRaster& labels, const Palette& palette, const std::string& path) {
  const auto bytes = encode_ppm(labels, palette);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("ppm: cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("ppm: write failed for '" + path + "'");
}

}  // namespace mambamoe
