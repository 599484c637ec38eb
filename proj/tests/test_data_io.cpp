// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "mambamoe/data_io.hpp"
#include "test_util.hpp"

using namespace mambamoe;
using namespace testutil;

namespace {

std::vector<std::uint8_t> bytes_of(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

void put_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

HsiScene random_scene(std::mt19937_64& rng, std::size_t b, std::size_t h, std::size_t w, std::size_t k) {
  HsiScene s;
  s.bands = b;
  s.height = h;
  s.width = w;
  for (std::size_t c = 0; c < k; ++c) s.class_names.push_back("class " + std::to_string(c + 1));
  s.provenance = "random b=" + std::to_string(b);
  s.cube = Tensor<float>(Shape{b, h, w});
  std::normal_distribution<float> n(0.0f, 100.0f);
  for (auto& v : s.cube.vec()) v = n(rng);
  s.labels = LabelRaster(h, w);
  for (auto& v : s.labels.labels) v = static_cast<std::uint16_t>(pick(rng, 0, k));
  for (std::size_t c = 1; c <= k; ++c) s.labels.labels[(c - 1) % (h * w)] = static_cast<std::uint16_t>(c);
  return s;
}

}  // namespace

class DataIo : public ::testing::Test {
 protected:
  void SetUp() override { dir = temp_dir("dataio"); }
  void TearDown() override { std::filesystem::remove_all(dir); }
  std::filesystem::path dir;
};

TEST_F(DataIo, HscRoundTrip50Scenes) {
  std::mt19937_64 rng(50);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t b = pick(rng, 1, 12), h = pick(rng, 1, 20), w = pick(rng, 1, 20);
    if (trial == 0) b = 1;
    if (trial == 1) h = 1;
    const std::size_t k = std::min<std::size_t>(pick(rng, 1, 5), h * w);
    const auto s = random_scene(rng, b, h, w, k);
    const auto path = dir / ("s" + std::to_string(trial) + ".hsc");
    save_hsc(s, path.string());
    const auto back = load_hsc(path.string());
    ASSERT_EQ(back, s) << "trial " << trial;
    ASSERT_EQ(bytes_of(path).size(), 5 + std::to_string(b).size() + std::to_string(h).size() +
                                         std::to_string(w).size() + std::to_string(k).size() + 4 +
                                         [&] {
                                           std::size_t n = 0;
                                           for (const auto& c : s.class_names) n += c.size() + 1;
                                           return n;
                                         }() +
                                         s.provenance.size() + 1 + 4 * b * h * w + 2 * h * w);
  }
}

TEST_F(DataIo, HscByteLayout) {
  HsiScene s;
  s.bands = 1;
  s.height = 1;
  s.width = 2;
  s.class_names = {"a"};
  s.provenance = "p";
  s.cube = Tensor<float>(Shape{1, 1, 2}, {1.0f, -2.0f});
  s.labels = LabelRaster(1, 2, {1, 0});
  save_hsc(s, (dir / "x.hsc").string());
  const std::string head = "HSC1\n1 1 2 1\na\np\n";
  std::vector<std::uint8_t> expect(head.begin(), head.end());
  for (std::uint8_t v : {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0, 0x01, 0x00, 0x00, 0x00}) expect.push_back(v);
  EXPECT_EQ(bytes_of(dir / "x.hsc"), expect);
}

TEST_F(DataIo, HscErrors) {
  std::mt19937_64 rng(1);
  const auto s = random_scene(rng, 2, 3, 3, 2);
  save_hsc(s, (dir / "ok.hsc").string());
  auto b = bytes_of(dir / "ok.hsc");

  auto bad = b;
  bad[0] = 'J';
  put_bytes(dir / "magic.hsc", bad);
  EXPECT_THROW(load_hsc((dir / "magic.hsc").string()), BadMagicError);

  put_bytes(dir / "short.hsc", std::vector<std::uint8_t>(b.begin(), b.end() - 3));
  EXPECT_THROW(load_hsc((dir / "short.hsc").string()), TruncatedError);

  auto longer = b;
  longer.push_back(0);
  put_bytes(dir / "long.hsc", longer);
  EXPECT_THROW(load_hsc((dir / "long.hsc").string()), SceneFormatError);

  const std::string huge = "HSC1\n4294967296 2 2 1\na\np\n";
  put_bytes(dir / "huge.hsc", std::vector<std::uint8_t>(huge.begin(), huge.end()));
  EXPECT_THROW(load_hsc((dir / "huge.hsc").string()), ExtentOverflowError);
  EXPECT_THROW(parse_hsc_header("2147483648 2147483648 2147483648 1"), ExtentOverflowError);
  EXPECT_THROW(parse_hsc_header("2 2 2"), SceneFormatError);
  EXPECT_THROW(parse_hsc_header("2 -2 2 1"), SceneFormatError);
  EXPECT_THROW(load_hsc((dir / "absent.hsc").string()), DataError);

  // Label above K.
  auto bad_label = b;
  bad_label[bad_label.size() - 2] = 9;
  put_bytes(dir / "label.hsc", bad_label);
  EXPECT_THROW(load_hsc((dir / "label.hsc").string()), SceneFormatError);
}

TEST(Synthetic, LayoutAreasMatchClosedForm) {
  for (std::size_t size : {16u, 24u, 32u, 48u}) {
    for (std::size_t period : {4u, 6u, 8u}) {
      auto spec = default_synthetic_spec(0, size, size, 4);
      for (auto& c : spec.classes) c.period = period;
      const auto lab = synthetic_layout(spec);
      const auto expect = synthetic_expected_areas(spec);
      std::vector<double> got(expect.size(), 0);
      for (auto v : lab.labels) got[v] += 1;
      EXPECT_EQ(got[1], expect[1]) << size << " " << period;
      EXPECT_EQ(got[2], expect[2]) << size << " " << period;
      // Pixel-counted disc vs pi r^2: within the perimeter band.
      const double r = std::sqrt(expect[3] / std::numbers::pi);
      EXPECT_NEAR(got[3], expect[3], 2 * std::numbers::pi * r + 1) << size;
      EXPECT_EQ(got[1] + got[2] + got[3] + got[4], static_cast<double>(size * size));
    }
  }
}

TEST(Synthetic, StripesRunInTheirDirection) {
  const auto spec = default_synthetic_spec(0);
  const auto lab = synthetic_layout(spec);
  // Vertical stripes occupy whole columns of the top-left band.
  for (std::size_t c = 0; c < 16; ++c) {
    const bool on = lab.at(0, c) == 1;
    for (std::size_t r = 0; r < 16; ++r) EXPECT_EQ(lab.at(r, c) == 1, on);
  }
  // Horizontal stripes occupy whole rows of the top-right band.
  for (std::size_t r = 0; r < 16; ++r) {
    const bool on = lab.at(r, 16) == 2;
    for (std::size_t c = 16; c < 32; ++c) EXPECT_EQ(lab.at(r, c) == 2, on);
  }
  EXPECT_EQ(lab.at(24, 16), 3);
  EXPECT_EQ(lab.at(31, 0), 4);
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic(default_synthetic_spec(3));
  const auto b = generate_synthetic(default_synthetic_spec(3));
  const auto c = generate_synthetic(default_synthetic_spec(4));
  EXPECT_EQ(a, b);
  EXPECT_NE(a.cube, c.cube);
  EXPECT_EQ(a.provenance, "synthetic seed=3 sigma=0.1 size=32x32x16");
}

TEST(Synthetic, SignaturesAreSeparated) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto spec = default_synthetic_spec(seed, 32, 32, 3, 0.5);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) {
        double d2 = 0;
        for (std::size_t q = 0; q < 3; ++q) d2 += std::pow(spec.classes[i].signature[q] - spec.classes[j].signature[q], 2);
        EXPECT_GE(std::sqrt(d2), 2.5);
      }
  }
}

// Nearest-signature classification of the noisy cube recovers the layout:
// the pixels really carry their class spectrum plus small noise.
TEST(Synthetic, NearestSignatureOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto spec = default_synthetic_spec(seed);
    const auto s = generate_synthetic(spec);
    const std::size_t n = s.height * s.width;
    std::size_t correct = 0;
    double resid = 0;
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        double d = 0;
        for (std::size_t b = 0; b < s.bands; ++b) d += std::pow(s.cube[b * n + p] - spec.classes[c].signature[b], 2);
        if (d < best_d) best_d = d, best = c;
      }
      correct += best + 1 == s.labels.labels[p];
      for (std::size_t b = 0; b < s.bands; ++b)
        resid += std::pow(s.cube[b * n + p] - spec.classes[s.labels.labels[p] - 1].signature[b], 2);
    }
    EXPECT_EQ(correct, n) << seed;
    EXPECT_NEAR(std::sqrt(resid / (n * s.bands)), spec.noise_sigma, 0.01);
  }
}

TEST(Synthetic, InvalidSpecs) {
  auto spec = default_synthetic_spec(0);
  spec.classes.pop_back();
  EXPECT_THROW(synthetic_layout(spec), std::invalid_argument);
  spec = default_synthetic_spec(0);
  spec.classes[0].period = 1;
  EXPECT_THROW(synthetic_layout(spec), std::invalid_argument);
  EXPECT_EQ(parse_orientation("blob"), Orientation::Blob);
  EXPECT_THROW(parse_orientation("diagonal"), std::invalid_argument);
}

TEST(Normalize, ZeroMeanUnitVariancePerBand) {
  std::mt19937_64 rng(2);
  auto s = random_scene(rng, 4, 9, 7, 3);
  for (std::size_t i = 0; i < 63; ++i) s.cube[63 + i] = 5.0f;  // constant band
  const auto z = normalize_scene(s);
  for (std::size_t b = 0; b < 4; ++b) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 63; ++i) m += z[b * 63 + i];
    m /= 63;
    for (std::size_t i = 0; i < 63; ++i) v += std::pow(z[b * 63 + i] - m, 2);
    v /= 63;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, b == 1 ? 0.0 : 1.0, 1e-4);
  }
  for (float v : z.vec()) EXPECT_TRUE(std::isfinite(v));
}

TEST_F(DataIo, PpmBytes) {
  LabelRaster lab(2, 2, {1, 0, 2, 1});
  Palette pal{{1, {255, 0, 10}}, {2, {1, 2, 3}}};
  const std::string head = "P6\n2 2\n255\n";
  std::vector<std::uint8_t> expect(head.begin(), head.end());
  for (std::uint8_t v : {255, 0, 10, 0, 0, 0, 1, 2, 3, 255, 0, 10}) expect.push_back(v);
  EXPECT_EQ(encode_ppm(lab, pal), expect);
  render_map(lab, pal, (dir / "m.ppm").string());
  EXPECT_EQ(bytes_of(dir / "m.ppm"), expect);
  EXPECT_THROW(encode_ppm(LabelRaster(1, 1, {3}), pal), DataError);

  // "P6\n" + W + " " + H + "\n255\n" is 9 bytes plus the digits.
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {7, 130}, {1000, 3}}) {
    const auto bytes = encode_ppm(LabelRaster(h, w, std::vector<std::uint16_t>(h * w, 0)), pal);
    EXPECT_EQ(bytes.size(), 9 + std::to_string(h).size() + std::to_string(w).size() + 3 * h * w);
  }
}

TEST_F(DataIo, PaletteRoundTrip) {
  const auto pal = default_palette(20);
  EXPECT_EQ(pal.size(), 21u);
  EXPECT_EQ(pal.at(0), (Rgb{0, 0, 0}));
  EXPECT_NE(pal.at(1), pal.at(17));
  save_palette(pal, (dir / "p.txt").string());
  EXPECT_EQ(load_palette((dir / "p.txt").string()), pal);
  std::ofstream(dir / "bad.txt") << "1 300 0 0\n";
  EXPECT_THROW(load_palette((dir / "bad.txt").string()), DataError);
}
