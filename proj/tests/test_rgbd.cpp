#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "sfam/rgbd.hpp"
#include "test_util.hpp"

using namespace sfam;

namespace {

// Histogram peak by explicit interval membership, independent of the binning arithmetic.
double brute_force_last_peak(const ImageD& depth) {
  std::vector<double> z;
  for (double v : depth.pixels())
    if (v > 0.0) z.push_back(v);
  const double lo = *std::min_element(z.begin(), z.end()), hi = *std::max_element(z.begin(), z.end());
  const int bins = 100;
  const double w = (hi - lo) / bins;
  std::vector<int> count(bins, 0);
  for (int b = 0; b < bins; ++b)
    for (double v : z) {
      const double a = lo + b * w, e = lo + (b + 1) * w;
      if ((v >= a && v < e) || (b == bins - 1 && v >= a)) ++count[b];
    }
  for (int b = bins - 1; b >= 0; --b) {
    if (count[b] == 0 || count[b] < 0.01 * z.size()) continue;
    if ((b == 0 || count[b] >= count[b - 1]) && (b == bins - 1 || count[b] >= count[b + 1])) return lo + (b + 0.5) * w;
  }
  return hi;
}

void write_gray(const std::filesystem::path& p, int w, int h, int bits, int channels = 1) {
  png::Raster r{w, h, channels, bits, std::vector<std::uint16_t>(static_cast<std::size_t>(w) * h * channels, 0)};
  for (std::size_t i = 0; i < r.samples.size(); ++i) r.samples[i] = static_cast<std::uint16_t>(1000 + i % 200);
  png::write(p, r);
}

}  // namespace

TEST(Intrinsics, NominalIsCenteredAndScaled) {
  const auto k = CameraIntrinsics::nominal(64, 48);
  EXPECT_DOUBLE_EQ(k.fx, 52.5);
  EXPECT_DOUBLE_EQ(k.cx, 31.5);
  EXPECT_DOUBLE_EQ(k.cy, 23.5);
  EXPECT_NO_THROW(k.validate(64, 48));
  EXPECT_THROW((CameraIntrinsics{-1, 1, 0, 0}.validate(4, 4)), DataError);
  EXPECT_THROW((CameraIntrinsics{1, 1, 10, 0}.validate(4, 4)), DataError);
}

TEST(DenormalizeDepth, Examples) {
  Image<std::uint8_t> raw(3, 1);
  raw[0] = 255;
  raw[1] = 0;
  raw[2] = 128;
  auto z = denormalize_depth(raw, 0.5, 4.5);
  EXPECT_DOUBLE_EQ(z[0], 4.5);
  EXPECT_EQ(z[1], 0.0);
  z = denormalize_depth(raw, 1.0, 3.0);
  EXPECT_NEAR(z[2], 1.0 + 128.0 / 255.0 * 2.0, 1e-12);
  EXPECT_NEAR(z[2], 2.0039, 1e-4);
}

TEST(DenormalizeDepth, MonotoneAndExactAtEndpoints) {
  Image<std::uint8_t> raw(255, 1);
  for (int i = 0; i < 255; ++i) raw[i] = static_cast<std::uint8_t>(i + 1);
  const auto z = denormalize_depth(raw, 0.8, 3.9);
  for (int i = 1; i < 255; ++i) EXPECT_GT(z[i], z[i - 1]);
  EXPECT_DOUBLE_EQ(z[254], 3.9);
  EXPECT_THROW(denormalize_depth(raw, 2.0, 2.0), DataError);
  EXPECT_THROW(denormalize_depth(raw, 3.0, 1.0), DataError);
}

TEST(RemoveBackground, BimodalWallIsRemoved) {
  auto f = testutil::constant_frame(20, 10, 0.5, 3.0);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 8; ++x) f.depth(x, y) = 1.0;
  const auto out = remove_background(f, 0.1);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 20; ++x) EXPECT_EQ(out.depth(x, y), x < 8 ? 1.0 : 0.0);
  EXPECT_EQ(out.intensity, f.intensity);
}

TEST(RemoveBackground, UniformPlaneIsRemovedEntirely) {
  const auto f = testutil::constant_frame(8, 8, 0.5, 2.0);
  const auto out = remove_background(f);
  for (double z : out.depth.pixels()) EXPECT_EQ(z, 0.0);
  EXPECT_DOUBLE_EQ(kDefaultBackgroundTolerance, 0.1);
}

TEST(RemoveBackground, AllInvalidIsError) {
  const auto f = testutil::constant_frame(4, 4, 0.5, 0.0);
  EXPECT_THROW(remove_background(f), DataError);
}

TEST(RemoveBackground, MatchesBruteForceHistogramAndNeverIncreasesDepth) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    std::normal_distribution<double> near(1.0 + 0.02 * trial, 0.05), far(2.5 + 0.03 * trial, 0.08);
    std::bernoulli_distribution pick(0.4), hole(0.05);
    auto f = testutil::constant_frame(40, 30, 0.5, 0.0);
    for (double& z : f.depth.pixels()) z = hole(rng) ? 0.0 : (pick(rng) ? near(rng) : far(rng));
    EXPECT_NEAR(last_depth_peak(f.depth), brute_force_last_peak(f.depth), 1e-9);
    const auto out = remove_background(f, 0.1);
    for (std::size_t i = 0; i < f.depth.size(); ++i) EXPECT_LE(out.depth[i], f.depth[i]);
  }
}

TEST(Sequence, SaveLoadRoundTripIsExact) {
  testutil::TempDir dir;
  RgbdSequence seq;
  seq.sequence_id = "walk";
  seq.label = 2;
  for (int t = 0; t < 3; ++t) {
    auto f = testutil::constant_frame(6, 5, 0.0, 0.0);
    for (std::size_t i = 0; i < f.intensity.size(); ++i) {
      f.intensity[i] = static_cast<double>((i * 37 + t * 11) % 256) / 255.0;
      f.depth[i] = (i % 7 == 0) ? 0.0 : static_cast<double>(800 + i * 13 + t) / 1000.0;
    }
    f.timestamp_index = t;
    seq.frames.push_back(f);
  }
  save_sequence(seq, dir.path() / "walk");
  const auto back = load_sequence(dir.path() / "walk" / "manifest.txt");
  EXPECT_EQ(back, seq);
  save_sequence(back, dir.path() / "again");
  EXPECT_EQ(testutil::slurp(dir.path() / "walk" / "depth" / "0001.png"),
            testutil::slurp(dir.path() / "again" / "depth" / "0001.png"));
}

TEST(Sequence, ManifestWithTwoFramesLoads) {
  testutil::TempDir dir;
  for (const char* n : {"i0.png", "i1.png"}) write_gray(dir / n, 64, 64, 8, 3);
  for (const char* n : {"d0.png", "d1.png"}) write_gray(dir / n, 64, 64, 16);
  std::ofstream(dir / "m.txt") << "# two frames\nlabel=1\ni0.png d0.png\ni1.png d1.png\n";
  const auto seq = load_sequence(dir / "m.txt");
  EXPECT_EQ(seq.frames.size(), 2u);
  EXPECT_EQ(seq.label, 1);
  EXPECT_EQ(seq.frames[0].width(), 64);
  EXPECT_NEAR(seq.frames[0].depth[0], 1.0, 1e-12);  // 1000 mm
  EXPECT_NO_THROW(seq.validate());
}

TEST(Sequence, RgbIntensityIsChannelMean) {
  testutil::TempDir dir;
  png::Raster rgb{1, 1, 3, 8, {255, 0, 51}};
  png::write(dir / "i.png", rgb);
  png::write(dir / "j.png", rgb);
  write_gray(dir / "d.png", 1, 1, 16);
  std::ofstream(dir / "m.txt") << "fx=1 fy=1 cx=0 cy=0\ni.png d.png\nj.png d.png\n";
  const auto seq = load_sequence(dir / "m.txt");
  EXPECT_NEAR(seq.frames[0].intensity[0], (1.0 + 0.0 + 0.2) / 3.0, 1e-12);
}

TEST(Sequence, EightBitDepthUsesZRange) {
  testutil::TempDir dir;
  png::Raster d{2, 1, 1, 8, {0, 255}};
  png::write(dir / "d.png", d);
  write_gray(dir / "i.png", 2, 1, 8);
  std::ofstream(dir / "m.txt") << "zmin=0.5 zmax=4.5\ni.png d.png\ni.png d.png\n";
  const auto seq = load_sequence(dir / "m.txt");
  EXPECT_EQ(seq.frames[0].depth[0], 0.0);
  EXPECT_DOUBLE_EQ(seq.frames[0].depth[1], 4.5);

  std::ofstream(dir / "n.txt") << "i.png d.png\ni.png d.png\n";
  EXPECT_THROW(load_sequence(dir / "n.txt"), DataError);
}

TEST(Sequence, DimensionMismatchIsError) {
  testutil::TempDir dir;
  write_gray(dir / "i.png", 64, 64, 8, 3);
  write_gray(dir / "d.png", 32, 32, 16);
  std::ofstream(dir / "m.txt") << "i.png d.png\ni.png d.png\n";
  EXPECT_THROW(load_sequence(dir / "m.txt"), DataError);
}

TEST(Sequence, SingleFrameIsError) {
  testutil::TempDir dir;
  write_gray(dir / "i.png", 8, 8, 8);
  write_gray(dir / "d.png", 8, 8, 16);
  std::ofstream(dir / "m.txt") << "i.png d.png\n";
  EXPECT_THROW(load_sequence(dir / "m.txt"), DataError);
}

TEST(Sequence, MissingFilesAreErrors) {
  testutil::TempDir dir;
  EXPECT_THROW(load_sequence(dir / "absent.txt"), DataError);
  std::ofstream(dir / "m.txt") << "nope.png nope16.png\nnope.png nope16.png\n";
  EXPECT_THROW(load_sequence(dir / "m.txt"), DataError);
}

TEST(Sequence, UnknownHeaderKeyIsError) {
  testutil::TempDir dir;
  std::ofstream(dir / "m.txt") << "gamma=2\n";
  EXPECT_THROW(load_sequence(dir / "m.txt"), DataError);
}
