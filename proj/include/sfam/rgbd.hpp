#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sfam/error.hpp"
#include "sfam/image.hpp"
#include "sfam/png_io.hpp"

namespace sfam {

struct CameraIntrinsics {
  double fx = 525.0;
  double fy = 525.0;
  double cx = 0.0;
  double cy = 0.0;

  /// Kinect-like focal length scaled to the image width, centered principal point.
  static CameraIntrinsics nominal(int width, int height) {
    const double f = 525.0 * width / 640.0;
    return {f, f, 0.5 * (width - 1), 0.5 * (height - 1)};
  }

  void validate(int width, int height) const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw DataError("intrinsics: focal lengths must be positive");
    if (!(cx >= 0.0 && cx <= width - 1) || !(cy >= 0.0 && cy <= height - 1))
      throw DataError("intrinsics: principal point outside the image");
  }

  /// Intrinsics of the half-resolution pyramid level.
  CameraIntrinsics halved() const {
    return {0.5 * fx, 0.5 * fy, 0.5 * (cx + 0.5) - 0.5, 0.5 * (cy + 0.5) - 0.5};
  }

  friend bool operator==(const CameraIntrinsics&, const CameraIntrinsics&) = default;
};

/// Intensity in [0,1], metric depth with 0 marking invalid pixels.
struct RgbdFrame {
  ImageD intensity;
  ImageD depth;
  int timestamp_index = 0;
  CameraIntrinsics intrinsics;

  int width() const noexcept { return intensity.width(); }
  int height() const noexcept { return intensity.height(); }

  void validate() const {
    require_same_shape(intensity, depth, "intensity vs depth");
    if (intensity.empty()) throw DataError("empty frame");
    for (double z : depth.pixels())
      if (!(z >= 0.0) || !std::isfinite(z)) throw DataError("depth must be finite and >= 0");
    intrinsics.validate(width(), height());
  }

  friend bool operator==(const RgbdFrame&, const RgbdFrame&) = default;
};

struct RgbdSequence {
  std::vector<RgbdFrame> frames;
  std::optional<int> label;
  std::string sequence_id;

  void validate() const {
    if (frames.size() < 2) throw DataError("sequence '" + sequence_id + "' has fewer than 2 frames");
    for (const auto& f : frames) {
      f.validate();
      if (!f.intensity.same_shape(frames.front().intensity))
        throw DataError("frames of sequence '" + sequence_id + "' differ in size");
      if (!(f.intrinsics == frames.front().intrinsics))
        throw DataError("frames of sequence '" + sequence_id + "' differ in intrinsics");
    }
  }

  friend bool operator==(const RgbdSequence&, const RgbdSequence&) = default;
};

// ---------------------------------------------------------------------------
// depth conditioning

/// Maps 8-bit normalized depth back to meters; raw 0 stays invalid.
inline ImageD denormalize_depth(const Image<std::uint8_t>& raw, double z_min, double z_max) {
  if (!(z_max > z_min) || !(z_min >= 0.0))
    throw DataError("denormalize_depth requires z_max > z_min >= 0");
  ImageD out(raw.width(), raw.height());
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = raw[i] == 0 ? 0.0 : raw[i] / 255.0 * (z_max - z_min) + z_min;
  return out;
}

inline constexpr double kDefaultBackgroundTolerance = 0.1;
inline constexpr int kDepthHistogramBins = 100;

/// Depth of the farthest histogram peak: the highest-index local maximum of
/// a 100-bin histogram over [min valid, max valid] holding >= 1% of valid pixels.
inline double last_depth_peak(const ImageD& depth) {
  double lo = 0.0, hi = 0.0;
  std::size_t valid = 0;
  for (double z : depth.pixels()) {
    if (z <= 0.0) continue;
    lo = valid ? std::min(lo, z) : z;
    hi = valid ? std::max(hi, z) : z;
    ++valid;
  }
  if (valid == 0) throw DataError("depth map has no valid pixels");
  if (hi == lo) return lo;

  std::vector<std::size_t> count(kDepthHistogramBins, 0);
  const double width = (hi - lo) / kDepthHistogramBins;
  for (double z : depth.pixels()) {
    if (z <= 0.0) continue;
    const int b = std::min(kDepthHistogramBins - 1, static_cast<int>((z - lo) / width));
    ++count[b];
  }
  const double min_count = 0.01 * static_cast<double>(valid);
  for (int b = kDepthHistogramBins - 1; b >= 0; --b) {
    const std::size_t c = count[b];
    if (c == 0 || static_cast<double>(c) < min_count) continue;
    const bool left_ok = b == 0 || c >= count[b - 1];
    const bool right_ok = b == kDepthHistogramBins - 1 || c >= count[b + 1];
    if (left_ok && right_ok) return lo + (b + 0.5) * width;
  }
  // Unreachable: the global maximum always qualifies.
  return hi;
}

/// Zeroes depth farther than (last histogram peak - tolerance).
inline RgbdFrame remove_background(const RgbdFrame& frame,
                                   double tolerance = kDefaultBackgroundTolerance) {
  const double threshold = last_depth_peak(frame.depth) - tolerance;
  RgbdFrame out = frame;
  for (double& z : out.depth.pixels())
    if (z > threshold) z = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// native on-disk format

struct ManifestHeader {
  std::optional<CameraIntrinsics> intrinsics;
  std::optional<double> z_min, z_max;
  std::optional<int> label;
  std::optional<std::string> id;
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size()) throw DataError("manifest: bad value for " + key + ": '" + v + "'");
  return d;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline ImageD intensity_from_raster(const png::Raster& r) {
  ImageD out(r.width, r.height);
  const double scale = r.bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      double sum = 0.0;
      for (int c = 0; c < r.channels; ++c) sum += r.at(x, y, c);
      out(x, y) = sum / r.channels / scale;
    }
  return out;
}

inline ImageD depth_from_raster(const png::Raster& r, const ManifestHeader& hdr,
                                const std::string& where) {
  if (r.channels != 1) throw DataError("depth image must be single-channel: " + where);
  if (r.bit_depth == 16) {
    ImageD out(r.width, r.height);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = r.samples[i] / 1000.0;
    return out;
  }
  if (!hdr.z_min || !hdr.z_max)
    throw DataError("8-bit depth needs zmin= and zmax= in the manifest: " + where);
  Image<std::uint8_t> raw(r.width, r.height);
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint8_t>(r.samples[i]);
  return denormalize_depth(raw, *hdr.z_min, *hdr.z_max);
}

}  // namespace detail

/// Reads a manifest: `key=value` header tokens, `#` comments, and one
/// `<intensity> <depth>` pair per line, paths relative to the manifest.
inline RgbdSequence load_sequence(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest: " + manifest_path.string());
  const auto base = manifest_path.parent_path();

  ManifestHeader hdr;
  CameraIntrinsics intr;
  bool have_intr[4] = {false, false, false, false};
  std::vector<std::pair<std::string, std::string>> pairs;

  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.front().find('=') != std::string::npos) {
      for (const auto& t : tok) {
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw DataError("manifest line " + std::to_string(lineno) + ": expected key=value");
        const std::string key = t.substr(0, eq), val = t.substr(eq + 1);
        if (key == "fx") { intr.fx = detail::parse_double(key, val); have_intr[0] = true; }
        else if (key == "fy") { intr.fy = detail::parse_double(key, val); have_intr[1] = true; }
        else if (key == "cx") { intr.cx = detail::parse_double(key, val); have_intr[2] = true; }
        else if (key == "cy") { intr.cy = detail::parse_double(key, val); have_intr[3] = true; }
        else if (key == "zmin") hdr.z_min = detail::parse_double(key, val);
        else if (key == "zmax") hdr.z_max = detail::parse_double(key, val);
        else if (key == "label") hdr.label = static_cast<int>(detail::parse_double(key, val));
        else if (key == "id") hdr.id = val;
        else throw DataError("manifest: unknown header key '" + key + "'");
      }
      continue;
    }
    if (tok.size() != 2)
      throw DataError("manifest line " + std::to_string(lineno) + ": expected '<intensity> <depth>'");
    pairs.emplace_back(tok[0], tok[1]);
  }

  RgbdSequence seq;
  seq.label = hdr.label;
  seq.sequence_id = hdr.id ? *hdr.id : base.filename().string();
  if (pairs.size() < 2) throw DataError("manifest lists fewer than 2 frames: " + manifest_path.string());

  int index = 0;
  for (const auto& [ipath, dpath] : pairs) {
    RgbdFrame f;
    const auto ir = png::read(base / ipath);
    const auto dr = png::read(base / dpath);
    if (ir.width != dr.width || ir.height != dr.height)
      throw DataError("intensity/depth dimension mismatch: " + ipath + " vs " + dpath);
    f.intensity = detail::intensity_from_raster(ir);
    f.depth = detail::depth_from_raster(dr, hdr, dpath);
    f.timestamp_index = index++;
    const auto nominal = CameraIntrinsics::nominal(ir.width, ir.height);
    f.intrinsics = {have_intr[0] ? intr.fx : nominal.fx, have_intr[1] ? intr.fy : nominal.fy,
                    have_intr[2] ? intr.cx : nominal.cx, have_intr[3] ? intr.cy : nominal.cy};
    seq.frames.push_back(std::move(f));
  }
  seq.validate();
  return seq;
}

/// Quantizes to the native format: 8-bit gray intensity, 16-bit millimeter depth.
inline void save_sequence(const RgbdSequence& seq, const std::filesystem::path& dir) {
  seq.validate();
  namespace fs = std::filesystem;
  fs::create_directories(dir / "intensity");
  fs::create_directories(dir / "depth");
  const auto& intr = seq.frames.front().intrinsics;

  std::ofstream m(dir / "manifest.txt");
  if (!m) throw DataError("cannot write manifest in " + dir.string());
  m << "# sfam rgbd sequence\n";
  m << "id=" << seq.sequence_id << "\n";
  m << "fx=" << detail::format_double(intr.fx) << " fy=" << detail::format_double(intr.fy)
    << " cx=" << detail::format_double(intr.cx) << " cy=" << detail::format_double(intr.cy) << "\n";
  if (seq.label) m << "label=" << *seq.label << "\n";

  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto& f = seq.frames[t];
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", t);
    png::Raster ir{f.width(), f.height(), 1, 8, {}};
    png::Raster dr{f.width(), f.height(), 1, 16, {}};
    ir.samples.resize(f.intensity.size());
    dr.samples.resize(f.depth.size());
    for (std::size_t i = 0; i < f.intensity.size(); ++i) {
      ir.samples[i] = static_cast<std::uint16_t>(
          std::lround(std::clamp(f.intensity[i], 0.0, 1.0) * 255.0));
      dr.samples[i] = static_cast<std::uint16_t>(
          std::lround(std::clamp(f.depth[i] * 1000.0, 0.0, 65535.0)));
    }
    png::write(dir / "intensity" / name, ir);
    png::write(dir / "depth" / name, dr);
    m << "intensity/" << name << " depth/" << name << "\n";
  }
}

}  // namespace sfam
