#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sfam/error.hpp"
#include "sfam/image.hpp"
#include "sfam/pdflow.hpp"
#include "sfam/png_io.hpp"

namespace sfam {

/// Three flow channels of one frame pair, index t in 1..T-1.
struct SceneFlowMap {
  ImageD x_mu;
  ImageD x_nu;
  ImageD x_omega;
  int index = 0;

  int width() const noexcept { return x_mu.width(); }
  int height() const noexcept { return x_mu.height(); }

  const ImageD& channel(int c) const { return c == 0 ? x_mu : (c == 1 ? x_nu : x_omega); }
  ImageD& channel(int c) { return c == 0 ? x_mu : (c == 1 ? x_nu : x_omega); }
};

enum class VariantTag { D, S, RPf, RPb, AMRPf, AMRPb, LABRPf, LABRPb, CTKRP };

inline constexpr std::array<VariantTag, 9> kAllVariants{
    VariantTag::D,     VariantTag::S,     VariantTag::RPf,    VariantTag::RPb,   VariantTag::AMRPf,
    VariantTag::AMRPb, VariantTag::LABRPf, VariantTag::LABRPb, VariantTag::CTKRP};

inline std::string_view to_string(VariantTag t) {
  switch (t) {
    case VariantTag::D: return "D";
    case VariantTag::S: return "S";
    case VariantTag::RPf: return "RPf";
    case VariantTag::RPb: return "RPb";
    case VariantTag::AMRPf: return "AMRPf";
    case VariantTag::AMRPb: return "AMRPb";
    case VariantTag::LABRPf: return "LABRPf";
    case VariantTag::LABRPb: return "LABRPb";
    case VariantTag::CTKRP: return "CTKRP";
  }
  return "?";
}

inline VariantTag variant_from_string(std::string_view s) {
  for (auto t : kAllVariants) {
    const auto name = to_string(t);
    if (name.size() == s.size() &&
        std::equal(name.begin(), name.end(), s.begin(),
                   [](char a, char b) { return std::tolower(a) == std::tolower(b); }))
      return t;
  }
  throw UsageError("unknown variant tag '" + std::string(s) + "'");
}

struct ChannelRange {
  double min = 0.0;
  double max = 0.0;
  friend bool operator==(const ChannelRange&, const ChannelRange&) = default;
};

/// Whole-sequence encoding as a 3-channel real image.
struct ActionMap {
  ImageD c1, c2, c3;
  VariantTag variant_tag = VariantTag::D;
  std::array<ChannelRange, 3> normalization{};

  int width() const noexcept { return c1.width(); }
  int height() const noexcept { return c1.height(); }
  const ImageD& channel(int c) const { return c == 0 ? c1 : (c == 1 ? c2 : c3); }
  ImageD& channel(int c) { return c == 0 ? c1 : (c == 1 ? c2 : c3); }
};

/// 8-bit interleaved RGB export of an ActionMap.
struct Rgb8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 3 per pixel
  friend bool operator==(const Rgb8&, const Rgb8&) = default;
};

// ---------------------------------------------------------------------------

inline std::vector<SceneFlowMap> build_sfm_sequence(const std::vector<SceneFlowField>& flows) {
  if (flows.empty()) throw DataError("build_sfm_sequence: no flow fields");
  std::vector<SceneFlowMap> out;
  out.reserve(flows.size());
  for (std::size_t t = 0; t < flows.size(); ++t) {
    const auto& f = flows[t];
    require_same_shape(f.mu, flows.front().mu, "flow sequence");
    SceneFlowMap m{f.mu, f.nu, f.omega, static_cast<int>(t) + 1};
    for (std::size_t i = 0; i < f.validity.size(); ++i)
      if (!f.validity[i]) m.x_mu[i] = m.x_nu[i] = m.x_omega[i] = 0.0;
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

inline void require_sfms(const std::vector<SceneFlowMap>& sfms, std::size_t min_count,
                         const char* who) {
  if (sfms.size() < min_count)
    throw DataError(std::string(who) + ": needs at least " + std::to_string(min_count) + " maps");
  for (const auto& m : sfms) {
    require_same_shape(m.x_mu, sfms.front().x_mu, who);
    require_same_shape(m.x_nu, m.x_mu, who);
    require_same_shape(m.x_omega, m.x_mu, who);
  }
}

template <typename Accumulate>
ActionMap accumulate_pairs(const std::vector<SceneFlowMap>& sfms, VariantTag tag, Accumulate op) {
  const int w = sfms.front().width(), h = sfms.front().height();
  ActionMap out{ImageD(w, h), ImageD(w, h), ImageD(w, h), tag, {}};
  for (std::size_t t = 0; t + 1 < sfms.size(); ++t)
    for (int c = 0; c < 3; ++c) {
      const auto& a = sfms[t].channel(c);
      const auto& b = sfms[t + 1].channel(c);
      auto& o = out.channel(c);
      for (std::size_t i = 0; i < o.size(); ++i) o[i] += op(b[i], a[i]);
    }
  return out;
}

}  // namespace detail

/// Accumulated absolute differences of consecutive maps, per channel.
inline ActionMap sfam_d(const std::vector<SceneFlowMap>& sfms) {
  detail::require_sfms(sfms, 2, "sfam_d");
  return detail::accumulate_pairs(sfms, VariantTag::D,
                                  [](double next, double cur) { return std::abs(next - cur); });
}

/// Accumulated sums of consecutive maps, per channel.
inline ActionMap sfam_s(const std::vector<SceneFlowMap>& sfms) {
  detail::require_sfms(sfms, 2, "sfam_s");
  return detail::accumulate_pairs(sfms, VariantTag::S,
                                  [](double next, double cur) { return next + cur; });
}

inline std::vector<ImageD> amplitude_maps(const std::vector<SceneFlowMap>& sfms) {
  detail::require_sfms(sfms, 1, "amplitude_maps");
  std::vector<ImageD> out;
  for (const auto& m : sfms) {
    ImageD a(m.width(), m.height());
    for (std::size_t i = 0; i < a.size(); ++i)
      a[i] = std::sqrt(m.x_mu[i] * m.x_mu[i] + m.x_nu[i] * m.x_nu[i] + m.x_omega[i] * m.x_omega[i]);
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CIELAB

struct Lab {
  double l = 0.0, a = 0.0, b = 0.0;
};

/// sRGB in [0,1] to CIELAB under D65.
inline Lab srgb_to_lab(double r, double g, double b) {
  auto linear = [](double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double rl = linear(r), gl = linear(g), bl = linear(b);
  const double x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
  const double y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
  const double z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
  // White point chosen as the matrix image of (1,1,1) so that gray is exactly neutral.
  constexpr double xn = 0.4124564 + 0.3575761 + 0.1804375;
  constexpr double yn = 0.2126729 + 0.7151522 + 0.0721750;
  constexpr double zn = 0.0193339 + 0.1191920 + 0.9503041;
  auto f = [](double t) {
    constexpr double d = 6.0 / 29.0;
    return t > d * d * d ? std::cbrt(t) : t / (3.0 * d * d) + 4.0 / 29.0;
  };
  const double fx = f(x / xn), fy = f(y / yn), fz = f(z / zn);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

/// Per-channel min-max over the whole sequence into [0,1] (constant
/// channels become 0.5), then pixelwise sRGB -> Lab. Channels: (L, a, b).
inline std::vector<SceneFlowMap> lab_maps(const std::vector<SceneFlowMap>& sfms) {
  detail::require_sfms(sfms, 1, "lab_maps");
  std::array<ChannelRange, 3> range;
  for (int c = 0; c < 3; ++c) {
    double lo = sfms.front().channel(c)[0], hi = lo;
    for (const auto& m : sfms)
      for (double v : m.channel(c).pixels()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    range[c] = {lo, hi};
  }
  auto norm = [&](int c, double v) {
    return range[c].max > range[c].min ? (v - range[c].min) / (range[c].max - range[c].min) : 0.5;
  };
  std::vector<SceneFlowMap> out;
  for (const auto& m : sfms) {
    SceneFlowMap o{ImageD(m.width(), m.height()), ImageD(m.width(), m.height()),
                   ImageD(m.width(), m.height()), m.index};
    for (std::size_t i = 0; i < o.x_mu.size(); ++i) {
      const Lab lab = srgb_to_lab(norm(0, m.x_mu[i]), norm(1, m.x_nu[i]), norm(2, m.x_omega[i]));
      o.x_mu[i] = lab.l;
      o.x_nu[i] = lab.a;
      o.x_omega[i] = lab.b;
    }
    out.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// 8-bit export

struct NormalizedImage {
  Rgb8 image;
  std::array<ChannelRange, 3> record{};
};

/// Per-channel min-max to [0,255] with half-up rounding; constant channels
/// export as 128. `record` keeps the (min, max) used per channel.
inline NormalizedImage normalize_to_image(const ActionMap& map) {
  const int w = map.width(), h = map.height();
  NormalizedImage out{{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)}, {}};
  for (int c = 0; c < 3; ++c) {
    const auto& ch = map.channel(c);
    for (double v : ch.pixels())
      if (!std::isfinite(v)) throw NumericalError("normalize_to_image: non-finite value");
    const auto [lo, hi] = std::minmax_element(ch.pixels().begin(), ch.pixels().end());
    const double mn = ch.empty() ? 0.0 : *lo, mx = ch.empty() ? 0.0 : *hi;
    out.record[c] = {mn, mx};
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const double v = mx > mn ? std::floor((ch[i] - mn) / (mx - mn) * 255.0 + 0.5) : 128.0;
      out.image.data[3 * i + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return out;
}

/// Inverse of normalize_to_image given its recorded ranges.
inline ActionMap denormalize_image(const Rgb8& img, VariantTag tag,
                                   const std::array<ChannelRange, 3>& ranges) {
  ActionMap out{ImageD(img.width, img.height), ImageD(img.width, img.height),
                ImageD(img.width, img.height), tag, ranges};
  for (int c = 0; c < 3; ++c) {
    auto& ch = out.channel(c);
    const auto r = ranges[c];
    for (std::size_t i = 0; i < ch.size(); ++i)
      ch[i] = r.max > r.min ? r.min + img.data[3 * i + c] / 255.0 * (r.max - r.min) : r.min;
  }
  return out;
}

/// An 8-bit image viewed as an action map with identity ranges.
inline ActionMap action_map_from_image(const Rgb8& img, VariantTag tag) {
  ActionMap out{ImageD(img.width, img.height), ImageD(img.width, img.height),
                ImageD(img.width, img.height), tag, {}};
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < out.channel(c).size(); ++i) out.channel(c)[i] = img.data[3 * i + c];
  return out;
}

// PNG plus a sidecar `<png>.txt`:
//   variant=<tag>
//   c1=<min> <max> ...
inline void write_action_map(const std::filesystem::path& png_path, const ActionMap& map) {
  const auto [img, record] = normalize_to_image(map);
  png::Raster r{img.width, img.height, 3, 8, {}};
  r.samples.assign(img.data.begin(), img.data.end());
  png::write(png_path, r);
  std::ofstream side(png_path.string() + ".txt");
  if (!side) throw DataError("cannot write sidecar for " + png_path.string());
  side << "variant=" << to_string(map.variant_tag) << "\n";
  for (int c = 0; c < 3; ++c)
    side << "c" << c + 1 << "=" << detail::format_double(record[c].min) << " "
         << detail::format_double(record[c].max) << "\n";
}

struct LoadedActionMap {
  Rgb8 image;
  VariantTag variant_tag = VariantTag::D;
  std::array<ChannelRange, 3> normalization{};
};

inline LoadedActionMap read_action_map(const std::filesystem::path& png_path) {
  const auto r = png::read(png_path);
  if (r.channels != 3 || r.bit_depth != 8) throw DataError("action map must be 8-bit RGB: " + png_path.string());
  LoadedActionMap out;
  out.image = {r.width, r.height, std::vector<std::uint8_t>(r.samples.begin(), r.samples.end())};
  std::ifstream side(png_path.string() + ".txt");
  if (!side) throw DataError("missing sidecar for " + png_path.string());
  std::string line;
  while (std::getline(side, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "variant") out.variant_tag = variant_from_string(val);
    else if (key.size() == 2 && key[0] == 'c' && key[1] >= '1' && key[1] <= '3') {
      std::istringstream vs(val);
      auto& rng = out.normalization[key[1] - '1'];
      if (!(vs >> rng.min >> rng.max)) throw DataError("bad sidecar range line: " + line);
    }
  }
  return out;
}

}  // namespace sfam
