#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sfam/calibrate.hpp"
#include "sfam/error.hpp"
#include "sfam/image.hpp"
#include "sfam/pdflow.hpp"
#include "sfam/rgbd.hpp"

namespace sfam::synth {

enum class MotionKind { translate_xy, approach_z, rotate_in_plane, composite };
enum class Layout { full_plane, object_on_background };

struct SyntheticSceneSpec {
  MotionKind motion_kind = MotionKind::translate_xy;
  // px/frame (translate, composite), m/frame (approach), rad/frame (rotate)
  double magnitude = 1.0;
  double direction = 0.0;       // translation heading in radians, 0 = +x
  double composite_dz = -0.02;  // depth change per frame for `composite`
  std::uint64_t texture_seed = 1;
  int num_frames = 2;
  int width = 64;
  int height = 64;
  double plane_depth = 1.0;
  Layout layout = Layout::full_plane;
  int object_size = 24;           // side of the moving square, object layout only
  Eigen::Vector2d object_offset = Eigen::Vector2d::Zero();  // from principal point, px
  double background_depth = 2.0;
  double depth_noise_sigma = 0.0;  // meters, Gaussian
  std::optional<Homography> misalignment;

  void validate() const {
    if (num_frames < 2) throw DataError("synthetic scene needs >= 2 frames");
    if (!std::isfinite(magnitude) || !std::isfinite(direction) || !std::isfinite(composite_dz))
      throw DataError("synthetic scene: non-finite motion parameters");
    if (!(plane_depth > 0.0) || !(background_depth > 0.0))
      throw DataError("synthetic scene: depths must be positive");
    if (width < 4 || height < 4) throw DataError("synthetic scene: image too small");
    if (layout == Layout::object_on_background && object_size < 2)
      throw DataError("synthetic scene: object too small");
  }
};

struct SyntheticSequence {
  RgbdSequence sequence;
  std::vector<SceneFlowField> ground_truth;  // one per consecutive pair
  Homography misalignment;                   // identity when none requested
  std::vector<ImageD> aligned_depth;         // depth before misalignment
};

/// Smooth random texture: a sum of sinusoids with 12-32 px wavelengths,
/// scaled into [0.1, 0.9]. Evaluates at any real coordinate.
class BandLimitedTexture {
public:
  explicit BandLimitedTexture(std::uint64_t seed, int components = 16) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double total = 0.0;
    for (int k = 0; k < components; ++k) {
      const double wavelength = 12.0 + 20.0 * unit(rng);
      const double heading = 2.0 * std::numbers::pi * unit(rng);
      Wave w;
      w.fx = std::cos(heading) / wavelength;
      w.fy = std::sin(heading) / wavelength;
      w.phase = 2.0 * std::numbers::pi * unit(rng);
      w.amp = 0.5 + unit(rng);
      total += w.amp;
      waves_.push_back(w);
    }
    for (auto& w : waves_) w.amp *= 0.4 / total;
  }

  double operator()(double x, double y) const {
    double v = 0.5;
    for (const auto& w : waves_)
      v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
    return v;
  }

private:
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves_;
};

namespace detail {

// Similarity-with-scale pose of the moving plane at frame t: texture point q
// (pixels relative to the principal point) appears at pp + s R q + T.
struct Pose {
  double scale = 1.0;
  double angle = 0.0;
  Eigen::Vector2d shift = Eigen::Vector2d::Zero();
  double depth = 1.0;

  Eigen::Vector2d forward(const Eigen::Vector2d& q) const {
    const Eigen::Rotation2Dd r(angle);
    return scale * (r * q) + shift;
  }
  Eigen::Vector2d inverse(const Eigen::Vector2d& p) const {
    const Eigen::Rotation2Dd r(-angle);
    return (r * (p - shift)) / scale;
  }
};

inline Pose pose_at(const SyntheticSceneSpec& s, int t) {
  Pose p;
  p.depth = s.plane_depth;
  const Eigen::Vector2d heading(std::cos(s.direction), std::sin(s.direction));
  switch (s.motion_kind) {
    case MotionKind::translate_xy:
      p.shift = t * s.magnitude * heading;
      break;
    case MotionKind::approach_z:
      p.depth = s.plane_depth + t * s.magnitude;
      break;
    case MotionKind::rotate_in_plane:
      p.angle = t * s.magnitude;
      break;
    case MotionKind::composite:
      p.shift = t * s.magnitude * heading;
      p.depth = s.plane_depth + t * s.composite_dz;
      break;
  }
  if (!(p.depth > 0.0)) throw DataError("synthetic scene: plane moves behind the camera");
  p.scale = s.plane_depth / p.depth;
  p.shift += s.object_offset * p.scale;
  return p;
}

}  // namespace detail

inline SyntheticSequence generate_sequence(const SyntheticSceneSpec& spec,
                                           const std::string& sequence_id = "synthetic",
                                           std::optional<int> label = std::nullopt) {
  spec.validate();
  const int w = spec.width, h = spec.height;
  const auto intr = CameraIntrinsics::nominal(w, h);
  const Eigen::Vector2d pp(intr.cx, intr.cy);
  const BandLimitedTexture fg(spec.texture_seed);
  const BandLimitedTexture bg(spec.texture_seed ^ 0x9e3779b97f4a7c15ULL);
  const bool object = spec.layout == Layout::object_on_background;
  const double half = 0.5 * spec.object_size;
  std::mt19937_64 noise_rng(spec.texture_seed + 7);
  std::normal_distribution<double> noise(0.0, spec.depth_noise_sigma > 0 ? spec.depth_noise_sigma : 1.0);

  SyntheticSequence out;
  out.sequence.sequence_id = sequence_id;
  out.sequence.label = label;
  out.misalignment = spec.misalignment.value_or(Homography());

  auto on_object = [&](const Eigen::Vector2d& q) {
    return !object || (std::abs(q.x() - spec.object_offset.x()) <= half &&
                       std::abs(q.y() - spec.object_offset.y()) <= half);
  };

  std::vector<detail::Pose> poses;
  for (int t = 0; t < spec.num_frames; ++t) poses.push_back(detail::pose_at(spec, t));

  for (int t = 0; t < spec.num_frames; ++t) {
    const auto& pose = poses[t];
    RgbdFrame f;
    f.intensity = ImageD(w, h);
    f.depth = ImageD(w, h);
    f.timestamp_index = t;
    f.intrinsics = intr;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Eigen::Vector2d p = Eigen::Vector2d(x, y) - pp;
        // Texture coordinates are fixed at the object's reference pose.
        const Eigen::Vector2d q = pose.inverse(p) + spec.object_offset;
        if (on_object(q)) {
          f.intensity(x, y) = fg(q.x(), q.y());
          f.depth(x, y) = pose.depth;
        } else {
          f.intensity(x, y) = bg(p.x(), p.y());
          f.depth(x, y) = spec.background_depth;
        }
        if (spec.depth_noise_sigma > 0.0)
          f.depth(x, y) = std::max(1e-3, f.depth(x, y) + noise(noise_rng));
      }
    out.aligned_depth.push_back(f.depth);
    if (spec.misalignment) f.depth = warp_depth(f.depth, spec.misalignment->inverse());
    out.sequence.frames.push_back(std::move(f));
  }

  for (int t = 0; t + 1 < spec.num_frames; ++t) {
    SceneFlowField gt(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Eigen::Vector2d p = Eigen::Vector2d(x, y) - pp;
        const Eigen::Vector2d q = poses[t].inverse(p) + spec.object_offset;
        if (!on_object(q)) continue;
        const Eigen::Vector2d next = poses[t + 1].forward(q - spec.object_offset);
        gt.mu(x, y) = next.x() - p.x();
        gt.nu(x, y) = next.y() - p.y();
        gt.omega(x, y) = poses[t + 1].depth - poses[t].depth;
      }
    out.ground_truth.push_back(std::move(gt));
  }
  return out;
}

/// Correspondences p = H p' on a w x h image: `inliers` with Gaussian pixel
/// noise on both sides, then `outliers` drawn uniformly. Returns the matches
/// and the true inlier flags.
inline std::pair<std::vector<PointMatch>, std::vector<bool>> synthetic_matches(
    const Homography& h, int inliers, int outliers, double noise_sigma, int w, int height,
    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(0.0, w - 1.0), uy(0.0, height - 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<PointMatch> ms;
  std::vector<bool> truth;
  while (static_cast<int>(ms.size()) < inliers) {
    const Eigen::Vector2d pp(ux(rng), uy(rng));
    const Eigen::Vector2d p = h.apply(pp);
    if (!p.allFinite()) continue;
    PointMatch m{p, pp};
    if (noise_sigma > 0.0) {
      m.p += noise_sigma * Eigen::Vector2d(noise(rng), noise(rng));
      m.p_prime += noise_sigma * Eigen::Vector2d(noise(rng), noise(rng));
    }
    ms.push_back(m);
    truth.push_back(true);
  }
  for (int i = 0; i < outliers; ++i) {
    ms.push_back({{ux(rng), uy(rng)}, {ux(rng), uy(rng)}});
    truth.push_back(false);
  }
  return {ms, truth};
}

// ---------------------------------------------------------------------------
// labeled dataset

enum class ActionClass { left_translate = 0, right_translate = 1, approach = 2, recede = 3 };

struct DatasetOptions {
  int width = 64;
  int height = 64;
  int min_frames = 6;
  int max_frames = 9;
  double translate_px = 1.5;
  double depth_step = 0.04;
  double object_depth = 1.0;
  double background_depth = 2.0;
  int object_size = 24;
};

struct LabeledSequence {
  RgbdSequence sequence;
  int label = 0;
};

inline std::vector<LabeledSequence> generate_action_dataset(int num_classes, int samples_per_class,
                                                            std::uint64_t seed,
                                                            const DatasetOptions& opt = {}) {
  if (num_classes < 1 || num_classes > 4) throw DataError("synthetic dataset supports 1..4 classes");
  if (samples_per_class < 1) throw DataError("samples_per_class must be >= 1");
  std::vector<LabeledSequence> out;
  for (int c = 0; c < num_classes; ++c)
    for (int i = 0; i < samples_per_class; ++i) {
      std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(ss);
      std::uniform_real_distribution<double> jitter(0.8, 1.2);
      std::uniform_real_distribution<double> offset(-3.0, 3.0);
      std::uniform_int_distribution<int> frames(opt.min_frames, opt.max_frames);

      SyntheticSceneSpec spec;
      spec.layout = Layout::object_on_background;
      spec.width = opt.width;
      spec.height = opt.height;
      spec.plane_depth = opt.object_depth;
      spec.background_depth = opt.background_depth;
      spec.object_size = opt.object_size;
      spec.texture_seed = rng();
      spec.num_frames = frames(rng);
      spec.object_offset = {offset(rng), offset(rng)};
      const double j = jitter(rng);
      switch (static_cast<ActionClass>(c)) {
        case ActionClass::left_translate:
          spec.motion_kind = MotionKind::translate_xy;
          spec.magnitude = opt.translate_px * j;
          spec.direction = std::numbers::pi;
          break;
        case ActionClass::right_translate:
          spec.motion_kind = MotionKind::translate_xy;
          spec.magnitude = opt.translate_px * j;
          spec.direction = 0.0;
          break;
        case ActionClass::approach:
          spec.motion_kind = MotionKind::approach_z;
          spec.magnitude = -opt.depth_step * j;
          break;
        case ActionClass::recede:
          spec.motion_kind = MotionKind::approach_z;
          spec.magnitude = opt.depth_step * j;
          break;
      }
      char id[32];
      std::snprintf(id, sizeof id, "c%d_s%03d", c, i);
      auto gen = generate_sequence(spec, id, c);
      out.push_back({std::move(gen.sequence), c});
    }
  return out;
}

}  // namespace sfam::synth
