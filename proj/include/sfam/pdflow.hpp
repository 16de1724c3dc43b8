#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "sfam/error.hpp"
#include "sfam/image.hpp"
#include "sfam/rgbd.hpp"

namespace sfam {

/// Optical flow (mu, nu) in px/frame and range flow omega in m/frame.
struct SceneFlowField {
  ImageD mu;
  ImageD nu;
  ImageD omega;
  Mask validity;

  SceneFlowField() = default;
  SceneFlowField(int width, int height)
      : mu(width, height), nu(width, height), omega(width, height), validity(width, height, 1) {}

  int width() const noexcept { return mu.width(); }
  int height() const noexcept { return mu.height(); }

  /// Enforces the zero-on-invalid convention.
  void zero_invalid() {
    for (std::size_t i = 0; i < validity.size(); ++i)
      if (!validity[i]) mu[i] = nu[i] = omega[i] = 0.0;
  }

  friend bool operator==(const SceneFlowField&, const SceneFlowField&) = default;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

/// Metric scene motion per pixel in the camera frame.
struct MotionField {
  Image<Vec3> m;
};

enum class GeometricWeight {
  inverse_square_depth,  // eps = scale / (Z0^2 + kappa)
  constant,              // eps = scale
};

struct SolverConfig {
  double lambda_i = 0.04;
  double lambda_d = 0.35;
  int pyramid_levels = 4;
  int iters_per_level = 100;
  int warps_per_level = 3;
  double geometric_weight_scale = 1.0;
  GeometricWeight geometric_weight = GeometricWeight::inverse_square_depth;
  double primal_step = 1.0;
  double dual_step = 1.0;
  double convergence_tol = 1e-5;
  double r_min = 0.1;
  int min_level_size = 16;

  static constexpr double kappa = 1e-4;  // m^2

  void validate() const {
    if (!(lambda_i > 0) || !(lambda_d > 0) || pyramid_levels < 1 || iters_per_level < 1 ||
        warps_per_level < 1 || !(geometric_weight_scale > 0) || !(primal_step > 0) ||
        !(dual_step > 0) || !(convergence_tol > 0) || !(r_min > 0 && r_min <= 1))
      throw UsageError("invalid solver configuration");
    if (primal_step * dual_step > 1.0 + 1e-12)
      throw UsageError("solver configuration: primal_step * dual_step must be <= 1");
  }
};

/// Energy of the accepted primal iterate after every iteration, per level
/// (coarsest first), plus the number of candidate iterates the monotone
/// safeguard rejected.
struct SolverTrace {
  std::vector<std::vector<double>> level_energy;
  std::vector<int> level_width;
  int rejected_steps = 0;
};

namespace detail {

// One pyramid level of a frame pair with everything the energy needs.
struct FlowProblem {
  int w = 0, h = 0;
  ImageD i0, i1, z0, z1;
  ImageD i1x, i1y, z1x, z1y;
  ImageD eps, rx, ry;
  Mask valid;
  CameraIntrinsics intr;

  std::size_t n() const { return static_cast<std::size_t>(w) * h; }
  bool link_x(int x, int y) const { return x + 1 < w && valid(x, y) && valid(x + 1, y); }
  bool link_y(int x, int y) const { return y + 1 < h && valid(x, y) && valid(x, y + 1); }
};

inline double geometric_weight(double z0, const SolverConfig& cfg) {
  if (cfg.geometric_weight == GeometricWeight::constant) return cfg.geometric_weight_scale;
  return cfg.geometric_weight_scale / (z0 * z0 + SolverConfig::kappa);
}

// Bilinear sample of depth restricted to valid taps; false if none is valid.
inline bool sample_depth(const ImageD& z, double x, double y, double& out) {
  const int w = z.width(), h = z.height();
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(x), w - 1);
  const int y0 = std::min(static_cast<int>(y), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double ax = x - x0, ay = y - y0;
  const std::array<double, 4> wt{(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
  const std::array<double, 4> v{z(x0, y0), z(x1, y0), z(x0, y1), z(x1, y1)};
  double sw = 0.0, sv = 0.0;
  for (int k = 0; k < 4; ++k)
    if (v[k] > 0.0) {
      sw += wt[k];
      sv += wt[k] * v[k];
    }
  if (sw <= 1e-12) {
    // Degenerate weights (sample sits exactly on invalid taps): nearest valid tap.
    for (int k = 0; k < 4; ++k)
      if (v[k] > 0.0 && wt[k] > 0.0) {
        out = v[k];
        return true;
      }
    return false;
  }
  out = sv / sw;
  return true;
}

// Depth gradient that ignores invalid neighbors.
inline void depth_gradient(const ImageD& z, ImageD& gx, ImageD& gy) {
  const int w = z.width(), h = z.height();
  gx = ImageD(w, h);
  gy = ImageD(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (z(x, y) <= 0.0) continue;
      auto diff = [&](int xa, int ya, int xb, int yb) -> double {
        const bool a = z.contains(xa, ya) && z(xa, ya) > 0.0;
        const bool b = z.contains(xb, yb) && z(xb, yb) > 0.0;
        if (a && b) return (z(xb, yb) - z(xa, ya)) / ((xb - xa) + (yb - ya));
        if (b) return z(xb, yb) - z(x, y);
        if (a) return z(x, y) - z(xa, ya);
        return 0.0;
      };
      gx(x, y) = diff(x - 1, y, x + 1, y);
      gy(x, y) = diff(x, y - 1, x, y + 1);
    }
}

// Geometry-aware TV weights from back-projected f0 coordinates,
// clamped to [r_min, 1]. Links touching invalid depth get weight 1.
inline void tv_weights(const ImageD& z0, const CameraIntrinsics& intr, double r_min, ImageD& rx,
                       ImageD& ry) {
  const int w = z0.width(), h = z0.height();
  rx = ImageD(w, h, 1.0);
  ry = ImageD(w, h, 1.0);
  auto bx = [&](int x, int y) { return (x - intr.cx) * z0(x, y) / intr.fx; };
  auto by = [&](int x, int y) { return (y - intr.cy) * z0(x, y) / intr.fy; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (z0(x, y) <= 0.0) continue;
      if (x + 1 < w && z0(x + 1, y) > 0.0) {
        const double dx = bx(x + 1, y) - bx(x, y), dz = z0(x + 1, y) - z0(x, y);
        const double n = std::sqrt(dx * dx + dz * dz);
        rx(x, y) = n > 0.0 ? std::clamp(1.0 / n, r_min, 1.0) : 1.0;
      }
      if (y + 1 < h && z0(x, y + 1) > 0.0) {
        const double dy = by(x, y + 1) - by(x, y), dz = z0(x, y + 1) - z0(x, y);
        const double n = std::sqrt(dy * dy + dz * dz);
        ry(x, y) = n > 0.0 ? std::clamp(1.0 / n, r_min, 1.0) : 1.0;
      }
    }
}

inline FlowProblem make_problem(ImageD i0, ImageD i1, ImageD z0, ImageD z1,
                                const CameraIntrinsics& intr, const Mask& valid,
                                const SolverConfig& cfg) {
  FlowProblem p;
  p.w = i0.width();
  p.h = i0.height();
  p.i0 = std::move(i0);
  p.i1 = std::move(i1);
  p.z0 = std::move(z0);
  p.z1 = std::move(z1);
  p.intr = intr;
  p.valid = valid;
  gradient_central(p.i1, p.i1x, p.i1y);
  depth_gradient(p.z1, p.z1x, p.z1y);
  p.eps = ImageD(p.w, p.h);
  for (std::size_t i = 0; i < p.n(); ++i)
    p.eps[i] = p.z0[i] > 0.0 ? geometric_weight(p.z0[i], cfg) : 0.0;
  tv_weights(p.z0, intr, cfg.r_min, p.rx, p.ry);
  return p;
}

inline double data_energy(const FlowProblem& p, const ImageD& mu, const ImageD& nu,
                          const ImageD& om) {
  double e = 0.0;
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      if (!p.valid(x, y)) continue;
      const double wx = x + mu(x, y), wy = y + nu(x, y);
      e += std::abs(p.i0(x, y) - sample_bilinear(p.i1, wx, wy));
      double z1w = 0.0;
      if (sample_depth(p.z1, wx, wy, z1w))
        e += p.eps(x, y) * std::abs(om(x, y) - z1w + p.z0(x, y));
    }
  return e;
}

inline double tv_term(const FlowProblem& p, const ImageD& u) {
  double e = 0.0;
  for (int y = 0; y < p.h; ++y)
    for (int x = 0; x < p.w; ++x) {
      if (!p.valid(x, y)) continue;
      const double gx = p.link_x(x, y) ? p.rx(x, y) * (u(x + 1, y) - u(x, y)) : 0.0;
      const double gy = p.link_y(x, y) ? p.ry(x, y) * (u(x, y + 1) - u(x, y)) : 0.0;
      e += std::sqrt(gx * gx + gy * gy);
    }
  return e;
}

inline double regularizer_energy(const FlowProblem& p, const ImageD& mu, const ImageD& nu,
                                 const ImageD& om, const SolverConfig& cfg) {
  return cfg.lambda_i * (tv_term(p, mu) + tv_term(p, nu)) + cfg.lambda_d * tv_term(p, om);
}

inline Mask pair_validity(const ImageD& z0, const ImageD& z1) {
  Mask v(z0.width(), z0.height());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (z0[i] > 0.0 && z1[i] > 0.0) ? 1 : 0;
  return v;
}

inline FlowProblem problem_from_frames(const SceneFlowField& s, const RgbdFrame& f0,
                                       const RgbdFrame& f1, const SolverConfig& cfg) {
  require_same_shape(f0.intensity, f1.intensity, "frame pair");
  require_same_shape(f0.depth, f1.depth, "frame pair depth");
  require_same_shape(s.mu, f0.intensity, "flow vs frame");
  require_same_shape(s.validity, f0.intensity, "flow validity vs frame");
  return make_problem(f0.intensity, f1.intensity, f0.depth, f1.depth, f0.intrinsics, s.validity,
                      cfg);
}

// Preconditioned primal-dual iterations on the linearized data term with
// TV regularization; all three terms are dualized, so primal updates are linear.
class PrimalDualLevel {
public:
  PrimalDualLevel(const FlowProblem& p, const SolverConfig& cfg)
      : p_(p), cfg_(cfg), n_(p.n()) {
    for (auto* v : {&p_i_, &p_z_, &yx_mu_, &yy_mu_, &yx_nu_, &yy_nu_, &yx_om_, &yy_om_})
      v->assign(n_, 0.0);
    for (auto* v : {&ci_x_, &ci_y_, &bi_, &cz_x_, &cz_y_, &bz_, &ez_})
      v->assign(n_, 0.0);
    for (auto* v : {&tau_mu_, &tau_nu_, &tau_om_, &sig_i_, &sig_z_, &sig_tv_})
      v->assign(n_, 0.0);
  }

  // Re-linearizes the data term around (mu0, nu0).
  void linearize(const ImageD& mu0, const ImageD& nu0) {
    const int w = p_.w;
    for (int y = 0; y < p_.h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t j = p_.valid.index(x, y);
        if (!p_.valid[j]) continue;
        const double wx = x + mu0[j], wy = y + nu0[j];
        const double i1w = sample_bilinear(p_.i1, wx, wy);
        const double gx = sample_bilinear(p_.i1x, wx, wy);
        const double gy = sample_bilinear(p_.i1y, wx, wy);
        ci_x_[j] = -gx;
        ci_y_[j] = -gy;
        bi_[j] = p_.i0[j] - i1w + gx * mu0[j] + gy * nu0[j];
        double z1w = 0.0;
        if (sample_depth(p_.z1, wx, wy, z1w)) {
          const double zx = sample_bilinear(p_.z1x, wx, wy);
          const double zy = sample_bilinear(p_.z1y, wx, wy);
          ez_[j] = p_.eps[j];
          cz_x_[j] = -zx;
          cz_y_[j] = -zy;
          bz_[j] = -z1w + zx * mu0[j] + zy * nu0[j] + p_.z0[j];
        } else {
          ez_[j] = cz_x_[j] = cz_y_[j] = bz_[j] = 0.0;
        }
      }
    compute_steps();
  }

  // One Chambolle-Pock iteration with over-relaxation theta = 1.
  void iterate(ImageD& mu, ImageD& nu, ImageD& om, ImageD& mu_bar, ImageD& nu_bar,
               ImageD& om_bar) {
    const int w = p_.w, h = p_.h;
    // dual ascent
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t j = p_.valid.index(x, y);
        if (!p_.valid[j]) continue;
        const double ri = ci_x_[j] * mu_bar[j] + ci_y_[j] * nu_bar[j] + bi_[j];
        p_i_[j] = std::clamp(p_i_[j] + sig_i_[j] * ri, -1.0, 1.0);
        if (ez_[j] > 0.0) {
          const double rz = ez_[j] * (cz_x_[j] * mu_bar[j] + cz_y_[j] * nu_bar[j] + om_bar[j] + bz_[j]);
          p_z_[j] = std::clamp(p_z_[j] + sig_z_[j] * rz, -1.0, 1.0);
        }
        const bool lx = p_.link_x(x, y), ly = p_.link_y(x, y);
        const double rx = p_.rx[j], ry = p_.ry[j];
        const std::size_t jx = j + 1, jy = j + static_cast<std::size_t>(w);
        auto tv = [&](const ImageD& u, std::vector<double>& ax, std::vector<double>& ay,
                      double radius) {
          const double gx = lx ? rx * (u[jx] - u[j]) : 0.0;
          const double gy = ly ? ry * (u[jy] - u[j]) : 0.0;
          double vx = ax[j] + sig_tv_[j] * gx;
          double vy = ay[j] + sig_tv_[j] * gy;
          const double nrm = std::sqrt(vx * vx + vy * vy);
          if (nrm > radius) {
            vx *= radius / nrm;
            vy *= radius / nrm;
          }
          ax[j] = vx;
          ay[j] = vy;
        };
        tv(mu_bar, yx_mu_, yy_mu_, cfg_.lambda_i);
        tv(nu_bar, yx_nu_, yy_nu_, cfg_.lambda_i);
        tv(om_bar, yx_om_, yy_om_, cfg_.lambda_d);
      }
    // primal descent and over-relaxation
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t j = p_.valid.index(x, y);
        if (!p_.valid[j]) continue;
        auto adj = [&](const std::vector<double>& ax, const std::vector<double>& ay) {
          double s = 0.0;
          if (p_.link_x(x, y)) s -= p_.rx[j] * ax[j];
          if (x > 0 && p_.link_x(x - 1, y)) s += p_.rx[j - 1] * ax[j - 1];
          if (p_.link_y(x, y)) s -= p_.ry[j] * ay[j];
          if (y > 0 && p_.link_y(x, y - 1)) {
            const std::size_t ju = j - static_cast<std::size_t>(w);
            s += p_.ry[ju] * ay[ju];
          }
          return s;
        };
        const double pz = ez_[j] * p_z_[j];
        const double kmu = ci_x_[j] * p_i_[j] + cz_x_[j] * pz + adj(yx_mu_, yy_mu_);
        const double knu = ci_y_[j] * p_i_[j] + cz_y_[j] * pz + adj(yx_nu_, yy_nu_);
        const double kom = pz + adj(yx_om_, yy_om_);
        const double m1 = mu[j] - tau_mu_[j] * kmu;
        const double n1 = nu[j] - tau_nu_[j] * knu;
        const double o1 = om[j] - tau_om_[j] * kom;
        mu_bar[j] = 2.0 * m1 - mu[j];
        nu_bar[j] = 2.0 * n1 - nu[j];
        om_bar[j] = 2.0 * o1 - om[j];
        mu[j] = m1;
        nu[j] = n1;
        om[j] = o1;
      }
  }

private:
  // Row/column-sum diagonal preconditioners (alpha = 1), scaled by the
  // configured step multipliers whose product is <= 1.
  void compute_steps() {
    const int w = p_.w;
    for (int y = 0; y < p_.h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t j = p_.valid.index(x, y);
        if (!p_.valid[j]) continue;
        double tv_col = 0.0;
        if (p_.link_x(x, y)) tv_col += p_.rx[j];
        if (x > 0 && p_.link_x(x - 1, y)) tv_col += p_.rx[j - 1];
        if (p_.link_y(x, y)) tv_col += p_.ry[j];
        if (y > 0 && p_.link_y(x, y - 1)) tv_col += p_.ry[j - static_cast<std::size_t>(w)];
        const double ez = ez_[j];
        auto inv = [](double s) { return s > 1e-12 ? 1.0 / s : 0.0; };
        tau_mu_[j] = cfg_.primal_step * inv(std::abs(ci_x_[j]) + ez * std::abs(cz_x_[j]) + tv_col);
        tau_nu_[j] = cfg_.primal_step * inv(std::abs(ci_y_[j]) + ez * std::abs(cz_y_[j]) + tv_col);
        tau_om_[j] = cfg_.primal_step * inv(ez + tv_col);
        sig_i_[j] = cfg_.dual_step * inv(std::abs(ci_x_[j]) + std::abs(ci_y_[j]));
        sig_z_[j] = cfg_.dual_step * inv(ez * (std::abs(cz_x_[j]) + std::abs(cz_y_[j]) + 1.0));
        const double rmax = std::max(p_.link_x(x, y) ? p_.rx[j] : 0.0, p_.link_y(x, y) ? p_.ry[j] : 0.0);
        sig_tv_[j] = cfg_.dual_step * inv(2.0 * rmax);
      }
  }

  const FlowProblem& p_;
  const SolverConfig& cfg_;
  std::size_t n_;
  std::vector<double> p_i_, p_z_, yx_mu_, yy_mu_, yx_nu_, yy_nu_, yx_om_, yy_om_;
  std::vector<double> ci_x_, ci_y_, bi_, cz_x_, cz_y_, bz_, ez_;
  std::vector<double> tau_mu_, tau_nu_, tau_om_, sig_i_, sig_z_, sig_tv_;
};

struct PyramidLevel {
  ImageD i0, i1, z0, z1;
  CameraIntrinsics intr;
};

inline std::vector<PyramidLevel> build_pyramid(const RgbdFrame& f0, const RgbdFrame& f1,
                                               const SolverConfig& cfg) {
  std::vector<PyramidLevel> levels;
  levels.push_back({f0.intensity, f1.intensity, f0.depth, f1.depth, f0.intrinsics});
  while (static_cast<int>(levels.size()) < cfg.pyramid_levels) {
    const auto& f = levels.back();
    if (f.i0.width() / 2 < cfg.min_level_size || f.i0.height() / 2 < cfg.min_level_size) break;
    PyramidLevel c;
    c.i0 = downsample_mean(f.i0);
    c.i1 = downsample_mean(f.i1);
    c.z0 = downsample_depth_median(f.z0);
    c.z1 = downsample_depth_median(f.z1);
    c.intr = f.intr.halved();
    levels.push_back(std::move(c));
  }
  return levels;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// energies

/// Sum over valid pixels of |rho_I| + eps * |rho_z| with bilinear warping.
inline double data_energy(const SceneFlowField& s, const RgbdFrame& f0, const RgbdFrame& f1,
                          const SolverConfig& cfg) {
  const auto p = detail::problem_from_frames(s, f0, f1, cfg);
  return detail::data_energy(p, s.mu, s.nu, s.omega);
}

/// Geometry-weighted TV of the three flow components (forward differences).
inline double regularizer_energy(const SceneFlowField& s, const RgbdFrame& f0,
                                 const SolverConfig& cfg) {
  require_same_shape(s.mu, f0.depth, "flow vs frame");
  require_same_shape(s.validity, f0.depth, "flow validity vs frame");
  auto p = detail::make_problem(f0.intensity, f0.intensity, f0.depth, f0.depth, f0.intrinsics,
                                s.validity, cfg);
  return detail::regularizer_energy(p, s.mu, s.nu, s.omega, cfg);
}

inline double total_energy(const SceneFlowField& s, const RgbdFrame& f0, const RgbdFrame& f1,
                           const SolverConfig& cfg) {
  return data_energy(s, f0, f1, cfg) + regularizer_energy(s, f0, cfg);
}

// ---------------------------------------------------------------------------
// solver

/// Coarse-to-fine primal-dual scene flow between two frames. Within a level
/// the returned iterate only moves when the true (non-linearized) energy
/// decreases, so the per-level energy trace is monotone.
inline SceneFlowField compute_scene_flow(const RgbdFrame& f0, const RgbdFrame& f1,
                                         const SolverConfig& cfg = {},
                                         SolverTrace* trace = nullptr) {
  cfg.validate();
  require_same_shape(f0.intensity, f1.intensity, "frame pair intensity");
  require_same_shape(f0.depth, f1.depth, "frame pair depth");
  require_same_shape(f0.intensity, f0.depth, "intensity vs depth");
  if (!(f0.intrinsics == f1.intrinsics)) throw DataError("frame pair intrinsics differ");

  const auto full_valid = detail::pair_validity(f0.depth, f1.depth);
  if (std::none_of(full_valid.pixels().begin(), full_valid.pixels().end(),
                   [](unsigned char v) { return v != 0; }))
    throw DataError("compute_scene_flow: no pixel has valid depth in both frames");

  const auto levels = detail::build_pyramid(f0, f1, cfg);
  if (trace) *trace = SolverTrace{};

  ImageD mu, nu, om;
  for (int li = static_cast<int>(levels.size()) - 1; li >= 0; --li) {
    const auto& lv = levels[li];
    const int w = lv.i0.width(), h = lv.i0.height();
    const Mask valid = detail::pair_validity(lv.z0, lv.z1);
    const auto prob = detail::make_problem(lv.i0, lv.i1, lv.z0, lv.z1, lv.intr, valid, cfg);

    auto energy = [&](const ImageD& a, const ImageD& b, const ImageD& c) {
      return detail::data_energy(prob, a, b, c) + detail::regularizer_energy(prob, a, b, c, cfg);
    };

    ImageD zero(w, h);
    ImageD best_mu = zero, best_nu = zero, best_om = zero;
    double best_e = energy(zero, zero, zero);
    if (!mu.empty()) {
      ImageD um = upsample_bilinear(mu, w, h), un = upsample_bilinear(nu, w, h),
             uo = upsample_bilinear(om, w, h);
      for (std::size_t i = 0; i < um.size(); ++i) {
        um[i] *= 2.0;
        un[i] *= 2.0;
        if (!valid[i]) um[i] = un[i] = uo[i] = 0.0;
      }
      const double e = energy(um, un, uo);
      if (e <= best_e) {
        best_e = e;
        best_mu = std::move(um);
        best_nu = std::move(un);
        best_om = std::move(uo);
      }
    }

    std::vector<double> level_trace;
    level_trace.push_back(best_e);
    detail::PrimalDualLevel pd(prob, cfg);
    ImageD cur_mu = best_mu, cur_nu = best_nu, cur_om = best_om;
    const int per_warp = std::max(1, cfg.iters_per_level / cfg.warps_per_level);
    constexpr int window = 5;
    for (int warp = 0; warp < cfg.warps_per_level; ++warp) {
      // Each warp restarts the primal sequence from the best iterate so far.
      cur_mu = best_mu;
      cur_nu = best_nu;
      cur_om = best_om;
      ImageD bar_mu = cur_mu, bar_nu = cur_nu, bar_om = cur_om;
      pd.linearize(cur_mu, cur_nu);
      std::vector<double> candidates;
      for (int it = 0; it < per_warp; ++it) {
        pd.iterate(cur_mu, cur_nu, cur_om, bar_mu, bar_nu, bar_om);
        const double e = energy(cur_mu, cur_nu, cur_om);
        candidates.push_back(e);
        if (std::isfinite(e) && e <= best_e) {
          best_e = e;
          best_mu = cur_mu;
          best_nu = cur_nu;
          best_om = cur_om;
        } else if (trace) {
          ++trace->rejected_steps;
        }
        level_trace.push_back(best_e);
        // Converged once the candidate energies stop moving over a window.
        if (candidates.size() > window) {
          const auto first = candidates.end() - (window + 1);
          const auto [lo, hi] = std::minmax_element(first, candidates.end());
          if (*hi - *lo <= cfg.convergence_tol * std::max(*lo, 1e-12)) break;
        }
      }
    }
    mu = std::move(best_mu);
    nu = std::move(best_nu);
    om = std::move(best_om);
    if (trace) {
      trace->level_energy.push_back(std::move(level_trace));
      trace->level_width.push_back(w);
    }
  }

  SceneFlowField out;
  out.mu = std::move(mu);
  out.nu = std::move(nu);
  out.omega = std::move(om);
  out.validity = full_valid;
  out.zero_invalid();
  return out;
}

// ---------------------------------------------------------------------------
// motion field

/// M = Gamma(s): [Z/fx 0 X/Z; 0 Z/fy Y/Z; 0 0 1] * (mu, nu, omega).
inline Vec3 project_motion(double mu, double nu, double omega, double x_m, double y_m, double z,
                           const CameraIntrinsics& intr) {
  return {z / intr.fx * mu + x_m / z * omega, z / intr.fy * nu + y_m / z * omega, omega};
}

inline MotionField project_motion_field(const SceneFlowField& s, const ImageD& depth,
                                        const CameraIntrinsics& intr) {
  require_same_shape(s.mu, depth, "flow vs depth");
  MotionField out{Image<Vec3>(s.width(), s.height())};
  for (int y = 0; y < s.height(); ++y)
    for (int x = 0; x < s.width(); ++x) {
      const double z = depth(x, y);
      if (!s.validity(x, y) || z <= 0.0) continue;
      const double xm = (x - intr.cx) * z / intr.fx;
      const double ym = (y - intr.cy) * z / intr.fy;
      out.m(x, y) = project_motion(s.mu(x, y), s.nu(x, y), s.omega(x, y), xm, ym, z, intr);
    }
  return out;
}

// ---------------------------------------------------------------------------
// flow file: "W H\n", then mu, nu, omega as float32 LE planes, then a byte mask

inline void write_flow(const std::filesystem::path& path, const SceneFlowField& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write flow file: " + path.string());
  out << s.width() << ' ' << s.height() << '\n';
  auto put_plane = [&](const ImageD& p) {
    std::vector<unsigned char> buf(p.size() * 4);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float f = static_cast<float>(p[i]);
      std::uint32_t bits = 0;
      std::memcpy(&bits, &f, 4);
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  };
  put_plane(s.mu);
  put_plane(s.nu);
  put_plane(s.omega);
  out.write(reinterpret_cast<const char*>(s.validity.pixels().data()),
            static_cast<std::streamsize>(s.validity.size()));
  if (!out) throw DataError("failed writing flow file: " + path.string());
}

inline SceneFlowField read_flow(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open flow file: " + path.string());
  int w = 0, h = 0;
  if (!(in >> w >> h) || w <= 0 || h <= 0 || in.get() != '\n')
    throw DataError("bad flow file header: " + path.string());
  SceneFlowField s(w, h);
  auto get_plane = [&](ImageD& p) {
    std::vector<unsigned char> buf(p.size() * 4);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw DataError("truncated flow file: " + path.string());
    for (std::size_t i = 0; i < p.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[4 * i + b]) << (8 * b);
      float f = 0.0f;
      std::memcpy(&f, &bits, 4);
      p[i] = f;
    }
  };
  get_plane(s.mu);
  get_plane(s.nu);
  get_plane(s.omega);
  if (!in.read(reinterpret_cast<char*>(s.validity.pixels().data()),
               static_cast<std::streamsize>(s.validity.size())))
    throw DataError("truncated flow file: " + path.string());
  return s;
}

// ---------------------------------------------------------------------------
// config file: `key = value` lines with SolverConfig field names

inline void apply_solver_setting(SolverConfig& cfg, const std::string& key, const std::string& v) {
  auto num = [&] { return detail::parse_double(key, v); };
  if (key == "lambda_i") cfg.lambda_i = num();
  else if (key == "lambda_d") cfg.lambda_d = num();
  else if (key == "pyramid_levels") cfg.pyramid_levels = static_cast<int>(num());
  else if (key == "iters_per_level") cfg.iters_per_level = static_cast<int>(num());
  else if (key == "warps_per_level") cfg.warps_per_level = static_cast<int>(num());
  else if (key == "geometric_weight_scale") cfg.geometric_weight_scale = num();
  else if (key == "geometric_weight") {
    if (v == "inverse_square_depth") cfg.geometric_weight = GeometricWeight::inverse_square_depth;
    else if (v == "constant") cfg.geometric_weight = GeometricWeight::constant;
    else throw UsageError("geometric_weight must be inverse_square_depth or constant");
  } else if (key == "primal_step") cfg.primal_step = num();
  else if (key == "dual_step") cfg.dual_step = num();
  else if (key == "convergence_tol") cfg.convergence_tol = num();
  else if (key == "r_min") cfg.r_min = num();
  else if (key == "min_level_size") cfg.min_level_size = static_cast<int>(num());
  else throw UsageError("unknown solver setting '" + key + "'");
}

}  // namespace sfam
