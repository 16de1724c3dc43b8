#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sfam/error.hpp"
#include "sfam/image.hpp"

namespace sfam {

/// Projective map from depth-view pixels to RGB-view pixels, p = H p'.
/// Stored with h(2,2) = 1 whenever that entry is nonzero.
class Homography {
public:
  Homography() : h_(Eigen::Matrix3d::Identity()) {}
  explicit Homography(const Eigen::Matrix3d& h) : h_(h) {
    if (!h_.allFinite()) throw NumericalError("homography has non-finite entries");
    if (std::abs(h_(2, 2)) > 0.0) h_ /= h_(2, 2);
    if (std::abs(h_.determinant()) <= 1e-12) throw NumericalError("homography is singular");
  }

  static Homography translation(double tx, double ty) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography(m);
  }

  const Eigen::Matrix3d& matrix() const noexcept { return h_; }
  Homography inverse() const { return Homography(h_.inverse()); }

  Eigen::Vector2d apply(const Eigen::Vector2d& p) const {
    const Eigen::Vector3d q = h_ * p.homogeneous();
    return q.hnormalized();
  }

private:
  Eigen::Matrix3d h_;
};

struct PointMatch {
  Eigen::Vector2d p;        // RGB image
  Eigen::Vector2d p_prime;  // depth map
};

// ---------------------------------------------------------------------------
// error measures

/// d(p, H p')^2 + d(p', H^-1 p)^2
inline double symmetric_transfer_sq(const Eigen::Matrix3d& h, const Eigen::Matrix3d& h_inv,
                                    const PointMatch& m) {
  const Eigen::Vector3d fwd = h * m.p_prime.homogeneous();
  const Eigen::Vector3d bwd = h_inv * m.p.homogeneous();
  if (std::abs(fwd.z()) < 1e-15 || std::abs(bwd.z()) < 1e-15)
    return std::numeric_limits<double>::infinity();
  return (m.p - fwd.hnormalized()).squaredNorm() + (m.p_prime - bwd.hnormalized()).squaredNorm();
}

inline double symmetric_transfer_error(const Homography& h, const PointMatch& m) {
  return std::sqrt(symmetric_transfer_sq(h.matrix(), h.inverse().matrix(), m));
}

/// Sum of symmetric transfer distances squared over all matches.
inline double symmetric_objective(const Homography& h, const std::vector<PointMatch>& matches) {
  const Eigen::Matrix3d hm = h.matrix();
  const Eigen::Matrix3d hi = hm.inverse();
  double sum = 0.0;
  for (const auto& m : matches) sum += symmetric_transfer_sq(hm, hi, m);
  return sum;
}

inline double mean_symmetric_transfer_error(const Homography& h,
                                            const std::vector<PointMatch>& matches) {
  if (matches.empty()) return 0.0;
  const Eigen::Matrix3d hm = h.matrix();
  const Eigen::Matrix3d hi = hm.inverse();
  double sum = 0.0;
  for (const auto& m : matches) sum += std::sqrt(symmetric_transfer_sq(hm, hi, m));
  return sum / static_cast<double>(matches.size());
}

// ---------------------------------------------------------------------------
// DLT

namespace detail {

// Similarity taking the centroid to the origin with RMS distance sqrt(2).
template <typename Get>
Eigen::Matrix3d hartley_normalizer(const std::vector<PointMatch>& matches, Get get) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (const auto& m : matches) c += get(m);
  c /= static_cast<double>(matches.size());
  double ms = 0.0;
  for (const auto& m : matches) ms += (get(m) - c).squaredNorm();
  const double rms = std::sqrt(ms / static_cast<double>(matches.size()));
  if (!(rms > 0.0)) throw NumericalError("degenerate point configuration: all points coincide");
  const double s = std::sqrt(2.0) / rms;
  Eigen::Matrix3d t;
  t << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return t;
}

inline bool collinear(const Eigen::Vector2d& a, const Eigen::Vector2d& b, const Eigen::Vector2d& c,
                      double scale) {
  const double cross = (b - a).x() * (c - a).y() - (b - a).y() * (c - a).x();
  return std::abs(cross) <= 1e-10 * scale * scale;
}

inline bool minimal_sample_degenerate(const std::array<const PointMatch*, 4>& s) {
  for (int which = 0; which < 2; ++which) {
    auto pt = [&](int i) { return which == 0 ? s[i]->p : s[i]->p_prime; };
    double scale = 0.0;
    for (int i = 0; i < 4; ++i) scale = std::max(scale, (pt(i) - pt(0)).norm());
    if (scale == 0.0) return true;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        for (int k = j + 1; k < 4; ++k)
          if (collinear(pt(i), pt(j), pt(k), scale)) return true;
  }
  return false;
}

}  // namespace detail

/// Normalized direct linear transform on the stacked cross-product system
/// p x (H p') = 0, two rows per match; H is the least right singular vector.
inline Homography dlt_homography(const std::vector<PointMatch>& matches) {
  if (matches.size() < 4) throw DataError("dlt_homography needs at least 4 matches");
  for (const auto& m : matches)
    if (!m.p.allFinite() || !m.p_prime.allFinite()) throw DataError("non-finite match coordinate");
  if (matches.size() == 4) {
    std::array<const PointMatch*, 4> s{&matches[0], &matches[1], &matches[2], &matches[3]};
    if (detail::minimal_sample_degenerate(s))
      throw NumericalError("degenerate configuration: three collinear points");
  }

  const Eigen::Matrix3d t_rgb = detail::hartley_normalizer(matches, [](const PointMatch& m) { return m.p; });
  const Eigen::Matrix3d t_dep =
      detail::hartley_normalizer(matches, [](const PointMatch& m) { return m.p_prime; });

  const auto n = static_cast<Eigen::Index>(matches.size());
  Eigen::MatrixXd a(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d p = t_rgb * matches[i].p.homogeneous();
    const Eigen::Vector3d q = t_dep * matches[i].p_prime.homogeneous();
    const Eigen::RowVector3d qt = q.transpose();
    a.row(2 * i) << Eigen::RowVector3d::Zero(), -p.z() * qt, p.y() * qt;
    a.row(2 * i + 1) << p.z() * qt, Eigen::RowVector3d::Zero(), -p.x() * qt;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // With 4 matches the system is 8x9: null space is given, rank must be 8.
  if (sv.size() >= 8 && sv(7) <= 1e-10 * sv(0))
    throw NumericalError("degenerate configuration: design matrix rank-deficient");
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return Homography(t_rgb.inverse() * hn * t_dep);
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt refinement

struct RefineResult {
  Homography h;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  int iterations = 0;
  bool converged = false;  // false: iteration cap hit, best iterate returned
};

struct RefineOptions {
  int max_iterations = 100;
  double gradient_tol = 1e-12;
  double step_tol = 1e-12;
};

namespace detail {

inline Eigen::Matrix3d from_params(const Eigen::Matrix<double, 8, 1>& x) {
  Eigen::Matrix3d m;
  m << x(0), x(1), x(2), x(3), x(4), x(5), x(6), x(7), 1.0;
  return m;
}

// Residuals (4 per match) of the symmetric transfer objective, plus the
// analytic Jacobian w.r.t. the 8 free entries (h22 fixed to 1).
inline void symmetric_residuals(const Eigen::Matrix3d& h, const std::vector<PointMatch>& matches,
                                Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
  const Eigen::Matrix3d hi = h.inverse();
  const auto n = static_cast<Eigen::Index>(matches.size());
  r.resize(4 * n);
  if (jac) jac->setZero(4 * n, 8);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& m = matches[i];
    const Eigen::Vector3d q = m.p_prime.homogeneous();
    const Eigen::Vector3d f = h * q;
    const Eigen::Vector3d p = m.p.homogeneous();
    const Eigen::Vector3d b = hi * p;
    r(4 * i + 0) = f.x() / f.z() - m.p.x();
    r(4 * i + 1) = f.y() / f.z() - m.p.y();
    r(4 * i + 2) = b.x() / b.z() - m.p_prime.x();
    r(4 * i + 3) = b.y() / b.z() - m.p_prime.y();
    if (!jac) continue;
    for (int k = 0; k < 8; ++k) {
      Eigen::Matrix3d dh = Eigen::Matrix3d::Zero();
      dh(k / 3, k % 3) = 1.0;
      const Eigen::Vector3d df = dh * q;
      // d(H^-1) = -H^-1 dH H^-1
      const Eigen::Vector3d db = -hi * (dh * b);
      (*jac)(4 * i + 0, k) = (df.x() * f.z() - f.x() * df.z()) / (f.z() * f.z());
      (*jac)(4 * i + 1, k) = (df.y() * f.z() - f.y() * df.z()) / (f.z() * f.z());
      (*jac)(4 * i + 2, k) = (db.x() * b.z() - b.x() * db.z()) / (b.z() * b.z());
      (*jac)(4 * i + 3, k) = (db.y() * b.z() - b.y() * db.z()) / (b.z() * b.z());
    }
  }
}

}  // namespace detail

/// Minimizes the summed symmetric transfer distance. Only objective-decreasing
/// steps are accepted, so the result never scores worse than `h0`.
inline RefineResult refine_homography(const Homography& h0, const std::vector<PointMatch>& matches,
                                      const RefineOptions& opt = {}) {
  if (matches.size() < 4) throw DataError("refine_homography needs at least 4 matches");
  Eigen::Matrix3d start = h0.matrix();
  if (std::abs(start(2, 2)) < 1e-12) throw NumericalError("refine_homography: h22 vanishes");
  start /= start(2, 2);

  Eigen::Matrix<double, 8, 1> x;
  x << start(0, 0), start(0, 1), start(0, 2), start(1, 0), start(1, 1), start(1, 2), start(2, 0),
      start(2, 1);

  RefineResult res{h0, 0.0, 0.0, 0, false};
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  detail::symmetric_residuals(detail::from_params(x), matches, r, &jac);
  double cost = r.squaredNorm();
  res.initial_objective = cost;
  // Damping is relative to diag(J^T J), so mu is dimensionless.
  double mu = 1e-3;
  double nu = 2.0;

  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it + 1;
    const Eigen::Matrix<double, 8, 8> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 8, 1> g = jac.transpose() * r;
    if (g.lpNorm<Eigen::Infinity>() <= opt.gradient_tol * std::max(1.0, cost)) {
      res.converged = true;
      break;
    }
    Eigen::Matrix<double, 8, 8> aug = jtj;
    aug.diagonal() += mu * jtj.diagonal().cwiseMax(1e-12);
    const Eigen::Matrix<double, 8, 1> step = aug.ldlt().solve(-g);
    if (!step.allFinite() || step.norm() <= opt.step_tol * (x.norm() + opt.step_tol)) {
      res.converged = true;
      break;
    }
    const Eigen::Matrix<double, 8, 1> xn = x + step;
    const Eigen::Matrix3d hn = detail::from_params(xn);
    double new_cost = std::numeric_limits<double>::infinity();
    Eigen::VectorXd rn;
    if (std::abs(hn.determinant()) > 1e-12) {
      detail::symmetric_residuals(hn, matches, rn, nullptr);
      new_cost = rn.allFinite() ? rn.squaredNorm() : std::numeric_limits<double>::infinity();
    }
    const double predicted = -(step.dot(g) + 0.5 * step.dot(jtj * step));
    if (new_cost < cost) {
      const double rho = predicted > 0.0 ? (cost - new_cost) / predicted : 1.0;
      x = xn;
      const bool small = cost - new_cost <= 1e-15 * cost;
      cost = new_cost;
      detail::symmetric_residuals(detail::from_params(x), matches, r, &jac);
      mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
      nu = 2.0;
      if (small) {
        res.converged = true;
        break;
      }
    } else {
      mu *= nu;
      nu *= 2.0;
      if (!std::isfinite(mu) || mu > 1e30) {
        res.converged = true;
        break;
      }
    }
  }
  res.final_objective = cost;
  res.h = cost < res.initial_objective ? Homography(detail::from_params(x)) : h0;
  if (!(cost < res.initial_objective)) res.final_objective = res.initial_objective;
  return res;
}

// ---------------------------------------------------------------------------
// RANSAC

struct RansacOptions {
  double inlier_threshold = 2.0;  // px, on the symmetric transfer distance
  int max_iters = 1000;
  double confidence = 0.999;
  std::uint64_t seed = 0;
};

struct RansacResult {
  Homography h;
  std::vector<bool> inliers;
  int iterations = 0;
};

inline RansacResult ransac_homography(const std::vector<PointMatch>& matches,
                                      const RansacOptions& opt = {}) {
  if (matches.size() < 4) throw DataError("ransac_homography needs at least 4 matches");
  const std::size_t n = matches.size();
  const double thr_sq = opt.inlier_threshold * opt.inlier_threshold;
  std::mt19937_64 rng(opt.seed);

  std::vector<bool> best_mask;
  std::size_t best_count = 0;
  double best_score = std::numeric_limits<double>::infinity();
  double needed = static_cast<double>(opt.max_iters);
  int it = 0;

  auto consensus = [&](const Homography& h, std::vector<bool>& mask, double& score) {
    const Eigen::Matrix3d hm = h.matrix(), hi = hm.inverse();
    std::size_t count = 0;
    score = 0.0;
    mask.assign(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      const double e = symmetric_transfer_sq(hm, hi, matches[i]);
      if (e < thr_sq) {
        mask[i] = true;
        ++count;
        score += e;
      }
    }
    return count;
  };

  std::vector<bool> mask;
  for (; it < opt.max_iters && it < needed; ++it) {
    std::array<std::size_t, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      bool dup = true;
      while (dup) {
        idx[k] = static_cast<std::size_t>(rng() % n);
        dup = std::find(idx.begin(), idx.begin() + k, idx[k]) != idx.begin() + k;
      }
    }
    const std::array<const PointMatch*, 4> sample{&matches[idx[0]], &matches[idx[1]],
                                                  &matches[idx[2]], &matches[idx[3]]};
    if (detail::minimal_sample_degenerate(sample)) continue;
    Homography h;
    try {
      h = dlt_homography({*sample[0], *sample[1], *sample[2], *sample[3]});
    } catch (const Error&) {
      continue;
    }
    double score = 0.0;
    const std::size_t count = consensus(h, mask, score);
    if (count > best_count || (count == best_count && count > 0 && score < best_score)) {
      best_count = count;
      best_score = score;
      best_mask = mask;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double denom = std::log(1.0 - std::pow(w, 4));
      if (w >= 1.0) needed = 0.0;
      else if (denom < 0.0) needed = std::ceil(std::log(1.0 - opt.confidence) / denom);
    }
  }
  if (best_count < 4) throw NumericalError("ransac_homography: no model with >= 4 inliers");

  // Refit on the consensus set, then re-score once with the refined model.
  auto fit = [&](const std::vector<bool>& m) {
    std::vector<PointMatch> in;
    for (std::size_t i = 0; i < n; ++i)
      if (m[i]) in.push_back(matches[i]);
    return refine_homography(dlt_homography(in), in).h;
  };
  Homography h = fit(best_mask);
  double score = 0.0;
  std::vector<bool> refined_mask;
  if (consensus(h, refined_mask, score) >= best_count) {
    best_mask = refined_mask;
    h = fit(best_mask);
  }
  return {h, best_mask, it};
}

// ---------------------------------------------------------------------------
// depth warping

/// Inverse-warps a depth map into the RGB view: out(p) = depth(H^-1 p),
/// nearest neighbor, with out-of-bounds samples set to 0.
inline ImageD warp_depth(const ImageD& depth, const Homography& h) {
  const Eigen::Matrix3d hi = h.inverse().matrix();
  ImageD out(depth.width(), depth.height());
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      const Eigen::Vector3d s = hi * Eigen::Vector3d(x, y, 1.0);
      if (!(std::abs(s.z()) > 1e-15)) continue;
      const double sx = std::round(s.x() / s.z());
      const double sy = std::round(s.y() / s.z());
      if (sx < 0 || sy < 0 || sx > depth.width() - 1 || sy > depth.height() - 1) continue;
      out(x, y) = depth(static_cast<int>(sx), static_cast<int>(sy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// text formats

/// Whitespace-separated `x y x' y'` per line; `#` starts a comment.
inline std::vector<PointMatch> read_matches(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open correspondence file: " + path.string());
  std::vector<PointMatch> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    double v[4];
    int k = 0;
    while (k < 4 && ls >> v[k]) ++k;
    if (k == 0 && ls.eof()) continue;
    std::string extra;
    if (k != 4 || (ls >> extra))
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 4 numbers");
    out.push_back({{v[0], v[1]}, {v[2], v[3]}});
  }
  return out;
}

inline void write_matches(const std::filesystem::path& path, const std::vector<PointMatch>& ms) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  for (const auto& m : ms)
    out << m.p.x() << ' ' << m.p.y() << ' ' << m.p_prime.x() << ' ' << m.p_prime.y() << '\n';
}

/// Nine row-major numbers.
inline void write_homography(const std::filesystem::path& path, const Homography& h) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  const auto& m = h.matrix();
  for (int r = 0; r < 3; ++r)
    out << m(r, 0) << ' ' << m(r, 1) << ' ' << m(r, 2) << '\n';
}

inline Homography read_homography(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open homography file: " + path.string());
  Eigen::Matrix3d m;
  for (int i = 0; i < 9; ++i)
    if (!(in >> m(i / 3, i % 3))) throw DataError("homography file needs 9 numbers: " + path.string());
  return Homography(m);
}

}  // namespace sfam
