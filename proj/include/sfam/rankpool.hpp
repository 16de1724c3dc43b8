#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sfam/encode.hpp"
#include "sfam/error.hpp"
#include "sfam/image.hpp"

namespace sfam {

enum class PoolDirection { forward, backward };

struct RankPoolConfig {
  double lambda = 1.0;
  int max_epochs = 2000;
  double tol = 1e-10;  // relative duality gap
  PoolDirection direction = PoolDirection::forward;

  void validate() const {
    if (!(lambda > 0.0)) throw UsageError("rank pooling: lambda must be > 0");
    if (max_epochs < 1) throw UsageError("rank pooling: max_epochs must be >= 1");
    if (!(tol > 0.0)) throw UsageError("rank pooling: tol must be > 0");
  }
};

struct PoolingResult {
  std::vector<double> d_star;
  double objective_value = 0.0;
  int pair_violations = 0;
  int epochs = 0;
  double duality_gap = 0.0;
};

/// V_t = mean of X_1..X_t, each flattened row-major.
inline std::vector<std::vector<double>> time_average_features(const std::vector<ImageD>& maps) {
  if (maps.empty()) throw DataError("time_average_features: empty sequence");
  const std::size_t d = maps.front().size();
  std::vector<std::vector<double>> v;
  std::vector<double> sum(d, 0.0);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    require_same_shape(maps[t], maps.front(), "time_average_features");
    std::vector<double> vt(d);
    for (std::size_t i = 0; i < d; ++i) {
      sum[i] += maps[t][i];
      vt[i] = sum[i] / static_cast<double>(t + 1);
    }
    v.push_back(std::move(vt));
  }
  return v;
}

/// E(d) = lambda/2 |d|^2 + 2/(T(T-1)) sum_{q>t} max(0, 1 - <d,V_q> + <d,V_t>).
inline double rank_objective(std::span<const double> d, const std::vector<std::vector<double>>& v,
                             double lambda) {
  const std::size_t T = v.size();
  double reg = 0.0;
  for (double x : d) reg += x * x;
  double loss = 0.0;
  if (T >= 2) {
    std::vector<double> s(T, 0.0);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < d.size(); ++i) s[t] += d[i] * v[t][i];
    for (std::size_t q = 1; q < T; ++q)
      for (std::size_t t = 0; t < q; ++t) loss += std::max(0.0, 1.0 - s[q] + s[t]);
    loss *= 2.0 / (static_cast<double>(T) * static_cast<double>(T - 1));
  }
  return 0.5 * lambda * reg + loss;
}

namespace detail {

// Dual coordinate ascent on the RankSVM dual
//   max sum(a) - 1/(2 lambda) |sum_p a_p z_p|^2,  0 <= a_p <= c,  z_p = V_q - V_t,
// carried out in the T-dimensional span of the V_t through their Gram matrix.
inline PoolingResult rank_pool_features(const std::vector<std::vector<double>>& v,
                                        const RankPoolConfig& cfg) {
  const std::size_t T = v.size();
  const std::size_t D = v.front().size();
  PoolingResult res;
  res.d_star.assign(D, 0.0);
  if (T < 2) return res;

  std::vector<double> gram(T * T);
  for (std::size_t a = 0; a < T; ++a)
    for (std::size_t b = a; b < T; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < D; ++i) s += v[a][i] * v[b][i];
      gram[a * T + b] = gram[b * T + a] = s;
    }
  auto g = [&](std::size_t a, std::size_t b) { return gram[a * T + b]; };

  struct Pair {
    std::size_t q, t;
    double qpp;
  };
  std::vector<Pair> pairs;
  for (std::size_t q = 1; q < T; ++q)
    for (std::size_t t = 0; t < q; ++t) pairs.push_back({q, t, g(q, q) + g(t, t) - 2.0 * g(q, t)});

  const double c = 2.0 / (static_cast<double>(T) * static_cast<double>(T - 1));
  const double lambda = cfg.lambda;
  std::vector<double> alpha(pairs.size(), 0.0);
  std::vector<double> beta(T, 0.0);   // d = (1/lambda) sum_s beta_s V_s
  std::vector<double> score(T, 0.0);  // <d, V_r>

  auto primal_dual = [&](double& primal, double& dual) {
    double dd = 0.0;  // |d|^2 * lambda^2
    for (std::size_t a = 0; a < T; ++a)
      for (std::size_t b = 0; b < T; ++b) dd += beta[a] * beta[b] * g(a, b);
    const double norm2 = std::max(0.0, dd) / (lambda * lambda);
    double hinge = 0.0, asum = 0.0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      hinge += std::max(0.0, 1.0 - score[pairs[k].q] + score[pairs[k].t]);
      asum += alpha[k];
    }
    primal = 0.5 * lambda * norm2 + c * hinge;
    dual = asum - 0.5 * lambda * norm2;
  };

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    res.epochs = epoch + 1;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto& p = pairs[k];
      const double grad = 1.0 - (score[p.q] - score[p.t]);
      double na;
      if (p.qpp <= 0.0) na = grad > 0.0 ? c : (grad < 0.0 ? 0.0 : alpha[k]);
      else na = std::clamp(alpha[k] + lambda * grad / p.qpp, 0.0, c);
      const double delta = na - alpha[k];
      if (delta == 0.0) continue;
      alpha[k] = na;
      beta[p.q] += delta;
      beta[p.t] -= delta;
      for (std::size_t r = 0; r < T; ++r) score[r] += delta / lambda * (g(p.q, r) - g(p.t, r));
    }
    double primal = 0.0, dual = 0.0;
    primal_dual(primal, dual);
    res.duality_gap = primal - dual;
    if (res.duality_gap <= cfg.tol * std::max(1.0, std::abs(primal))) break;
  }

  for (std::size_t s = 0; s < T; ++s) {
    if (beta[s] == 0.0) continue;
    const double w = beta[s] / lambda;
    for (std::size_t i = 0; i < D; ++i) res.d_star[i] += w * v[s][i];
  }
  res.objective_value = rank_objective(res.d_star, v, lambda);
  // d = 0 scores exactly 1; never return anything worse.
  if (res.objective_value > 1.0) {
    std::fill(res.d_star.begin(), res.d_star.end(), 0.0);
    res.objective_value = rank_objective(res.d_star, v, lambda);
  }
  std::vector<double> s(T, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < D; ++i) s[t] += res.d_star[i] * v[t][i];
  for (const auto& p : pairs)
    if (s[p.q] < s[p.t] + 1.0) ++res.pair_violations;
  return res;
}

}  // namespace detail

/// RankSVM pooling of one map sequence; backward pools the reversed sequence.
inline PoolingResult rank_pool(std::vector<ImageD> maps, const RankPoolConfig& cfg = {}) {
  cfg.validate();
  if (maps.empty()) throw DataError("rank_pool: empty sequence");
  if (cfg.direction == PoolDirection::backward) std::reverse(maps.begin(), maps.end());
  return detail::rank_pool_features(time_average_features(maps), cfg);
}

inline VariantTag rp_tag(PoolDirection dir) {
  return dir == PoolDirection::forward ? VariantTag::RPf : VariantTag::RPb;
}

/// Pools each of the three channels independently into an RPf/RPb map.
inline ActionMap rank_pool_map_sequence(const std::vector<SceneFlowMap>& maps,
                                        const RankPoolConfig& cfg = {}) {
  if (maps.size() < 2) throw DataError("rank_pool_map_sequence: needs at least 2 maps");
  const int w = maps.front().width(), h = maps.front().height();
  ActionMap out{ImageD(w, h), ImageD(w, h), ImageD(w, h), rp_tag(cfg.direction), {}};
  for (int c = 0; c < 3; ++c) {
    std::vector<ImageD> ch;
    for (const auto& m : maps) ch.push_back(m.channel(c));
    const auto r = rank_pool(std::move(ch), cfg);
    std::copy(r.d_star.begin(), r.d_star.end(), out.channel(c).pixels().begin());
  }
  return out;
}

/// Amplitude maps pooled into a single channel, replicated to gray RGB.
inline ActionMap amplitude_rank_pool(const std::vector<SceneFlowMap>& maps,
                                     const RankPoolConfig& cfg = {}) {
  if (maps.size() < 2) throw DataError("amplitude_rank_pool: needs at least 2 maps");
  const auto r = rank_pool(amplitude_maps(maps), cfg);
  const int w = maps.front().width(), h = maps.front().height();
  ActionMap out{ImageD(w, h), ImageD(w, h), ImageD(w, h),
                cfg.direction == PoolDirection::forward ? VariantTag::AMRPf : VariantTag::AMRPb, {}};
  for (int c = 0; c < 3; ++c) std::copy(r.d_star.begin(), r.d_star.end(), out.channel(c).pixels().begin());
  return out;
}

inline ActionMap lab_rank_pool(const std::vector<SceneFlowMap>& maps, const RankPoolConfig& cfg = {}) {
  auto out = rank_pool_map_sequence(lab_maps(maps), cfg);
  out.variant_tag = cfg.direction == PoolDirection::forward ? VariantTag::LABRPf : VariantTag::LABRPb;
  return out;
}

// ---------------------------------------------------------------------------
// approximate rank pooling

/// alpha_t = 2(T - t + 1) - (T + 1)(H_T - H_{t-1}), t = 1..T.
inline std::vector<double> approximate_rank_pool_coefficients(int T) {
  if (T < 1) throw DataError("approximate rank pooling needs T >= 1");
  std::vector<double> harmonic(static_cast<std::size_t>(T) + 1, 0.0);
  for (int k = 1; k <= T; ++k) harmonic[k] = harmonic[k - 1] + 1.0 / k;
  std::vector<double> alpha(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t)
    alpha[t - 1] = 2.0 * (T - t + 1) - (T + 1) * (harmonic[T] - harmonic[t - 1]);
  return alpha;
}

inline ImageD approximate_rank_pool(const std::vector<ImageD>& maps) {
  if (maps.empty()) throw DataError("approximate_rank_pool: empty sequence");
  const auto alpha = approximate_rank_pool_coefficients(static_cast<int>(maps.size()));
  ImageD out(maps.front().width(), maps.front().height());
  for (std::size_t t = 0; t < maps.size(); ++t) {
    require_same_shape(maps[t], out, "approximate_rank_pool");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha[t] * maps[t][i];
  }
  return out;
}

}  // namespace sfam
