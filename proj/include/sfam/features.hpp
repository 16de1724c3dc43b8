#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sfam/encode.hpp"
#include "sfam/image.hpp"

namespace sfam {

inline constexpr int kPooledSide = 16;
inline constexpr int kPooledFeatures = kPooledSide * kPooledSide * 3;

/// Half-open source range [begin, end) of output bin i when n samples pool into `bins`.
inline std::pair<int, int> pool_bin(int i, int n, int bins) {
  const int begin = std::min(n - 1, i * n / bins);
  const int end = std::max(begin + 1, (i + 1) * n / bins);
  return {begin, end};
}

/// Area-average pooling onto a side x side grid, appended to `out`.
inline void average_pool_into(const ImageD& img, int side, std::vector<double>& out) {
  for (int by = 0; by < side; ++by) {
    const auto [y0, y1] = pool_bin(by, img.height(), side);
    for (int bx = 0; bx < side; ++bx) {
      const auto [x0, x1] = pool_bin(bx, img.width(), side);
      double s = 0.0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += img(x, y);
      out.push_back(s / ((y1 - y0) * (x1 - x0)));
    }
  }
}

/// Adjoint of average_pool_into for one channel: spreads bin gradients back.
inline void average_pool_backward(std::span<const double> grad, int side, ImageD& dimg) {
  for (int by = 0; by < side; ++by) {
    const auto [y0, y1] = pool_bin(by, dimg.height(), side);
    for (int bx = 0; bx < side; ++bx) {
      const auto [x0, x1] = pool_bin(bx, dimg.width(), side);
      const double g = grad[by * side + bx] / ((y1 - y0) * (x1 - x0));
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) dimg(x, y) += g;
    }
  }
}

/// Raw channel values pooled to 16x16x3, channel-major.
inline std::vector<double> pooled_features(const ActionMap& map) {
  std::vector<double> f;
  f.reserve(kPooledFeatures);
  for (int c = 0; c < 3; ++c) average_pool_into(map.channel(c), kPooledSide, f);
  return f;
}

/// Features of the exported 8-bit image scaled to [0,1], the view an
/// image classifier gets.
inline std::vector<double> image_features(const ActionMap& map) {
  const auto img = normalize_to_image(map).image;
  ActionMap scaled = action_map_from_image(img, map.variant_tag);
  for (int c = 0; c < 3; ++c)
    for (double& v : scaled.channel(c).pixels()) v /= 255.0;
  return pooled_features(scaled);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double z = 0.0;
  for (double& v : p) {
    v = std::exp(v - m);
    z += v;
  }
  for (double& v : p) v /= z;
  return p;
}

/// Multinomial logistic regression head: logits = W x + b.
struct LinearHead {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<double> weights;  // num_classes x feature_dim, row-major
  std::vector<double> bias;

  LinearHead() = default;
  LinearHead(int classes, int dim)
      : num_classes(classes), feature_dim(dim),
        weights(static_cast<std::size_t>(classes) * dim, 0.0), bias(classes, 0.0) {}

  std::vector<double> logits(std::span<const double> x) const {
    std::vector<double> z(bias);
    for (int c = 0; c < num_classes; ++c) {
      const double* w = weights.data() + static_cast<std::size_t>(c) * feature_dim;
      for (int i = 0; i < feature_dim; ++i) z[c] += w[i] * x[i];
    }
    return z;
  }

  std::vector<double> probabilities(std::span<const double> x) const { return softmax(logits(x)); }
};

/// Mean cross-entropy over a batch; optionally accumulates gradients for the
/// head and for each input feature vector.
inline double cross_entropy(const LinearHead& head, const std::vector<std::vector<double>>& xs,
                            const std::vector<int>& labels, LinearHead* dhead,
                            std::vector<std::vector<double>>* dxs) {
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  double loss = 0.0;
  if (dhead) *dhead = LinearHead(head.num_classes, head.feature_dim);
  if (dxs) dxs->assign(xs.size(), std::vector<double>(head.feature_dim, 0.0));
  for (std::size_t s = 0; s < xs.size(); ++s) {
    const auto p = head.probabilities(xs[s]);
    loss -= std::log(std::max(p[labels[s]], 1e-300)) * inv_n;
    for (int c = 0; c < head.num_classes; ++c) {
      const double g = (p[c] - (c == labels[s] ? 1.0 : 0.0)) * inv_n;
      if (g == 0.0) continue;
      const std::size_t row = static_cast<std::size_t>(c) * head.feature_dim;
      if (dhead) {
        dhead->bias[c] += g;
        for (int i = 0; i < head.feature_dim; ++i) dhead->weights[row + i] += g * xs[s][i];
      }
      if (dxs)
        for (int i = 0; i < head.feature_dim; ++i) (*dxs)[s][i] += g * head.weights[row + i];
    }
  }
  return loss;
}

}  // namespace sfam
