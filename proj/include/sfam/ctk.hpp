#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "sfam/encode.hpp"
#include "sfam/error.hpp"
#include "sfam/features.hpp"
#include "sfam/rankpool.hpp"
#include "sfam/rgbd.hpp"

namespace sfam {

/// Three bias-free 3-in/3-out channel mixes, each followed by ReLU.
struct ChannelKernelStack {
  std::array<Eigen::Matrix3d, 3> layers{Eigen::Matrix3d::Identity(), Eigen::Matrix3d::Identity(),
                                        Eigen::Matrix3d::Identity()};

  static ChannelKernelStack identity() { return {}; }

  /// Identity plus uniform noise in [-noise, noise].
  static ChannelKernelStack perturbed_identity(std::uint64_t seed, double noise = 0.05) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-noise, noise);
    ChannelKernelStack s;
    for (auto& w : s.layers)
      for (int i = 0; i < 9; ++i) w(i / 3, i % 3) += u(rng);
    return s;
  }

  bool finite() const {
    for (const auto& w : layers)
      if (!w.allFinite()) return false;
    return true;
  }

  friend bool operator==(const ChannelKernelStack& a, const ChannelKernelStack& b) {
    for (int k = 0; k < 3; ++k)
      if (a.layers[k] != b.layers[k]) return false;
    return true;
  }
};

using StackGradient = std::array<Eigen::Matrix3d, 3>;

inline Eigen::Vector3d ctk_pixel(const ChannelKernelStack& s, const Eigen::Vector3d& x) {
  Eigen::Vector3d a = x;
  for (const auto& w : s.layers) a = (w * a).cwiseMax(0.0);
  return a;
}

inline SceneFlowMap ctk_forward(const SceneFlowMap& sfm, const ChannelKernelStack& stack) {
  SceneFlowMap out{ImageD(sfm.width(), sfm.height()), ImageD(sfm.width(), sfm.height()),
                   ImageD(sfm.width(), sfm.height()), sfm.index};
  for (std::size_t i = 0; i < sfm.x_mu.size(); ++i) {
    const Eigen::Vector3d y = ctk_pixel(stack, {sfm.x_mu[i], sfm.x_nu[i], sfm.x_omega[i]});
    out.x_mu[i] = y.x();
    out.x_nu[i] = y.y();
    out.x_omega[i] = y.z();
  }
  return out;
}

/// Channel transform of every map followed by approximate rank pooling per channel.
inline ActionMap ctk_encode(const std::vector<SceneFlowMap>& sfms, const ChannelKernelStack& stack) {
  if (sfms.empty()) throw DataError("ctk_encode: empty sequence");
  const auto alpha = approximate_rank_pool_coefficients(static_cast<int>(sfms.size()));
  const int w = sfms.front().width(), h = sfms.front().height();
  ActionMap out{ImageD(w, h), ImageD(w, h), ImageD(w, h), VariantTag::CTKRP, {}};
  for (std::size_t t = 0; t < sfms.size(); ++t) {
    const auto& m = sfms[t];
    require_same_shape(m.x_mu, out.c1, "ctk_encode");
    for (std::size_t i = 0; i < out.c1.size(); ++i) {
      const Eigen::Vector3d y = ctk_pixel(stack, {m.x_mu[i], m.x_nu[i], m.x_omega[i]});
      out.c1[i] += alpha[t] * y.x();
      out.c2[i] += alpha[t] * y.y();
      out.c3[i] += alpha[t] * y.z();
    }
  }
  return out;
}

/// Gradient of a loss w.r.t. the 27 stack weights given dL/d(ActionMap).
/// ReLU subgradient at exactly zero pre-activation is 0.
inline StackGradient ctk_backward(const std::vector<SceneFlowMap>& sfms,
                                  const ChannelKernelStack& stack,
                                  const std::array<ImageD, 3>& upstream) {
  StackGradient grad{Eigen::Matrix3d::Zero(), Eigen::Matrix3d::Zero(), Eigen::Matrix3d::Zero()};
  if (sfms.empty()) throw DataError("ctk_backward: empty sequence");
  const auto alpha = approximate_rank_pool_coefficients(static_cast<int>(sfms.size()));
  for (std::size_t t = 0; t < sfms.size(); ++t) {
    const auto& m = sfms[t];
    for (std::size_t i = 0; i < m.x_mu.size(); ++i) {
      Eigen::Vector3d g(upstream[0][i], upstream[1][i], upstream[2][i]);
      if (g.isZero(0.0)) continue;
      g *= alpha[t];
      std::array<Eigen::Vector3d, 4> act;  // act[k] is the input of layer k
      std::array<Eigen::Vector3d, 3> pre;
      act[0] = {m.x_mu[i], m.x_nu[i], m.x_omega[i]};
      for (int k = 0; k < 3; ++k) {
        pre[k] = stack.layers[k] * act[k];
        act[k + 1] = pre[k].cwiseMax(0.0);
      }
      for (int k = 2; k >= 0; --k) {
        const Eigen::Vector3d dz = (pre[k].array() > 0.0).select(g, 0.0);
        grad[k] += dz * act[k].transpose();
        g = stack.layers[k].transpose() * dz;
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// end-to-end training with a linear softmax head on pooled CTKRP maps

struct CtkSample {
  std::vector<SceneFlowMap> sfms;
  int label = 0;
};

struct CtkTrainConfig {
  int epochs = 300;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  double init_noise = 0.05;
  bool train_stack = true;
};

struct CtkTrainState {
  ChannelKernelStack stack;
  LinearHead head;
  double learning_rate = 0.0;
  int epoch = 0;
  std::vector<double> loss_history;  // [0] is the loss before any update
};

namespace detail {

struct CtkEval {
  double loss = 0.0;
  LinearHead dhead;
  StackGradient dstack{Eigen::Matrix3d::Zero(), Eigen::Matrix3d::Zero(), Eigen::Matrix3d::Zero()};
};

inline CtkEval ctk_loss_and_gradient(const std::vector<CtkSample>& data,
                                     const ChannelKernelStack& stack, const LinearHead& head,
                                     bool want_stack) {
  std::vector<std::vector<double>> xs;
  std::vector<int> labels;
  for (const auto& s : data) {
    xs.push_back(pooled_features(ctk_encode(s.sfms, stack)));
    labels.push_back(s.label);
  }
  CtkEval ev;
  std::vector<std::vector<double>> dxs;
  ev.loss = cross_entropy(head, xs, labels, &ev.dhead, want_stack ? &dxs : nullptr);
  if (!want_stack) return ev;
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto& first = data[s].sfms.front();
    std::array<ImageD, 3> up{ImageD(first.width(), first.height()),
                             ImageD(first.width(), first.height()),
                             ImageD(first.width(), first.height())};
    const std::span<const double> dx(dxs[s]);
    for (int c = 0; c < 3; ++c)
      average_pool_backward(dx.subspan(static_cast<std::size_t>(c) * kPooledSide * kPooledSide,
                                       kPooledSide * kPooledSide),
                            kPooledSide, up[c]);
    const auto g = ctk_backward(data[s].sfms, stack, up);
    for (int k = 0; k < 3; ++k) ev.dstack[k] += g[k];
  }
  return ev;
}

}  // namespace detail

/// Full-batch gradient descent on softmax cross-entropy through head and
/// stack. A step that would raise the loss is rejected and the rate halved,
/// so the recorded loss never increases.
inline CtkTrainState train_ctk(const std::vector<CtkSample>& data, const CtkTrainConfig& cfg = {}) {
  if (data.empty()) throw DataError("train_ctk: empty dataset");
  int num_classes = 0;
  for (const auto& s : data) {
    if (s.label < 0) throw DataError("train_ctk: negative label");
    num_classes = std::max(num_classes, s.label + 1);
  }
  bool multi = false;
  for (const auto& s : data) multi = multi || s.label != data.front().label;
  if (!multi) throw DataError("train_ctk: dataset has a single class");
  if (!(cfg.learning_rate >= 0.0) || cfg.epochs < 0) throw UsageError("train_ctk: bad configuration");

  CtkTrainState st;
  st.stack = ChannelKernelStack::perturbed_identity(cfg.seed, cfg.init_noise);
  st.head = LinearHead(num_classes, kPooledFeatures);
  st.learning_rate = cfg.learning_rate;

  auto ev = detail::ctk_loss_and_gradient(data, st.stack, st.head, cfg.train_stack);
  st.loss_history.push_back(ev.loss);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    st.epoch = epoch + 1;
    LinearHead head = st.head;
    ChannelKernelStack stack = st.stack;
    const double lr = st.learning_rate;
    for (std::size_t i = 0; i < head.weights.size(); ++i) head.weights[i] -= lr * ev.dhead.weights[i];
    for (int c = 0; c < head.num_classes; ++c) head.bias[c] -= lr * ev.dhead.bias[c];
    if (cfg.train_stack)
      for (int k = 0; k < 3; ++k) stack.layers[k] -= lr * ev.dstack[k];
    auto next = detail::ctk_loss_and_gradient(data, stack, head, cfg.train_stack);
    if (std::isfinite(next.loss) && next.loss <= ev.loss) {
      st.head = std::move(head);
      st.stack = stack;
      ev = std::move(next);
    } else {
      st.learning_rate *= 0.5;
    }
    st.loss_history.push_back(ev.loss);
  }
  return st;
}

inline std::vector<double> ctk_predict(const CtkTrainState& st, const std::vector<SceneFlowMap>& sfms) {
  return st.head.probabilities(pooled_features(ctk_encode(sfms, st.stack)));
}

// ---------------------------------------------------------------------------
// stack file: "sfam-ctk 1" then the three row-major 3x3 matrices

inline void write_stack(const std::filesystem::path& path, const ChannelKernelStack& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sfam-ctk 1\n";
  for (const auto& w : s.layers) {
    for (int i = 0; i < 9; ++i) out << detail::format_double(w(i / 3, i % 3)) << (i == 8 ? '\n' : ' ');
  }
}

inline ChannelKernelStack read_stack(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "sfam-ctk" || version != 1)
    throw DataError("not a version-1 CTK stack file: " + path.string());
  ChannelKernelStack s;
  for (auto& w : s.layers)
    for (int i = 0; i < 9; ++i)
      if (!(in >> w(i / 3, i % 3))) throw DataError("CTK stack file needs 27 numbers: " + path.string());
  if (!s.finite()) throw DataError("CTK stack file has non-finite weights");
  return s;
}

}  // namespace sfam
