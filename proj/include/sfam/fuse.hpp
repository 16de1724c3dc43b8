#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sfam/encode.hpp"
#include "sfam/error.hpp"
#include "sfam/features.hpp"
#include "sfam/rgbd.hpp"

namespace sfam {

struct ScoreVector {
  std::vector<double> scores;
  VariantTag channel_tag = VariantTag::D;

  void validate() const {
    if (scores.empty()) throw DataError("score vector is empty");
    bool any = false;
    for (double s : scores) {
      if (!std::isfinite(s) || s < 0.0) throw DataError("score vector entries must be finite and >= 0");
      any = any || s > 0.0;
    }
    if (!any) throw DataError("score vector is all zero");
  }
};

enum class ClassifierKind { linear_softmax, nearest_class_mean };

inline std::string_view to_string(ClassifierKind k) {
  return k == ClassifierKind::linear_softmax ? "linear" : "ncm";
}

inline ClassifierKind classifier_kind_from_string(std::string_view s) {
  if (s == "linear" || s == "linear-softmax") return ClassifierKind::linear_softmax;
  if (s == "ncm" || s == "nearest-class-mean") return ClassifierKind::nearest_class_mean;
  throw UsageError("unknown classifier kind: " + std::string(s));
}

struct ClassifierTrainConfig {
  int epochs = 400;
  double learning_rate = 1.0;
  double weight_decay = 1e-4;
};

struct ClassifierModel {
  ClassifierKind kind = ClassifierKind::linear_softmax;
  VariantTag variant_tag = VariantTag::D;
  int num_classes = 0;
  int feature_dim = kPooledFeatures;
  bool trained = false;
  LinearHead head;                         // linear_softmax
  std::vector<std::vector<double>> means;  // nearest_class_mean, one per class
};

struct LabeledMap {
  ActionMap map;
  int label = 0;
};

namespace detail {

/// Full-batch gradient descent with L2 decay; a step that raises the
/// objective is rejected and the rate halved.
inline LinearHead fit_softmax(const std::vector<std::vector<double>>& xs, const std::vector<int>& labels,
                              int num_classes, const ClassifierTrainConfig& cfg) {
  const int dim = static_cast<int>(xs.front().size());
  LinearHead head(num_classes, dim);
  auto objective = [&](const LinearHead& h, LinearHead* grad) {
    double f = cross_entropy(h, xs, labels, grad, nullptr);
    for (std::size_t i = 0; i < h.weights.size(); ++i) {
      f += 0.5 * cfg.weight_decay * h.weights[i] * h.weights[i];
      if (grad) grad->weights[i] += cfg.weight_decay * h.weights[i];
    }
    return f;
  };
  LinearHead grad;
  double f = objective(head, &grad);
  double lr = cfg.learning_rate;
  for (int e = 0; e < cfg.epochs && lr > 1e-12; ++e) {
    LinearHead trial = head;
    for (std::size_t i = 0; i < trial.weights.size(); ++i) trial.weights[i] -= lr * grad.weights[i];
    for (int c = 0; c < num_classes; ++c) trial.bias[c] -= lr * grad.bias[c];
    LinearHead trial_grad;
    const double ft = objective(trial, &trial_grad);
    if (std::isfinite(ft) && ft <= f) {
      head = std::move(trial);
      grad = std::move(trial_grad);
      f = ft;
    } else {
      lr *= 0.5;
    }
  }
  return head;
}

}  // namespace detail

/// Fits a lightweight classifier on the pooled 8-bit image features of the maps.
inline ClassifierModel train_channel(const std::vector<LabeledMap>& data, ClassifierKind kind,
                                     const ClassifierTrainConfig& cfg = {}) {
  if (data.empty()) throw DataError("train_channel: no training maps");
  ClassifierModel m;
  m.kind = kind;
  m.variant_tag = data.front().map.variant_tag;
  std::vector<std::vector<double>> xs;
  std::vector<int> labels;
  for (const auto& s : data) {
    if (s.map.variant_tag != m.variant_tag) throw DataError("train_channel: mixed variant tags");
    if (s.label < 0) throw DataError("train_channel: negative label");
    m.num_classes = std::max(m.num_classes, s.label + 1);
    xs.push_back(image_features(s.map));
    labels.push_back(s.label);
  }
  if (std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); }))
    throw DataError("train_channel: training data has a single class");

  if (kind == ClassifierKind::linear_softmax) {
    m.head = detail::fit_softmax(xs, labels, m.num_classes, cfg);
  } else {
    m.means.assign(m.num_classes, std::vector<double>(m.feature_dim, 0.0));
    std::vector<int> count(m.num_classes, 0);
    for (std::size_t s = 0; s < xs.size(); ++s) {
      ++count[labels[s]];
      for (int i = 0; i < m.feature_dim; ++i) m.means[labels[s]][i] += xs[s][i];
    }
    for (int c = 0; c < m.num_classes; ++c) {
      if (count[c] == 0) throw DataError("train_channel: class " + std::to_string(c) + " has no samples");
      for (double& v : m.means[c]) v /= count[c];
    }
  }
  m.trained = true;
  return m;
}

inline ScoreVector predict_scores_from_features(const ClassifierModel& m, std::span<const double> x) {
  if (!m.trained) throw DataError("predict_scores: model is not trained");
  ScoreVector out{{}, m.variant_tag};
  if (m.kind == ClassifierKind::linear_softmax) {
    out.scores = m.head.probabilities(x);
    return out;
  }
  constexpr double eps = 1e-12;
  double total = 0.0;
  for (const auto& mean : m.means) {
    double d2 = 0.0;
    for (int i = 0; i < m.feature_dim; ++i) d2 += (x[i] - mean[i]) * (x[i] - mean[i]);
    out.scores.push_back(1.0 / (std::sqrt(d2) + eps));
    total += out.scores.back();
  }
  for (double& s : out.scores) s /= total;
  return out;
}

inline ScoreVector predict_scores(const ClassifierModel& m, const ActionMap& map) {
  if (!m.trained) throw DataError("predict_scores: model is not trained");
  if (map.variant_tag != m.variant_tag)
    throw DataError("predict_scores: model trained on " + std::string(to_string(m.variant_tag)) +
                    ", map is " + std::string(to_string(map.variant_tag)));
  return predict_scores_from_features(m, image_features(map));
}

// ---------------------------------------------------------------------------
// late fusion

enum class FusionRule { multiply, average, max };

inline std::string_view to_string(FusionRule r) {
  switch (r) {
    case FusionRule::multiply: return "multiply";
    case FusionRule::average: return "average";
    case FusionRule::max: return "max";
  }
  return "?";
}

inline FusionRule fusion_rule_from_string(std::string_view s) {
  if (s == "multiply") return FusionRule::multiply;
  if (s == "average") return FusionRule::average;
  if (s == "max") return FusionRule::max;
  throw UsageError("unknown fusion rule: " + std::string(s));
}

/// Lowest index wins ties.
inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct FusionResult {
  std::vector<double> scores;
  int predicted = 0;
};

inline FusionResult fuse_scores(const std::vector<std::vector<double>>& vectors, FusionRule rule) {
  if (vectors.size() < 2) throw DataError("fuse_scores: need at least two score vectors");
  const std::size_t c = vectors.front().size();
  if (c == 0) throw DataError("fuse_scores: empty score vector");
  for (const auto& v : vectors)
    if (v.size() != c) throw DataError("fuse_scores: score vectors differ in length");
  FusionResult r;
  r.scores.resize(c);
  std::vector<double> column(vectors.size());
  for (std::size_t i = 0; i < c; ++i) {
    // Reducing in sorted order makes the result independent of channel order.
    for (std::size_t k = 0; k < vectors.size(); ++k) column[k] = vectors[k][i];
    std::sort(column.begin(), column.end());
    double acc = column.front();
    for (std::size_t k = 1; k < column.size(); ++k) {
      switch (rule) {
        case FusionRule::multiply: acc *= column[k]; break;
        case FusionRule::average: acc += column[k]; break;
        case FusionRule::max: acc = std::max(acc, column[k]); break;
      }
    }
    r.scores[i] = rule == FusionRule::average ? acc / static_cast<double>(column.size()) : acc;
  }
  r.predicted = argmax(r.scores);
  return r;
}

inline FusionResult fuse_scores(const std::vector<ScoreVector>& vectors, FusionRule rule) {
  std::vector<std::vector<double>> raw;
  for (const auto& v : vectors) raw.push_back(v.scores);
  return fuse_scores(raw, rule);
}

// ---------------------------------------------------------------------------
// text files: scores "id s1 ... sC", labels "id label"

using ScoreTable = std::vector<std::pair<std::string, std::vector<double>>>;

inline void write_scores(const std::filesystem::path& path, const ScoreTable& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [id, s] : rows) {
    out << id;
    for (double v : s) out << ' ' << detail::format_double(v);
    out << '\n';
  }
}

inline ScoreTable read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  ScoreTable rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id;
    ss >> id;
    std::vector<double> s;
    double v;
    while (ss >> v) s.push_back(v);
    if (!ss.eof() || s.empty()) throw DataError("malformed score line in " + path.string() + ": " + line);
    if (!rows.empty() && rows.front().second.size() != s.size())
      throw DataError("inconsistent class count in " + path.string());
    rows.emplace_back(id, std::move(s));
  }
  return rows;
}

inline void write_labels(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, int>>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [id, l] : rows) out << id << ' ' << l << '\n';
}

inline std::map<std::string, int> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::map<std::string, int> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id;
    int l;
    if (!(ss >> id >> l)) throw DataError("malformed label line in " + path.string() + ": " + line);
    out[id] = l;
  }
  return out;
}

// ---------------------------------------------------------------------------
// model file

inline void write_model(const std::filesystem::path& path, const ClassifierModel& m) {
  if (!m.trained) throw DataError("write_model: model is not trained");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sfam-classifier 1\n"
      << to_string(m.kind) << ' ' << to_string(m.variant_tag) << ' ' << m.num_classes << ' '
      << m.feature_dim << '\n';
  auto row = [&](const double* p, int n) {
    for (int i = 0; i < n; ++i) out << detail::format_double(p[i]) << (i + 1 == n ? '\n' : ' ');
  };
  if (m.kind == ClassifierKind::linear_softmax) {
    row(m.head.bias.data(), m.num_classes);
    for (int c = 0; c < m.num_classes; ++c)
      row(m.head.weights.data() + static_cast<std::size_t>(c) * m.feature_dim, m.feature_dim);
  } else {
    for (const auto& mean : m.means) row(mean.data(), m.feature_dim);
  }
}

inline ClassifierModel read_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic, kind, tag;
  int version = 0;
  ClassifierModel m;
  if (!(in >> magic >> version >> kind >> tag >> m.num_classes >> m.feature_dim) ||
      magic != "sfam-classifier" || version != 1)
    throw DataError("not a version-1 classifier file: " + path.string());
  m.kind = classifier_kind_from_string(kind);
  m.variant_tag = variant_from_string(tag);
  if (m.num_classes < 2 || m.feature_dim != kPooledFeatures)
    throw DataError("classifier file has bad dimensions: " + path.string());
  auto read_n = [&](double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(in >> p[i]) || !std::isfinite(p[i])) throw DataError("truncated classifier file: " + path.string());
  };
  if (m.kind == ClassifierKind::linear_softmax) {
    m.head = LinearHead(m.num_classes, m.feature_dim);
    read_n(m.head.bias.data(), m.head.bias.size());
    read_n(m.head.weights.data(), m.head.weights.size());
  } else {
    m.means.assign(m.num_classes, std::vector<double>(m.feature_dim));
    for (auto& mean : m.means) read_n(mean.data(), mean.size());
  }
  m.trained = true;
  return m;
}

}  // namespace sfam
