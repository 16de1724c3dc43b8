#pragma once

#include <openssl/evp.h>

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sfam/calibrate.hpp"
#include "sfam/ctk.hpp"
#include "sfam/encode.hpp"
#include "sfam/error.hpp"
#include "sfam/fuse.hpp"
#include "sfam/pdflow.hpp"
#include "sfam/rankpool.hpp"
#include "sfam/rgbd.hpp"
#include "sfam/synth.hpp"

namespace sfam {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// seeds and hashing

/// Independent seed for a named stage, derived from the root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : name) h = (h ^ c) * 1099511628211ull;
  std::uint64_t z = root ^ h;  // splitmix64 finalizer
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// ---------------------------------------------------------------------------
// dataset index: "id label manifest", manifest path relative to the index

struct IndexEntry {
  std::string id;
  int label = 0;
  fs::path manifest;  // absolute once loaded
};

inline void write_index(const fs::path& path, const std::vector<IndexEntry>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows)
    out << r.id << ' ' << r.label << ' ' << fs::relative(r.manifest, path.parent_path()).generic_string() << '\n';
}

inline std::vector<IndexEntry> read_index(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open index " + path.string());
  std::vector<IndexEntry> rows;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    IndexEntry e;
    std::string rel;
    if (!(ss >> e.id >> e.label >> rel)) throw DataError("malformed index line in " + path.string() + ": " + line);
    if (!seen.insert(e.id).second) throw DataError("duplicate id in index: " + e.id);
    e.manifest = path.parent_path() / rel;
    rows.push_back(std::move(e));
  }
  if (rows.empty()) throw DataError("empty index " + path.string());
  return rows;
}

// ---------------------------------------------------------------------------
// per-sequence stage helpers shared by the CLI subcommands

inline RgbdSequence prepare_sequence(RgbdSequence seq, const std::optional<Homography>& depth_to_rgb,
                                     bool background_removal, double tolerance) {
  for (auto& f : seq.frames) {
    if (depth_to_rgb) f.depth = warp_depth(f.depth, *depth_to_rgb);
    if (background_removal) f = remove_background(f, tolerance);
  }
  return seq;
}

inline std::vector<SceneFlowField> sequence_flows(const RgbdSequence& seq, const SolverConfig& cfg) {
  std::vector<SceneFlowField> out;
  for (std::size_t t = 0; t + 1 < seq.frames.size(); ++t)
    out.push_back(compute_scene_flow(seq.frames[t], seq.frames[t + 1], cfg));
  return out;
}

inline fs::path flow_file_name(int pair_index) {
  char name[32];
  std::snprintf(name, sizeof name, "%04d.flow", pair_index);
  return name;
}

/// Reads every `*.flow` file of a directory in name order.
inline std::vector<SceneFlowField> read_flow_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw DataError("not a flow directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".flow") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no flow files in " + dir.string());
  std::vector<SceneFlowField> out;
  for (const auto& f : files) out.push_back(read_flow(f));
  return out;
}

inline ActionMap encode_variant(const std::vector<SceneFlowMap>& sfms, VariantTag tag,
                                RankPoolConfig rp, const ChannelKernelStack* stack = nullptr) {
  switch (tag) {
    case VariantTag::D: return sfam_d(sfms);
    case VariantTag::S: return sfam_s(sfms);
    case VariantTag::RPf:
    case VariantTag::RPb:
      rp.direction = tag == VariantTag::RPf ? PoolDirection::forward : PoolDirection::backward;
      return rank_pool_map_sequence(sfms, rp);
    case VariantTag::AMRPf:
    case VariantTag::AMRPb:
      rp.direction = tag == VariantTag::AMRPf ? PoolDirection::forward : PoolDirection::backward;
      return amplitude_rank_pool(sfms, rp);
    case VariantTag::LABRPf:
    case VariantTag::LABRPb:
      rp.direction = tag == VariantTag::LABRPf ? PoolDirection::forward : PoolDirection::backward;
      return lab_rank_pool(sfms, rp);
    case VariantTag::CTKRP:
      if (!stack) throw UsageError("CTKRP encoding needs a trained channel-transform stack");
      return ctk_encode(sfms, *stack);
  }
  throw UsageError("unknown variant");
}

inline ActionMap load_action_map(const fs::path& png_path) {
  const auto m = read_action_map(png_path);
  return denormalize_image(m.image, m.variant_tag, m.normalization);
}

// ---------------------------------------------------------------------------
// evaluation

struct AccuracyRow {
  std::string name;
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct EvalReport {
  std::vector<AccuracyRow> variants;
  std::vector<AccuracyRow> fusions;  // multiply, average, max
  std::map<std::string, std::map<FusionRule, int>> predictions;

  double variant_accuracy(std::string_view name) const {
    for (const auto& r : variants)
      if (r.name == name) return r.accuracy();
    throw UsageError("no variant row " + std::string(name));
  }
  double fusion_accuracy(FusionRule rule) const {
    return fusions.at(static_cast<std::size_t>(rule)).accuracy();
  }
  double best_single() const {
    double b = 0.0;
    for (const auto& r : variants) b = std::max(b, r.accuracy());
    return b;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(18) << "method" << std::setw(10) << "accuracy" << "correct/total\n";
    auto row = [&](const AccuracyRow& r) {
      os << std::setw(18) << r.name << std::setw(10) << std::fixed << std::setprecision(4) << r.accuracy()
         << r.correct << '/' << r.total << '\n';
    };
    for (const auto& r : variants) row(r);
    for (const auto& r : fusions) row(r);
    return os.str();
  }
};

/// Per-variant and fused accuracy over the samples present in every score table.
inline EvalReport evaluate(const std::vector<std::pair<std::string, ScoreTable>>& channels,
                           const std::map<std::string, int>& labels) {
  if (channels.size() < 2) throw UsageError("evaluation needs at least two score channels");
  std::map<std::string, std::vector<std::vector<double>>> by_id;
  EvalReport rep;
  for (const auto& [name, table] : channels) {
    AccuracyRow row{name, 0, 0};
    for (const auto& [id, s] : table) {
      const auto l = labels.find(id);
      if (l == labels.end()) throw DataError("no label for sample " + id);
      ++row.total;
      row.correct += argmax(s) == l->second;
      by_id[id].push_back(s);
    }
    rep.variants.push_back(row);
  }
  for (auto rule : {FusionRule::multiply, FusionRule::average, FusionRule::max}) {
    AccuracyRow row{"fused-" + std::string(to_string(rule)), 0, 0};
    for (const auto& [id, vs] : by_id) {
      if (vs.size() != channels.size()) throw DataError("sample " + id + " is missing from some score files");
      const int p = fuse_scores(vs, rule).predicted;
      rep.predictions[id][rule] = p;
      ++row.total;
      row.correct += p == labels.at(id);
    }
    rep.fusions.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// end-to-end pipeline

struct PipelineConfig {
  SolverConfig solver;
  RankPoolConfig rankpool;
  std::vector<VariantTag> variants{VariantTag::D,   VariantTag::S,     VariantTag::RPf,
                                   VariantTag::RPb, VariantTag::AMRPf, VariantTag::AMRPb};
  FusionRule rule = FusionRule::multiply;
  ClassifierKind classifier = ClassifierKind::linear_softmax;
  ClassifierTrainConfig classifier_train;
  CtkTrainConfig ctk;
  std::uint64_t seed = 0;

  int num_classes = 4;
  int train_per_class = 20;
  int test_per_class = 20;
  synth::DatasetOptions dataset;

  // Existing data instead of synthesis (both or neither).
  std::optional<fs::path> train_index, test_index;
  std::optional<fs::path> homography;
  bool remove_background = true;
  double background_tolerance = kDefaultBackgroundTolerance;

  bool skip_existing = false;
  bool verbose = false;

  void validate() const {
    solver.validate();
    rankpool.validate();
    if (variants.size() < 2) throw UsageError("pipeline needs at least two variants to fuse");
    if (train_index.has_value() != test_index.has_value())
      throw UsageError("give both train and test index files, or neither");
    if (!train_index && (num_classes < 2 || train_per_class < 1 || test_per_class < 1))
      throw UsageError("synthetic dataset needs >= 2 classes and >= 1 sample per class per split");
    for (const auto& p : {train_index, test_index, homography})
      if (p && !fs::exists(*p)) throw DataError("missing input file " + p->string());
  }
};

/// Applies one `key = value` line from a pipeline config file.
inline void apply_pipeline_setting(PipelineConfig& cfg, const std::string& key, const std::string& v) {
  auto num = [&] { return detail::parse_double(key, v); };
  if (key == "seed") cfg.seed = static_cast<std::uint64_t>(std::stoull(v));
  else if (key == "variants") {
    cfg.variants.clear();
    std::string tok;
    for (std::istringstream ss(v); std::getline(ss, tok, ',');)
      if (!tok.empty()) cfg.variants.push_back(variant_from_string(tok));
  } else if (key == "rule") cfg.rule = fusion_rule_from_string(v);
  else if (key == "classifier") cfg.classifier = classifier_kind_from_string(v);
  else if (key == "classifier_epochs") cfg.classifier_train.epochs = static_cast<int>(num());
  else if (key == "classifier_lr") cfg.classifier_train.learning_rate = num();
  else if (key == "rank_lambda") cfg.rankpool.lambda = num();
  else if (key == "rank_max_epochs") cfg.rankpool.max_epochs = static_cast<int>(num());
  else if (key == "ctk_epochs") cfg.ctk.epochs = static_cast<int>(num());
  else if (key == "ctk_lr") cfg.ctk.learning_rate = num();
  else if (key == "num_classes") cfg.num_classes = static_cast<int>(num());
  else if (key == "train_per_class") cfg.train_per_class = static_cast<int>(num());
  else if (key == "test_per_class") cfg.test_per_class = static_cast<int>(num());
  else if (key == "train_index") cfg.train_index = v;
  else if (key == "test_index") cfg.test_index = v;
  else if (key == "homography") cfg.homography = v;
  else if (key == "remove_background") cfg.remove_background = v == "1" || v == "true";
  else if (key == "background_tolerance") cfg.background_tolerance = num();
  else apply_solver_setting(cfg.solver, key, v);
}

/// Reads `key = value` lines (`#` comments) into a settings callback.
inline void read_settings(const fs::path& path, const std::function<void(const std::string&, const std::string&)>& apply) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

namespace detail {

inline nlohmann::json solver_json(const SolverConfig& s) {
  return {{"lambda_i", s.lambda_i},
          {"lambda_d", s.lambda_d},
          {"pyramid_levels", s.pyramid_levels},
          {"iters_per_level", s.iters_per_level},
          {"warps_per_level", s.warps_per_level},
          {"geometric_weight_scale", s.geometric_weight_scale},
          {"geometric_weight", s.geometric_weight == GeometricWeight::constant ? "constant" : "inverse_square_depth"},
          {"primal_step", s.primal_step},
          {"dual_step", s.dual_step},
          {"convergence_tol", s.convergence_tol},
          {"r_min", s.r_min},
          {"min_level_size", s.min_level_size}};
}

/// Stage bookkeeping in `manifest.json`: config, input and output hashes.
class RunLog {
public:
  RunLog(fs::path root, bool skip_existing, bool verbose)
      : root_(std::move(root)), skip_(skip_existing), verbose_(verbose) {
    const auto p = root_ / "manifest.json";
    if (fs::exists(p)) {
      std::ifstream in(p);
      try {
        previous_ = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception&) {
        previous_ = nlohmann::json::object();
      }
    }
    doc_ = {{"format", "sfam-run 1"}, {"stages", nlohmann::json::array()}};
  }

  nlohmann::json& doc() { return doc_; }

  /// Runs `body` unless an identical earlier run left hash-matching outputs.
  /// `body` returns the output files it wrote.
  void stage(const std::string& name, const nlohmann::json& config, const std::vector<fs::path>& inputs,
             const std::function<std::vector<fs::path>()>& body) {
    nlohmann::json entry{{"name", name}, {"config", config}, {"inputs", hashes(inputs)}};
    if (skip_ && reusable(name, entry)) {
      if (verbose_) std::cerr << "[" << name << "] up to date, skipped\n";
      entry["outputs"] = find_previous(name)->at("outputs");
      doc_["stages"].push_back(entry);
      save();
      return;
    }
    if (verbose_) std::cerr << "[" << name << "] running\n";
    std::vector<fs::path> outputs;
    try {
      outputs = body();
    } catch (const Error& e) {
      throw Error(e.kind(), "stage " + name + ": " + e.what());
    }
    entry["outputs"] = hashes(outputs);
    doc_["stages"].push_back(entry);
    save();
  }

  std::vector<fs::path> outputs_of(const std::string& name) const {
    for (const auto& s : doc_["stages"])
      if (s["name"] == name) {
        std::vector<fs::path> out;
        for (const auto& [rel, h] : s["outputs"].items()) out.push_back(root_ / rel);
        return out;
      }
    return {};
  }

private:
  nlohmann::json hashes(const std::vector<fs::path>& files) const {
    nlohmann::json h = nlohmann::json::object();
    for (const auto& f : files) {
      const auto rel = f.lexically_relative(root_);
      const bool inside = !rel.empty() && *rel.begin() != "..";
      h[inside ? rel.generic_string() : fs::absolute(f).generic_string()] = sha256_file(f);
    }
    return h;
  }

  const nlohmann::json* find_previous(const std::string& name) const {
    if (!previous_.contains("stages")) return nullptr;
    for (const auto& s : previous_["stages"])
      if (s.value("name", "") == name) return &s;
    return nullptr;
  }

  bool reusable(const std::string& name, const nlohmann::json& entry) const {
    const auto* prev = find_previous(name);
    if (!prev || prev->value("config", nlohmann::json()) != entry["config"] ||
        prev->value("inputs", nlohmann::json()) != entry["inputs"] || !prev->contains("outputs"))
      return false;
    for (const auto& [rel, h] : (*prev)["outputs"].items()) {
      const fs::path p = fs::path(rel).is_absolute() ? fs::path(rel) : root_ / rel;
      if (!fs::exists(p) || sha256_file(p) != h.get<std::string>()) return false;
    }
    return true;
  }

  void save() const {
    std::ofstream out(root_ / "manifest.json");
    out << doc_.dump(2) << '\n';
  }

  fs::path root_;
  bool skip_;
  bool verbose_;
  nlohmann::json previous_ = nlohmann::json::object();
  nlohmann::json doc_;
};

inline std::vector<fs::path> sequence_files(const fs::path& manifest) {
  std::vector<fs::path> files{manifest};
  std::ifstream in(manifest);
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ss(line);
    std::string a, b;
    if (ss >> a >> b && a.find('=') == std::string::npos) {
      files.push_back(manifest.parent_path() / a);
      files.push_back(manifest.parent_path() / b);
    }
  }
  return files;
}

}  // namespace detail

struct PipelineResult {
  EvalReport report;
  fs::path report_path;
};

/// synth (or ingest) -> flow -> [train-ctk] -> encode -> train -> predict -> fuse/eval,
/// with every intermediate artifact under `out`.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  detail::RunLog log(out, cfg.skip_existing, cfg.verbose);
  log.doc()["seed"] = cfg.seed;

  const bool want_ctk = std::find(cfg.variants.begin(), cfg.variants.end(), VariantTag::CTKRP) != cfg.variants.end();
  std::optional<Homography> h;
  if (cfg.homography) h = read_homography(*cfg.homography);

  // 1. data
  fs::path train_index = out / "data" / "train.txt", test_index = out / "data" / "test.txt";
  if (cfg.train_index) {
    train_index = *cfg.train_index;
    test_index = *cfg.test_index;
  } else {
    const nlohmann::json c{{"num_classes", cfg.num_classes},
                           {"train_per_class", cfg.train_per_class},
                           {"test_per_class", cfg.test_per_class},
                           {"width", cfg.dataset.width},
                           {"height", cfg.dataset.height},
                           {"seed", cfg.seed}};
    log.stage("synth", c, {}, [&] {
      std::vector<fs::path> written;
      for (const auto& [split, per_class] : {std::pair{"train", cfg.train_per_class}, {"test", cfg.test_per_class}}) {
        const auto seed = derive_seed(cfg.seed, std::string("synth-") + split);
        auto data = synth::generate_action_dataset(cfg.num_classes, per_class, seed, cfg.dataset);
        std::vector<IndexEntry> rows;
        for (auto& s : data) {
          s.sequence.sequence_id = std::string(split) + "_" + s.sequence.sequence_id;
          const auto dir = out / "data" / split / s.sequence.sequence_id;
          save_sequence(s.sequence, dir);
          rows.push_back({s.sequence.sequence_id, s.label, dir / "manifest.txt"});
          for (const auto& f : detail::sequence_files(dir / "manifest.txt")) written.push_back(f);
        }
        const auto idx = out / "data" / (std::string(split) + ".txt");
        write_index(idx, rows);
        written.push_back(idx);
      }
      return written;
    });
  }
  const auto train = read_index(train_index), test = read_index(test_index);
  std::vector<IndexEntry> all = train;
  all.insert(all.end(), test.begin(), test.end());
  {
    std::set<std::string> ids;
    for (const auto& e : all)
      if (!ids.insert(e.id).second) throw DataError("id appears in both splits: " + e.id);
  }

  // 2. flow
  auto flow_dir = [&](const IndexEntry& e) { return out / "flows" / e.id; };
  {
    std::vector<fs::path> inputs{train_index, test_index};
    for (const auto& e : all)
      for (const auto& f : detail::sequence_files(e.manifest)) inputs.push_back(f);
    if (h) inputs.push_back(*cfg.homography);
    const nlohmann::json c{{"solver", detail::solver_json(cfg.solver)},
                           {"remove_background", cfg.remove_background},
                           {"background_tolerance", cfg.background_tolerance}};
    log.stage("flow", c, inputs, [&] {
      std::vector<fs::path> written;
      for (const auto& e : all) {
        const auto seq = prepare_sequence(load_sequence(e.manifest), h, cfg.remove_background,
                                          cfg.background_tolerance);
        const auto flows = sequence_flows(seq, cfg.solver);
        fs::create_directories(flow_dir(e));
        for (std::size_t t = 0; t < flows.size(); ++t) {
          const auto p = flow_dir(e) / flow_file_name(static_cast<int>(t) + 1);
          write_flow(p, flows[t]);
          written.push_back(p);
        }
      }
      return written;
    });
  }
  const auto flow_outputs = log.outputs_of("flow");
  auto sfms_of = [&](const IndexEntry& e) { return build_sfm_sequence(read_flow_dir(flow_dir(e))); };

  // 3. channel transform kernels
  std::optional<ChannelKernelStack> stack;
  const auto stack_path = out / "models" / "ctk_stack.txt";
  if (want_ctk) {
    CtkTrainConfig ctk = cfg.ctk;
    ctk.seed = derive_seed(cfg.seed, "train-ctk");
    const nlohmann::json c{{"epochs", ctk.epochs}, {"learning_rate", ctk.learning_rate}, {"seed", ctk.seed}};
    log.stage("train-ctk", c, flow_outputs, [&] {
      std::vector<CtkSample> data;
      for (const auto& e : train) data.push_back({sfms_of(e), e.label});
      const auto st = train_ctk(data, ctk);
      fs::create_directories(stack_path.parent_path());
      write_stack(stack_path, st.stack);
      return std::vector<fs::path>{stack_path};
    });
    stack = read_stack(stack_path);
  }

  // 4. encode
  auto map_path = [&](const IndexEntry& e, VariantTag t) {
    return out / "maps" / e.id / (std::string(to_string(t)) + ".png");
  };
  {
    nlohmann::json variants = nlohmann::json::array();
    for (auto t : cfg.variants) variants.push_back(to_string(t));
    const nlohmann::json c{{"variants", variants},
                           {"rank_lambda", cfg.rankpool.lambda},
                           {"rank_max_epochs", cfg.rankpool.max_epochs},
                           {"rank_tol", cfg.rankpool.tol}};
    auto inputs = flow_outputs;
    if (want_ctk) inputs.push_back(stack_path);
    log.stage("encode", c, inputs, [&] {
      std::vector<fs::path> written;
      for (const auto& e : all) {
        const auto sfms = sfms_of(e);
        fs::create_directories(out / "maps" / e.id);
        for (auto t : cfg.variants) {
          const auto p = map_path(e, t);
          write_action_map(p, encode_variant(sfms, t, cfg.rankpool, stack ? &*stack : nullptr));
          written.push_back(p);
          written.push_back(p.string() + ".txt");
        }
      }
      return written;
    });
  }
  const auto map_outputs = log.outputs_of("encode");

  // 5. train one classifier per variant, 6. score the test split
  auto model_path = [&](VariantTag t) { return out / "models" / (std::string(to_string(t)) + ".model"); };
  auto score_path = [&](VariantTag t) { return out / "scores" / (std::string(to_string(t)) + ".txt"); };
  {
    const nlohmann::json c{{"classifier", to_string(cfg.classifier)},
                           {"epochs", cfg.classifier_train.epochs},
                           {"learning_rate", cfg.classifier_train.learning_rate},
                           {"weight_decay", cfg.classifier_train.weight_decay}};
    log.stage("train", c, map_outputs, [&] {
      std::vector<fs::path> written;
      fs::create_directories(out / "models");
      for (auto t : cfg.variants) {
        std::vector<LabeledMap> data;
        for (const auto& e : train) data.push_back({load_action_map(map_path(e, t)), e.label});
        write_model(model_path(t), train_channel(data, cfg.classifier, cfg.classifier_train));
        written.push_back(model_path(t));
      }
      return written;
    });
  }
  {
    auto inputs = log.outputs_of("train");
    inputs.insert(inputs.end(), map_outputs.begin(), map_outputs.end());
    log.stage("predict", nlohmann::json::object(), inputs, [&] {
      std::vector<fs::path> written;
      fs::create_directories(out / "scores");
      for (auto t : cfg.variants) {
        const auto model = read_model(model_path(t));
        ScoreTable rows;
        for (const auto& e : test) rows.emplace_back(e.id, predict_scores(model, load_action_map(map_path(e, t))).scores);
        write_scores(score_path(t), rows);
        written.push_back(score_path(t));
      }
      return written;
    });
  }

  // 7. fuse and report
  PipelineResult res;
  res.report_path = out / "report.txt";
  std::vector<std::pair<std::string, ScoreTable>> channels;
  for (auto t : cfg.variants) channels.emplace_back(std::string(to_string(t)), read_scores(score_path(t)));
  std::map<std::string, int> labels;
  for (const auto& e : test) labels[e.id] = e.label;
  res.report = evaluate(channels, labels);
  log.stage("fuse", {{"rule", to_string(cfg.rule)}}, log.outputs_of("predict"), [&] {
    const auto pred = out / "predictions.txt";
    std::ofstream p(pred);
    for (const auto& [id, by_rule] : res.report.predictions)
      p << id << ' ' << by_rule.at(cfg.rule) << ' ' << labels.at(id) << '\n';
    p.close();
    std::ofstream r(res.report_path);
    r << res.report.table();
    r.close();
    return std::vector<fs::path>{pred, res.report_path};
  });
  return res;
}

}  // namespace sfam
