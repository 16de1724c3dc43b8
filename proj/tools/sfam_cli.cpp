// Command-line driver: one subcommand per pipeline stage, plus `pipeline`.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sfam/sfam.hpp"

namespace fs = std::filesystem;
using namespace sfam;

namespace {

synth::MotionKind motion_from_string(const std::string& s) {
  if (s == "translate") return synth::MotionKind::translate_xy;
  if (s == "approach") return synth::MotionKind::approach_z;
  if (s == "rotate") return synth::MotionKind::rotate_in_plane;
  if (s == "composite") return synth::MotionKind::composite;
  throw UsageError("unknown motion kind: " + s);
}

std::vector<VariantTag> variants_for(const std::string& family, const std::string& direction) {
  const bool fwd = direction == "forward" || direction == "both";
  const bool bwd = direction == "backward" || direction == "both";
  auto pair = [&](VariantTag f, VariantTag b) {
    std::vector<VariantTag> v;
    if (fwd) v.push_back(f);
    if (bwd) v.push_back(b);
    return v;
  };
  if (family == "d") return {VariantTag::D};
  if (family == "s") return {VariantTag::S};
  if (family == "ctkrp") return {VariantTag::CTKRP};
  if (family == "rp") return pair(VariantTag::RPf, VariantTag::RPb);
  if (family == "amrp") return pair(VariantTag::AMRPf, VariantTag::AMRPb);
  if (family == "labrp") return pair(VariantTag::LABRPf, VariantTag::LABRPb);
  throw UsageError("unknown variant family: " + family);
}

SolverConfig solver_from(const std::string& config_path) {
  SolverConfig cfg;
  if (!config_path.empty())
    read_settings(config_path, [&](const std::string& k, const std::string& v) { apply_solver_setting(cfg, k, v); });
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  bool dataset = false;
  int classes = 4, per_class = 10;
  std::uint64_t seed = 0;
  std::string motion = "translate";
  double magnitude = 1.0, direction_deg = 0.0, depth = 1.0, noise = 0.0;
  int frames = 2, width = 64, height = 64;
  bool object = false;
  std::vector<double> misalign;
  int matches = 0;
};

void run_synth(const SynthArgs& a) {
  if (a.dataset) {
    const auto data = synth::generate_action_dataset(a.classes, a.per_class, a.seed);
    std::vector<IndexEntry> rows;
    for (const auto& s : data) {
      const auto dir = fs::path(a.out) / s.sequence.sequence_id;
      save_sequence(s.sequence, dir);
      rows.push_back({s.sequence.sequence_id, s.label, dir / "manifest.txt"});
    }
    write_index(fs::path(a.out) / "index.txt", rows);
    std::cout << "wrote " << rows.size() << " sequences and " << (fs::path(a.out) / "index.txt").string() << "\n";
    return;
  }
  synth::SyntheticSceneSpec spec;
  spec.motion_kind = motion_from_string(a.motion);
  spec.magnitude = a.magnitude;
  spec.direction = a.direction_deg * std::numbers::pi / 180.0;
  spec.num_frames = a.frames;
  spec.width = a.width;
  spec.height = a.height;
  spec.plane_depth = a.depth;
  spec.texture_seed = a.seed;
  spec.depth_noise_sigma = a.noise;
  spec.layout = a.object ? synth::Layout::object_on_background : synth::Layout::full_plane;
  if (!a.misalign.empty()) {
    if (a.misalign.size() != 9) throw UsageError("--misalign takes 9 numbers (row-major 3x3)");
    Eigen::Matrix3d m;
    for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = a.misalign[i];
    spec.misalignment = Homography(m);
  }
  const fs::path out(a.out);
  const auto gen = synth::generate_sequence(spec, out.filename().string());
  save_sequence(gen.sequence, out);
  fs::create_directories(out / "ground_truth");
  for (std::size_t t = 0; t < gen.ground_truth.size(); ++t)
    write_flow(out / "ground_truth" / flow_file_name(static_cast<int>(t) + 1), gen.ground_truth[t]);
  write_homography(out / "misalignment.txt", gen.misalignment);
  if (a.matches > 0) {
    const auto [ms, truth] = synth::synthetic_matches(gen.misalignment, a.matches, 0, 0.5, a.width, a.height,
                                                      derive_seed(a.seed, "matches"));
    write_matches(out / "matches.txt", ms);
  }
  std::cout << "wrote " << gen.sequence.frames.size() << " frames to " << out.string() << "\n";
}

struct CalibrateArgs {
  std::string matches, out, inliers_out, apply, apply_out;
  bool no_ransac = false;
  double threshold = 2.0;
  int max_iters = 1000;
  std::uint64_t seed = 0;
};

void run_calibrate(const CalibrateArgs& a) {
  const auto ms = read_matches(a.matches);
  Homography h;
  std::vector<bool> inliers(ms.size(), true);
  if (a.no_ransac) {
    h = refine_homography(dlt_homography(ms), ms).h;
  } else {
    RansacOptions opt;
    opt.inlier_threshold = a.threshold;
    opt.max_iters = a.max_iters;
    opt.seed = a.seed;
    auto r = ransac_homography(ms, opt);
    h = r.h;
    inliers = r.inliers;
  }
  write_homography(a.out, h);
  if (!a.inliers_out.empty()) {
    std::ofstream m(a.inliers_out);
    for (bool b : inliers) m << (b ? 1 : 0) << '\n';
  }
  std::vector<PointMatch> kept;
  for (std::size_t i = 0; i < ms.size(); ++i)
    if (inliers[i]) kept.push_back(ms[i]);
  std::cout << "inliers " << kept.size() << "/" << ms.size() << ", mean symmetric transfer error "
            << mean_symmetric_transfer_error(h, kept) << " px\n";
  if (!a.apply.empty()) {
    if (a.apply_out.empty()) throw UsageError("--apply needs --apply-out");
    auto seq = load_sequence(a.apply);
    for (auto& f : seq.frames) f.depth = warp_depth(f.depth, h);
    save_sequence(seq, a.apply_out);
  }
}

struct FlowArgs {
  std::string sequence, out_dir, config, homography;
  bool keep_background = false;
  double tolerance = kDefaultBackgroundTolerance;
};

void run_flow(const FlowArgs& a) {
  const auto cfg = solver_from(a.config);
  std::optional<Homography> h;
  if (!a.homography.empty()) h = read_homography(a.homography);
  const auto seq = prepare_sequence(load_sequence(a.sequence), h, !a.keep_background, a.tolerance);
  fs::create_directories(a.out_dir);
  for (std::size_t t = 0; t + 1 < seq.frames.size(); ++t) {
    SolverTrace trace;
    const auto f = compute_scene_flow(seq.frames[t], seq.frames[t + 1], cfg, &trace);
    write_flow(fs::path(a.out_dir) / flow_file_name(static_cast<int>(t) + 1), f);
    std::cout << "pair " << t + 1 << ": final energy "
              << (trace.level_energy.empty() || trace.level_energy.back().empty() ? 0.0
                                                                                   : trace.level_energy.back().back())
              << "\n";
  }
}

struct EncodeArgs {
  std::string flow_dir, out_dir, variant = "rp", direction = "both", stack;
  double lambda = 1.0;
  int max_epochs = 2000;
};

void run_encode(const EncodeArgs& a) {
  const auto sfms = build_sfm_sequence(read_flow_dir(a.flow_dir));
  RankPoolConfig rp;
  rp.lambda = a.lambda;
  rp.max_epochs = a.max_epochs;
  rp.validate();
  std::optional<ChannelKernelStack> stack;
  if (!a.stack.empty()) stack = read_stack(a.stack);
  fs::create_directories(a.out_dir);
  for (auto tag : variants_for(a.variant, a.direction)) {
    const auto p = fs::path(a.out_dir) / (std::string(to_string(tag)) + ".png");
    write_action_map(p, encode_variant(sfms, tag, rp, stack ? &*stack : nullptr));
    std::cout << p.string() << "\n";
  }
}

struct TrainCtkArgs {
  std::string index, flow_root, out, head_out;
  CtkTrainConfig cfg;
};

void run_train_ctk(const TrainCtkArgs& a) {
  std::vector<CtkSample> data;
  for (const auto& e : read_index(a.index))
    data.push_back({build_sfm_sequence(read_flow_dir(fs::path(a.flow_root) / e.id)), e.label});
  const auto st = train_ctk(data, a.cfg);
  write_stack(a.out, st.stack);
  if (!a.head_out.empty()) {
    ClassifierModel m;
    m.kind = ClassifierKind::linear_softmax;
    m.variant_tag = VariantTag::CTKRP;
    m.num_classes = st.head.num_classes;
    m.head = st.head;
    m.trained = true;
    m.feature_dim = st.head.feature_dim;
    write_model(a.head_out, m);
  }
  int correct = 0;
  for (const auto& s : data) {
    const auto p = ctk_predict(st, s.sfms);
    correct += argmax(p) == s.label;
  }
  std::cout << "loss " << st.loss_history.front() << " -> " << st.loss_history.back() << ", training accuracy "
            << correct << "/" << data.size() << "\n";
}

struct TrainChannelArgs {
  std::string index, maps_root, variant, kind = "linear", out, score_index, scores_out;
  ClassifierTrainConfig cfg;
};

void run_train_channel(const TrainChannelArgs& a) {
  const auto tag = variant_from_string(a.variant);
  auto map_of = [&](const IndexEntry& e) {
    return load_action_map(fs::path(a.maps_root) / e.id / (std::string(to_string(tag)) + ".png"));
  };
  std::vector<LabeledMap> data;
  for (const auto& e : read_index(a.index)) data.push_back({map_of(e), e.label});
  const auto model = train_channel(data, classifier_kind_from_string(a.kind), a.cfg);
  write_model(a.out, model);
  if (!a.score_index.empty()) {
    if (a.scores_out.empty()) throw UsageError("--score-index needs --scores-out");
    ScoreTable rows;
    for (const auto& e : read_index(a.score_index)) rows.emplace_back(e.id, predict_scores(model, map_of(e)).scores);
    write_scores(a.scores_out, rows);
  }
}

std::vector<std::pair<std::string, ScoreTable>> load_channels(const std::vector<std::string>& files) {
  if (files.size() < 2) throw UsageError("need at least two score files");
  std::vector<std::pair<std::string, ScoreTable>> ch;
  for (const auto& f : files) ch.emplace_back(fs::path(f).stem().string(), read_scores(f));
  return ch;
}

struct FuseArgs {
  std::vector<std::string> scores;
  std::string rule = "multiply", out, labels;
};

void run_fuse(const FuseArgs& a) {
  const auto rule = fusion_rule_from_string(a.rule);
  const auto ch = load_channels(a.scores);
  std::map<std::string, std::vector<std::vector<double>>> by_id;
  for (const auto& [name, table] : ch)
    for (const auto& [id, s] : table) by_id[id].push_back(s);
  std::map<std::string, int> labels;
  if (!a.labels.empty()) labels = read_labels(a.labels);
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw DataError("cannot write " + a.out);
    os = &file;
  }
  int correct = 0, total = 0;
  for (const auto& [id, vs] : by_id) {
    if (vs.size() != ch.size()) throw DataError("sample " + id + " is missing from some score files");
    const auto r = fuse_scores(vs, rule);
    *os << id << ' ' << r.predicted;
    for (double s : r.scores) *os << ' ' << detail::format_double(s);
    *os << '\n';
    if (!labels.empty()) {
      const auto l = labels.find(id);
      if (l == labels.end()) throw DataError("no label for sample " + id);
      ++total;
      correct += r.predicted == l->second;
    }
  }
  if (total) std::cerr << "accuracy " << static_cast<double>(correct) / total << " (" << correct << "/" << total << ")\n";
}

struct EvalArgs {
  std::vector<std::string> scores;
  std::string labels, out;
};

void run_eval(const EvalArgs& a) {
  const auto rep = evaluate(load_channels(a.scores), read_labels(a.labels));
  std::cout << rep.table();
  if (!a.out.empty()) {
    std::ofstream r(a.out);
    r << rep.table();
  }
}

struct PipelineArgs {
  std::string out, config, variants, rule, classifier, train_index, test_index, homography;
  std::optional<std::uint64_t> seed;
  std::optional<int> train_per_class, test_per_class;
  bool skip_existing = false, verbose = false;
};

void run_pipeline_cmd(const PipelineArgs& a) {
  PipelineConfig cfg;
  if (!a.config.empty())
    read_settings(a.config, [&](const std::string& k, const std::string& v) { apply_pipeline_setting(cfg, k, v); });
  if (a.seed) cfg.seed = *a.seed;
  if (!a.variants.empty()) apply_pipeline_setting(cfg, "variants", a.variants);
  if (!a.rule.empty()) cfg.rule = fusion_rule_from_string(a.rule);
  if (!a.classifier.empty()) cfg.classifier = classifier_kind_from_string(a.classifier);
  if (a.train_per_class) cfg.train_per_class = *a.train_per_class;
  if (a.test_per_class) cfg.test_per_class = *a.test_per_class;
  if (!a.train_index.empty()) cfg.train_index = a.train_index;
  if (!a.test_index.empty()) cfg.test_index = a.test_index;
  if (!a.homography.empty()) cfg.homography = a.homography;
  cfg.skip_existing = a.skip_existing;
  cfg.verbose = a.verbose;
  const auto res = run_pipeline(cfg, a.out);
  std::cout << res.report.table();
  std::cout << "report: " << res.report_path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scene flow action maps: RGB-D sequences to action maps, classifiers and fused scores"};
  app.require_subcommand(1);

  SynthArgs synth_a;
  auto* synth = app.add_subcommand("synth", "generate a synthetic sequence or labeled dataset");
  synth->add_option("--out", synth_a.out, "output directory")->required();
  synth->add_flag("--dataset", synth_a.dataset, "write a labeled 4-archetype dataset plus index.txt");
  synth->add_option("--classes", synth_a.classes, "dataset classes (1-4)");
  synth->add_option("--per-class", synth_a.per_class, "dataset samples per class");
  synth->add_option("--seed", synth_a.seed, "texture / dataset seed");
  synth->add_option("--motion", synth_a.motion, "translate, approach, rotate or composite");
  synth->add_option("--magnitude", synth_a.magnitude, "px/frame, m/frame or rad/frame");
  synth->add_option("--direction", synth_a.direction_deg, "translation heading in degrees");
  synth->add_option("--frames", synth_a.frames);
  synth->add_option("--width", synth_a.width);
  synth->add_option("--height", synth_a.height);
  synth->add_option("--depth", synth_a.depth, "plane depth in meters");
  synth->add_option("--depth-noise", synth_a.noise, "Gaussian depth noise sigma in meters");
  synth->add_flag("--object", synth_a.object, "moving square over a static wall instead of a full plane");
  synth->add_option("--misalign", synth_a.misalign, "9 numbers: homography applied to the depth maps")->expected(9);
  synth->add_option("--matches", synth_a.matches, "also write this many noisy matches of the misalignment");

  CalibrateArgs cal_a;
  auto* cal = app.add_subcommand("calibrate", "estimate the depth-to-RGB homography from point matches");
  cal->add_option("--matches", cal_a.matches, "file of 'x y x' y'' lines")->required();
  cal->add_option("--out", cal_a.out, "homography output file")->required();
  cal->add_option("--inliers-out", cal_a.inliers_out, "inlier mask, one 0/1 per match");
  cal->add_flag("--no-ransac", cal_a.no_ransac, "DLT + refinement on all matches");
  cal->add_option("--threshold", cal_a.threshold, "inlier threshold in px");
  cal->add_option("--max-iters", cal_a.max_iters);
  cal->add_option("--seed", cal_a.seed);
  cal->add_option("--apply", cal_a.apply, "sequence manifest whose depth maps get re-registered");
  cal->add_option("--apply-out", cal_a.apply_out, "directory for the re-registered sequence");

  FlowArgs flow_a;
  auto* flow = app.add_subcommand("flow", "dense scene flow for every consecutive frame pair");
  flow->add_option("--sequence", flow_a.sequence, "sequence manifest")->required();
  flow->add_option("--flow-out-dir", flow_a.out_dir)->required();
  flow->add_option("--config", flow_a.config, "solver settings file (key = value)");
  flow->add_option("--homography", flow_a.homography, "warp depth maps with this homography first");
  flow->add_flag("--keep-background", flow_a.keep_background, "skip background removal");
  flow->add_option("--background-tolerance", flow_a.tolerance, "meters in front of the farthest depth peak");

  EncodeArgs enc_a;
  auto* enc = app.add_subcommand("encode", "encode a flow sequence into action map PNGs");
  enc->add_option("--flow-dir", enc_a.flow_dir)->required();
  enc->add_option("--out-dir", enc_a.out_dir)->required();
  enc->add_option("--variant", enc_a.variant)->check(CLI::IsMember({"d", "s", "rp", "amrp", "labrp", "ctkrp"}));
  enc->add_option("--direction", enc_a.direction)->check(CLI::IsMember({"forward", "backward", "both"}));
  enc->add_option("--lambda", enc_a.lambda, "rank pooling regularization");
  enc->add_option("--max-epochs", enc_a.max_epochs, "rank pooling solver epochs");
  enc->add_option("--stack", enc_a.stack, "trained channel-transform stack (ctkrp)");

  TrainCtkArgs ctk_a;
  auto* ctk = app.add_subcommand("train-ctk", "train channel transform kernels end to end");
  ctk->add_option("--index", ctk_a.index, "dataset index (id label manifest)")->required();
  ctk->add_option("--flow-root", ctk_a.flow_root, "directory with one flow directory per id")->required();
  ctk->add_option("--out", ctk_a.out, "stack output file")->required();
  ctk->add_option("--head-out", ctk_a.head_out, "also write the linear head as a classifier model");
  ctk->add_option("--epochs", ctk_a.cfg.epochs);
  ctk->add_option("--lr", ctk_a.cfg.learning_rate);
  ctk->add_option("--seed", ctk_a.cfg.seed);

  TrainChannelArgs tc_a;
  auto* tc = app.add_subcommand("train-channel", "train one classification channel on action maps");
  tc->add_option("--index", tc_a.index, "training index")->required();
  tc->add_option("--maps-root", tc_a.maps_root, "directory with one map directory per id")->required();
  tc->add_option("--variant", tc_a.variant, "variant tag, e.g. RPf")->required();
  tc->add_option("--kind", tc_a.kind)->check(CLI::IsMember({"linear", "ncm"}));
  tc->add_option("--out", tc_a.out, "model output file")->required();
  tc->add_option("--epochs", tc_a.cfg.epochs);
  tc->add_option("--lr", tc_a.cfg.learning_rate);
  tc->add_option("--score-index", tc_a.score_index, "index of samples to score after training");
  tc->add_option("--scores-out", tc_a.scores_out);

  FuseArgs fuse_a;
  auto* fuse = app.add_subcommand("fuse", "late fusion of per-channel score files");
  fuse->add_option("--scores", fuse_a.scores, "two or more score files")->required();
  fuse->add_option("--rule", fuse_a.rule)->check(CLI::IsMember({"multiply", "average", "max"}));
  fuse->add_option("--out", fuse_a.out, "predictions file (default stdout)");
  fuse->add_option("--labels", fuse_a.labels, "'id label' file; prints accuracy");

  EvalArgs eval_a;
  auto* eval = app.add_subcommand("eval", "per-channel and fused accuracy table");
  eval->add_option("--scores", eval_a.scores, "two or more score files")->required();
  eval->add_option("--labels", eval_a.labels)->required();
  eval->add_option("--out", eval_a.out, "also write the table here");

  PipelineArgs pipe_a;
  auto* pipe = app.add_subcommand("pipeline", "synth/ingest, flow, encode, train, fuse and report");
  pipe->add_option("--out", pipe_a.out, "run directory")->required();
  pipe->add_option("--config", pipe_a.config, "settings file (key = value)");
  pipe->add_option("--seed", pipe_a.seed);
  pipe->add_option("--variants", pipe_a.variants, "comma-separated tags, e.g. D,S,RPf,RPb");
  pipe->add_option("--rule", pipe_a.rule)->check(CLI::IsMember({"multiply", "average", "max"}));
  pipe->add_option("--classifier", pipe_a.classifier)->check(CLI::IsMember({"linear", "ncm"}));
  pipe->add_option("--train-per-class", pipe_a.train_per_class);
  pipe->add_option("--test-per-class", pipe_a.test_per_class);
  pipe->add_option("--train-index", pipe_a.train_index, "use existing data instead of synthesis");
  pipe->add_option("--test-index", pipe_a.test_index);
  pipe->add_option("--homography", pipe_a.homography, "depth-to-RGB homography for every sequence");
  pipe->add_flag("--skip-existing", pipe_a.skip_existing, "reuse stages whose outputs match the manifest");
  pipe->add_flag("--verbose", pipe_a.verbose);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) run_synth(synth_a);
    else if (cal->parsed()) run_calibrate(cal_a);
    else if (flow->parsed()) run_flow(flow_a);
    else if (enc->parsed()) run_encode(enc_a);
    else if (ctk->parsed()) run_train_ctk(ctk_a);
    else if (tc->parsed()) run_train_channel(tc_a);
    else if (fuse->parsed()) run_fuse(fuse_a);
    else if (eval->parsed()) run_eval(eval_a);
    else if (pipe->parsed()) run_pipeline_cmd(pipe_a);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
