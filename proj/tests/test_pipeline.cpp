#include <sys/wait.h>

#include <chrono>
#include <cstdlib>

#include <json.hpp>

#include "test_util.hpp"

using namespace sfam;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.num_classes = 2;
  cfg.train_per_class = 3;
  cfg.test_per_class = 2;
  cfg.dataset.width = 32;
  cfg.dataset.height = 32;
  cfg.dataset.object_size = 12;
  cfg.dataset.min_frames = 4;
  cfg.dataset.max_frames = 5;
  cfg.solver.iters_per_level = 60;
  cfg.variants = {VariantTag::D, VariantTag::S, VariantTag::RPf};
  cfg.seed = 7;
  return cfg;
}

std::vector<std::string> stage_names(const fs::path& manifest) {
  std::ifstream in(manifest);
  const auto doc = nlohmann::json::parse(in);
  std::vector<std::string> names;
  for (const auto& s : doc["stages"]) names.push_back(s["name"]);
  return names;
}

const auto kOld = fs::file_time_type::clock::now() - std::chrono::hours(24 * 365);

void age_tree(const fs::path& root) {
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) fs::last_write_time(e.path(), kOld);
}

bool untouched(const fs::path& p) { return fs::last_write_time(p) == kOld; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + SFAM_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

}  // namespace

TEST(Pipeline, RunsEndToEnd) {
  testutil::TempDir tmp;
  const auto out = tmp / "run";
  const auto res = run_pipeline(small_config(), out);

  EXPECT_EQ(res.report_path, out / "report.txt");
  EXPECT_EQ(testutil::slurp(res.report_path), res.report.table());
  ASSERT_EQ(res.report.variants.size(), 3u);
  ASSERT_EQ(res.report.fusions.size(), 3u);
  for (const auto& r : res.report.variants) EXPECT_EQ(r.total, 4);
  for (const auto& r : res.report.fusions) EXPECT_EQ(r.total, 4);

  EXPECT_EQ(read_index(out / "data" / "train.txt").size(), 6u);
  const auto test = read_index(out / "data" / "test.txt");
  ASSERT_EQ(test.size(), 4u);
  for (const auto& e : test) {
    const auto frames = load_sequence(e.manifest).frames.size();
    EXPECT_EQ(count_ext(out / "flows" / e.id, ".flow"), frames - 1);
    for (const char* tag : {"D", "S", "RPf"}) {
      EXPECT_TRUE(fs::exists(out / "maps" / e.id / (std::string(tag) + ".png")));
      EXPECT_TRUE(fs::exists(out / "maps" / e.id / (std::string(tag) + ".png.txt")));
    }
  }
  for (const char* tag : {"D", "S", "RPf"}) {
    EXPECT_TRUE(fs::exists(out / "models" / (std::string(tag) + ".model")));
    EXPECT_EQ(read_scores(out / "scores" / (std::string(tag) + ".txt")).size(), 4u);
  }
  EXPECT_FALSE(fs::exists(out / "models" / "ctk_stack.txt"));

  std::ifstream pred(out / "predictions.txt");
  std::string id;
  int p = 0, l = 0, lines = 0;
  while (pred >> id >> p >> l) {
    ++lines;
    EXPECT_EQ(p, res.report.predictions.at(id).at(FusionRule::multiply));
    EXPECT_TRUE(p == 0 || p == 1);
  }
  EXPECT_EQ(lines, 4);

  const std::vector<std::string> expected{"synth", "flow", "encode", "train", "predict", "fuse"};
  EXPECT_EQ(stage_names(out / "manifest.json"), expected);
  std::ifstream in(out / "manifest.json");
  const auto doc = nlohmann::json::parse(in);
  for (const auto& s : doc["stages"])
    for (const auto& [rel, h] : s["outputs"].items()) EXPECT_EQ(sha256_file(out / rel), h.get<std::string>()) << rel;
}

TEST(Pipeline, DeterministicAcrossRunDirectories) {
  testutil::TempDir tmp;
  const auto a = run_pipeline(small_config(), tmp / "a");
  const auto b = run_pipeline(small_config(), tmp / "b");
  EXPECT_EQ(a.report.table(), b.report.table());
  EXPECT_EQ(testutil::slurp(tmp / "a" / "predictions.txt"), testutil::slurp(tmp / "b" / "predictions.txt"));
  for (const char* tag : {"D", "S", "RPf"}) {
    const auto f = fs::path("scores") / (std::string(tag) + ".txt");
    EXPECT_EQ(testutil::slurp(tmp / "a" / f), testutil::slurp(tmp / "b" / f)) << tag;
  }
}

TEST(Pipeline, SkipExistingReusesStages) {
  testutil::TempDir tmp;
  const auto out = tmp / "run";
  auto cfg = small_config();
  const auto first = run_pipeline(cfg, out);
  const auto report = testutil::slurp(out / "report.txt");
  const auto flow = out / "flows" / read_index(out / "data" / "test.txt").front().id / "0001.flow";

  age_tree(out / "data");
  age_tree(out / "flows");
  age_tree(out / "maps");
  age_tree(out / "models");
  age_tree(out / "scores");
  cfg.skip_existing = true;
  const auto second = run_pipeline(cfg, out);
  EXPECT_EQ(second.report.table(), first.report.table());
  EXPECT_TRUE(untouched(flow));
  EXPECT_TRUE(untouched(out / "maps" / read_index(out / "data" / "train.txt").front().id / "RPf.png"));
  EXPECT_TRUE(untouched(out / "models" / "D.model"));
  EXPECT_TRUE(untouched(out / "scores" / "S.txt"));
  EXPECT_EQ(testutil::slurp(out / "report.txt"), report);
  const std::vector<std::string> expected{"synth", "flow", "encode", "train", "predict", "fuse"};
  EXPECT_EQ(stage_names(out / "manifest.json"), expected);

  // A changed classifier setting reruns training and everything downstream only.
  cfg.classifier_train.epochs += 1;
  run_pipeline(cfg, out);
  EXPECT_TRUE(untouched(flow));
  EXPECT_FALSE(untouched(out / "models" / "D.model"));
  EXPECT_FALSE(untouched(out / "scores" / "S.txt"));
}

TEST(Pipeline, SkipExistingRepairsTamperedOutputs) {
  testutil::TempDir tmp;
  const auto out = tmp / "run";
  auto cfg = small_config();
  run_pipeline(cfg, out);
  const auto scores = testutil::slurp(out / "scores" / "RPf.txt");
  {
    std::ofstream f(out / "scores" / "RPf.txt");
    f << "garbage\n";
  }
  age_tree(out / "flows");
  cfg.skip_existing = true;
  run_pipeline(cfg, out);
  EXPECT_EQ(testutil::slurp(out / "scores" / "RPf.txt"), scores);
  EXPECT_TRUE(untouched(out / "flows" / read_index(out / "data" / "test.txt").front().id / "0001.flow"));
}

TEST(Pipeline, WithoutSkipEverythingReruns) {
  testutil::TempDir tmp;
  const auto out = tmp / "run";
  run_pipeline(small_config(), out);
  age_tree(out / "flows");
  run_pipeline(small_config(), out);
  EXPECT_FALSE(untouched(out / "flows" / read_index(out / "data" / "test.txt").front().id / "0001.flow"));
}

TEST(Pipeline, ExistingIndexFiles) {
  testutil::TempDir tmp;
  run_pipeline(small_config(), tmp / "a");
  auto cfg = small_config();
  cfg.train_index = tmp / "a" / "data" / "train.txt";
  cfg.test_index = tmp / "a" / "data" / "test.txt";
  const auto res = run_pipeline(cfg, tmp / "b");
  EXPECT_FALSE(fs::exists(tmp / "b" / "data"));
  EXPECT_EQ(stage_names(tmp / "b" / "manifest.json").front(), "flow");
  EXPECT_EQ(testutil::slurp(tmp / "a" / "scores" / "D.txt"), testutil::slurp(tmp / "b" / "scores" / "D.txt"));
  EXPECT_EQ(res.report.variants.front().total, 4);
}

TEST(Pipeline, ConfigValidation) {
  auto cfg = small_config();
  cfg.variants = {VariantTag::D};
  EXPECT_THROW(cfg.validate(), UsageError);

  cfg = small_config();
  cfg.train_index = "/nonexistent/train.txt";
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.test_index = "/nonexistent/test.txt";
  EXPECT_THROW(cfg.validate(), DataError);

  cfg = small_config();
  cfg.num_classes = 1;
  EXPECT_THROW(cfg.validate(), UsageError);

  cfg = small_config();
  cfg.test_per_class = 0;
  EXPECT_THROW(cfg.validate(), UsageError);

  cfg = small_config();
  cfg.homography = "/nonexistent/h.txt";
  EXPECT_THROW(cfg.validate(), DataError);

  EXPECT_NO_THROW(small_config().validate());
}

TEST(Pipeline, SettingsFile) {
  testutil::TempDir tmp;
  {
    std::ofstream f(tmp / "run.cfg");
    f << "# comment\n"
      << "seed = 42\n"
      << "variants = D,RPb,AMRPf   # trailing comment\n"
      << "rule = average\n"
      << "classifier = ncm\n"
      << "\n"
      << "rank_lambda = 0.5\n"
      << "iters_per_level = 33\n"
      << "remove_background = false\n";
  }
  PipelineConfig cfg;
  read_settings(tmp / "run.cfg", [&](const std::string& k, const std::string& v) { apply_pipeline_setting(cfg, k, v); });
  EXPECT_EQ(cfg.seed, 42u);
  const std::vector<VariantTag> v{VariantTag::D, VariantTag::RPb, VariantTag::AMRPf};
  EXPECT_EQ(cfg.variants, v);
  EXPECT_EQ(cfg.rule, FusionRule::average);
  EXPECT_EQ(cfg.classifier, ClassifierKind::nearest_class_mean);
  EXPECT_DOUBLE_EQ(cfg.rankpool.lambda, 0.5);
  EXPECT_EQ(cfg.solver.iters_per_level, 33);
  EXPECT_FALSE(cfg.remove_background);

  {
    std::ofstream f(tmp / "bad.cfg");
    f << "seed 42\n";
  }
  EXPECT_THROW(read_settings(tmp / "bad.cfg", [](const std::string&, const std::string&) {}), UsageError);
  EXPECT_THROW(read_settings(tmp / "missing.cfg", [](const std::string&, const std::string&) {}), DataError);
  EXPECT_THROW(apply_pipeline_setting(cfg, "variants", "D,XYZ"), Error);
  EXPECT_THROW(apply_pipeline_setting(cfg, "no_such_key", "1"), Error);
}

TEST(Pipeline, DeriveSeed) {
  EXPECT_EQ(derive_seed(1, "flow"), derive_seed(1, "flow"));
  EXPECT_NE(derive_seed(1, "flow"), derive_seed(1, "encode"));
  EXPECT_NE(derive_seed(1, "flow"), derive_seed(2, "flow"));
  EXPECT_NE(derive_seed(0, ""), 0u);
}

TEST(Pipeline, Sha256KnownVectors) {
  testutil::TempDir tmp;
  { std::ofstream(tmp / "empty", std::ios::binary); }
  { std::ofstream(tmp / "abc", std::ios::binary) << "abc"; }
  EXPECT_EQ(sha256_file(tmp / "empty"), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_file(tmp / "abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_THROW(sha256_file(tmp / "missing"), DataError);
}

TEST(Pipeline, IndexRoundTrip) {
  testutil::TempDir tmp;
  fs::create_directories(tmp / "seqs" / "a");
  const std::vector<IndexEntry> rows{{"a", 0, tmp / "seqs" / "a" / "manifest.txt"},
                                     {"b", 3, tmp / "seqs" / "b" / "manifest.txt"}};
  write_index(tmp / "index.txt", rows);
  EXPECT_EQ(testutil::slurp(tmp / "index.txt"), "a 0 seqs/a/manifest.txt\nb 3 seqs/b/manifest.txt\n");
  const auto back = read_index(tmp / "index.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].id, "b");
  EXPECT_EQ(back[1].label, 3);
  EXPECT_EQ(back[1].manifest.lexically_normal(), rows[1].manifest.lexically_normal());

  auto write = [&](const std::string& body) {
    std::ofstream(tmp / "bad.txt") << body;
    return tmp / "bad.txt";
  };
  EXPECT_THROW(read_index(write("a 0 x\na 1 y\n")), DataError);
  EXPECT_THROW(read_index(write("a zero x\n")), DataError);
  EXPECT_THROW(read_index(write("# only a comment\n")), DataError);
  EXPECT_THROW(read_index(tmp / "missing.txt"), DataError);
}

TEST(Pipeline, EvaluateCountsAndFuses) {
  const ScoreTable a{{"x", {0.9, 0.1}}, {"y", {0.4, 0.6}}, {"z", {0.6, 0.4}}};
  const ScoreTable b{{"x", {0.7, 0.3}}, {"y", {0.2, 0.8}}, {"z", {0.1, 0.9}}};
  const std::map<std::string, int> labels{{"x", 0}, {"y", 1}, {"z", 1}};
  const auto rep = evaluate({{"A", a}, {"B", b}}, labels);
  EXPECT_EQ(rep.variants[0].correct, 2);
  EXPECT_EQ(rep.variants[1].correct, 3);
  EXPECT_DOUBLE_EQ(rep.best_single(), 1.0);
  // z: products 0.06 vs 0.36, means 0.35 vs 0.65, max 0.6 vs 0.9 -> class 1 under every rule
  for (auto rule : {FusionRule::multiply, FusionRule::average, FusionRule::max}) {
    EXPECT_EQ(rep.predictions.at("z").at(rule), 1);
    EXPECT_DOUBLE_EQ(rep.fusion_accuracy(rule), 1.0);
  }
  EXPECT_THROW(evaluate({{"A", a}}, labels), UsageError);
  EXPECT_THROW(evaluate({{"A", a}, {"B", b}}, {{"x", 0}}), DataError);
  const ScoreTable partial{{"x", {0.5, 0.5}}};
  EXPECT_THROW(evaluate({{"A", a}, {"B", partial}}, labels), DataError);
}

// ---------------------------------------------------------------------------
// command line

TEST(Cli, FlowWritesOneFilePerFramePair) {
  testutil::TempDir tmp;
  const auto seq = tmp / "seq";
  ASSERT_EQ(run_cli("synth --out " + seq.string() + " --width 32 --height 32"), 0);
  ASSERT_EQ(run_cli("flow --sequence " + (seq / "manifest.txt").string() + " --flow-out-dir " +
                    (tmp / "flows").string() + " --keep-background"),
            0);
  EXPECT_EQ(count_ext(tmp / "flows", ".flow"), 1u);
  EXPECT_TRUE(fs::exists(tmp / "flows" / "0001.flow"));
  EXPECT_EQ(read_flow(tmp / "flows" / "0001.flow").width(), 32);
}

TEST(Cli, EncodeBothDirections) {
  testutil::TempDir tmp;
  const auto seq = tmp / "seq";
  ASSERT_EQ(run_cli("synth --out " + seq.string() + " --frames 4 --width 32 --height 32 --motion approach "
                    "--magnitude 0.02"),
            0);
  EXPECT_EQ(count_ext(seq / "ground_truth", ".flow"), 3u);
  ASSERT_EQ(run_cli("encode --flow-dir " + (seq / "ground_truth").string() + " --out-dir " + (tmp / "maps").string() +
                    " --variant rp --direction both"),
            0);
  for (const char* tag : {"RPf", "RPb"}) {
    const auto p = tmp / "maps" / (std::string(tag) + ".png");
    ASSERT_TRUE(fs::exists(p)) << tag;
    EXPECT_TRUE(fs::exists(p.string() + ".txt")) << tag;
    EXPECT_EQ(to_string(read_action_map(p).variant_tag), std::string(tag));
  }
  EXPECT_EQ(count_ext(tmp / "maps", ".png"), 2u);
}

TEST(Cli, CalibrateRecoversMisalignment) {
  testutil::TempDir tmp;
  const auto seq = tmp / "seq";
  ASSERT_EQ(run_cli("synth --out " + seq.string() + " --matches 60 --misalign 1.02 0.01 3 -0.01 0.99 -2 0 0 1"), 0);
  ASSERT_EQ(run_cli("calibrate --matches " + (seq / "matches.txt").string() + " --out " + (tmp / "h.txt").string()),
            0);
  const auto truth = read_homography(seq / "misalignment.txt");
  const auto est = read_homography(tmp / "h.txt");
  for (const auto& [x, y] : {std::pair{0.0, 0.0}, {63.0, 0.0}, {0.0, 63.0}, {63.0, 63.0}, {32.0, 32.0}}) {
    const auto a = truth.apply({x, y}), b = est.apply({x, y});
    EXPECT_LT((a - b).norm(), 0.5) << x << "," << y;
  }
}

TEST(Cli, ExitCodes) {
  testutil::TempDir tmp;
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("flow --no-such-flag"), 2);
  EXPECT_EQ(run_cli("encode --flow-dir x --out-dir y --variant nope"), 2);
  EXPECT_EQ(run_cli("flow --sequence " + (tmp / "missing.txt").string() + " --flow-out-dir " +
                    (tmp / "f").string()),
            3);
  EXPECT_EQ(run_cli("encode --flow-dir " + (tmp / "nothing").string() + " --out-dir " + (tmp / "m").string()), 3);
  EXPECT_EQ(run_cli("synth --out " + (tmp / "s").string() + " --frames 0"), 3);
}

TEST(Cli, FuseReportsPredictions) {
  testutil::TempDir tmp;
  write_scores(tmp / "A.txt", {{"x", {0.9, 0.1}}, {"y", {0.4, 0.6}}});
  write_scores(tmp / "B.txt", {{"x", {0.7, 0.3}}, {"y", {0.2, 0.8}}});
  ASSERT_EQ(run_cli("fuse --scores " + (tmp / "A.txt").string() + " " + (tmp / "B.txt").string() + " --out " +
                    (tmp / "pred.txt").string()),
            0);
  std::ifstream in(tmp / "pred.txt");
  std::string id;
  int p = -1;
  in >> id >> p;
  EXPECT_EQ(id, "x");
  EXPECT_EQ(p, 0);
  std::getline(in, id);
  in >> id >> p;
  EXPECT_EQ(id, "y");
  EXPECT_EQ(p, 1);
  EXPECT_EQ(run_cli("fuse --scores " + (tmp / "A.txt").string()), 2);
}
