#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>

#include "sfam/pdflow.hpp"
#include "sfam/synth.hpp"
#include "test_util.hpp"

using namespace sfam;

namespace {

SolverConfig constant_eps() {
  SolverConfig cfg;
  cfg.geometric_weight = GeometricWeight::constant;
  cfg.geometric_weight_scale = 1.0;
  return cfg;
}

double median_interior(const ImageD& u, int border) {
  std::vector<double> v;
  for (int y = border; y < u.height() - border; ++y)
    for (int x = border; x < u.width() - border; ++x) v.push_back(u(x, y));
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  return v[v.size() / 2];
}

SceneFlowField random_field(int w, int h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  SceneFlowField s(w, h);
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    s.mu[i] = u(rng);
    s.nu[i] = u(rng);
    s.omega[i] = 0.05 * u(rng);
  }
  return s;
}

}  // namespace

TEST(DataEnergy, SinglePixelToy) {
  const auto f0 = testutil::constant_frame(1, 1, 0.5, 2.0);
  const auto f1 = testutil::constant_frame(1, 1, 0.3, 2.1);
  SceneFlowField s(1, 1);
  EXPECT_NEAR(data_energy(s, f0, f1, constant_eps()), 0.3, 1e-12);
  s.omega(0, 0) = 0.1;
  EXPECT_NEAR(data_energy(s, f0, f1, constant_eps()), 0.2, 1e-12);
}

TEST(DataEnergy, DefaultGeometricWeightIsInverseSquareDepth) {
  const auto f0 = testutil::constant_frame(1, 1, 0.5, 2.0);
  const auto f1 = testutil::constant_frame(1, 1, 0.5, 2.1);
  SceneFlowField s(1, 1);
  EXPECT_NEAR(data_energy(s, f0, f1, SolverConfig{}), 0.1 / (4.0 + 1e-4), 1e-12);
}

TEST(DataEnergy, IdenticalFramesHaveZeroEnergyAtRest) {
  synth::SyntheticSceneSpec spec;
  const auto gen = synth::generate_sequence(spec);
  const auto& f = gen.sequence.frames[0];
  EXPECT_EQ(total_energy(SceneFlowField(f.intensity.width(), f.intensity.height()), f, f, SolverConfig{}),
            0.0);
}

TEST(RegularizerEnergy, ConstantFieldIsZero) {
  const auto f0 = testutil::constant_frame(6, 5, 0.5, 1.5);
  SceneFlowField s(6, 5);
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    s.mu[i] = 0.7;
    s.nu[i] = -1.2;
    s.omega[i] = 0.03;
  }
  EXPECT_EQ(regularizer_energy(s, f0, SolverConfig{}), 0.0);
}

TEST(RegularizerEnergy, TwoPixelForwardDifference) {
  const auto f0 = testutil::constant_frame(2, 1, 0.5, 1.0);
  SceneFlowField s(2, 1);
  s.mu(1, 0) = 1.0;
  SolverConfig cfg;
  cfg.lambda_i = 1.0;
  EXPECT_NEAR(regularizer_energy(s, f0, cfg), 1.0, 1e-12);
}

TEST(RegularizerEnergy, LinearInLambdas) {
  std::mt19937_64 rng(3);
  const auto f0 = testutil::constant_frame(9, 7, 0.5, 1.3);
  auto s = random_field(9, 7, rng);
  SolverConfig a;
  a.lambda_d = 1e-300;  // isolates the mu, nu terms
  SolverConfig b = a;
  b.lambda_i = 2.0 * a.lambda_i;
  EXPECT_DOUBLE_EQ(regularizer_energy(s, f0, b), 2.0 * regularizer_energy(s, f0, a));
  SolverConfig c, d;
  d.lambda_d = 3.0 * c.lambda_d;
  d.lambda_i = 3.0 * c.lambda_i;
  EXPECT_NEAR(regularizer_energy(s, f0, d), 3.0 * regularizer_energy(s, f0, c),
              1e-12 * regularizer_energy(s, f0, d));
}

TEST(RegularizerEnergy, InvalidPixelsDoNotContribute) {
  auto f0 = testutil::constant_frame(3, 1, 0.5, 1.0);
  SceneFlowField s(3, 1);
  s.mu(2, 0) = 5.0;
  s.validity(2, 0) = 0;
  SolverConfig cfg;
  EXPECT_EQ(regularizer_energy(s, f0, cfg), 0.0);
}

TEST(ProjectMotion, MatrixExample) {
  CameraIntrinsics intr{500, 500, 0, 0};
  const auto m = project_motion(5, -3, 0.1, 0.4, -0.2, 2.0, intr);
  EXPECT_NEAR(m.x, 0.04, 1e-15);
  EXPECT_NEAR(m.y, -0.022, 1e-15);
  EXPECT_NEAR(m.z, 0.1, 1e-15);
}

TEST(ProjectMotion, PrincipalPointAndZero) {
  const auto intr = CameraIntrinsics::nominal(5, 5);
  SceneFlowField s(5, 5);
  ImageD depth(5, 5, 1.5);
  s.omega(2, 2) = 0.1;
  const auto m = project_motion_field(s, depth, intr);
  EXPECT_NEAR(m.m(2, 2).x, 0.0, 1e-15);
  EXPECT_NEAR(m.m(2, 2).y, 0.0, 1e-15);
  EXPECT_EQ(m.m(2, 2).z, 0.1);
  EXPECT_EQ(m.m(0, 0).x, 0.0);
  EXPECT_EQ(m.m(0, 0).z, 0.0);
}

TEST(ProjectMotion, LinearInFlow) {
  std::mt19937_64 rng(11);
  const int w = 8, h = 6;
  auto s = random_field(w, h, rng);
  ImageD depth(w, h);
  std::uniform_real_distribution<double> uz(0.5, 3.0);
  for (double& z : depth.pixels()) z = uz(rng);
  const auto intr = CameraIntrinsics::nominal(w, h);
  auto scaled = s;
  const double a = -2.5;
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    scaled.mu[i] *= a;
    scaled.nu[i] *= a;
    scaled.omega[i] *= a;
  }
  const auto m = project_motion_field(s, depth, intr), ms = project_motion_field(scaled, depth, intr);
  for (std::size_t i = 0; i < m.m.size(); ++i) {
    EXPECT_NEAR(ms.m[i].x, a * m.m[i].x, 1e-14);
    EXPECT_NEAR(ms.m[i].y, a * m.m[i].y, 1e-14);
    EXPECT_NEAR(ms.m[i].z, a * m.m[i].z, 1e-14);
  }
}

TEST(ProjectMotion, InvalidPixelsYieldZero) {
  SceneFlowField s(2, 1);
  s.mu(0, 0) = s.mu(1, 0) = 1.0;
  s.validity(1, 0) = 0;
  ImageD depth(2, 1, 1.0);
  depth(0, 0) = 0.0;
  const auto m = project_motion_field(s, depth, CameraIntrinsics::nominal(2, 1));
  EXPECT_EQ(m.m(0, 0).x, 0.0);
  EXPECT_EQ(m.m(1, 0).x, 0.0);
}

TEST(Solver, IdenticalFramesGiveNearZeroFlow) {
  synth::SyntheticSceneSpec spec;
  spec.layout = synth::Layout::object_on_background;
  const auto gen = synth::generate_sequence(spec);
  const auto& f = gen.sequence.frames[0];
  const auto s = compute_scene_flow(f, f);
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    ASSERT_LT(std::abs(s.mu[i]), 1e-3);
    ASSERT_LT(std::abs(s.nu[i]), 1e-3);
    ASSERT_LT(std::abs(s.omega[i]), 1e-3);
  }
}

TEST(Solver, TraceIsMonotoneAndMatchesReturnedEnergy) {
  synth::SyntheticSceneSpec spec;
  spec.magnitude = 1.2;
  spec.direction = 0.4;
  const auto gen = synth::generate_sequence(spec);
  SolverTrace trace;
  const auto& f0 = gen.sequence.frames[0];
  const auto& f1 = gen.sequence.frames[1];
  const auto s = compute_scene_flow(f0, f1, SolverConfig{}, &trace);
  ASSERT_FALSE(trace.level_energy.empty());
  for (const auto& lv : trace.level_energy)
    for (std::size_t k = 1; k < lv.size(); ++k) EXPECT_LE(lv[k], lv[k - 1]);
  EXPECT_EQ(trace.level_width.back(), 64);
  EXPECT_NEAR(trace.level_energy.back().back(), total_energy(s, f0, f1, SolverConfig{}),
              1e-9 * trace.level_energy.back().back());
  SceneFlowField zero(64, 64);
  EXPECT_LT(total_energy(s, f0, f1, SolverConfig{}), total_energy(zero, f0, f1, SolverConfig{}));
}

TEST(Solver, OneAndThreeLevelsAgreeOnOnePixelShift) {
  synth::SyntheticSceneSpec spec;
  spec.magnitude = 1.0;
  const auto gen = synth::generate_sequence(spec);
  SolverConfig one, three;
  one.pyramid_levels = 1;
  three.pyramid_levels = 3;
  // A single full-resolution level needs more than the default 100
  // iterations to propagate a 1 px shift from a zero start.
  one.iters_per_level = three.iters_per_level = 300;
  const auto& f0 = gen.sequence.frames[0];
  const auto& f1 = gen.sequence.frames[1];
  const double m1 = median_interior(compute_scene_flow(f0, f1, one).mu, 4);
  const double m3 = median_interior(compute_scene_flow(f0, f1, three).mu, 4);
  EXPECT_LT(std::abs(m1 - m3), 0.1);
  EXPECT_NEAR(m3, 1.0, 0.1);
}

TEST(Solver, InvalidDepthIsZeroFlow) {
  synth::SyntheticSceneSpec spec;
  auto gen = synth::generate_sequence(spec);
  auto& f0 = gen.sequence.frames[0];
  for (int x = 0; x < 64; ++x) f0.depth(x, 10) = 0.0;
  const auto s = compute_scene_flow(f0, gen.sequence.frames[1]);
  for (int x = 0; x < 64; ++x) {
    EXPECT_EQ(s.validity(x, 10), 0);
    EXPECT_EQ(s.mu(x, 10), 0.0);
    EXPECT_EQ(s.omega(x, 10), 0.0);
  }
}

TEST(Solver, AllInvalidDepthIsError) {
  const auto f0 = testutil::constant_frame(16, 16, 0.5, 0.0);
  EXPECT_THROW(compute_scene_flow(f0, f0), DataError);
}

TEST(Solver, ShapeMismatchIsError) {
  const auto f0 = testutil::constant_frame(16, 16, 0.5, 1.0);
  const auto f1 = testutil::constant_frame(16, 17, 0.5, 1.0);
  EXPECT_THROW(compute_scene_flow(f0, f1), DataError);
}

TEST(Solver, InvalidConfigIsUsageError) {
  const auto f0 = testutil::constant_frame(16, 16, 0.5, 1.0);
  SolverConfig cfg;
  cfg.lambda_i = -1.0;
  EXPECT_THROW(compute_scene_flow(f0, f0, cfg), UsageError);
  cfg = {};
  cfg.primal_step = 2.0;
  EXPECT_THROW(compute_scene_flow(f0, f0, cfg), UsageError);
}

TEST(FlowFile, RoundTripsAtFloatPrecision) {
  testutil::TempDir dir;
  std::mt19937_64 rng(2);
  auto s = random_field(7, 4, rng);
  s.validity(3, 2) = 0;
  s.zero_invalid();
  write_flow(dir / "a.flow", s);
  const auto back = read_flow(dir / "a.flow");
  ASSERT_EQ(back.width(), 7);
  ASSERT_EQ(back.height(), 4);
  EXPECT_EQ(back.validity, s.validity);
  for (std::size_t i = 0; i < s.mu.size(); ++i) {
    EXPECT_EQ(back.mu[i], static_cast<double>(static_cast<float>(s.mu[i])));
    EXPECT_EQ(back.omega[i], static_cast<double>(static_cast<float>(s.omega[i])));
  }
}

TEST(FlowFile, TruncatedIsError) {
  testutil::TempDir dir;
  std::ofstream(dir / "t.flow") << "4 4\nabc";
  EXPECT_THROW(read_flow(dir / "t.flow"), DataError);
  std::ofstream(dir / "h.flow") << "four 4\n";
  EXPECT_THROW(read_flow(dir / "h.flow"), DataError);
}

TEST(SolverSettings, KnownKeysApplyAndUnknownIsError) {
  SolverConfig cfg;
  apply_solver_setting(cfg, "lambda_i", "0.5");
  apply_solver_setting(cfg, "pyramid_levels", "2");
  apply_solver_setting(cfg, "geometric_weight", "constant");
  EXPECT_EQ(cfg.lambda_i, 0.5);
  EXPECT_EQ(cfg.pyramid_levels, 2);
  EXPECT_EQ(cfg.geometric_weight, GeometricWeight::constant);
  EXPECT_THROW(apply_solver_setting(cfg, "lambda_x", "1"), UsageError);
  EXPECT_THROW(apply_solver_setting(cfg, "lambda_i", "abc"), Error);
  EXPECT_THROW(apply_solver_setting(cfg, "geometric_weight", "linear"), UsageError);
}
