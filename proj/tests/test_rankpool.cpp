#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sfam/rankpool.hpp"
#include "test_util.hpp"

using namespace sfam;

namespace {

std::vector<ImageD> pixel_maps(const std::vector<double>& vals) {
  std::vector<ImageD> out;
  for (double v : vals) out.emplace_back(1, 1, v);
  return out;
}

// Golden-section search on a convex 1-D function, then a dense scan check.
double minimize_1d(const std::function<double(double)>& f, double lo, double hi) {
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  for (int k = 0; k < 200; ++k) {
    const double c = b - g * (b - a), d = a + g * (b - a);
    if (f(c) < f(d)) b = d;
    else a = c;
  }
  return 0.5 * (a + b);
}

std::vector<double> scores(const std::vector<double>& d, const oracle::Seq& v) {
  std::vector<double> s;
  for (const auto& vt : v) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * vt[i];
    s.push_back(acc);
  }
  return s;
}

oracle::Seq oracle_features(const std::vector<ImageD>& maps) {
  oracle::Seq x;
  for (const auto& m : maps) x.emplace_back(m.pixels().begin(), m.pixels().end());
  return oracle::time_average(x);
}

}  // namespace

TEST(TimeAverage, Examples) {
  const auto one = time_average_features(pixel_maps({4.0}));
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0][0], 4.0);
  const auto two = time_average_features(pixel_maps({0.0, 2.0}));
  EXPECT_EQ(two[0][0], 0.0);
  EXPECT_EQ(two[1][0], 1.0);
  const auto flat = time_average_features(pixel_maps({3.0, 3.0, 3.0}));
  for (const auto& v : flat) EXPECT_EQ(v[0], 3.0);
  EXPECT_THROW(time_average_features({}), DataError);
}

TEST(RankPool, SingleFrameIsZero) {
  const auto r = rank_pool(pixel_maps({5.0}));
  EXPECT_EQ(r.d_star[0], 0.0);
  EXPECT_EQ(r.objective_value, 0.0);
  EXPECT_THROW(rank_pool({}), DataError);
}

TEST(RankPool, OneDimensionalRampMatchesBruteForce) {
  const auto maps = pixel_maps({1, 2, 3, 4});
  const auto v = oracle_features(maps);
  const auto f = [&](double d) { return oracle::rank_energy({d}, v, 1.0); };
  const double d_ref = minimize_1d(f, -10.0, 10.0);
  // Dense scan confirms the bracketed minimum.
  for (double d = -10.0; d <= 10.0; d += 1e-3) ASSERT_GE(f(d), f(d_ref) - 1e-12);
  const auto r = rank_pool(maps);
  EXPECT_GT(r.d_star[0], 0.0);
  EXPECT_NEAR(r.d_star[0], d_ref, 1e-4);
  EXPECT_NEAR(r.objective_value, f(d_ref), 1e-8);
  const auto s = scores(r.d_star, v);
  for (std::size_t t = 1; t < s.size(); ++t) EXPECT_GT(s[t], s[t - 1]);
}

TEST(RankPool, ConstantSequencePoolsToZeroWithUnitObjective) {
  for (int T : {2, 3, 7}) {
    const auto r = rank_pool(std::vector<ImageD>(T, ImageD(3, 2, 1.7)));
    // Running means of a constant agree only to rounding.
    for (double d : r.d_star) EXPECT_NEAR(d, 0.0, 1e-12);
    EXPECT_NEAR(r.objective_value, 1.0, 1e-12);
  }
}

TEST(RankPool, BackwardScoresIncreaseInReversedTime) {
  const auto maps = pixel_maps({1, 2, 3, 4});
  RankPoolConfig cfg;
  cfg.direction = PoolDirection::backward;
  const auto r = rank_pool(maps, cfg);
  auto reversed = maps;
  std::reverse(reversed.begin(), reversed.end());
  const auto s = scores(r.d_star, oracle_features(reversed));
  for (std::size_t t = 1; t < s.size(); ++t) EXPECT_GT(s[t], s[t - 1]);
  EXPECT_LT(r.d_star[0], 0.0);
}

TEST(RankPool, AgreesWithSubgradientOracleOnSmallProblems) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 4; ++trial) {
    const int T = 3 + trial, w = 2 + trial % 2, h = 2;
    std::vector<ImageD> maps;
    for (int t = 0; t < T; ++t) {
      ImageD m(w, h);
      for (double& x : m.pixels()) x = u(rng) + 0.3 * t;
      maps.push_back(m);
    }
    for (double lambda : {0.5, 1.0}) {
      RankPoolConfig cfg;
      cfg.lambda = lambda;
      const auto r = rank_pool(maps, cfg);
      const auto v = oracle_features(maps);
      const double e_ref = oracle::rank_energy(oracle::rank_pool_subgradient(v, lambda, 200000), v, lambda);
      EXPECT_NEAR(r.objective_value, oracle::rank_energy(r.d_star, v, lambda), 1e-12);
      EXPECT_LT((r.objective_value - e_ref) / std::max(1.0, e_ref), 1e-3);
      EXPECT_LE(r.objective_value, e_ref + 1e-9);  // the oracle is an upper bound on the optimum
      EXPECT_LE(r.objective_value, 1.0);
    }
  }
}

TEST(RankPool, ScoreOrderSurvivesPositiveScaling) {
  const auto base = pixel_maps({0.2, 0.5, 0.6, 1.1, 1.3});
  for (double a : {0.1, 1.0, 30.0}) {
    std::vector<ImageD> scaled;
    for (const auto& m : base) scaled.emplace_back(1, 1, a * m(0, 0));
    const auto r = rank_pool(scaled);
    const auto s = scores(r.d_star, oracle_features(scaled));
    for (std::size_t t = 1; t < s.size(); ++t) EXPECT_GT(s[t], s[t - 1]);
  }
}

TEST(RankPool, DeterministicAndValidatesConfig) {
  std::mt19937_64 rng(12);
  std::vector<ImageD> maps;
  for (int t = 0; t < 6; ++t) maps.push_back(testutil::random_sfm(5, 5, t, rng).x_mu);
  const auto a = rank_pool(maps), b = rank_pool(maps);
  EXPECT_EQ(a.d_star, b.d_star);
  RankPoolConfig bad;
  bad.lambda = 0.0;
  EXPECT_THROW(rank_pool(maps, bad), UsageError);
  bad = {};
  bad.max_epochs = 0;
  EXPECT_THROW(rank_pool(maps, bad), UsageError);
}

TEST(RankPoolMaps, ZeroChannelStaysZero) {
  std::mt19937_64 rng(13);
  std::vector<SceneFlowMap> seq;
  for (int t = 1; t <= 4; ++t) {
    auto m = testutil::random_sfm(3, 3, t, rng);
    m.x_omega = ImageD(3, 3);
    seq.push_back(m);
  }
  const auto out = rank_pool_map_sequence(seq);
  EXPECT_EQ(out.variant_tag, VariantTag::RPf);
  for (double v : out.c3.pixels()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(rank_pool_map_sequence({seq[0]}), DataError);
}

TEST(RankPoolMaps, IdenticalPixelsMatchFullVectorOracle) {
  std::vector<SceneFlowMap> seq;
  for (int t = 1; t <= 3; ++t) seq.push_back({ImageD(2, 2, t), ImageD(2, 2, -0.5 * t), ImageD(2, 2, 0.0), t});
  const auto out = rank_pool_map_sequence(seq);
  for (int c = 0; c < 2; ++c) {
    std::vector<ImageD> ch;
    for (const auto& m : seq) ch.push_back(m.channel(c));
    const auto v = oracle_features(ch);
    const auto f = [&](double d) { return oracle::rank_energy({d, d, d, d}, v, 1.0); };
    const double d_ref = minimize_1d(f, -10.0, 10.0);
    for (double d : out.channel(c).pixels()) EXPECT_NEAR(d, d_ref, 1e-4);
  }
}

TEST(RankPoolMaps, ForwardAndBackwardDifferOnAsymmetricRamp) {
  std::vector<SceneFlowMap> seq;
  const double vals[] = {0.0, 0.1, 0.3, 1.5};
  for (int t = 0; t < 4; ++t) seq.push_back({ImageD(2, 1, vals[t]), ImageD(2, 1, t), ImageD(2, 1, 1.0), t + 1});
  RankPoolConfig back;
  back.direction = PoolDirection::backward;
  const auto f = rank_pool_map_sequence(seq), b = rank_pool_map_sequence(seq, back);
  EXPECT_EQ(b.variant_tag, VariantTag::RPb);
  EXPECT_GT(std::abs(f.c1(0, 0) - b.c1(0, 0)), 1e-3);
}

TEST(AmplitudeAndLabPooling, TagsAndGrayReplication) {
  std::mt19937_64 rng(14);
  std::vector<SceneFlowMap> seq;
  for (int t = 1; t <= 4; ++t) seq.push_back(testutil::random_sfm(3, 2, t, rng));
  const auto am = amplitude_rank_pool(seq);
  EXPECT_EQ(am.variant_tag, VariantTag::AMRPf);
  EXPECT_EQ(am.c1, am.c2);
  EXPECT_EQ(am.c1, am.c3);
  const auto expect = rank_pool(amplitude_maps(seq));
  EXPECT_EQ(std::vector<double>(am.c1.pixels().begin(), am.c1.pixels().end()), expect.d_star);
  RankPoolConfig back;
  back.direction = PoolDirection::backward;
  EXPECT_EQ(amplitude_rank_pool(seq, back).variant_tag, VariantTag::AMRPb);
  EXPECT_EQ(lab_rank_pool(seq).variant_tag, VariantTag::LABRPf);
  EXPECT_EQ(lab_rank_pool(seq, back).variant_tag, VariantTag::LABRPb);
}

TEST(ApproximateRankPool, CoefficientExamples) {
  EXPECT_EQ(approximate_rank_pool_coefficients(1), std::vector<double>{0.0});
  const auto a2 = approximate_rank_pool_coefficients(2);
  EXPECT_NEAR(a2[0], -0.5, 1e-15);
  EXPECT_NEAR(a2[1], 0.5, 1e-15);
  for (int T = 1; T <= 60; ++T) {
    const auto a = approximate_rank_pool_coefficients(T);
    double sum = 0.0, scale = 0.0;
    for (double x : a) {
      sum += x;
      scale += std::abs(x);
    }
    EXPECT_NEAR(sum, 0.0, 1e-12 * std::max(1.0, scale));
  }
  EXPECT_THROW(approximate_rank_pool_coefficients(0), DataError);
}

TEST(ApproximateRankPool, ConstantPoolsToZeroAndIsLinear) {
  const auto z = approximate_rank_pool(std::vector<ImageD>(5, ImageD(3, 3, 2.0)));
  for (double v : z.pixels()) EXPECT_NEAR(v, 0.0, 1e-12);
  std::mt19937_64 rng(15);
  std::vector<ImageD> maps;
  for (int t = 0; t < 5; ++t) maps.push_back(testutil::random_sfm(4, 3, t, rng).x_nu);
  const auto base = approximate_rank_pool(maps);
  const auto alpha = approximate_rank_pool_coefficients(5);
  const double h = 1e-3;
  for (int t = 0; t < 5; ++t) {
    auto bumped = maps;
    bumped[t](1, 2) += h;
    const auto out = approximate_rank_pool(bumped);
    EXPECT_NEAR((out(1, 2) - base(1, 2)) / h, alpha[t], 1e-9);
    EXPECT_EQ(out(0, 0), base(0, 0));
  }
}
