#include "catlab/cmix.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "catlab/errors.hpp"
#include "support/beta_oracle.hpp"
#include "support/gradcheck.hpp"

namespace ad = catlab::ad;
using ad::Tensor;
using catlab::BetaParams;
using catlab::MaskStrategy;
using catlab::QaMixStrategy;
using catlab::Segment;

namespace {

std::vector<double> draws(BetaParams p, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = catlab::sample_beta(p, rng);
  return x;
}

double mean_of(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

std::vector<Segment> segments(std::size_t query, std::size_t context) {
  std::vector<Segment> s(query, Segment::kQuery);
  s.resize(query + context, Segment::kContext);
  return s;
}

}  // namespace

TEST(CmixTest, BetaRejectsNonPositiveParameters) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(catlab::sample_beta({0.0, 1.0}, rng), catlab::ConfigError);
  EXPECT_THROW(catlab::sample_beta({1.0, -2.0}, rng), catlab::ConfigError);
}

TEST(CmixTest, BetaDrawsStayInUnitInterval) {
  for (double a : {0.05, 0.3, 1.0, 5.0}) {
    for (double v : draws({a, a}, 20000, 3)) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      ASSERT_TRUE(std::isfinite(v));
    }
  }
}

TEST(CmixTest, BetaSymmetricMeanWithinThreeStandardErrors) {
  const auto x = draws({0.3, 0.3}, 100000, 11);
  const double var = 0.3 * 0.3 / (0.6 * 0.6 * 1.6);
  EXPECT_LT(std::abs(mean_of(x) - 0.5), 3.0 * std::sqrt(var / x.size()));
}

TEST(CmixTest, BetaVarianceForFiveFive) {
  const auto x = draws({5.0, 5.0}, 100000, 12);
  const double m = mean_of(x);
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - m) * (v - m);
    m2 += d;
    m4 += d * d;
  }
  m2 /= x.size();
  m4 /= x.size();
  const double se = std::sqrt((m4 - m2 * m2) / x.size());
  EXPECT_LT(std::abs(m2 - 1.0 / 44.0), 3.0 * se);
}

TEST(CmixTest, BetaPointThreeIsBimodal) {
  // The outer fifth of the interval holds about 56.5% of the mass (integrated
  // oracle), against 20% for a uniform coefficient.
  catlab::testing::BetaCdfOracle oracle(0.3, 0.3);
  const double tails = oracle.cdf(0.1) + 1.0 - oracle.cdf(0.9);
  EXPECT_NEAR(tails, 0.5654248, 1e-6);
  const auto x = draws({0.3, 0.3}, 100000, 13);
  const auto in_tails = std::count_if(x.begin(), x.end(), [](double v) { return v <= 0.1 || v >= 0.9; });
  const double frac = static_cast<double>(in_tails) / x.size();
  EXPECT_LT(std::abs(frac - tails), 3.0 * std::sqrt(tails * (1 - tails) / x.size()));
  EXPECT_GT(frac, 0.5);
}

TEST(CmixTest, BetaOracleMatchesClosedForms) {
  // Beta(1,1) is uniform; Beta(2,2) has CDF 3x^2 - 2x^3.
  catlab::testing::BetaCdfOracle uni(1.0, 1.0), two(2.0, 2.0);
  for (double x : {0.05, 0.3, 0.5, 0.77, 0.95}) {
    EXPECT_NEAR(uni.cdf(x), x, 1e-9);
    EXPECT_NEAR(two.cdf(x), 3 * x * x - 2 * x * x * x, 1e-9);
  }
}

TEST(CmixTest, BetaPassesKolmogorovSmirnov) {
  for (double a : {0.3, 2.0, 5.0}) {
    auto x = draws({a, a}, 100000, 21);
    std::sort(x.begin(), x.end());
    catlab::testing::BetaCdfOracle oracle(a, a);
    const double d = catlab::testing::ks_statistic(x, [&](double v) { return oracle.cdf(v); });
    EXPECT_LT(d, catlab::testing::ks_critical_001(x.size())) << "alpha=beta=" << a;
  }
}

TEST(CmixTest, SamplerIsDeterministicPerSeed) {
  EXPECT_EQ(draws({0.3, 0.7}, 100, 5), draws({0.3, 0.7}, 100, 5));
}

TEST(CmixTest, PlanForSingletonBatchPairsWithItself) {
  std::mt19937_64 rng(2);
  const std::size_t q[] = {2};
  auto plan = catlab::build_mix_plan(1, q, {0.3, 0.3}, rng);
  EXPECT_EQ(plan.partner, std::vector<std::size_t>{0});
  ASSERT_EQ(plan.lambda.size(), 1u);
  EXPECT_GE(plan.lambda[0], 0.0);
  EXPECT_LE(plan.lambda[0], 1.0);
}

TEST(CmixTest, PlanPartnersArePermutationAndLayerIsShared) {
  std::mt19937_64 rng(3);
  const std::size_t q[] = {2};
  for (int t = 0; t < 50; ++t) {
    auto plan = catlab::build_mix_plan(8, q, {5.0, 5.0}, rng);
    auto sorted = plan.partner;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(sorted[i], i);
    for (auto m : plan.mix_layer) EXPECT_EQ(m, 2u);
  }
  EXPECT_THROW(catlab::build_mix_plan(8, std::span<const std::size_t>{}, {1, 1}, rng),
               catlab::ConfigError);
}

TEST(CmixTest, MixLayerFrequencyIsUniform) {
  std::mt19937_64 rng(4);
  const std::size_t q[] = {2, 3};
  const int n = 10000;
  int twos = 0;
  for (int t = 0; t < n; ++t) twos += catlab::build_mix_plan(4, q, {1, 1}, rng).mix_layer[0] == 2;
  EXPECT_LT(std::abs(twos - n * 0.5), 3.0 * std::sqrt(n * 0.25));
}

TEST(CmixTest, PerSampleLayerSwitch) {
  std::mt19937_64 rng(5);
  const std::size_t q[] = {1, 2, 3, 4};
  catlab::MixOptions opt;
  opt.per_sample_layer = true;
  bool varied = false;
  for (int t = 0; t < 20 && !varied; ++t) {
    auto plan = catlab::build_mix_plan(8, q, {1, 1}, rng, opt);
    varied = std::adjacent_find(plan.mix_layer.begin(), plan.mix_layer.end(),
                                std::not_equal_to<>()) != plan.mix_layer.end();
  }
  EXPECT_TRUE(varied);
}

TEST(CmixTest, InterpolateEndpointsAndArithmetic) {
  std::mt19937_64 rng(6);
  Tensor hi = catlab::testing::random_tensor({2, 3, 4}, rng);
  Tensor hj = catlab::testing::random_tensor({2, 3, 4}, rng);
  Tensor zero = catlab::interpolate(hi, hj, Tensor::zeros({2}));
  for (std::size_t k = 0; k < hi.numel(); ++k) EXPECT_EQ(zero[k], hi[k]);
  Tensor one = catlab::interpolate(hi, hj, Tensor::full({2}, 1.0));
  for (std::size_t k = 0; k < hi.numel(); ++k) EXPECT_EQ(one[k], hj[k]);

  Tensor out = catlab::interpolate(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {4, 8}), Tensor({1}, {0.25}));
  EXPECT_EQ(out[0], 1.0);
  EXPECT_EQ(out[1], 2.0);
}

TEST(CmixTest, InterpolateIsAffineInLambda) {
  std::mt19937_64 rng(7);
  Tensor hi = catlab::testing::random_tensor({3, 5, 2}, rng);
  Tensor hj = catlab::testing::random_tensor({3, 5, 2}, rng);
  Tensor lam({3}, {0.1, 0.5, 0.93});
  Tensor out = catlab::interpolate(hi, hj, lam);
  Tensor o0 = catlab::interpolate(hi, hj, Tensor::zeros({3}));
  Tensor o1 = catlab::interpolate(hi, hj, Tensor::full({3}, 1.0));
  for (std::size_t k = 0; k < out.numel(); ++k) {
    const double l = lam[k / 10];
    EXPECT_NEAR(out[k], o0[k] + l * (o1[k] - o0[k]), 1e-12);
  }
}

TEST(CmixTest, InterpolateUnderPositionMaskKeepsUnmaskedExact) {
  std::mt19937_64 rng(8);
  Tensor hi = catlab::testing::random_tensor({2, 4, 3}, rng);
  Tensor hj = catlab::testing::random_tensor({2, 4, 3}, rng);
  const std::vector<std::uint8_t> mask{1, 0, 1, 0, 0, 0, 1, 1};
  Tensor out = catlab::interpolate(hi, hj, Tensor({2}, {0.6, 0.35}), mask);
  for (std::size_t pos = 0; pos < 8; ++pos) {
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t idx = pos * 3 + k;
      if (!mask[pos]) {
        EXPECT_EQ(out[idx], hi[idx]);
      } else {
        const double l = pos < 4 ? 0.6 : 0.35;
        EXPECT_NEAR(out[idx], l * hj[idx] + (1 - l) * hi[idx], 1e-15);
      }
    }
  }
}

TEST(CmixTest, InterpolateRejectsShapeMismatch) {
  EXPECT_THROW(catlab::interpolate(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2})),
               ad::ShapeError);
  EXPECT_THROW(catlab::interpolate(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}), Tensor::zeros({3})),
               ad::ShapeError);
}

TEST(CmixTest, LambdaGradientFlowsThroughInterpolation) {
  std::mt19937_64 rng(9);
  Tensor hi = catlab::testing::random_tensor({2, 3}, rng);
  Tensor hj = catlab::testing::random_tensor({2, 3}, rng);
  Tensor lam({2}, {0.3, 0.8}, true);
  auto g = ad::backward(ad::sum(catlab::interpolate(hi, hj, lam)))[lam];
  for (std::size_t b = 0; b < 2; ++b) {
    double expect = 0.0;
    for (std::size_t k = 0; k < 3; ++k) expect += hj[b * 3 + k] - hi[b * 3 + k];
    EXPECT_NEAR(g[b], expect, 1e-12);
  }
}

TEST(CmixTest, ResolveAttentionMask) {
  catlab::AttentionMask mi{1, 3, {1, 1, 0}};
  catlab::AttentionMask mj{1, 3, {1, 0, 0}};
  EXPECT_EQ(catlab::resolve_attention_mask(MaskStrategy::kUseI, mi, mj, 2, 4)->keep, mi.keep);
  EXPECT_EQ(catlab::resolve_attention_mask(MaskStrategy::kUseJ, mi, mj, 2, 4)->keep, mj.keep);
  EXPECT_FALSE(catlab::resolve_attention_mask(MaskStrategy::kLastLayer, mi, mj, 4, 4).has_value());
  EXPECT_THROW(catlab::resolve_attention_mask(MaskStrategy::kLastLayer, mi, mj, 3, 4),
               catlab::ConfigError);
}

TEST(CmixTest, QaPositionMasks) {
  const auto seg = segments(4, 8);
  const catlab::Span ans{6, 7};
  auto nac = catlab::qa_position_mask(QaMixStrategy::kNonAnswerContext, seg, ans);
  std::vector<std::size_t> on;
  for (std::size_t p = 0; p < nac.size(); ++p)
    if (nac[p]) on.push_back(p);
  EXPECT_EQ(on, (std::vector<std::size_t>{4, 5, 8, 9, 10, 11}));

  auto direct = catlab::qa_position_mask(QaMixStrategy::kDirect, seg, ans);
  EXPECT_TRUE(std::all_of(direct.begin(), direct.end(), [](auto v) { return v == 1; }));
  auto ctx = catlab::qa_position_mask(QaMixStrategy::kContextOnly, seg, ans);
  EXPECT_EQ(std::count(ctx.begin(), ctx.end(), 1), 8);
  auto query = catlab::qa_position_mask(QaMixStrategy::kQueryOnly, seg, ans);
  EXPECT_EQ(std::count(query.begin(), query.end(), 1), 4);

  const auto no_query = segments(0, 12);
  auto empty = catlab::qa_position_mask(QaMixStrategy::kQueryOnly, no_query, ans);
  EXPECT_TRUE(std::all_of(empty.begin(), empty.end(), [](auto v) { return v == 0; }));
}

TEST(CmixTest, QaMaskRejectsAnswerOutsideContext) {
  const auto seg = segments(4, 8);
  EXPECT_THROW(catlab::qa_position_mask(QaMixStrategy::kDirect, seg, {2, 5}), catlab::DataError);
  EXPECT_THROW(catlab::qa_position_mask(QaMixStrategy::kDirect, seg, {10, 12}), catlab::DataError);
}

TEST(CmixTest, StrategyNamesRoundTrip) {
  for (auto s : {MaskStrategy::kUseI, MaskStrategy::kUseJ, MaskStrategy::kLastLayer})
    EXPECT_EQ(catlab::parse_mask_strategy(catlab::to_string(s)), s);
  for (auto s : {QaMixStrategy::kDirect, QaMixStrategy::kContextOnly, QaMixStrategy::kQueryOnly,
                 QaMixStrategy::kNonAnswerContext})
    EXPECT_EQ(catlab::parse_qa_mix_strategy(catlab::to_string(s)), s);
  EXPECT_THROW(catlab::parse_mask_strategy("both"), catlab::ConfigError);
}
