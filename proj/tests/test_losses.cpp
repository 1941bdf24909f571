#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace mivqa;

TEST(CombinedLoss, ArithmeticOfTheFormula) {
  // CE_word = -ln(qw), CE_image = -ln(pi); choose probabilities hitting 0.5 and 0.3
  const std::vector<double> q{std::exp(-0.5), 1 - std::exp(-0.5)};
  const std::vector<double> p{std::exp(-0.3), 1 - std::exp(-0.3)};
  EXPECT_NEAR(combined_loss<double>(q, p, 0, 0, 2.0), 1.1, 1e-12);
}

TEST(CombinedLoss, ZeroLambdaIsWordLossAlone) {
  const std::vector<double> q{0.1, 0.2, 0.7};
  const std::vector<double> p{0.6, 0.4};
  EXPECT_DOUBLE_EQ(combined_loss<double>(q, p, 2, 1, 0.0), -std::log(0.7));
}

TEST(CombinedLoss, UniformOverFourAnswersIsLnFour) {
  const std::vector<double> q(4, 0.25);
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(cross_entropy<double>(q, t), 1.3863, 1e-4);
}

TEST(CombinedLoss, ZeroProbabilityIsClamped) {
  const std::vector<double> q{1.0, 0.0};
  EXPECT_NEAR(cross_entropy<double>(q, 1), -std::log(kProbClamp), 1e-9);
  EXPECT_TRUE(std::isfinite(cross_entropy<double>(q, 1)));
}

TEST(CombinedLoss, TargetOutOfRangeIsRejected) {
  const std::vector<double> q{0.5, 0.5};
  try {
    cross_entropy<double>(q, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::TargetOutOfRange);
  }
}

TEST(CombinedLoss, GraphFormMatchesValueForm) {
  ag::Graph<double> g;
  const std::vector<double> qv{0.2, 0.5, 0.3};
  const std::vector<double> pv{0.1, 0.9};
  const auto q = g.constant({3}, qv);
  const auto p = g.constant({2}, pv);
  EXPECT_NEAR(g.scalar(combined_loss(g, q, p, 1, 0, 3.0)), combined_loss<double>(qv, pv, 1, 0, 3.0), 1e-12);
}

TEST(Anneal, GeometricDecay) {
  LossConfig c{.lambda0 = 10, .gamma = 0.5};
  EXPECT_DOUBLE_EQ(anneal_lambda(0, c), 10.0);
  EXPECT_DOUBLE_EQ(anneal_lambda(1, c), 5.0);
  EXPECT_DOUBLE_EQ(anneal_lambda(3, c), 1.25);
}

TEST(Anneal, Floor) {
  LossConfig c{.lambda0 = 10, .gamma = 0.1, .lambda_min = 0.1};
  EXPECT_DOUBLE_EQ(anneal_lambda(5, c), 0.1);
}

TEST(Anneal, GammaOneIsConstant) {
  LossConfig c{.lambda0 = 4, .gamma = 1.0};
  for (int e = 0; e < 20; ++e) EXPECT_DOUBLE_EQ(anneal_lambda(e, c), 4.0);
}

TEST(Anneal, NonIncreasing) {
  for (double gamma : {0.3, 0.7, 0.99, 1.0}) {
    LossConfig c{.lambda0 = 10, .gamma = gamma, .lambda_min = 0.05};
    for (int e = 0; e < 100; ++e) EXPECT_LE(anneal_lambda(e + 1, c), anneal_lambda(e, c));
  }
}

TEST(Anneal, ModesOverrideSchedule) {
  LossConfig c{.lambda0 = 3, .gamma = 0.5};
  c.mode = LossMode::WordOnly;
  EXPECT_EQ(anneal_lambda(0, c), 0.0);
  c.mode = LossMode::Combined;
  EXPECT_EQ(anneal_lambda(7, c), 3.0);
}

TEST(LossConfig, RejectsInvalidValues) {
  EXPECT_THROW((LossConfig{.lambda0 = -1}.validate()), Error);
  EXPECT_THROW((LossConfig{.gamma = 1.5}.validate()), Error);
  EXPECT_THROW((LossConfig{.lambda0 = 1, .lambda_min = 2}.validate()), Error);
}
