// Copyright 2026 The advaudio Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "advaudio/stats.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <gtest/gtest.h>

namespace advaudio {
namespace {

// Clopper-Pearson bounds from beta quantiles.
std::pair<double, double> beta_interval(std::size_t k, std::size_t n, double level) {
  const double a = 1.0 - level;
  const double lo = k == 0 ? 0.0 : boost::math::ibeta_inv(double(k), double(n - k + 1), a / 2);
  const double hi = k == n ? 1.0 : boost::math::ibeta_inv(double(k + 1), double(n - k), 1 - a / 2);
  return {lo, hi};
}

TEST(BinomialTest, PaperAnchors) {
  const auto greater = binomial_test_exact(20, 36, 0.5, Tail::greater);
  EXPECT_GE(greater.p_value, 0.30);
  EXPECT_LE(greater.p_value, 0.32);
  EXPECT_NEAR(greater.p_value, 0.3089, 5e-5);
  const auto two = binomial_test_exact(20, 36, 0.5, Tail::two_sided);
  EXPECT_GE(two.p_value, 0.61);
  EXPECT_LE(two.p_value, 0.63);
}

TEST(BinomialTest, MatchesBoostTails) {
  for (std::size_t n : {1u, 5u, 36u, 100u}) {
    for (double p : {0.1, 0.5, 0.83}) {
      boost::math::binomial_distribution<double> dist(double(n), p);
      for (std::size_t k = 0; k <= n; ++k) {
        const double upper = k == 0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, double(k) - 1));
        const double lower = boost::math::cdf(dist, double(k));
        ASSERT_NEAR(binomial_test_exact(k, n, p, Tail::greater).p_value, upper, 1e-12) << k << "/" << n;
        ASSERT_NEAR(binomial_test_exact(k, n, p, Tail::less).p_value, lower, 1e-12) << k << "/" << n;
      }
    }
  }
}

TEST(BinomialTest, ClosedFormsAndSymmetry) {
  EXPECT_NEAR(binomial_test_exact(36, 36, 0.5, Tail::greater).p_value, std::pow(0.5, 36), 1e-25);
  EXPECT_NEAR(binomial_test_exact(18, 36, 0.5, Tail::two_sided).p_value, 1.0, 1e-12);
  // For p0 = 1/2 the two-sided value is twice the smaller tail.
  for (std::size_t k = 0; k < 18; ++k) {
    EXPECT_NEAR(binomial_test_exact(k, 36, 0.5, Tail::two_sided).p_value,
                2.0 * binomial_test_exact(k, 36, 0.5, Tail::less).p_value, 1e-12);
  }
  EXPECT_THROW(binomial_test_exact(5, 4, 0.5, Tail::greater), InvalidArgument);
  EXPECT_THROW(binomial_test_exact(1, 4, 1.0, Tail::greater), InvalidArgument);
  EXPECT_EQ(parse_tail("two-sided"), Tail::two_sided);
  EXPECT_FALSE(parse_tail("both"));
}

TEST(BinomialTest, TwoSidedMatchesBruteForceForSkewedNull) {
  const std::size_t n = 30;
  const double p0 = 0.3;
  for (std::size_t k = 0; k <= n; ++k) {
    boost::math::binomial_distribution<double> dist(double(n), p0);
    const double pk = boost::math::pdf(dist, double(k));
    double s = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
      const double pi = boost::math::pdf(dist, double(i));
      if (pi <= pk * (1 + 1e-7)) s += pi;
    }
    ASSERT_NEAR(binomial_test_exact(k, n, p0, Tail::two_sided).p_value, std::min(1.0, s), 1e-12) << k;
  }
}

TEST(ClopperPearson, PaperAnchors) {
  const auto a = clopper_pearson(35, 36);
  EXPECT_NEAR(a.first, 0.85, 0.01);
  EXPECT_NEAR(a.second, 0.99, 0.01);
  const auto b = clopper_pearson(33, 36);
  EXPECT_NEAR(b.first, 0.78, 0.01);
  EXPECT_NEAR(b.second, 0.98, 0.01);
  const auto c = clopper_pearson(20, 36);
  EXPECT_NEAR(c.first, 0.38, 0.01);
  EXPECT_NEAR(c.second, 0.72, 0.01);
  EXPECT_EQ(clopper_pearson(36, 36).second, 1.0);
  EXPECT_EQ(clopper_pearson(0, 36).first, 0.0);
}

TEST(ClopperPearson, MatchesBetaQuantiles) {
  for (std::size_t n : {1u, 7u, 36u, 250u}) {
    for (std::size_t k = 0; k <= n; k += std::max<std::size_t>(1, n / 9)) {
      for (double level : {0.9, 0.95, 0.99}) {
        const auto got = clopper_pearson(k, n, level);
        const auto want = beta_interval(k, n, level);
        ASSERT_NEAR(got.first, want.first, 1e-10) << k << "/" << n;
        ASSERT_NEAR(got.second, want.second, 1e-10) << k << "/" << n;
      }
    }
  }
  EXPECT_THROW(clopper_pearson(0, 0), InvalidArgument);
  EXPECT_THROW(clopper_pearson(1, 2, 1.0), InvalidArgument);
}

TEST(Multinomial, EnumerationAgreesWithMonteCarlo) {
  const std::vector<std::size_t> clean = {3, 2, 3}, adv = {4, 1, 3};
  const auto exact = multinomial_test_exact(clean, adv, kMinMonteCarloSamples, 1, MultinomialMethod::enumerate);
  const auto mc = multinomial_test_exact(clean, adv, kMinMonteCarloSamples, 1, MultinomialMethod::monte_carlo);
  ASSERT_TRUE(mc.standard_error);
  EXPECT_FALSE(exact.standard_error);
  EXPECT_LE(std::abs(exact.p_value - mc.p_value), 3.0 * *mc.standard_error);
  EXPECT_EQ(mc.mc_samples, kMinMonteCarloSamples);

  const std::vector<std::size_t> clean5 = {2, 5, 1, 0, 4}, adv5 = {0, 2, 3, 0, 5};
  const auto e5 = multinomial_test_exact(clean5, adv5, kMinMonteCarloSamples, 2, MultinomialMethod::enumerate);
  const auto m5 = multinomial_test_exact(clean5, adv5, kMinMonteCarloSamples, 2, MultinomialMethod::monte_carlo);
  EXPECT_LE(std::abs(e5.p_value - m5.p_value), 3.0 * *m5.standard_error);
}

TEST(Multinomial, BinomialSpecialCase) {
  // Two categories reduce to the two-sided binomial test.
  const std::vector<std::size_t> clean = {1, 1}, adv = {7, 13};
  const auto m = multinomial_test_exact(clean, adv);
  EXPECT_NEAR(m.p_value, binomial_test_exact(7, 20, 0.5, Tail::two_sided).p_value, 1e-12);
}

TEST(Multinomial, ProportionalObservationIsUnremarkable) {
  const std::vector<std::size_t> clean = {10, 20, 30, 40}, adv = {1, 2, 3, 4};
  EXPECT_GE(multinomial_test_exact(clean, adv).p_value, 0.99);
}

TEST(Multinomial, ImpossibleOutcomeIsIllPosed) {
  const std::vector<std::size_t> clean = {5, 0, 3}, adv = {1, 2, 1};
  const auto r = multinomial_test_exact(clean, adv);
  EXPECT_TRUE(r.ill_posed);
  EXPECT_EQ(r.p_value, 0.0);
}

TEST(Multinomial, InputValidation) {
  const std::vector<std::size_t> a = {1, 2}, b = {1, 2, 3}, z = {0, 0};
  EXPECT_THROW(multinomial_test_exact(a, b), InvalidArgument);
  EXPECT_THROW(multinomial_test_exact(z, a), InvalidArgument);
  EXPECT_THROW(multinomial_test_exact(a, z), InvalidArgument);
  EXPECT_THROW(multinomial_test_exact(a, a, 1000), InvalidArgument);
  EXPECT_EQ(count_compositions(8, 3, 1000000), 45u);
}

TEST(Multinomial, LargeCasesFallBackToMonteCarlo) {
  const std::vector<std::size_t> clean = {30, 25, 20, 15, 10}, adv = {40, 30, 20, 5, 5};
  const auto r = multinomial_test_exact(clean, adv);
  EXPECT_TRUE(r.standard_error.has_value());
  const auto again = multinomial_test_exact(clean, adv);
  EXPECT_EQ(r.p_value, again.p_value);
}

}  // namespace
}  // namespace advaudio
