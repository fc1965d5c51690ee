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

// Exact binomial and multinomial tests and Clopper-Pearson intervals.

#pragma once

#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <utility>

#include "advaudio/common.hpp"

namespace advaudio {

struct StatsResult {
  std::string test;
  double statistic = 0.0;
  double p_value = 1.0;
  std::optional<std::pair<double, double>> ci;
  std::size_t n = 0;
  std::size_t k = 0;
  // Monte Carlo runs only.
  std::optional<double> standard_error;
  std::size_t mc_samples = 0;
  // The null hypothesis gives the observation probability zero.
  bool ill_posed = false;
};

enum class Tail : std::uint8_t { greater, less, two_sided };

inline std::optional<Tail> parse_tail(std::string_view s) {
  if (s == "greater") return Tail::greater;
  if (s == "less") return Tail::less;
  if (s == "two_sided" || s == "two-sided") return Tail::two_sided;
  return std::nullopt;
}

inline double log_binomial_pmf(std::size_t k, std::size_t n, double p) {
  if (p <= 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return k == n ? 0.0 : -std::numeric_limits<double>::infinity();
  const double kn = static_cast<double>(k), nn = static_cast<double>(n);
  return std::lgamma(nn + 1.0) - std::lgamma(kn + 1.0) - std::lgamma(nn - kn + 1.0) + kn * std::log(p) +
         (nn - kn) * std::log1p(-p);
}

inline double binomial_pmf(std::size_t k, std::size_t n, double p) { return std::exp(log_binomial_pmf(k, n, p)); }

// P(X >= k) for X ~ B(n, p).
inline double binomial_upper_tail(std::size_t k, std::size_t n, double p) {
  double s = 0.0;
  for (std::size_t i = n + 1; i-- > k;) s += binomial_pmf(i, n, p);
  return std::min(1.0, s);
}

// P(X <= k).
inline double binomial_lower_tail(std::size_t k, std::size_t n, double p) {
  double s = 0.0;
  for (std::size_t i = 0; i <= k; ++i) s += binomial_pmf(i, n, p);
  return std::min(1.0, s);
}

// Relative slack when comparing point probabilities, so outcomes whose
// probabilities differ only by rounding are treated as equally likely.
inline constexpr double kLikelihoodSlack = 1e-7;

// Two-sided p-value: total probability of outcomes no more likely than k.
inline StatsResult binomial_test_exact(std::size_t k, std::size_t n, double p0, Tail tail) {
  if (k > n) throw InvalidArgument("binomial_test_exact: k > n");
  if (!(p0 > 0.0 && p0 < 1.0)) throw InvalidArgument("binomial_test_exact: p0 must be in (0, 1)");
  StatsResult r;
  r.n = n;
  r.k = k;
  r.statistic = n == 0 ? 0.0 : static_cast<double>(k) / static_cast<double>(n);
  switch (tail) {
    case Tail::greater:
      r.test = "binomial-greater";
      r.p_value = binomial_upper_tail(k, n, p0);
      break;
    case Tail::less:
      r.test = "binomial-less";
      r.p_value = binomial_lower_tail(k, n, p0);
      break;
    case Tail::two_sided: {
      r.test = "binomial-two-sided";
      const double limit = log_binomial_pmf(k, n, p0) + std::log1p(kLikelihoodSlack);
      double s = 0.0;
      for (std::size_t i = 0; i <= n; ++i) {
        const double lp = log_binomial_pmf(i, n, p0);
        if (lp <= limit) s += std::exp(lp);
      }
      r.p_value = std::min(1.0, s);
      break;
    }
  }
  return r;
}

namespace detail {

// Root of a monotone function on [lo, hi] by bisection to full precision.
inline double bisect(const std::function<double(double)>& f, double lo, double hi) {
  double flo = f(lo);
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double fm = f(mid);
    if ((fm < 0.0) == (flo < 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Exact interval: the lower bound solves P(X >= k; p) = alpha/2 and the
// upper bound solves P(X <= k; p) = alpha/2.
inline std::pair<double, double> clopper_pearson(std::size_t k, std::size_t n, double level = 0.95) {
  if (k > n) throw InvalidArgument("clopper_pearson: k > n");
  if (n == 0) throw InvalidArgument("clopper_pearson: n must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("clopper_pearson: level must be in (0, 1)");
  const double half = 0.5 * (1.0 - level);
  double lower = 0.0, upper = 1.0;
  if (k > 0) {
    lower = detail::bisect([&](double p) { return binomial_upper_tail(k, n, p) - half; }, 0.0, 1.0);
  }
  if (k < n) {
    upper = detail::bisect([&](double p) { return half - binomial_lower_tail(k, n, p); }, 0.0, 1.0);
  }
  return {lower, upper};
}

enum class MultinomialMethod : std::uint8_t { automatic, enumerate, monte_carlo };

inline constexpr std::size_t kMaxEnumeratedOutcomes = 1'000'000;
inline constexpr std::size_t kMinMonteCarloSamples = 100'000;

// Number of ways to place n balls into k boxes, saturating above `cap`.
inline std::size_t count_compositions(std::size_t n, std::size_t k, std::size_t cap) {
  if (k == 0) return n == 0 ? 1 : 0;
  // C(n + k - 1, k - 1), built up incrementally.
  long double c = 1.0L;
  for (std::size_t i = 1; i < k; ++i) {
    c = c * static_cast<long double>(n + i) / static_cast<long double>(i);
    if (c > static_cast<long double>(cap)) return cap + 1;
  }
  return static_cast<std::size_t>(std::llround(static_cast<double>(c)));
}

// Goodness of fit of the adversarial histogram to the category
// probabilities of the clean histogram. The p-value is the probability,
// under Multinomial(n_adv, p_clean), of an outcome no more likely than the
// observed one.
inline StatsResult multinomial_test_exact(std::span<const std::size_t> observed_clean,
                                          std::span<const std::size_t> observed_adv,
                                          std::size_t mc_samples = kMinMonteCarloSamples, std::uint64_t seed = 0,
                                          MultinomialMethod method = MultinomialMethod::automatic) {
  if (observed_clean.size() != observed_adv.size() || observed_clean.empty()) {
    throw InvalidArgument("multinomial_test_exact: histograms must have the same nonzero length");
  }
  if (mc_samples < kMinMonteCarloSamples) {
    throw InvalidArgument("multinomial_test_exact: mc_samples must be >= 100000");
  }
  const std::size_t clean_total = std::accumulate(observed_clean.begin(), observed_clean.end(), std::size_t{0});
  const std::size_t n = std::accumulate(observed_adv.begin(), observed_adv.end(), std::size_t{0});
  if (clean_total == 0) throw InvalidArgument("multinomial_test_exact: all-zero clean histogram");
  if (n == 0) throw InvalidArgument("multinomial_test_exact: all-zero observed histogram");

  StatsResult r;
  r.test = "multinomial";
  r.n = n;
  std::vector<double> probs;
  std::vector<std::size_t> obs;
  for (std::size_t i = 0; i < observed_clean.size(); ++i) {
    if (observed_clean[i] == 0) {
      if (observed_adv[i] > 0) {
        r.ill_posed = true;
        r.p_value = 0.0;
        r.statistic = -std::numeric_limits<double>::infinity();
        return r;
      }
      continue;
    }
    probs.push_back(static_cast<double>(observed_clean[i]) / static_cast<double>(clean_total));
    obs.push_back(observed_adv[i]);
  }
  const std::size_t k = probs.size();
  std::vector<double> log_p(k);
  for (std::size_t i = 0; i < k; ++i) log_p[i] = std::log(probs[i]);
  const double log_n_fact = std::lgamma(static_cast<double>(n) + 1.0);
  auto log_pmf = [&](std::span<const std::size_t> y) {
    double s = log_n_fact;
    for (std::size_t i = 0; i < k; ++i) {
      s += static_cast<double>(y[i]) * log_p[i] - std::lgamma(static_cast<double>(y[i]) + 1.0);
    }
    return s;
  };
  const double observed_lp = log_pmf(obs);
  r.statistic = observed_lp;
  const double limit = observed_lp + std::log1p(kLikelihoodSlack);

  const std::size_t outcomes = count_compositions(n, k, kMaxEnumeratedOutcomes);
  const bool enumerate = method == MultinomialMethod::enumerate ||
                         (method == MultinomialMethod::automatic && outcomes <= kMaxEnumeratedOutcomes);
  if (enumerate) {
    if (outcomes > kMaxEnumeratedOutcomes) throw InvalidArgument("multinomial_test_exact: outcome space too large");
    std::vector<std::size_t> y(k, 0);
    double total = 0.0;
    // Depth-first walk over all compositions of n into k parts.
    std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t i, std::size_t left) {
      if (i + 1 == k) {
        y[i] = left;
        const double lp = log_pmf(y);
        if (lp <= limit) total += std::exp(lp);
        return;
      }
      for (std::size_t c = 0; c <= left; ++c) {
        y[i] = c;
        walk(i + 1, left - c);
      }
    };
    walk(0, n);
    r.p_value = std::min(1.0, total);
    return r;
  }

  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> draw(probs.begin(), probs.end());
  std::vector<std::size_t> y(k);
  std::size_t hits = 0;
  for (std::size_t s = 0; s < mc_samples; ++s) {
    std::fill(y.begin(), y.end(), 0);
    for (std::size_t j = 0; j < n; ++j) ++y[draw(rng)];
    if (log_pmf(y) <= limit) ++hits;
  }
  const double p = static_cast<double>(hits) / static_cast<double>(mc_samples);
  r.p_value = p;
  r.mc_samples = mc_samples;
  r.standard_error = std::sqrt(p * (1.0 - p) / static_cast<double>(mc_samples));
  return r;
}

}  // namespace advaudio
