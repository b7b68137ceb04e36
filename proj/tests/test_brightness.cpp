#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "flymc/brightness.hpp"
#include "test_support.hpp"

using namespace flymc;

TEST(BrightnessSet, StartsDarkAndFlipsIdempotently) {
  BrightnessSet s(5);
  EXPECT_EQ(s.num_bright(), 0u);
  EXPECT_EQ(s.num_dark(), 5u);
  s.brighten(3);
  s.brighten(3);
  EXPECT_EQ(s.num_bright(), 1u);
  EXPECT_TRUE(s.is_bright(3));
  EXPECT_EQ(s.ith_bright(0), 3u);
  s.darken(3);
  s.darken(3);
  EXPECT_EQ(s.num_bright(), 0u);
  EXPECT_TRUE(s.check_invariants());
  EXPECT_THROW(s.ith_bright(0), std::out_of_range);
  EXPECT_THROW(s.ith_dark(5), std::out_of_range);
}

TEST(BrightnessSet, MatchesReferenceSetUnderRandomOperations) {
  const std::size_t n = 257;
  BrightnessSet s(n);
  std::set<std::size_t> ref;
  std::mt19937_64 rng(41);
  for (int op = 0; op < 10000; ++op) {
    const std::size_t k = rng() % n;
    switch (rng() % 4) {
      case 0:
        s.brighten(k);
        ref.insert(k);
        break;
      case 1:
        s.darken(k);
        ref.erase(k);
        break;
      case 2:
        if (!ref.empty()) {
          const std::size_t i = rng() % ref.size();
          EXPECT_TRUE(ref.contains(s.ith_bright(i)));
        }
        break;
      case 3:
        if (ref.size() < n) {
          const std::size_t i = rng() % (n - ref.size());
          EXPECT_FALSE(ref.contains(s.ith_dark(i)));
        }
        break;
    }
    ASSERT_TRUE(s.check_invariants());
    ASSERT_EQ(s.num_bright(), ref.size());
    ASSERT_EQ(s.is_bright(k), ref.contains(k));
  }
  std::set<std::size_t> bright(s.bright().begin(), s.bright().end());
  EXPECT_EQ(bright, ref);
  for (std::size_t d : s.dark()) EXPECT_FALSE(ref.contains(d));
}

TEST(BrightnessSet, JsonSnapshotRoundTrip) {
  BrightnessSet s(10);
  for (std::size_t k : {7u, 2u, 9u}) s.brighten(k);
  const nlohmann::json j = brightness_to_json(s);
  EXPECT_EQ(j, nlohmann::json::parse("[2,7,9]"));
  const BrightnessSet back = brightness_from_json(j, 10);
  EXPECT_EQ(back.num_bright(), 3u);
  EXPECT_TRUE(back.is_bright(7));
  EXPECT_THROW(brightness_from_json(nlohmann::json::object(), 10), std::invalid_argument);
}

TEST(Brightness, ProbabilityHelpers) {
  EXPECT_NEAR(bright_probability_from_logs(std::log(0.8), std::log(0.6)), 0.25, 1e-15);
  EXPECT_NEAR(pseudo_likelihood(std::log(0.8), std::log(0.6)), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(bright_log_factor(std::log(0.8), std::log(0.6)), std::log(1.0 / 3.0), 1e-14);
  EXPECT_EQ(bright_log_factor(-1.0, -1.0), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(bright_probability_from_logs(-1.0, -1.0 + 1e-12), 0.0);
  EXPECT_THROW(bright_log_factor(-1.0, -0.5), BoundViolation);
  EXPECT_THROW(bright_probability_from_logs(-1.0, -0.9), BoundViolation);
}

TEST(Brightness, ImplicitKernelSatisfiesDetailedBalance) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    const double log_l = std::log(u(rng));
    const double log_b = log_l + std::log(u(rng));
    const double q_db = 0.01 + 0.99 * u(rng);
    const double q_bd = 0.01 + 0.99 * u(rng);
    const auto t = implicit_transition_matrix(log_l, log_b, q_db, q_bd);
    // Target: p(dark) proportional to B, p(bright) to L - B.
    const double pi_dark = std::exp(log_b - log_l);
    const double pi_bright = 1.0 - pi_dark;
    EXPECT_NEAR(pi_dark * t[0][1], pi_bright * t[1][0], 1e-12);
    EXPECT_NEAR(t[0][0] + t[0][1], 1.0, 1e-15);
    EXPECT_NEAR(t[1][0] + t[1][1], 1.0, 1e-15);
    EXPECT_NEAR(pi_dark * t[0][0] + pi_bright * t[1][0], pi_dark, 1e-12);
  }
}

namespace {

struct ThreeSites {
  Dataset data;
  std::unique_ptr<LogisticModel> model;
  std::unique_ptr<LowerBound> bound;
  std::vector<double> theta{1.0};
  std::array<double, 3> p{};

  ThreeSites() {
    data.n_points = 3;
    data.n_features = 1;
    data.features = {1.0, -0.5, 2.0};
    data.targets = {1.0, 1.0, -1.0};
    model = std::make_unique<LogisticModel>(data);
    bound = make_bound(BoundParams{BoundFamily::JaakkolaJordan, {4.0, 3.0, 0.2}, {}}, *model);
    for (std::size_t n = 0; n < 3; ++n) p[n] = -std::expm1(bound->log_bound(n, theta) - model->log_lik(n, theta));
  }

  double chi_square(const std::array<double, 8>& counts, double total) const {
    double chi2 = 0.0;
    for (std::size_t s = 0; s < 8; ++s) {
      double e = total;
      for (std::size_t n = 0; n < 3; ++n) e *= ((s >> n) & 1) ? p[n] : 1.0 - p[n];
      chi2 += (counts[s] - e) * (counts[s] - e) / e;
    }
    return chi2;
  }
};

std::size_t state_of(const BrightnessSet& s) {
  std::size_t k = 0;
  for (std::size_t n = 0; n < 3; ++n) k |= static_cast<std::size_t>(s.is_bright(n)) << n;
  return k;
}

// 0.999 quantile of chi-square with 7 degrees of freedom.
constexpr double kChi2Crit = 24.322;

}  // namespace

TEST(Brightness, ImplicitSweepsSampleTheExactConditional) {
  ThreeSites sites;
  for (double p : sites.p) ASSERT_GT(p, 0.02);
  QueryMeter meter;
  MeteredLikelihood lik(*sites.model, meter);
  BrightCache cache(3, 1, false);
  BrightnessSet set(3);
  Rng rng(43);
  std::array<double, 8> counts{};
  const ImplicitResample cfg{0.3, 0.7};
  const int draws = 20000, thin = 10;
  for (int i = 0; i < draws * thin; ++i) {
    implicit_resample(set, sites.theta, cfg, ResampleContext{lik, *sites.bound, cache}, rng);
    ASSERT_TRUE(cache.matches(set));
    if (i % thin == thin - 1) counts[state_of(set)] += 1;
  }
  EXPECT_LT(sites.chi_square(counts, draws), kChi2Crit);
}

TEST(Brightness, ExplicitAndGibbsSampleTheExactConditional) {
  ThreeSites sites;
  QueryMeter meter;
  MeteredLikelihood lik(*sites.model, meter);
  BrightCache cache(3, 1, true);
  BrightnessSet set(3);
  Rng rng(44);
  std::array<double, 8> explicit_counts{}, gibbs_counts{};
  const int draws = 20000;
  for (int i = 0; i < draws * 4; ++i) {
    explicit_resample(set, sites.theta, ExplicitResample{0.5}, ResampleContext{lik, *sites.bound, cache}, rng);
    if (i % 4 == 3) explicit_counts[state_of(set)] += 1;
  }
  EXPECT_LT(sites.chi_square(explicit_counts, draws), kChi2Crit);
  for (int i = 0; i < draws; ++i) {
    gibbs_sweep(set, sites.theta, ResampleContext{lik, *sites.bound, cache}, rng);
    gibbs_counts[state_of(set)] += 1;
    ASSERT_TRUE(cache.matches(set));
  }
  EXPECT_LT(sites.chi_square(gibbs_counts, draws), kChi2Crit);
}

TEST(Brightness, QueryCounts) {
  const Dataset data = flymc::testing::random_dataset(Family::Logistic, 100, 2, 0, 45);
  LogisticModel model(data);
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 2), model);
  QueryMeter meter;
  MeteredLikelihood lik(model, meter);
  BrightCache cache(100, 2, false);
  BrightnessSet set(100);
  Rng rng(46);
  std::vector<double> theta{0.5, -0.3};

  gibbs_sweep(set, theta, ResampleContext{lik, *bound, cache}, rng);
  EXPECT_EQ(meter.count(), 100u);

  explicit_resample(set, theta, ExplicitResample{0.123}, ResampleContext{lik, *bound, cache}, rng);
  EXPECT_EQ(meter.count(), 100u + 13u);

  const std::size_t dark = set.num_dark();
  const std::uint64_t before = meter.count();
  implicit_resample(set, theta, ImplicitResample{1.0, 1.0}, ResampleContext{lik, *bound, cache}, rng);
  EXPECT_EQ(meter.count() - before, dark);

  BrightCache partial(100, 2, false);
  set.brighten(0);
  EXPECT_THROW(implicit_resample(set, theta, ImplicitResample{0.5, 1.0}, ResampleContext{lik, *bound, partial}, rng),
               std::logic_error);
  EXPECT_THROW(implicit_resample(set, theta, ImplicitResample{0.0, 1.0}, ResampleContext{lik, *bound, cache}, rng),
               std::invalid_argument);
}

TEST(Brightness, CachedFactorGradientMatchesFiniteDifferences) {
  const Dataset data = flymc::testing::random_dataset(Family::Logistic, 20, 2, 0, 47);
  LogisticModel model(data);
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 2), model);
  QueryMeter meter;
  MeteredLikelihood lik(model, meter);
  BrightCache cache(20, 2, true);
  BrightnessSet set(20);
  for (std::size_t n = 0; n < 20; ++n) set.brighten(n);
  std::vector<double> theta{1.1, -2.0};
  fill_bright_cache(set, theta, ResampleContext{lik, *bound, cache});
  auto factor = [&](std::size_t n, std::vector<double> t) {
    return bright_log_factor(model.log_lik(n, t), bound->log_bound(n, t));
  };
  for (std::size_t n = 0; n < 20; ++n) {
    ASSERT_TRUE(cache.valid(n));
    if (!std::isfinite(factor(n, theta))) continue;
    for (std::size_t j = 0; j < 2; ++j) {
      auto tp = theta, tm = theta;
      tp[j] += 1e-6;
      tm[j] -= 1e-6;
      const double fd = (factor(n, tp) - factor(n, tm)) / 2e-6;
      EXPECT_NEAR(cache.factor_grad(n)[j], fd, 1e-5 * (1 + std::abs(fd)));
    }
  }
}

TEST(Brightness, ResampleConfigValidation) {
  EXPECT_NO_THROW(validate_resample_config(ExplicitResample{1.0}));
  EXPECT_THROW(validate_resample_config(ExplicitResample{0.0}), std::invalid_argument);
  EXPECT_THROW(validate_resample_config(ImplicitResample{1.5, 1.0}), std::invalid_argument);
  EXPECT_THROW(validate_resample_config(ImplicitResample{0.1, 0.0}), std::invalid_argument);
  EXPECT_NO_THROW(validate_resample_config(ImplicitResample{0.0, 1.0}));
}
