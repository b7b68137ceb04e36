#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "flymc/diagnostics.hpp"

using namespace flymc;

namespace {

std::vector<double> ar1(double phi, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(n);
  double v = g(rng) / std::sqrt(1 - phi * phi);
  for (auto& e : x) e = v = phi * v + g(rng);
  return x;
}

ChainTrace trace_from(const std::vector<std::vector<double>>& columns, std::uint64_t queries_per_row) {
  ChainTrace t;
  t.dim = columns.size();
  for (std::size_t i = 0; i < columns[0].size(); ++i) {
    std::vector<double> row;
    for (const auto& c : columns) row.push_back(c[i]);
    t.append(TraceRow{i, 0.0, 3, queries_per_row * (i + 1), i % 2 == 0}, row);
  }
  return t;
}

}  // namespace

TEST(Diagnostics, IidSeriesHasEssNearLength) {
  const auto x = ar1(0.0, 10000, 71);
  const double r = effective_sample_size(x) / 10000.0;
  EXPECT_GE(r, 0.8);
  EXPECT_LE(r, 1.2);
  EXPECT_LE(effective_sample_size(x), 10000.0);
}

TEST(Diagnostics, Ar1EssMatchesAnalyticValue) {
  const auto x = ar1(0.9, 100000, 72);
  const double expected = (1 - 0.9) / (1 + 0.9);
  EXPECT_NEAR(effective_sample_size(x) / 100000.0, expected, 0.3 * expected);
  EXPECT_NEAR(integrated_autocorrelation_time(x), 19.0, 0.3 * 19.0);
}

// The copy sits at lag T, far past where the monotone sequence truncates, so
// the estimator sees the same short-lag correlations and reports about twice
// the original ESS rather than less.
TEST(Diagnostics, RepeatedSeriesCopyIsBeyondTruncationWindow) {
  for (std::uint64_t seed : {73u, 173u, 273u}) {
    const auto x = ar1(0.5, 5000, seed);
    std::vector<double> twice = x;
    twice.insert(twice.end(), x.begin(), x.end());
    EXPECT_NEAR(effective_sample_size(twice) / (2.0 * effective_sample_size(x)), 1.0, 0.02);
  }
}

TEST(Diagnostics, EssIsShiftAndScaleInvariant) {
  const auto x = ar1(0.7, 3000, 74);
  std::vector<double> y(x.size()), z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = 4.0 * x[i];
    z[i] = -3.7 * x[i] + 120.0;
  }
  EXPECT_EQ(effective_sample_size(y), effective_sample_size(x));
  EXPECT_NEAR(effective_sample_size(z), effective_sample_size(x), 1e-9 * effective_sample_size(x));
}

TEST(Diagnostics, EssRejectsDegenerateInput) {
  EXPECT_THROW(effective_sample_size(std::vector<double>(500, 2.5)), std::invalid_argument);
  EXPECT_THROW(effective_sample_size(std::vector<double>(99, 0.0)), std::invalid_argument);
}

TEST(Diagnostics, SpeedupOfIdenticalTracesIsOne) {
  const ChainTrace t = trace_from({ar1(0.3, 1000, 75), ar1(0.6, 1000, 76)}, 50);
  EXPECT_DOUBLE_EQ(speedup(t, t), 1.0);
  const ChainTrace cheap = trace_from({ar1(0.3, 1000, 75), ar1(0.6, 1000, 76)}, 5);
  EXPECT_NEAR(speedup(cheap, t), 10.0, 1e-12);
}

TEST(Diagnostics, QueriesAndRatesUseOnlyKeptRows) {
  const ChainTrace t = trace_from({ar1(0.3, 1000, 77)}, 7);
  EXPECT_EQ(burn_in_rows(t, 0.5), 500u);
  EXPECT_DOUBLE_EQ(average_queries_per_iteration(t), 7.0);
  EXPECT_DOUBLE_EQ(average_bright_count(t), 3.0);
  EXPECT_DOUBLE_EQ(acceptance_rate(t), 0.5);
  const EssReport r = ess_report(t);
  EXPECT_DOUBLE_EQ(queries_per_effective_sample(t), 3500.0 / r.min_ess);
  EXPECT_THROW(burn_in_rows(t, 1.0), std::invalid_argument);
}

TEST(Diagnostics, EssReportPoolsMinimumAndMedian) {
  const ChainTrace t = trace_from({ar1(0.0, 4000, 78), ar1(0.9, 4000, 79), ar1(0.5, 4000, 80)}, 1);
  const EssReport r = ess_report(t, 0.0);
  EXPECT_EQ(r.n_samples, 4000u);
  EXPECT_DOUBLE_EQ(r.min_ess, r.ess[1]);
  EXPECT_DOUBLE_EQ(r.median_ess, r.ess[2]);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_GT(r.ess[d], 0.0);
    EXPECT_LE(r.ess[d], 4000.0);
    EXPECT_NEAR(r.tau[d] * r.ess[d], 4000.0, 1e-9);
  }
}

TEST(Diagnostics, MomentComparisonOfIdenticalChainsIsZero) {
  const ChainTrace t = trace_from({ar1(0.5, 2000, 81), ar1(0.2, 2000, 82)}, 1);
  const MomentComparison c = moment_comparison(t, t);
  EXPECT_EQ(c.max_z(), 0.0);
  EXPECT_FALSE(c.any_flag());
}

TEST(Diagnostics, MomentComparisonFlagsShiftedChain) {
  const auto x = ar1(0.5, 4000, 83);
  std::vector<double> shifted = x;
  for (auto& v : shifted) v += 0.5;
  const MomentComparison c = moment_comparison(trace_from({x}, 1), trace_from({shifted}, 1));
  EXPECT_TRUE(c.any_flag());
  const MomentComparison same = moment_comparison(trace_from({x}, 1), trace_from({ar1(0.5, 4000, 84)}, 1));
  EXPECT_FALSE(same.any_flag());
}

TEST(Diagnostics, SummaryJsonHasTableColumns) {
  const ChainTrace t = trace_from({ar1(0.5, 1000, 85)}, 4);
  AlgorithmSummary s = summarize("untuned", t, 40);
  s.moment_flags = {false};
  const nlohmann::json j = s;
  for (const char* key : {"algorithm", "avg_queries_per_iter", "ess_per_1000", "speedup", "moment_flags"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_DOUBLE_EQ(j["avg_bright_fraction"].get<double>(), 3.0 / 40.0);
}
