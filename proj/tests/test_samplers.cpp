#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "flymc/diagnostics.hpp"
#include "flymc/harness.hpp"
#include "flymc/samplers.hpp"
#include "test_support.hpp"

using namespace flymc;

namespace {

class GaussianTarget final : public Target {
 public:
  GaussianTarget(std::vector<double> mean, std::vector<double> sd) : mean_(std::move(mean)), sd_(std::move(sd)) {}
  std::size_t dim() const override { return mean_.size(); }
  double log_density(std::span<const double> x) override {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s -= 0.5 * std::pow((x[i] - mean_[i]) / sd_[i], 2);
    return s;
  }
  double log_density_grad(std::span<const double> x, std::span<double> g) override {
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = -(x[i] - mean_[i]) / (sd_[i] * sd_[i]);
    return log_density(x);
  }

 private:
  std::vector<double> mean_, sd_;
};

class UnitBoxTarget final : public Target {
 public:
  std::size_t dim() const override { return 1; }
  double log_density(std::span<const double> x) override {
    return x[0] >= 0.0 && x[0] <= 1.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  }
  double log_density_grad(std::span<const double> x, std::span<double> g) override {
    g[0] = 0.0;
    return log_density(x);
  }
};

struct KernelRun {
  std::vector<double> samples;
  double accept_rate = 0.0;
};

KernelRun run_kernel(KernelConfig cfg, Target& target, std::size_t adapt, std::size_t keep, std::uint64_t seed) {
  auto kernel = make_kernel(cfg);
  ChainPosition pos;
  pos.theta.assign(target.dim(), 0.5);
  pos.grad.assign(target.dim(), 0.0);
  pos.log_density = target.log_density_grad(pos.theta, pos.grad);
  pos.has_grad = true;
  Rng rng = make_rng(seed, 0);
  KernelRun r;
  for (std::size_t i = 0; i < adapt + keep; ++i) {
    const StepResult s = kernel->step(target, pos, rng);
    if (i < adapt) {
      kernel->adapt(s.accept_prob);
      if (i + 1 == adapt) kernel->freeze();
    } else {
      r.samples.push_back(pos.theta[0]);
      r.accept_rate += s.accepted ? 1.0 : 0.0;
    }
  }
  r.accept_rate /= static_cast<double>(keep);
  return r;
}

struct LogisticFixture {
  Dataset data;
  std::unique_ptr<LogisticModel> model;
  Prior prior{PriorKind::Gaussian, 1.0};

  LogisticFixture(std::size_t n, std::size_t d, std::uint64_t seed) {
    data = generate_synthetic(SyntheticSpec{}, Family::Logistic, n, d, 0, seed).data;
    model = std::make_unique<LogisticModel>(data);
  }
};

}  // namespace

TEST(Samplers, BrightnessMarginalizesToTheFullPosterior) {
  LogisticFixture fx(2, 1, 51);
  auto bound = make_bound(BoundParams{BoundFamily::JaakkolaJordan, {0.7, -2.0}, {}}, *fx.model);
  const CollapsedBound collapsed = bound->collapse();
  QueryMeter meter;
  MeteredLikelihood lik(*fx.model, meter);
  for (int g = 0; g <= 200; ++g) {
    std::vector<double> theta{-5.0 + 10.0 * g / 200.0};
    double terms[4];
    for (int z = 0; z < 4; ++z) {
      BrightnessSet set(2);
      BrightCache cache(2, 1, false);
      if (z & 1) set.brighten(0);
      if (z & 2) set.brighten(1);
      FireflyTarget target(lik, *bound, collapsed, fx.prior, set, cache);
      terms[z] = target.log_density(theta);
    }
    const double mx = *std::max_element(terms, terms + 4);
    double s = 0;
    for (double t : terms) s += std::exp(t - mx);
    const double marginal = mx + std::log(s);
    EXPECT_NEAR(marginal, full_log_posterior(theta, lik, fx.prior), 1e-10) << "theta=" << theta[0];
  }
}

TEST(Samplers, FireflyTargetGradientAndCache) {
  LogisticFixture fx(40, 3, 52);
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 3), *fx.model);
  const CollapsedBound collapsed = bound->collapse();
  QueryMeter meter;
  MeteredLikelihood lik(*fx.model, meter);
  BrightnessSet set(40);
  for (std::size_t n = 0; n < 40; n += 3) set.brighten(n);
  BrightCache cache(40, 3, true);
  FireflyTarget target(lik, *bound, collapsed, fx.prior, set, cache);

  std::vector<double> theta{0.3, -0.2, 0.5}, grad(3);
  const std::uint64_t before = meter.count();
  const double v = target.log_density_grad(theta, grad);
  EXPECT_EQ(meter.count() - before, set.num_bright());
  for (std::size_t j = 0; j < 3; ++j) {
    auto tp = theta, tm = theta;
    tp[j] += 1e-6;
    tm[j] -= 1e-6;
    const double fd = (target.log_density(tp) - target.log_density(tm)) / 2e-6;
    EXPECT_NEAR(grad[j], fd, 1e-4 * (1 + std::abs(fd)));
  }
  target.log_density_grad(theta, grad);
  target.accept_last();
  EXPECT_TRUE(cache.matches(set));
  std::vector<double> cached_grad(3);
  const std::uint64_t mid = meter.count();
  EXPECT_NEAR(target.log_density_cached(theta, cached_grad), v, 1e-12);
  EXPECT_EQ(meter.count(), mid);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(cached_grad[j], grad[j], 1e-12);
}

TEST(Samplers, KernelsRecoverGaussianMoments) {
  for (KernelKind kind : {KernelKind::RandomWalk, KernelKind::Mala, KernelKind::Slice}) {
    GaussianTarget target({1.5}, {0.7});
    KernelConfig cfg;
    cfg.kind = kind;
    const KernelRun r = run_kernel(cfg, target, 5000, 40000, 53);
    std::vector<double> sq;
    double mean = 0;
    for (double x : r.samples) mean += x;
    mean /= r.samples.size();
    for (double x : r.samples) sq.push_back((x - mean) * (x - mean));
    double var = 0;
    for (double y : sq) var += y;
    var /= sq.size();
    const double se_mean = std::sqrt(var / effective_sample_size(r.samples));
    EXPECT_NEAR(mean, 1.5, 3 * se_mean) << kernel_name(kind);
    double var_of_sq = 0;
    for (double y : sq) var_of_sq += (y - var) * (y - var);
    const double se_var = std::sqrt(var_of_sq / sq.size() / effective_sample_size(sq));
    EXPECT_NEAR(var, 0.49, 3 * se_var) << kernel_name(kind);
  }
}

TEST(Samplers, StepAdaptationHitsTargetAcceptance) {
  GaussianTarget target({0.0, 0.0, 0.0}, {1.0, 0.5, 2.0});
  for (KernelKind kind : {KernelKind::RandomWalk, KernelKind::Mala}) {
    KernelConfig cfg;
    cfg.kind = kind;
    cfg.step = 0.01;
    const KernelRun r = run_kernel(cfg, target, 5000, 20000, 54);
    EXPECT_NEAR(r.accept_rate, cfg.target_accept(), 0.05) << kernel_name(kind);
  }
}

TEST(Samplers, SliceOnUniformPassesKolmogorovSmirnov) {
  UnitBoxTarget target;
  KernelConfig cfg;
  cfg.kind = KernelKind::Slice;
  cfg.width = 0.3;
  KernelRun r = run_kernel(cfg, target, 0, 10000, 55);
  std::sort(r.samples.begin(), r.samples.end());
  double d = 0;
  const double n = static_cast<double>(r.samples.size());
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    d = std::max({d, std::abs((i + 1) / n - r.samples[i]), std::abs(r.samples[i] - i / n)});
  }
  EXPECT_LT(d * std::sqrt(n), 1.949);  // alpha = 0.001
}

TEST(Samplers, FireflyChainIsDeterministicAndCacheConsistent) {
  LogisticFixture fx(200, 2, 56);
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 2), *fx.model);
  for (KernelKind kind : {KernelKind::RandomWalk, KernelKind::Mala, KernelKind::Slice}) {
    KernelConfig cfg;
    cfg.kind = kind;
    FireflySampler a(*fx.model, *bound, fx.prior, cfg, ImplicitResample{}, {0.0, 0.0}, 7, 50);
    FireflySampler b(*fx.model, *bound, fx.prior, cfg, ImplicitResample{}, {0.0, 0.0}, 7, 50);
    for (int i = 0; i < 200; ++i) {
      const TraceRow ra = a.iterate();
      const TraceRow rb = b.iterate();
      ASSERT_EQ(ra.log_joint, rb.log_joint);
      ASSERT_EQ(ra.cum_queries, rb.cum_queries);
      ASSERT_EQ(a.state().theta, b.state().theta);
      ASSERT_TRUE(a.state().cache.matches(a.state().brightness));
      ASSERT_NEAR(a.recompute_log_joint(), a.state().cached_log_joint, 1e-9) << kernel_name(kind);
    }
  }
}

TEST(Samplers, ExplicitResamplingQueryAccounting) {
  LogisticFixture fx(100, 2, 57);
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 2), *fx.model);
  KernelConfig cfg;
  FireflySampler s(*fx.model, *bound, fx.prior, cfg, ExplicitResample{0.1}, {0.0, 0.0}, 8, 0);
  std::uint64_t prev = s.meter().count();
  EXPECT_EQ(prev, 100u);  // initial exact sweep
  for (int i = 0; i < 100; ++i) {
    const TraceRow r = s.iterate();
    // ceil(N * 0.1) resampling queries plus one proposal over the M bright.
    EXPECT_EQ(r.cum_queries - prev, 10u + r.n_bright);
    prev = r.cum_queries;
  }
}

TEST(Samplers, FullDataChainCostsNPerEvaluation) {
  LogisticFixture fx(30, 2, 58);
  KernelConfig cfg;
  FullDataSampler s(*fx.model, fx.prior, cfg, {0.0, 0.0}, 9, 0);
  const ChainTrace t = s.run(10);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.rows[i].cum_queries, 30u * (i + 2));
  EXPECT_EQ(t.rows[0].n_bright, 30u);
}

TEST(Samplers, FireflyMatchesGridOracleOnSmallProblem) {
  LogisticFixture fx(50, 1, 59);
  const GridOracle oracle = grid_posterior_oracle(*fx.model, fx.prior, GridSpec{});
  auto bound = make_bound(untuned_bound_params(Family::Logistic, 1), *fx.model);
  KernelConfig cfg;
  FireflySampler s(*fx.model, *bound, fx.prior, cfg, ImplicitResample{}, {0.0}, 10, 5000);
  const ChainTrace t = s.run(45000);
  const MomentComparison cmp = moment_comparison(chain_moments(t, 1.0 / 9.0), oracle.moments());
  EXPECT_LT(cmp.max_z(), 4.0);
}

TEST(Samplers, TraceFilesRoundTrip) {
  LogisticFixture fx(20, 3, 60);
  FullDataSampler s(*fx.model, fx.prior, KernelConfig{}, {0.0, 0.0, 0.0}, 11, 0);
  const ChainTrace t = s.run(25);
  const auto dir = std::filesystem::temp_directory_path() / "flymc_trace_roundtrip";
  std::filesystem::create_directories(dir);
  write_theta_bin(t, dir / "theta.bin");
  write_trace_csv(t, dir / "trace.csv");
  EXPECT_EQ(std::filesystem::file_size(dir / "theta.bin"), 16u + 25u * 3u * 8u);
  const ChainTrace back = load_chain(dir);
  EXPECT_EQ(back.theta, t.theta);
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back.rows[i].log_joint, t.rows[i].log_joint);
    EXPECT_EQ(back.rows[i].cum_queries, t.rows[i].cum_queries);
    EXPECT_EQ(back.rows[i].accepted, t.rows[i].accepted);
  }
  std::filesystem::remove_all(dir);
}

TEST(Samplers, ConfigChecks) {
  KernelConfig bad;
  bad.step = 1e-13;
  EXPECT_THROW(validate_kernel_config(bad), std::invalid_argument);
  EXPECT_EQ(parse_kernel("mala"), KernelKind::Mala);
  EXPECT_THROW(parse_kernel("hmc"), std::invalid_argument);
  EXPECT_TRUE(make_kernel(KernelConfig{KernelKind::Mala})->needs_gradient());
  LogisticFixture fx(10, 2, 61);
  EXPECT_THROW(FullDataSampler(*fx.model, fx.prior, KernelConfig{}, {0.0}, 1, 0), std::invalid_argument);
}
