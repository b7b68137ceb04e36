#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "flymc/model.hpp"
#include "test_support.hpp"

using namespace flymc;
using flymc::testing::random_dataset;
using flymc::testing::random_theta;

namespace {

void expect_gradient_matches_fd(const LikelihoodModel& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t p = m.n_params();
  std::vector<double> grad(p);
  for (std::size_t n = 0; n < std::min<std::size_t>(m.n_points(), 10); ++n) {
    auto theta = random_theta(p, 1.0, rng);
    const double v = m.log_lik_grad(n, theta, grad);
    EXPECT_DOUBLE_EQ(v, m.log_lik(n, theta));
    for (std::size_t j = 0; j < p; ++j) {
      const double h = 1e-6;
      auto tp = theta, tm = theta;
      tp[j] += h;
      tm[j] -= h;
      const double fd = (m.log_lik(n, tp) - m.log_lik(n, tm)) / (2 * h);
      EXPECT_NEAR(grad[j], fd, 1e-6 * (1 + std::abs(fd))) << "n=" << n << " j=" << j;
    }
  }
}

}  // namespace

TEST(Model, LogisticMatchesDirectFormula) {
  const Dataset data = random_dataset(Family::Logistic, 20, 3, 0, 1);
  LogisticModel m(data);
  std::vector<double> theta{0.4, -1.2, 2.0};
  for (std::size_t n = 0; n < data.n_points; ++n) {
    long double margin = 0;
    for (std::size_t j = 0; j < 3; ++j) margin += data.row(n)[j] * theta[j];
    const long double ref = -std::log1p(std::exp(-static_cast<long double>(data.targets[n]) * margin));
    EXPECT_NEAR(m.log_lik(n, theta), static_cast<double>(ref), 1e-13);
  }
}

TEST(Model, LogisticStableAtExtremeMargins) {
  Dataset data;
  data.n_points = 2;
  data.n_features = 1;
  data.features = {1.0, 1.0};
  data.targets = {1.0, -1.0};
  LogisticModel m(data);
  std::vector<double> theta{800.0};
  EXPECT_NEAR(m.log_lik(0, theta), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(m.log_lik(1, theta), -800.0);
  EXPECT_DOUBLE_EQ(softplus(1000.0), 1000.0);
  EXPECT_NEAR(softplus(-1000.0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(softplus(0.0), std::log(2.0));
}

TEST(Model, SoftmaxProbabilitiesSumToOne) {
  Dataset data = random_dataset(Family::Softmax, 3, 4, 3, 2);
  SoftmaxModel m(data);
  std::mt19937_64 rng(3);
  auto theta = random_theta(m.n_params(), 1.5, rng);
  double total = 0.0;
  for (int label = 1; label <= 3; ++label) {
    data.targets[0] = label;
    total += std::exp(m.log_lik(0, theta));
  }
  EXPECT_NEAR(total, 1.0, 1e-14);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  const Dataset lg = random_dataset(Family::Logistic, 12, 4, 0, 4);
  const Dataset sm = random_dataset(Family::Softmax, 12, 3, 4, 5);
  const Dataset rt = random_dataset(Family::RobustT, 12, 4, 0, 6);
  expect_gradient_matches_fd(LogisticModel(lg), 7);
  expect_gradient_matches_fd(SoftmaxModel(sm), 8);
  expect_gradient_matches_fd(RobustTModel(rt, 4.0, 0.7), 9);
}

TEST(Model, StudentTDensityAtZero) {
  Dataset data;
  data.n_points = 1;
  data.n_features = 1;
  data.features = {1.0};
  data.targets = {0.0};
  RobustTModel m(data, 4.0, 1.0);
  // t_4 density at 0 is Gamma(5/2) / (sqrt(4 pi) Gamma(2)) = 3/8.
  EXPECT_NEAR(m.log_lik(0, std::vector<double>{0.0}), std::log(0.375), 1e-14);
}

TEST(Model, StudentTApproachesGaussianForLargeNu) {
  const Dataset data = random_dataset(Family::RobustT, 8, 2, 0, 10);
  RobustTModel m(data, 1e6, 1.3);
  std::vector<double> theta{0.3, -0.5};
  for (std::size_t n = 0; n < data.n_points; ++n) {
    const double r = data.targets[n] - (data.row(n)[0] * theta[0] + data.row(n)[1] * theta[1]);
    const double gauss = -0.5 * std::log(2 * std::numbers::pi * 1.3 * 1.3) - r * r / (2 * 1.3 * 1.3);
    EXPECT_NEAR(m.log_lik(n, theta), gauss, 1e-4 * (1 + std::abs(gauss)));
  }
}

TEST(Model, ArgumentChecks) {
  const Dataset data = random_dataset(Family::Logistic, 5, 2, 0, 11);
  LogisticModel m(data);
  std::vector<double> ok{0.0, 0.0}, short_theta{0.0}, bad{0.0, std::nan("")};
  EXPECT_THROW(m.log_lik(5, ok), std::out_of_range);
  EXPECT_THROW(m.log_lik(0, short_theta), std::invalid_argument);
  EXPECT_THROW(m.log_lik(0, bad), std::invalid_argument);
  EXPECT_THROW(RobustTModel(data, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(RobustTModel(data, 4.0, -1.0), std::invalid_argument);
}

TEST(Model, DatasetValidation) {
  Dataset data = random_dataset(Family::Logistic, 5, 2, 0, 12);
  EXPECT_NO_THROW(validate_dataset(data, Family::Logistic));
  data.targets[2] = 0.5;
  EXPECT_THROW(validate_dataset(data, Family::Logistic), std::invalid_argument);
  Dataset sm = random_dataset(Family::Softmax, 6, 2, 3, 13);
  sm.targets[0] = 4.0;
  EXPECT_THROW(validate_dataset(sm, Family::Softmax), std::invalid_argument);
  Dataset rt = random_dataset(Family::RobustT, 4, 2, 0, 14);
  rt.features[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(validate_dataset(rt, Family::RobustT), std::invalid_argument);
}

TEST(Model, CsvRoundTripIsExact) {
  const Dataset data = random_dataset(Family::Softmax, 30, 3, 3, 15);
  const auto path = std::filesystem::temp_directory_path() / "flymc_model_roundtrip.csv";
  write_dataset_csv(data, path);
  const Dataset back = read_dataset_csv(path, Family::Softmax);
  EXPECT_EQ(back.n_points, data.n_points);
  EXPECT_EQ(back.n_features, data.n_features);
  EXPECT_EQ(back.n_classes, 3u);
  EXPECT_EQ(back.features, data.features);
  EXPECT_EQ(back.targets, data.targets);
  std::filesystem::remove(path);
}

TEST(Model, PriorsIncludeNormalization) {
  std::vector<double> theta{0.5, -1.5};
  const double g = log_prior(theta, Prior{PriorKind::Gaussian, 2.0});
  double ref = 0;
  for (double t : theta) ref += -0.5 * std::log(2 * std::numbers::pi * 4.0) - t * t / 8.0;
  EXPECT_NEAR(g, ref, 1e-14);
  const double l = log_prior(theta, Prior{PriorKind::Laplace, 0.5});
  EXPECT_NEAR(l, -2.0 * std::log(1.0) - (0.5 + 1.5) / 0.5, 1e-14);

  std::vector<double> grad(3);
  grad_log_prior(std::vector<double>{1.0, 0.0, -2.0}, Prior{PriorKind::Laplace, 0.5}, grad);
  EXPECT_EQ(grad, (std::vector<double>{-2.0, 0.0, 2.0}));
  EXPECT_THROW(log_prior(theta, Prior{PriorKind::Gaussian, 0.0}), std::invalid_argument);
}

TEST(Model, MeteredLikelihoodCountsEveryQuery) {
  const Dataset data = random_dataset(Family::Logistic, 7, 2, 0, 16);
  LogisticModel m(data);
  QueryMeter meter;
  MeteredLikelihood lik(m, meter);
  std::vector<double> theta{0.1, 0.2}, grad(2);
  lik.log_lik(0, theta);
  lik.log_lik_grad(1, theta, grad);
  EXPECT_EQ(meter.count(), 2u);
  full_log_posterior(theta, lik, Prior{});
  EXPECT_EQ(meter.count(), 9u);
  full_log_posterior_grad(theta, lik, Prior{}, grad);
  EXPECT_EQ(meter.count(), 16u);
}

TEST(Model, FactoryAndNames) {
  const Dataset data = random_dataset(Family::RobustT, 4, 2, 0, 17);
  auto m = make_model(ModelSpec{Family::RobustT, 3.0, 2.0}, data);
  EXPECT_EQ(m->family(), Family::RobustT);
  EXPECT_EQ(parse_family("robust_t"), Family::RobustT);
  EXPECT_EQ(parse_family(family_name(Family::Softmax)), Family::Softmax);
  EXPECT_THROW(parse_family("probit"), std::invalid_argument);
}
