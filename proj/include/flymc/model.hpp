#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flymc/meter.hpp"

namespace flymc {

using ParameterVector = std::vector<double>;

enum class Family { Logistic, Softmax, RobustT };

std::string_view family_name(Family f);
Family parse_family(std::string_view name);

/// Row-major N x D feature matrix plus one target per row.
///
/// Targets are +-1 for logistic data, a 1-based class label in {1..K} for
/// softmax data and a real response for regression data.
struct Dataset {
  std::size_t n_points = 0;
  std::size_t n_features = 0;
  std::size_t n_classes = 0;  // 0 unless softmax
  std::vector<double> features;
  std::vector<double> targets;

  std::span<const double> row(std::size_t n) const {
    return {features.data() + n * n_features, n_features};
  }
};

/// Throws std::invalid_argument describing the first violated invariant.
void validate_dataset(const Dataset& data, Family family);

/// CSV with header f0,...,f{D-1},target. n_classes is taken from the largest
/// label when the family is softmax.
Dataset read_dataset_csv(const std::filesystem::path& path, Family family);
void write_dataset_csv(const Dataset& data, const std::filesystem::path& path);

enum class PriorKind { Gaussian, Laplace };

struct Prior {
  PriorKind kind = PriorKind::Gaussian;
  double scale = 1.0;
};

double log_prior(std::span<const double> theta, const Prior& prior);
void grad_log_prior(std::span<const double> theta, const Prior& prior, std::span<double> grad);

// Free-function forms of the three likelihood families.
double logistic_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data);
double softmax_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data);
double robust_t_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data, double nu,
                        double noise_scale);

/// log(1 + exp(x)) without overflow.
double softplus(double x);

/// Log normalizing constant of the Student-t density with nu degrees of freedom.
double student_t_log_norm(double nu);

/// Per-datum likelihood L_n(theta) of one family over a fixed dataset.
class LikelihoodModel {
 public:
  explicit LikelihoodModel(const Dataset& data) : data_(&data) {}
  virtual ~LikelihoodModel() = default;

  virtual Family family() const = 0;
  virtual std::size_t n_params() const = 0;
  virtual double log_lik(std::size_t n, std::span<const double> theta) const = 0;
  /// Writes the gradient into grad (size n_params()) and returns log L_n.
  virtual double log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const = 0;

  const Dataset& data() const { return *data_; }
  std::size_t n_points() const { return data_->n_points; }

 protected:
  void check_args(std::size_t n, std::span<const double> theta) const;

 private:
  const Dataset* data_;
};

class LogisticModel final : public LikelihoodModel {
 public:
  explicit LogisticModel(const Dataset& data);
  Family family() const override { return Family::Logistic; }
  std::size_t n_params() const override { return data().n_features; }
  double log_lik(std::size_t n, std::span<const double> theta) const override;
  double log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override;
};

/// theta is K x D flattened class-major: theta[k * D + d].
class SoftmaxModel final : public LikelihoodModel {
 public:
  explicit SoftmaxModel(const Dataset& data);
  Family family() const override { return Family::Softmax; }
  std::size_t n_params() const override { return data().n_classes * data().n_features; }
  std::size_t n_classes() const { return data().n_classes; }
  double log_lik(std::size_t n, std::span<const double> theta) const override;
  double log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override;
};

class RobustTModel final : public LikelihoodModel {
 public:
  RobustTModel(const Dataset& data, double nu, double noise_scale);
  Family family() const override { return Family::RobustT; }
  std::size_t n_params() const override { return data().n_features; }
  double nu() const { return nu_; }
  double noise_scale() const { return noise_scale_; }
  double log_lik(std::size_t n, std::span<const double> theta) const override;
  double log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override;

 private:
  double nu_;
  double noise_scale_;
  double log_norm_;
};

struct ModelSpec {
  Family family = Family::Logistic;
  double nu = 4.0;
  double noise_scale = 1.0;
};

std::unique_ptr<LikelihoodModel> make_model(const ModelSpec& spec, const Dataset& data);

/// The only route by which samplers reach L_n: every call is counted.
class MeteredLikelihood {
 public:
  MeteredLikelihood(const LikelihoodModel& model, QueryMeter& meter) : model_(&model), meter_(&meter) {}

  double log_lik(std::size_t n, std::span<const double> theta) const {
    meter_->record();
    return model_->log_lik(n, theta);
  }
  double log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const {
    meter_->record();
    return model_->log_lik_grad(n, theta, grad);
  }

  const LikelihoodModel& model() const { return *model_; }
  QueryMeter& meter() const { return *meter_; }

 private:
  const LikelihoodModel* model_;
  QueryMeter* meter_;
};

/// log p(theta) + sum_n log L_n(theta); counts N queries.
double full_log_posterior(std::span<const double> theta, const MeteredLikelihood& lik, const Prior& prior);

/// Same, also writing the gradient into grad.
double full_log_posterior_grad(std::span<const double> theta, const MeteredLikelihood& lik, const Prior& prior,
                               std::span<double> grad);

}  // namespace flymc
