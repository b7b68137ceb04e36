#include "flymc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

#include "flymc/simd/kernels.hpp"

namespace flymc {

std::string_view family_name(Family f) {
  switch (f) {
    case Family::Logistic:
      return "logistic";
    case Family::Softmax:
      return "softmax";
    case Family::RobustT:
      return "robust_t";
  }
  return "unknown";
}

Family parse_family(std::string_view name) {
  if (name == "logistic") return Family::Logistic;
  if (name == "softmax") return Family::Softmax;
  if (name == "robust_t" || name == "robust") return Family::RobustT;
  throw std::invalid_argument(fmt::format("unknown model family '{}'", name));
}

void validate_dataset(const Dataset& data, Family family) {
  if (data.n_features == 0) throw std::invalid_argument("dataset has no features");
  if (data.features.size() != data.n_points * data.n_features) {
    throw std::invalid_argument(fmt::format("feature matrix has {} entries, expected {} x {}", data.features.size(),
                                            data.n_points, data.n_features));
  }
  if (data.targets.size() != data.n_points) {
    throw std::invalid_argument(
        fmt::format("targets length {} does not match n_points {}", data.targets.size(), data.n_points));
  }
  for (std::size_t i = 0; i < data.features.size(); ++i) {
    if (!std::isfinite(data.features[i])) {
      throw std::invalid_argument(fmt::format("non-finite feature in row {}", i / data.n_features));
    }
  }
  for (std::size_t n = 0; n < data.n_points; ++n) {
    const double t = data.targets[n];
    switch (family) {
      case Family::Logistic:
        if (t != 1.0 && t != -1.0) throw std::invalid_argument(fmt::format("logistic target {} at row {}", t, n));
        break;
      case Family::Softmax:
        if (data.n_classes < 2) throw std::invalid_argument("softmax dataset needs n_classes >= 2");
        if (t != std::floor(t) || t < 1.0 || t > static_cast<double>(data.n_classes)) {
          throw std::invalid_argument(fmt::format("softmax target {} at row {} outside 1..{}", t, n, data.n_classes));
        }
        break;
      case Family::RobustT:
        if (!std::isfinite(t)) throw std::invalid_argument(fmt::format("non-finite response at row {}", n));
        break;
    }
  }
}

Dataset read_dataset_csv(const std::filesystem::path& path, Family family) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open dataset '{}'", path.string()));
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(fmt::format("dataset '{}' is empty", path.string()));

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header.back() != "target") {
    throw std::runtime_error("dataset header must be f0,...,f{D-1},target");
  }
  for (std::size_t d = 0; d + 1 < header.size(); ++d) {
    if (header[d] != fmt::format("f{}", d)) throw std::runtime_error(fmt::format("unexpected column '{}'", header[d]));
  }

  Dataset data;
  data.n_features = header.size() - 1;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      try {
        v = std::stod(cell);
      } catch (const std::exception&) {
        throw std::runtime_error(fmt::format("line {}: cannot parse '{}'", lineno, cell));
      }
      if (col < data.n_features) {
        data.features.push_back(v);
      } else if (col == data.n_features) {
        data.targets.push_back(v);
      }
      ++col;
    }
    if (col != header.size()) {
      throw std::runtime_error(fmt::format("line {}: expected {} columns, got {}", lineno, header.size(), col));
    }
    ++data.n_points;
  }
  if (family == Family::Softmax && !data.targets.empty()) {
    data.n_classes = static_cast<std::size_t>(*std::max_element(data.targets.begin(), data.targets.end()));
  }
  validate_dataset(data, family);
  return data;
}

void write_dataset_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write dataset '{}'", path.string()));
  for (std::size_t d = 0; d < data.n_features; ++d) out << fmt::format("f{},", d);
  out << "target\n";
  for (std::size_t n = 0; n < data.n_points; ++n) {
    for (double v : data.row(n)) out << fmt::format("{:.17g},", v);
    out << fmt::format("{:.17g}\n", data.targets[n]);
  }
}

double log_prior(std::span<const double> theta, const Prior& prior) {
  if (!(prior.scale > 0.0)) throw std::invalid_argument("prior scale must be positive");
  const double p = static_cast<double>(theta.size());
  if (prior.kind == PriorKind::Gaussian) {
    const double s2 = prior.scale * prior.scale;
    return -simd::dot(theta, theta) / (2.0 * s2) - 0.5 * p * std::log(2.0 * std::numbers::pi * s2);
  }
  double l1 = 0.0;
  for (double v : theta) l1 += std::abs(v);
  return -l1 / prior.scale - p * std::log(2.0 * prior.scale);
}

void grad_log_prior(std::span<const double> theta, const Prior& prior, std::span<double> grad) {
  if (!(prior.scale > 0.0)) throw std::invalid_argument("prior scale must be positive");
  if (prior.kind == PriorKind::Gaussian) {
    const double inv = 1.0 / (prior.scale * prior.scale);
    for (std::size_t i = 0; i < theta.size(); ++i) grad[i] = -theta[i] * inv;
    return;
  }
  // sign(0) := 0
  for (std::size_t i = 0; i < theta.size(); ++i) {
    grad[i] = theta[i] > 0.0 ? -1.0 / prior.scale : (theta[i] < 0.0 ? 1.0 / prior.scale : 0.0);
  }
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double student_t_log_norm(double nu) {
  return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi);
}

void LikelihoodModel::check_args(std::size_t n, std::span<const double> theta) const {
  if (n >= data_->n_points) {
    throw std::out_of_range(fmt::format("datum index {} out of range (N = {})", n, data_->n_points));
  }
  if (theta.size() != n_params()) {
    throw std::invalid_argument(fmt::format("parameter length {} != {}", theta.size(), n_params()));
  }
  for (double v : theta) {
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite parameter value");
  }
}

namespace {

// log sigma(m) = -softplus(-m)
inline double log_sigmoid(double m) { return -softplus(-m); }

}  // namespace

double logistic_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data) {
  return LogisticModel(data).log_lik(n, theta);
}

double softmax_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data) {
  return SoftmaxModel(data).log_lik(n, theta);
}

double robust_t_log_lik(std::size_t n, std::span<const double> theta, const Dataset& data, double nu,
                        double noise_scale) {
  return RobustTModel(data, nu, noise_scale).log_lik(n, theta);
}

LogisticModel::LogisticModel(const Dataset& data) : LikelihoodModel(data) {}

double LogisticModel::log_lik(std::size_t n, std::span<const double> theta) const {
  check_args(n, theta);
  return log_sigmoid(data().targets[n] * simd::dot(data().row(n), theta));
}

double LogisticModel::log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const {
  check_args(n, theta);
  const double t = data().targets[n];
  const double m = t * simd::dot(data().row(n), theta);
  // d/dm log sigma(m) = sigma(-m)
  const double w = t * std::exp(log_sigmoid(-m));
  const auto x = data().row(n);
  for (std::size_t d = 0; d < x.size(); ++d) grad[d] = w * x[d];
  return log_sigmoid(m);
}

SoftmaxModel::SoftmaxModel(const Dataset& data) : LikelihoodModel(data) {
  if (data.n_classes < 2) throw std::invalid_argument("softmax model needs n_classes >= 2");
}

namespace {

// scores[k] = theta_k . x, returns logsumexp(scores)
double softmax_scores(std::span<const double> theta, std::span<const double> x, std::size_t k_classes,
                      std::span<double> scores) {
  simd::gemv(theta, k_classes, x.size(), x, scores);
  const double mx = *std::max_element(scores.begin(), scores.end());
  double s = 0.0;
  for (double v : scores) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace

double SoftmaxModel::log_lik(std::size_t n, std::span<const double> theta) const {
  check_args(n, theta);
  const std::size_t k_classes = n_classes();
  double buf[64];
  std::vector<double> heap;
  std::span<double> scores(buf, k_classes);
  if (k_classes > 64) {
    heap.resize(k_classes);
    scores = heap;
  }
  const double lse = softmax_scores(theta, data().row(n), k_classes, scores);
  const auto k = static_cast<std::size_t>(data().targets[n]) - 1;
  return scores[k] - lse;
}

double SoftmaxModel::log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const {
  check_args(n, theta);
  const std::size_t k_classes = n_classes();
  const std::size_t dim = data().n_features;
  std::vector<double> scores(k_classes);
  const double lse = softmax_scores(theta, data().row(n), k_classes, scores);
  const auto k = static_cast<std::size_t>(data().targets[n]) - 1;
  const auto x = data().row(n);
  for (std::size_t j = 0; j < k_classes; ++j) {
    const double w = (j == k ? 1.0 : 0.0) - std::exp(scores[j] - lse);
    for (std::size_t d = 0; d < dim; ++d) grad[j * dim + d] = w * x[d];
  }
  return scores[k] - lse;
}

RobustTModel::RobustTModel(const Dataset& data, double nu, double noise_scale)
    : LikelihoodModel(data), nu_(nu), noise_scale_(noise_scale) {
  if (!(nu > 0.0)) throw std::invalid_argument("Student-t degrees of freedom must be positive");
  if (!(noise_scale > 0.0)) throw std::invalid_argument("noise scale must be positive");
  log_norm_ = student_t_log_norm(nu) - std::log(noise_scale);
}

double RobustTModel::log_lik(std::size_t n, std::span<const double> theta) const {
  check_args(n, theta);
  const double r = (data().targets[n] - simd::dot(data().row(n), theta)) / noise_scale_;
  return log_norm_ - 0.5 * (nu_ + 1.0) * std::log1p(r * r / nu_);
}

double RobustTModel::log_lik_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const {
  check_args(n, theta);
  const double r = (data().targets[n] - simd::dot(data().row(n), theta)) / noise_scale_;
  const double w = (nu_ + 1.0) * r / ((nu_ + r * r) * noise_scale_);
  const auto x = data().row(n);
  for (std::size_t d = 0; d < x.size(); ++d) grad[d] = w * x[d];
  return log_norm_ - 0.5 * (nu_ + 1.0) * std::log1p(r * r / nu_);
}

std::unique_ptr<LikelihoodModel> make_model(const ModelSpec& spec, const Dataset& data) {
  switch (spec.family) {
    case Family::Logistic:
      return std::make_unique<LogisticModel>(data);
    case Family::Softmax:
      return std::make_unique<SoftmaxModel>(data);
    case Family::RobustT:
      return std::make_unique<RobustTModel>(data, spec.nu, spec.noise_scale);
  }
  throw std::invalid_argument("unknown family");
}

double full_log_posterior(std::span<const double> theta, const MeteredLikelihood& lik, const Prior& prior) {
  double s = log_prior(theta, prior);
  const std::size_t n_points = lik.model().n_points();
  for (std::size_t n = 0; n < n_points; ++n) s += lik.log_lik(n, theta);
  return s;
}

double full_log_posterior_grad(std::span<const double> theta, const MeteredLikelihood& lik, const Prior& prior,
                               std::span<double> grad) {
  grad_log_prior(theta, prior, grad);
  double s = log_prior(theta, prior);
  std::vector<double> g(theta.size());
  const std::size_t n_points = lik.model().n_points();
  for (std::size_t n = 0; n < n_points; ++n) {
    s += lik.log_lik_grad(n, theta, g);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
  return s;
}

}  // namespace flymc
