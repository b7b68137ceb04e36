#include "flymc/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "flymc/simd/kernels.hpp"

namespace flymc {

std::string_view bound_family_name(BoundFamily f) {
  switch (f) {
    case BoundFamily::JaakkolaJordan:
      return "jaakkola_jordan";
    case BoundFamily::Bohning:
      return "bohning";
    case BoundFamily::TTangent:
      return "t_tangent";
  }
  return "unknown";
}

BoundFamily parse_bound_family(std::string_view name) {
  if (name == "jaakkola_jordan") return BoundFamily::JaakkolaJordan;
  if (name == "bohning") return BoundFamily::Bohning;
  if (name == "t_tangent") return BoundFamily::TTangent;
  throw std::invalid_argument(fmt::format("unknown bound family '{}'", name));
}

BoundFamily default_bound_family(Family model_family) {
  switch (model_family) {
    case Family::Logistic:
      return BoundFamily::JaakkolaJordan;
    case Family::Softmax:
      return BoundFamily::Bohning;
    case Family::RobustT:
      return BoundFamily::TTangent;
  }
  throw std::invalid_argument("unknown family");
}

void to_json(nlohmann::json& j, const BoundParams& p) {
  j = nlohmann::json::object();
  j["family"] = bound_family_name(p.family);
  if (p.xi.size() == 1) {
    j["xi"] = p.xi[0];
  } else {
    j["xi"] = p.xi;
  }
  j["reference"] = p.reference;
}

void from_json(const nlohmann::json& j, BoundParams& p) {
  p.family = parse_bound_family(j.at("family").get<std::string>());
  p.xi.clear();
  if (j.contains("xi")) {
    const auto& xi = j.at("xi");
    if (xi.is_number()) {
      p.xi = {xi.get<double>()};
    } else {
      p.xi = xi.get<std::vector<double>>();
    }
  }
  p.reference = j.value("reference", std::vector<double>{});
}

BoundParams untuned_bound_params(Family model_family, std::size_t n_params) {
  BoundParams p;
  p.family = default_bound_family(model_family);
  switch (p.family) {
    case BoundFamily::JaakkolaJordan:
      p.xi = {1.5};
      break;
    case BoundFamily::TTangent:
      p.xi = {0.0};
      break;
    case BoundFamily::Bohning:
      p.reference.assign(n_params, 0.0);
      break;
  }
  return p;
}

JJCoefficients jj_coefficients(double xi) {
  if (!std::isfinite(xi)) throw std::invalid_argument("xi must be finite");
  JJCoefficients k{};
  k.b = 0.5;
  if (std::abs(xi) < 1e-6) {
    k.a = -0.125;
    k.c = -std::log(2.0);
    return k;
  }
  // (e^xi - 1) / (e^xi + 1) = tanh(xi / 2)
  k.a = -std::tanh(0.5 * xi) / (4.0 * xi);
  k.c = -k.a * xi * xi + 0.5 * xi - softplus(xi);
  return k;
}

double CollapsedBound::evaluate(std::span<const double> theta) const {
  std::vector<double> qt(dim);
  simd::gemv(quadratic, dim, dim, theta, qt);
  return simd::dot(theta, qt) + simd::dot(linear, theta) + constant;
}

double CollapsedBound::evaluate_grad(std::span<const double> theta, std::span<double> grad) const {
  std::vector<double> qt(dim);
  simd::gemv(quadratic, dim, dim, theta, qt);
  for (std::size_t i = 0; i < dim; ++i) grad[i] = 2.0 * qt[i] + linear[i];
  return simd::dot(theta, qt) + simd::dot(linear, theta) + constant;
}

namespace {

constexpr std::size_t kLeafBlock = 512;

struct Partial {
  std::vector<double> q;
  std::vector<double> l;
  double c = 0.0;

  Partial(std::size_t q_size, std::size_t l_size) : q(q_size, 0.0), l(l_size, 0.0) {}
};

// Pairwise reduction over data blocks; leaf(lo, hi, partial) accumulates a
// contiguous block naively.
template <class Leaf>
Partial reduce_pairwise(std::size_t lo, std::size_t hi, std::size_t q_size, std::size_t l_size, const Leaf& leaf) {
  Partial out(q_size, l_size);
  if (hi - lo <= kLeafBlock) {
    leaf(lo, hi, out);
    return out;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  out = reduce_pairwise(lo, mid, q_size, l_size, leaf);
  const Partial right = reduce_pairwise(mid, hi, q_size, l_size, leaf);
  for (std::size_t i = 0; i < q_size; ++i) out.q[i] += right.q[i];
  for (std::size_t i = 0; i < l_size; ++i) out.l[i] += right.l[i];
  out.c += right.c;
  return out;
}

void check_collapse_dim(std::size_t dim) {
  if (dim > kMaxCollapseDim) {
    throw std::length_error(fmt::format("collapsed statistic of {} x {} entries exceeds the {} x {} limit", dim, dim,
                                        kMaxCollapseDim, kMaxCollapseDim));
  }
}

void check_datum(std::size_t n, std::size_t n_points) {
  if (n >= n_points) throw std::out_of_range(fmt::format("datum index {} out of range (N = {})", n, n_points));
}

void check_theta(std::span<const double> theta, std::size_t dim) {
  if (theta.size() != dim) throw std::invalid_argument(fmt::format("parameter length {} != {}", theta.size(), dim));
}

class JaakkolaJordanBound final : public LowerBound {
 public:
  JaakkolaJordanBound(const BoundParams& params, const LikelihoodModel& model) : data_(&model.data()) {
    const std::size_t n_coef = params.xi.size();
    a_.resize(n_coef);
    c_.resize(n_coef);
    for (std::size_t i = 0; i < n_coef; ++i) {
      const JJCoefficients k = jj_coefficients(params.xi[i]);
      a_[i] = k.a;
      c_[i] = k.c;
    }
  }

  BoundFamily family() const override { return BoundFamily::JaakkolaJordan; }
  std::size_t n_params() const override { return data_->n_features; }
  std::size_t n_points() const override { return data_->n_points; }

  double log_bound(std::size_t n, std::span<const double> theta) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    const double m = data_->targets[n] * simd::dot(data_->row(n), theta);
    return a(n) * m * m + 0.5 * m + c(n);
  }

  double log_bound_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    const double t = data_->targets[n];
    const double m = t * simd::dot(data_->row(n), theta);
    const double w = (2.0 * a(n) * m + 0.5) * t;
    const auto x = data_->row(n);
    for (std::size_t d = 0; d < x.size(); ++d) grad[d] = w * x[d];
    return a(n) * m * m + 0.5 * m + c(n);
  }

  CollapsedBound collapse() const override {
    const std::size_t dim = n_params();
    check_collapse_dim(dim);
    auto leaf = [&](std::size_t lo, std::size_t hi, Partial& p) {
      for (std::size_t n = lo; n < hi; ++n) {
        const auto x = data_->row(n);
        simd::rank1_update(a(n), x, p.q);
        simd::axpy(0.5 * data_->targets[n], x, p.l);
        p.c += c(n);
      }
    };
    Partial total = reduce_pairwise(0, data_->n_points, dim * dim, dim, leaf);
    return {family(), dim, data_->n_points, std::move(total.q), std::move(total.l), total.c};
  }

 private:
  double a(std::size_t n) const { return a_.size() == 1 ? a_[0] : a_[n]; }
  double c(std::size_t n) const { return c_.size() == 1 ? c_[0] : c_[n]; }

  const Dataset* data_;
  std::vector<double> a_;
  std::vector<double> c_;
};

// Curvature C = 1/2 (I_K - 11^T / K) dominates the Hessian of logsumexp, so
//   log B(psi) = -1/2 psi^T C psi + h^T psi + c
// with psi = Theta x lower-bounds the softmax log-likelihood and touches it
// with matching gradient at the expansion point.
class BohningBound final : public LowerBound {
 public:
  BohningBound(const BoundParams& params, const SoftmaxModel& model)
      : data_(&model.data()), k_(model.n_classes()), d_(model.data().n_features) {
    const std::size_t n_points = data_->n_points;
    h_.resize(n_points * k_);
    c_.resize(n_points);
    std::vector<double> psi0(k_);
    std::vector<double> cpsi0(k_);
    for (std::size_t n = 0; n < n_points; ++n) {
      simd::gemv(params.reference, k_, d_, data_->row(n), psi0);
      const double mx = *std::max_element(psi0.begin(), psi0.end());
      double s = 0.0;
      for (double v : psi0) s += std::exp(v - mx);
      const double lse = mx + std::log(s);
      const auto cls = label(n);
      apply_curvature(psi0, cpsi0);
      double g_dot_psi0 = 0.0;
      double psi0_c_psi0 = 0.0;
      for (std::size_t j = 0; j < k_; ++j) {
        const double g = (j == cls ? 1.0 : 0.0) - std::exp(psi0[j] - lse);
        h_[n * k_ + j] = g + cpsi0[j];
        g_dot_psi0 += g * psi0[j];
        psi0_c_psi0 += psi0[j] * cpsi0[j];
      }
      c_[n] = (psi0[cls] - lse) - g_dot_psi0 - 0.5 * psi0_c_psi0;
    }
  }

  BoundFamily family() const override { return BoundFamily::Bohning; }
  std::size_t n_params() const override { return k_ * d_; }
  std::size_t n_points() const override { return data_->n_points; }

  double log_bound(std::size_t n, std::span<const double> theta) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    std::vector<double> psi(k_);
    std::vector<double> cpsi(k_);
    simd::gemv(theta, k_, d_, data_->row(n), psi);
    apply_curvature(psi, cpsi);
    double v = c_[n];
    for (std::size_t j = 0; j < k_; ++j) v += psi[j] * (h_[n * k_ + j] - 0.5 * cpsi[j]);
    return v;
  }

  double log_bound_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    std::vector<double> psi(k_);
    std::vector<double> cpsi(k_);
    const auto x = data_->row(n);
    simd::gemv(theta, k_, d_, x, psi);
    apply_curvature(psi, cpsi);
    double v = c_[n];
    for (std::size_t j = 0; j < k_; ++j) {
      v += psi[j] * (h_[n * k_ + j] - 0.5 * cpsi[j]);
      const double w = h_[n * k_ + j] - cpsi[j];
      for (std::size_t d = 0; d < d_; ++d) grad[j * d_ + d] = w * x[d];
    }
    return v;
  }

  CollapsedBound collapse() const override {
    const std::size_t dim = n_params();
    check_collapse_dim(dim);
    // Accumulate S = sum x x^T (D x D) and l = sum h_n (x) x_n, then expand
    // the quadratic statistic as -1/2 C (x) S.
    auto leaf = [&](std::size_t lo, std::size_t hi, Partial& p) {
      for (std::size_t n = lo; n < hi; ++n) {
        const auto x = data_->row(n);
        simd::rank1_update(1.0, x, p.q);
        for (std::size_t j = 0; j < k_; ++j) {
          simd::axpy(h_[n * k_ + j], x, std::span<double>(p.l).subspan(j * d_, d_));
        }
        p.c += c_[n];
      }
    };
    Partial total = reduce_pairwise(0, data_->n_points, d_ * d_, dim, leaf);
    CollapsedBound cb{family(), dim, data_->n_points, std::vector<double>(dim * dim, 0.0), std::move(total.l), total.c};
    const double inv_k = 1.0 / static_cast<double>(k_);
    for (std::size_t i = 0; i < k_; ++i) {
      for (std::size_t j = 0; j < k_; ++j) {
        const double cij = 0.5 * ((i == j ? 1.0 : 0.0) - inv_k);
        for (std::size_t d = 0; d < d_; ++d) {
          for (std::size_t e = 0; e < d_; ++e) {
            cb.quadratic[(i * d_ + d) * dim + (j * d_ + e)] = -0.5 * cij * total.q[d * d_ + e];
          }
        }
      }
    }
    return cb;
  }

 private:
  std::size_t label(std::size_t n) const { return static_cast<std::size_t>(data_->targets[n]) - 1; }

  void apply_curvature(std::span<const double> psi, std::span<double> out) const {
    const double mean = std::accumulate(psi.begin(), psi.end(), 0.0) / static_cast<double>(k_);
    for (std::size_t j = 0; j < k_; ++j) out[j] = 0.5 * (psi[j] - mean);
  }

  const Dataset* data_;
  std::size_t k_;
  std::size_t d_;
  std::vector<double> h_;
  std::vector<double> c_;
};

// f(s) = const - (nu+1)/2 log(1 + s/nu) is convex in s = r^2, so its tangent
// at s0 = xi^2 lies below it: a Gaussian lower bound on the t density.
class TTangentBound final : public LowerBound {
 public:
  TTangentBound(const BoundParams& params, const RobustTModel& model)
      : data_(&model.data()), nu_(model.nu()), sigma_(model.noise_scale()) {
    const double log_norm = student_t_log_norm(nu_) - std::log(sigma_);
    const std::size_t n_coef = params.xi.size();
    slope_.resize(n_coef);
    offset_.resize(n_coef);
    for (std::size_t i = 0; i < n_coef; ++i) {
      const double s0 = params.xi[i] * params.xi[i];
      const double f0 = log_norm - 0.5 * (nu_ + 1.0) * std::log1p(s0 / nu_);
      slope_[i] = -0.5 * (nu_ + 1.0) / nu_ / (1.0 + s0 / nu_);
      offset_[i] = f0 - slope_[i] * s0;
    }
  }

  BoundFamily family() const override { return BoundFamily::TTangent; }
  std::size_t n_params() const override { return data_->n_features; }
  std::size_t n_points() const override { return data_->n_points; }

  double log_bound(std::size_t n, std::span<const double> theta) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    const double r = (data_->targets[n] - simd::dot(data_->row(n), theta)) / sigma_;
    return offset(n) + slope(n) * r * r;
  }

  double log_bound_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const override {
    check_datum(n, data_->n_points);
    check_theta(theta, n_params());
    const double r = (data_->targets[n] - simd::dot(data_->row(n), theta)) / sigma_;
    const double w = -2.0 * slope(n) * r / sigma_;
    const auto x = data_->row(n);
    for (std::size_t d = 0; d < x.size(); ++d) grad[d] = w * x[d];
    return offset(n) + slope(n) * r * r;
  }

  CollapsedBound collapse() const override {
    const std::size_t dim = n_params();
    check_collapse_dim(dim);
    const double inv_s2 = 1.0 / (sigma_ * sigma_);
    // r^2 = (t^2 - 2 t x.theta + theta^T x x^T theta) / sigma^2
    auto leaf = [&](std::size_t lo, std::size_t hi, Partial& p) {
      for (std::size_t n = lo; n < hi; ++n) {
        const auto x = data_->row(n);
        const double t = data_->targets[n];
        const double k = slope(n) * inv_s2;
        simd::rank1_update(k, x, p.q);
        simd::axpy(-2.0 * k * t, x, p.l);
        p.c += offset(n) + k * t * t;
      }
    };
    Partial total = reduce_pairwise(0, data_->n_points, dim * dim, dim, leaf);
    return {family(), dim, data_->n_points, std::move(total.q), std::move(total.l), total.c};
  }

 private:
  double slope(std::size_t n) const { return slope_.size() == 1 ? slope_[0] : slope_[n]; }
  double offset(std::size_t n) const { return offset_.size() == 1 ? offset_[0] : offset_[n]; }

  const Dataset* data_;
  double nu_;
  double sigma_;
  std::vector<double> slope_;
  std::vector<double> offset_;
};

void check_xi(const BoundParams& params, std::size_t n_points) {
  if (params.xi.size() != 1 && params.xi.size() != n_points) {
    throw std::invalid_argument(
        fmt::format("bound needs one shared xi or one per datum (N = {}), got {}", n_points, params.xi.size()));
  }
  for (double v : params.xi) {
    if (!std::isfinite(v)) throw std::invalid_argument("xi must be finite");
  }
}

}  // namespace

std::unique_ptr<LowerBound> make_bound(const BoundParams& params, const LikelihoodModel& model) {
  const auto mismatch = [&] {
    return std::invalid_argument(fmt::format("bound family '{}' does not apply to the '{}' model",
                                             bound_family_name(params.family), family_name(model.family())));
  };
  switch (params.family) {
    case BoundFamily::JaakkolaJordan:
      if (model.family() != Family::Logistic) throw mismatch();
      check_xi(params, model.n_points());
      return std::make_unique<JaakkolaJordanBound>(params, model);
    case BoundFamily::Bohning: {
      if (model.family() != Family::Softmax) throw mismatch();
      if (params.reference.size() != model.n_params()) {
        throw std::invalid_argument(fmt::format("Bohning reference has length {}, expected {}",
                                                params.reference.size(), model.n_params()));
      }
      return std::make_unique<BohningBound>(params, static_cast<const SoftmaxModel&>(model));
    }
    case BoundFamily::TTangent:
      if (model.family() != Family::RobustT) throw mismatch();
      check_xi(params, model.n_points());
      return std::make_unique<TTangentBound>(params, static_cast<const RobustTModel&>(model));
  }
  throw mismatch();
}

BoundParams tight_bound_params(const LikelihoodModel& model, std::span<const double> theta) {
  const Dataset& data = model.data();
  BoundParams p;
  p.family = default_bound_family(model.family());
  switch (model.family()) {
    case Family::Logistic:
      p.xi.resize(data.n_points);
      for (std::size_t n = 0; n < data.n_points; ++n) p.xi[n] = data.targets[n] * simd::dot(data.row(n), theta);
      break;
    case Family::RobustT: {
      const double sigma = static_cast<const RobustTModel&>(model).noise_scale();
      p.xi.resize(data.n_points);
      for (std::size_t n = 0; n < data.n_points; ++n) {
        p.xi[n] = (data.targets[n] - simd::dot(data.row(n), theta)) / sigma;
      }
      break;
    }
    case Family::Softmax:
      p.reference.assign(theta.begin(), theta.end());
      break;
  }
  return p;
}

TuneResult map_tune(const LikelihoodModel& model, const Prior& prior, const SgdConfig& config) {
  if (!(config.step > 0.0) || config.minibatch == 0 || config.epochs == 0) {
    throw std::invalid_argument("SGD needs a positive step, minibatch size and epoch count");
  }
  const std::size_t n_points = model.n_points();
  const std::size_t dim = model.n_params();
  ParameterVector theta(dim, 0.0);
  ParameterVector average(dim, 0.0);
  if (n_points == 0) return {tight_bound_params(model, theta), theta};

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n_points);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> grad(dim);
  std::vector<double> g(dim);
  const double inv_n = 1.0 / static_cast<double>(n_points);

  // Constant step, then the iterates of the second half of the epochs are
  // averaged to cancel the minibatch noise.
  const std::size_t first_avg_epoch = config.epochs / 2 + 1;
  std::size_t n_avg = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n_points; start += config.minibatch) {
      const std::size_t stop = std::min(n_points, start + config.minibatch);
      grad_log_prior(theta, prior, grad);
      for (double& v : grad) v *= inv_n;
      double loss = log_prior(theta, prior) * inv_n;
      const double w = 1.0 / static_cast<double>(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        loss += w * model.log_lik_grad(order[i], theta, g);
        simd::axpy(w, g, grad);
      }
      if (!std::isfinite(loss) || std::any_of(grad.begin(), grad.end(), [](double v) { return !std::isfinite(v); })) {
        throw std::runtime_error(
            fmt::format("MAP optimization diverged in epoch {} (non-finite objective); use a smaller SGD step than {}",
                        epoch, config.step));
      }
      simd::axpy(config.step, grad, theta);
      if (std::any_of(theta.begin(), theta.end(), [](double v) { return !std::isfinite(v); })) {
        throw std::runtime_error(
            fmt::format("MAP optimization diverged in epoch {}; use a smaller SGD step than {}", epoch, config.step));
      }
      if (epoch >= first_avg_epoch) {
        simd::axpy(1.0, theta, average);
        ++n_avg;
      }
    }
  }
  for (double& v : average) v /= static_cast<double>(n_avg);
  return {tight_bound_params(model, average), average};
}

}  // namespace flymc
