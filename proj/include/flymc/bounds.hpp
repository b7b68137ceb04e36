#pragma once

// Collapsible per-datum likelihood lower bounds.
//
// Every family here gives log B_n(theta) as a quadratic in theta (or in the
// flattened K x D weight matrix for softmax), so the product over all data
// reduces to one quadratic form whose coefficients are accumulated once.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flymc/model.hpp"

namespace flymc {

enum class BoundFamily { JaakkolaJordan, Bohning, TTangent };

std::string_view bound_family_name(BoundFamily f);
BoundFamily parse_bound_family(std::string_view name);
BoundFamily default_bound_family(Family model_family);

/// Tightness locations. `xi` holds one shared value or one value per datum.
/// For Bohning bounds `reference` is the parameter vector the bound is
/// expanded around and `xi` is unused.
struct BoundParams {
  BoundFamily family = BoundFamily::JaakkolaJordan;
  std::vector<double> xi;
  std::vector<double> reference;

  double xi_for(std::size_t n) const { return xi.size() == 1 ? xi[0] : xi[n]; }
};

void to_json(nlohmann::json& j, const BoundParams& p);
void from_json(const nlohmann::json& j, BoundParams& p);

/// Untuned defaults: xi = 1.5 for logistic, xi = 0 for Student-t, expansion at
/// theta = 0 for softmax.
BoundParams untuned_bound_params(Family model_family, std::size_t n_params);

struct JJCoefficients {
  double a;
  double b;
  double c;
};

/// Coefficients of log B(m) = a m^2 + b m + c, tight at m = +-xi.
JJCoefficients jj_coefficients(double xi);

/// Sum over data of log B_n(theta) as theta^T Q theta + l^T theta + c.
struct CollapsedBound {
  BoundFamily family = BoundFamily::JaakkolaJordan;
  std::size_t dim = 0;
  std::size_t n_points = 0;
  std::vector<double> quadratic;  // dim x dim, symmetric, row-major
  std::vector<double> linear;
  double constant = 0.0;

  /// O(dim^2), independent of N. Does not touch any likelihood.
  double evaluate(std::span<const double> theta) const;
  /// Returns the value and writes 2 Q theta + l into grad.
  double evaluate_grad(std::span<const double> theta, std::span<double> grad) const;
};

/// Largest parameter dimension whose quadratic statistic collapse() accepts.
inline constexpr std::size_t kMaxCollapseDim = 4096;

class LowerBound {
 public:
  virtual ~LowerBound() = default;

  virtual BoundFamily family() const = 0;
  virtual std::size_t n_params() const = 0;
  virtual std::size_t n_points() const = 0;
  virtual double log_bound(std::size_t n, std::span<const double> theta) const = 0;
  /// Writes the gradient of log B_n and returns its value.
  virtual double log_bound_grad(std::size_t n, std::span<const double> theta, std::span<double> grad) const = 0;
  /// One-time O(N dim^2) accumulation using pairwise summation over blocks.
  virtual CollapsedBound collapse() const = 0;
};

/// Builds the bound for `model`. Throws std::invalid_argument when the bound
/// family does not fit the model family or the parameters have the wrong size.
std::unique_ptr<LowerBound> make_bound(const BoundParams& params, const LikelihoodModel& model);

struct SgdConfig {
  double step = 0.1;
  std::size_t minibatch = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
};

struct TuneResult {
  BoundParams params;
  ParameterVector theta_map;
};

/// Minibatch stochastic gradient ascent with a constant step on the
/// per-datum-averaged log posterior, iterates averaged over the second half of
/// the epochs, then bound parameters that make every B_n tight at the result.
TuneResult map_tune(const LikelihoodModel& model, const Prior& prior, const SgdConfig& config);

/// Bound parameters tight at `theta` for every datum.
BoundParams tight_bound_params(const LikelihoodModel& model, std::span<const double> theta);

}  // namespace flymc
