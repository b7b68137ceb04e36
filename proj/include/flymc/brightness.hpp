#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flymc/bounds.hpp"
#include "flymc/model.hpp"

namespace flymc {

using Rng = std::mt19937_64;

/// Bright/dark membership of N data with O(1) flips and O(1) indexed
/// enumeration.
///
/// `order` is a permutation of 0..N-1 holding every bright index before every
/// dark one; `position[n]` is where n sits in `order`; the first
/// `num_bright` entries are the bright set.
class BrightnessSet {
 public:
  BrightnessSet() = default;
  /// All points start dark.
  explicit BrightnessSet(std::size_t n_points);

  std::size_t size() const { return order_.size(); }
  std::size_t num_bright() const { return num_bright_; }
  std::size_t num_dark() const { return order_.size() - num_bright_; }

  bool is_bright(std::size_t n) const;
  void brighten(std::size_t n);
  void darken(std::size_t n);
  std::size_t ith_bright(std::size_t i) const;
  std::size_t ith_dark(std::size_t i) const;

  std::span<const std::size_t> bright() const { return {order_.data(), num_bright_}; }
  std::span<const std::size_t> dark() const { return {order_.data() + num_bright_, num_dark()}; }

  /// Checks the permutation / inverse-table invariant in full. O(N).
  bool check_invariants() const;

 private:
  void swap_positions(std::size_t i, std::size_t j);

  std::vector<std::size_t> order_;
  std::vector<std::size_t> position_;
  std::size_t num_bright_ = 0;
};

/// Snapshot: JSON array of bright indices (sorted ascending).
nlohmann::json brightness_to_json(const BrightnessSet& set);
BrightnessSet brightness_from_json(const nlohmann::json& j, std::size_t n_points);

struct ExplicitResample {
  double fraction = 0.1;
};

/// q_dark_to_bright <= 0 selects automatic tuning: the running mean bright
/// fraction during burn-in, floored at 10/N, then frozen.
struct ImplicitResample {
  double q_dark_to_bright = 0.0;
  double q_bright_to_dark = 1.0;
};

using ResampleConfig = std::variant<ExplicitResample, ImplicitResample>;

void validate_resample_config(const ResampleConfig& config);

/// Per-datum log L_n, log B_n (and optionally the gradient of the bright
/// factor log(L_n/B_n - 1)) at the chain's current theta, valid exactly for
/// the bright points.
class BrightCache {
 public:
  BrightCache() = default;
  BrightCache(std::size_t n_points, std::size_t n_params, bool with_gradients);

  bool with_gradients() const { return with_gradients_; }
  std::size_t n_params() const { return n_params_; }

  bool valid(std::size_t n) const { return valid_[n] != 0; }
  double log_lik(std::size_t n) const { return log_lik_[n]; }
  double log_bound(std::size_t n) const { return log_bound_[n]; }
  std::span<const double> factor_grad(std::size_t n) const;

  void store(std::size_t n, double log_lik, double log_bound);
  void store(std::size_t n, double log_lik, double log_bound, std::span<const double> factor_grad);
  void invalidate(std::size_t n) { valid_[n] = 0; }

  /// True when exactly the bright points are cached.
  bool matches(const BrightnessSet& set) const;

 private:
  bool with_gradients_ = false;
  std::size_t n_params_ = 0;
  std::vector<double> log_lik_;
  std::vector<double> log_bound_;
  std::vector<double> grads_;
  std::vector<std::uint8_t> valid_;
};

/// Thrown when log B_n exceeds log L_n by more than the rounding tolerance.
class BoundViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kBoundTolerance = 1e-9;

/// (L - B) / L from log values, clamped to [0, 1].
double bright_probability_from_logs(double log_lik, double log_bound);

/// p(z_n = 1 | theta). One likelihood query.
double bright_probability(std::size_t n, std::span<const double> theta, const MeteredLikelihood& lik,
                          const LowerBound& bound);

/// L~ = (L - B) / B = expm1(log L - log B).
double pseudo_likelihood(double log_lik, double log_bound);

/// log(L/B - 1), -inf when the bound is tight. Throws BoundViolation.
double bright_log_factor(double log_lik, double log_bound);

/// Metropolis-Hastings acceptance probability of one implicit flip.
/// `currently_bright` selects bright -> dark (else dark -> bright).
double implicit_accept_probability(bool currently_bright, double pseudo_lik, double q_dark_to_bright,
                                   double q_bright_to_dark);

/// Exact 2x2 per-site transition matrix of the implicit kernel, T[from][to]
/// with state 0 = dark, 1 = bright.
std::array<std::array<double, 2>, 2> implicit_transition_matrix(double log_lik, double log_bound,
                                                                 double q_dark_to_bright, double q_bright_to_dark);

/// Everything the resampling kernels need besides theta and the set.
struct ResampleContext {
  const MeteredLikelihood& lik;
  const LowerBound& bound;
  BrightCache& cache;
};

/// Gibbs-samples z_n for ceil(N * fraction) data drawn uniformly with
/// replacement. Exactly that many likelihood queries.
void explicit_resample(BrightnessSet& set, std::span<const double> theta, const ExplicitResample& config,
                       ResampleContext ctx, Rng& rng);

/// Gibbs-samples every z_n once, in index order. N queries.
void gibbs_sweep(BrightnessSet& set, std::span<const double> theta, ResampleContext ctx, Rng& rng);

/// One MH sweep over all z_n. Bright points use cached likelihoods; each dark
/// point is proposed with probability q_dark_to_bright (which must be > 0
/// here) and costs one query when proposed.
void implicit_resample(BrightnessSet& set, std::span<const double> theta, const ImplicitResample& config,
                       ResampleContext ctx, Rng& rng);

/// Evaluates log L_n (and the bright-factor gradient when the cache keeps
/// gradients) for every bright point and stores it. M queries.
void fill_bright_cache(const BrightnessSet& set, std::span<const double> theta, ResampleContext ctx);

}  // namespace flymc
