#include "flymc/brightness.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace flymc {

BrightnessSet::BrightnessSet(std::size_t n_points) : order_(n_points), position_(n_points) {
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::iota(position_.begin(), position_.end(), std::size_t{0});
}

bool BrightnessSet::is_bright(std::size_t n) const {
  if (n >= order_.size()) throw std::out_of_range(fmt::format("datum {} out of range (N = {})", n, order_.size()));
  return position_[n] < num_bright_;
}

void BrightnessSet::swap_positions(std::size_t i, std::size_t j) {
  std::swap(order_[i], order_[j]);
  position_[order_[i]] = i;
  position_[order_[j]] = j;
}

void BrightnessSet::brighten(std::size_t n) {
  if (is_bright(n)) return;
  swap_positions(position_[n], num_bright_);
  ++num_bright_;
  assert(check_invariants());
}

void BrightnessSet::darken(std::size_t n) {
  if (!is_bright(n)) return;
  --num_bright_;
  swap_positions(position_[n], num_bright_);
  assert(check_invariants());
}

std::size_t BrightnessSet::ith_bright(std::size_t i) const {
  if (i >= num_bright_) throw std::out_of_range(fmt::format("bright rank {} >= {}", i, num_bright_));
  return order_[i];
}

std::size_t BrightnessSet::ith_dark(std::size_t i) const {
  if (i >= num_dark()) throw std::out_of_range(fmt::format("dark rank {} >= {}", i, num_dark()));
  return order_[num_bright_ + i];
}

bool BrightnessSet::check_invariants() const {
  if (order_.size() != position_.size() || num_bright_ > order_.size()) return false;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    if (order_[i] >= order_.size() || position_[order_[i]] != i) return false;
  }
  return true;
}

nlohmann::json brightness_to_json(const BrightnessSet& set) {
  std::vector<std::size_t> bright(set.bright().begin(), set.bright().end());
  std::sort(bright.begin(), bright.end());
  return bright;
}

BrightnessSet brightness_from_json(const nlohmann::json& j, std::size_t n_points) {
  if (!j.is_array()) throw std::invalid_argument("brightness snapshot must be a JSON array");
  BrightnessSet set(n_points);
  for (const auto& v : j) set.brighten(v.get<std::size_t>());
  return set;
}

void validate_resample_config(const ResampleConfig& config) {
  if (const auto* e = std::get_if<ExplicitResample>(&config)) {
    if (!(e->fraction > 0.0 && e->fraction <= 1.0)) {
      throw std::invalid_argument(fmt::format("resample fraction {} outside (0, 1]", e->fraction));
    }
    return;
  }
  const auto& im = std::get<ImplicitResample>(config);
  if (im.q_dark_to_bright > 1.0) throw std::invalid_argument("q_dark_to_bright must be <= 1");
  if (!(im.q_bright_to_dark > 0.0 && im.q_bright_to_dark <= 1.0)) {
    throw std::invalid_argument(fmt::format("q_bright_to_dark {} outside (0, 1]", im.q_bright_to_dark));
  }
}

BrightCache::BrightCache(std::size_t n_points, std::size_t n_params, bool with_gradients)
    : with_gradients_(with_gradients),
      n_params_(n_params),
      log_lik_(n_points, 0.0),
      log_bound_(n_points, 0.0),
      grads_(with_gradients ? n_points * n_params : 0, 0.0),
      valid_(n_points, 0) {}

std::span<const double> BrightCache::factor_grad(std::size_t n) const {
  if (!with_gradients_) return {};
  return {grads_.data() + n * n_params_, n_params_};
}

void BrightCache::store(std::size_t n, double log_lik, double log_bound) {
  log_lik_[n] = log_lik;
  log_bound_[n] = log_bound;
  valid_[n] = 1;
}

void BrightCache::store(std::size_t n, double log_lik, double log_bound, std::span<const double> factor_grad) {
  store(n, log_lik, log_bound);
  if (with_gradients_) std::copy(factor_grad.begin(), factor_grad.end(), grads_.begin() + n * n_params_);
}

bool BrightCache::matches(const BrightnessSet& set) const {
  std::size_t count = 0;
  for (std::size_t n = 0; n < valid_.size(); ++n) {
    if (valid_[n] == 0) continue;
    if (!set.is_bright(n)) return false;
    ++count;
  }
  return count == set.num_bright();
}

namespace {

void check_bound(double log_lik, double log_bound) {
  if (log_bound > log_lik + kBoundTolerance) {
    throw BoundViolation(
        fmt::format("lower bound exceeds likelihood: log B = {:.17g} > log L = {:.17g}", log_bound, log_lik));
  }
}

struct DatumEval {
  double log_lik;
  double log_bound;
};

// One likelihood query for datum n; gradients too when the cache keeps them.
DatumEval evaluate_datum(std::size_t n, std::span<const double> theta, ResampleContext& ctx,
                         std::vector<double>& grad_lik, std::vector<double>& grad_bound) {
  if (!ctx.cache.with_gradients()) {
    const double ll = ctx.lik.log_lik(n, theta);
    return {ll, ctx.bound.log_bound(n, theta)};
  }
  const double ll = ctx.lik.log_lik_grad(n, theta, grad_lik);
  const double lb = ctx.bound.log_bound_grad(n, theta, grad_bound);
  return {ll, lb};
}

void store_bright(std::size_t n, const DatumEval& e, ResampleContext& ctx, std::vector<double>& grad_lik,
                  const std::vector<double>& grad_bound) {
  if (!ctx.cache.with_gradients()) {
    ctx.cache.store(n, e.log_lik, e.log_bound);
    return;
  }
  // d/dtheta log(expm1(delta)) = (grad log L - grad log B) / (1 - exp(-delta))
  const double w = 1.0 / -std::expm1(-(e.log_lik - e.log_bound));
  for (std::size_t i = 0; i < grad_lik.size(); ++i) grad_lik[i] = w * (grad_lik[i] - grad_bound[i]);
  ctx.cache.store(n, e.log_lik, e.log_bound, grad_lik);
}

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace

double bright_probability_from_logs(double log_lik, double log_bound) {
  check_bound(log_lik, log_bound);
  return std::clamp(-std::expm1(log_bound - log_lik), 0.0, 1.0);
}

double bright_probability(std::size_t n, std::span<const double> theta, const MeteredLikelihood& lik,
                          const LowerBound& bound) {
  return bright_probability_from_logs(lik.log_lik(n, theta), bound.log_bound(n, theta));
}

double pseudo_likelihood(double log_lik, double log_bound) {
  check_bound(log_lik, log_bound);
  return std::max(0.0, std::expm1(log_lik - log_bound));
}

double bright_log_factor(double log_lik, double log_bound) {
  check_bound(log_lik, log_bound);
  const double delta = log_lik - log_bound;
  if (delta <= 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(std::expm1(delta));
}

double implicit_accept_probability(bool currently_bright, double pseudo_lik, double q_dark_to_bright,
                                   double q_bright_to_dark) {
  // target odds p(z=1)/p(z=0) = L~
  if (currently_bright) {
    if (pseudo_lik <= 0.0) return 1.0;
    return std::min(1.0, q_dark_to_bright / (q_bright_to_dark * pseudo_lik));
  }
  return std::min(1.0, q_bright_to_dark * pseudo_lik / q_dark_to_bright);
}

std::array<std::array<double, 2>, 2> implicit_transition_matrix(double log_lik, double log_bound,
                                                                 double q_dark_to_bright, double q_bright_to_dark) {
  const double lt = pseudo_likelihood(log_lik, log_bound);
  const double to_bright = q_dark_to_bright * implicit_accept_probability(false, lt, q_dark_to_bright, q_bright_to_dark);
  const double to_dark = q_bright_to_dark * implicit_accept_probability(true, lt, q_dark_to_bright, q_bright_to_dark);
  return {{{1.0 - to_bright, to_bright}, {to_dark, 1.0 - to_dark}}};
}

void explicit_resample(BrightnessSet& set, std::span<const double> theta, const ExplicitResample& config,
                       ResampleContext ctx, Rng& rng) {
  const std::size_t n_points = set.size();
  if (n_points == 0) return;
  const auto visits = static_cast<std::size_t>(std::ceil(static_cast<double>(n_points) * config.fraction));
  std::uniform_int_distribution<std::size_t> pick(0, n_points - 1);
  std::vector<double> grad_lik(ctx.cache.n_params());
  std::vector<double> grad_bound(ctx.cache.n_params());
  for (std::size_t v = 0; v < visits; ++v) {
    const std::size_t n = pick(rng);
    const DatumEval e = evaluate_datum(n, theta, ctx, grad_lik, grad_bound);
    const double p = bright_probability_from_logs(e.log_lik, e.log_bound);
    if (uniform01(rng) < p) {
      set.brighten(n);
      store_bright(n, e, ctx, grad_lik, grad_bound);
    } else {
      set.darken(n);
      ctx.cache.invalidate(n);
    }
  }
}

void gibbs_sweep(BrightnessSet& set, std::span<const double> theta, ResampleContext ctx, Rng& rng) {
  std::vector<double> grad_lik(ctx.cache.n_params());
  std::vector<double> grad_bound(ctx.cache.n_params());
  for (std::size_t n = 0; n < set.size(); ++n) {
    const DatumEval e = evaluate_datum(n, theta, ctx, grad_lik, grad_bound);
    if (uniform01(rng) < bright_probability_from_logs(e.log_lik, e.log_bound)) {
      set.brighten(n);
      store_bright(n, e, ctx, grad_lik, grad_bound);
    } else {
      set.darken(n);
      ctx.cache.invalidate(n);
    }
  }
}

void implicit_resample(BrightnessSet& set, std::span<const double> theta, const ImplicitResample& config,
                       ResampleContext ctx, Rng& rng) {
  const double q_db = config.q_dark_to_bright;
  const double q_bd = config.q_bright_to_dark;
  if (!(q_db > 0.0 && q_db <= 1.0)) throw std::invalid_argument(fmt::format("q_dark_to_bright {} outside (0, 1]", q_db));

  // Both lists are snapshots of the state at the start of the sweep; every
  // site is considered exactly once.
  const std::vector<std::size_t> bright(set.bright().begin(), set.bright().end());
  for (std::size_t n : bright) {
    if (!ctx.cache.valid(n)) {
      throw std::logic_error(fmt::format("bright datum {} has no cached likelihood at the current parameters", n));
    }
  }
  std::vector<std::size_t> candidates;
  for (std::size_t n : set.dark()) {
    if (uniform01(rng) < q_db) candidates.push_back(n);
  }

  for (std::size_t n : bright) {
    if (q_bd < 1.0 && !(uniform01(rng) < q_bd)) continue;
    const double lt = pseudo_likelihood(ctx.cache.log_lik(n), ctx.cache.log_bound(n));
    if (uniform01(rng) < implicit_accept_probability(true, lt, q_db, q_bd)) {
      set.darken(n);
      ctx.cache.invalidate(n);
    }
  }

  std::vector<double> grad_lik(ctx.cache.n_params());
  std::vector<double> grad_bound(ctx.cache.n_params());
  for (std::size_t n : candidates) {
    const DatumEval e = evaluate_datum(n, theta, ctx, grad_lik, grad_bound);
    const double lt = pseudo_likelihood(e.log_lik, e.log_bound);
    if (uniform01(rng) < implicit_accept_probability(false, lt, q_db, q_bd)) {
      set.brighten(n);
      store_bright(n, e, ctx, grad_lik, grad_bound);
    }
  }
}

void fill_bright_cache(const BrightnessSet& set, std::span<const double> theta, ResampleContext ctx) {
  std::vector<double> grad_lik(ctx.cache.n_params());
  std::vector<double> grad_bound(ctx.cache.n_params());
  for (std::size_t n : set.bright()) {
    const DatumEval e = evaluate_datum(n, theta, ctx, grad_lik, grad_bound);
    check_bound(e.log_lik, e.log_bound);
    store_bright(n, e, ctx, grad_lik, grad_bound);
  }
}

}  // namespace flymc
