#include "flymc/samplers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "flymc/simd/kernels.hpp"

namespace flymc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

// --- targets ----------------------------------------------------------------

FullDataTarget::FullDataTarget(const MeteredLikelihood& lik, const Prior& prior, double temperature)
    : lik_(lik), prior_(prior), temperature_(temperature), scratch_(lik.model().n_params()) {}

double FullDataTarget::log_density(std::span<const double> theta) {
  if (temperature_ == 1.0) return full_log_posterior(theta, lik_, prior_);
  double s = 0.0;
  for (std::size_t n = 0; n < lik_.model().n_points(); ++n) s += lik_.log_lik(n, theta);
  return log_prior(theta, prior_) + temperature_ * s;
}

double FullDataTarget::log_density_grad(std::span<const double> theta, std::span<double> grad) {
  if (temperature_ == 1.0) return full_log_posterior_grad(theta, lik_, prior_, grad);
  std::fill(grad.begin(), grad.end(), 0.0);
  double s = 0.0;
  for (std::size_t n = 0; n < lik_.model().n_points(); ++n) {
    s += lik_.log_lik_grad(n, theta, scratch_);
    simd::axpy(temperature_, scratch_, grad);
  }
  std::vector<double> gp(theta.size());
  grad_log_prior(theta, prior_, gp);
  simd::axpy(1.0, gp, grad);
  return log_prior(theta, prior_) + temperature_ * s;
}

FireflyTarget::FireflyTarget(const MeteredLikelihood& lik, const LowerBound& bound, const CollapsedBound& collapsed,
                             const Prior& prior, const BrightnessSet& set, BrightCache& cache)
    : lik_(lik),
      bound_(&bound),
      collapsed_(&collapsed),
      prior_(prior),
      set_(&set),
      cache_(&cache),
      g_lik_(collapsed.dim),
      g_bound_(collapsed.dim) {}

double FireflyTarget::log_density(std::span<const double> theta) { return evaluate(theta, {}); }

double FireflyTarget::log_density_grad(std::span<const double> theta, std::span<double> grad) {
  return evaluate(theta, grad);
}

double FireflyTarget::evaluate(std::span<const double> theta, std::span<double> grad) {
  const bool want_grad = !grad.empty();
  const std::size_t dim = collapsed_->dim;
  const auto bright = set_->bright();
  last_valid_ = false;
  last_has_grad_ = want_grad;
  last_index_.assign(bright.begin(), bright.end());
  last_log_lik_.resize(bright.size());
  last_log_bound_.resize(bright.size());
  if (want_grad) last_grads_.resize(bright.size() * dim);

  double value = 0.0;
  if (want_grad) {
    value = collapsed_->evaluate_grad(theta, grad);
    grad_log_prior(theta, prior_, g_lik_);
    simd::axpy(1.0, g_lik_, grad);
  } else {
    value = collapsed_->evaluate(theta);
  }
  value += log_prior(theta, prior_);

  for (std::size_t i = 0; i < bright.size(); ++i) {
    const std::size_t n = bright[i];
    double ll = 0.0;
    double lb = 0.0;
    if (want_grad) {
      ll = lik_.log_lik_grad(n, theta, g_lik_);
      lb = bound_->log_bound_grad(n, theta, g_bound_);
    } else {
      ll = lik_.log_lik(n, theta);
      lb = bound_->log_bound(n, theta);
    }
    const double f = bright_log_factor(ll, lb);
    if (f == kNegInf) return kNegInf;
    value += f;
    last_log_lik_[i] = ll;
    last_log_bound_[i] = lb;
    if (want_grad) {
      const double w = 1.0 / -std::expm1(-(ll - lb));
      double* gi = last_grads_.data() + i * dim;
      for (std::size_t d = 0; d < dim; ++d) {
        gi[d] = w * (g_lik_[d] - g_bound_[d]);
        grad[d] += gi[d];
      }
    }
  }
  last_valid_ = true;
  return value;
}

void FireflyTarget::accept_last() {
  if (!last_valid_) throw std::logic_error("accept_last called without a finite evaluation");
  if (cache_->with_gradients() && !last_has_grad_) {
    throw std::logic_error("gradient cache requested but the accepted evaluation had no gradient");
  }
  const std::size_t dim = collapsed_->dim;
  for (std::size_t i = 0; i < last_index_.size(); ++i) {
    if (cache_->with_gradients()) {
      cache_->store(last_index_[i], last_log_lik_[i], last_log_bound_[i],
                    std::span<const double>(last_grads_.data() + i * dim, dim));
    } else {
      cache_->store(last_index_[i], last_log_lik_[i], last_log_bound_[i]);
    }
  }
}

double FireflyTarget::log_density_cached(std::span<const double> theta, std::span<double> grad) const {
  const bool want_grad = !grad.empty();
  double value = 0.0;
  if (want_grad) {
    if (!cache_->with_gradients()) throw std::logic_error("cache holds no gradients");
    value = collapsed_->evaluate_grad(theta, grad);
    std::vector<double> gp(theta.size());
    grad_log_prior(theta, prior_, gp);
    simd::axpy(1.0, gp, grad);
  } else {
    value = collapsed_->evaluate(theta);
  }
  value += log_prior(theta, prior_);
  for (std::size_t n : set_->bright()) {
    if (!cache_->valid(n)) throw std::logic_error(fmt::format("bright datum {} missing from the cache", n));
    value += bright_log_factor(cache_->log_lik(n), cache_->log_bound(n));
    if (want_grad) simd::axpy(1.0, cache_->factor_grad(n), grad);
  }
  return value;
}

// --- kernels ----------------------------------------------------------------

std::string_view kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::RandomWalk:
      return "rwmh";
    case KernelKind::Mala:
      return "mala";
    case KernelKind::Slice:
      return "slice";
  }
  return "unknown";
}

KernelKind parse_kernel(std::string_view name) {
  if (name == "rwmh") return KernelKind::RandomWalk;
  if (name == "mala") return KernelKind::Mala;
  if (name == "slice") return KernelKind::Slice;
  throw std::invalid_argument(fmt::format("unknown kernel '{}'", name));
}

void validate_kernel_config(const KernelConfig& config) {
  if (config.kind == KernelKind::Slice) {
    if (!(config.width > 0.0)) throw std::invalid_argument("slice width must be positive");
    if (config.max_steps_out < 1) throw std::invalid_argument("slice max_steps_out must be >= 1");
    return;
  }
  if (!(config.step >= 1e-12) || !std::isfinite(config.step)) {
    throw std::invalid_argument(fmt::format("proposal step {} is degenerate (must be >= 1e-12)", config.step));
  }
}

std::unique_ptr<ThetaKernel> make_kernel(const KernelConfig& config) {
  switch (config.kind) {
    case KernelKind::RandomWalk:
      return std::make_unique<RandomWalkKernel>(config);
    case KernelKind::Mala:
      return std::make_unique<MalaKernel>(config);
    case KernelKind::Slice:
      return std::make_unique<SliceKernel>(config);
  }
  throw std::invalid_argument("unknown kernel");
}

StepSizeAdapter::StepSizeAdapter(double initial_step, double target_accept, bool enabled)
    : log_step_(std::log(initial_step)), target_(target_accept), enabled_(enabled) {}

void StepSizeAdapter::update(double accept_prob) {
  if (!enabled_ || frozen_) return;
  ++t_;
  log_step_ += std::pow(static_cast<double>(t_), -0.6) * (accept_prob - target_);
  history_.push_back(log_step_);
}

void StepSizeAdapter::freeze() {
  if (frozen_) return;
  frozen_ = true;
  if (history_.empty()) return;
  const std::size_t half = history_.size() / 2;
  log_step_ = std::accumulate(history_.begin() + static_cast<std::ptrdiff_t>(half), history_.end(), 0.0) /
              static_cast<double>(history_.size() - half);
  history_.clear();
  history_.shrink_to_fit();
}

RandomWalkKernel::RandomWalkKernel(const KernelConfig& config)
    : adapter_((validate_kernel_config(config), config.step), config.target_accept(), config.auto_tune) {}

StepResult RandomWalkKernel::step(Target& target, ChainPosition& pos, Rng& rng) {
  const double eps = adapter_.step();
  std::normal_distribution<double> normal(0.0, 1.0);
  proposal_.resize(pos.theta.size());
  for (std::size_t i = 0; i < proposal_.size(); ++i) proposal_[i] = pos.theta[i] + eps * normal(rng);
  const double lp = target.log_density(proposal_);
  const double log_ratio = lp - pos.log_density;
  StepResult r;
  r.accept_prob = lp == kNegInf ? 0.0 : std::min(1.0, std::exp(log_ratio));
  if (std::log(uniform01(rng)) < log_ratio) {
    pos.theta = proposal_;
    pos.log_density = lp;
    pos.has_grad = false;
    target.accept_last();
    r.accepted = true;
  }
  return r;
}

MalaKernel::MalaKernel(const KernelConfig& config)
    : adapter_((validate_kernel_config(config), config.step), config.target_accept(), config.auto_tune) {}

StepResult MalaKernel::step(Target& target, ChainPosition& pos, Rng& rng) {
  const std::size_t dim = pos.theta.size();
  if (!pos.has_grad) {
    pos.grad.resize(dim);
    pos.log_density = target.log_density_grad(pos.theta, pos.grad);
    pos.has_grad = true;
  }
  const double eps = adapter_.step();
  const double half_eps2 = 0.5 * eps * eps;
  std::normal_distribution<double> normal(0.0, 1.0);
  proposal_.resize(dim);
  grad_prop_.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) proposal_[i] = pos.theta[i] + half_eps2 * pos.grad[i] + eps * normal(rng);

  StepResult r;
  const double lp = target.log_density_grad(proposal_, grad_prop_);
  if (lp == kNegInf) {
    uniform01(rng);
    return r;
  }
  if (!all_finite(grad_prop_)) throw std::runtime_error("MALA: non-finite gradient at the proposal");

  double fwd = 0.0;
  double bwd = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double df = proposal_[i] - pos.theta[i] - half_eps2 * pos.grad[i];
    const double db = pos.theta[i] - proposal_[i] - half_eps2 * grad_prop_[i];
    fwd += df * df;
    bwd += db * db;
  }
  const double log_ratio = lp - pos.log_density + (fwd - bwd) / (2.0 * eps * eps);
  r.accept_prob = std::min(1.0, std::exp(log_ratio));
  if (std::log(uniform01(rng)) < log_ratio) {
    pos.theta = proposal_;
    pos.grad = grad_prop_;
    pos.log_density = lp;
    target.accept_last();
    r.accepted = true;
  }
  return r;
}

SliceKernel::SliceKernel(const KernelConfig& config) : width_(config.width), max_steps_out_(config.max_steps_out) {
  validate_kernel_config(config);
}

StepResult SliceKernel::step(Target& target, ChainPosition& pos, Rng& rng) {
  const std::size_t dim = pos.theta.size();
  probe_ = pos.theta;
  std::exponential_distribution<double> expo(1.0);
  for (std::size_t j = 0; j < dim; ++j) {
    const double x0 = pos.theta[j];
    const double level = pos.log_density - expo(rng);
    auto f = [&](double x) {
      probe_[j] = x;
      return target.log_density(probe_);
    };
    double left = x0 - width_ * uniform01(rng);
    double right = left + width_;
    auto steps_left = static_cast<std::size_t>(std::floor(static_cast<double>(max_steps_out_) * uniform01(rng)));
    std::size_t steps_right = max_steps_out_ - 1 - steps_left;
    while (steps_left > 0 && f(left) > level) {
      left -= width_;
      --steps_left;
    }
    while (steps_right > 0 && f(right) > level) {
      right += width_;
      --steps_right;
    }
    std::size_t shrinks = 0;
    while (true) {
      const double x1 = left + uniform01(rng) * (right - left);
      const double lp = f(x1);
      if (lp > level) {
        pos.theta[j] = x1;
        pos.log_density = lp;
        target.accept_last();
        break;
      }
      if (++shrinks > kMaxShrinkSteps) {
        throw std::runtime_error(fmt::format("slice sampler: shrinkage collapsed on coordinate {} after {} steps", j,
                                             kMaxShrinkSteps));
      }
      (x1 < x0 ? left : right) = x1;
    }
    probe_[j] = pos.theta[j];
  }
  pos.has_grad = false;
  return {true, 1.0};
}

// --- traces -----------------------------------------------------------------

std::vector<double> ChainTrace::column(std::size_t d, std::size_t from) const {
  std::vector<double> out;
  out.reserve(size() > from ? size() - from : 0);
  for (std::size_t i = from; i < size(); ++i) out.push_back(theta[i * dim + d]);
  return out;
}

void ChainTrace::append(const TraceRow& row, std::span<const double> th) {
  rows.push_back(row);
  theta.insert(theta.end(), th.begin(), th.end());
}

void write_trace_csv(const ChainTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(fmt::format("cannot write trace '{}'", path.string()));
  out << "iteration,log_joint,m_bright,cum_queries,accept\n";
  for (const auto& r : trace.rows) {
    out << fmt::format("{},{:.17g},{},{},{}\n", r.iteration, r.log_joint, r.n_bright, r.cum_queries,
                       r.accepted ? 1 : 0);
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "theta snapshots are written little-endian");

template <class T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_raw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated theta snapshot file");
  return v;
}

}  // namespace

void write_theta_bin(const ChainTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  write_raw(out, static_cast<std::uint64_t>(trace.size()));
  write_raw(out, static_cast<std::uint64_t>(trace.dim));
  out.write(reinterpret_cast<const char*>(trace.theta.data()),
            static_cast<std::streamsize>(trace.theta.size() * sizeof(double)));
}

ChainTrace read_theta_bin(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  const auto rows = read_raw<std::uint64_t>(in);
  const auto dim = read_raw<std::uint64_t>(in);
  ChainTrace t;
  t.dim = dim;
  t.rows.resize(rows);
  t.theta.resize(rows * dim);
  in.read(reinterpret_cast<char*>(t.theta.data()), static_cast<std::streamsize>(t.theta.size() * sizeof(double)));
  if (!in) throw std::runtime_error("truncated theta snapshot file");
  for (std::size_t i = 0; i < rows; ++i) t.rows[i].iteration = i;
  return t;
}

// --- chains -----------------------------------------------------------------

FireflySampler::FireflySampler(const LikelihoodModel& model, const LowerBound& bound, const Prior& prior,
                               KernelConfig kernel, ResampleConfig resample, ParameterVector theta0,
                               std::uint64_t seed, std::size_t adapt_iterations)
    : model_(&model),
      bound_(&bound),
      prior_(prior),
      resample_(resample),
      meter_(std::make_unique<QueryMeter>()),
      lik_(model, *meter_),
      collapsed_(bound.collapse()),
      kernel_(make_kernel(kernel)),
      rng_(make_rng(seed, 0)),
      adapt_iterations_(adapt_iterations) {
  validate_resample_config(resample_);
  if (theta0.size() != model.n_params()) {
    throw std::invalid_argument(fmt::format("initial parameter length {} != {}", theta0.size(), model.n_params()));
  }
  if (bound.n_params() != model.n_params() || bound.n_points() != model.n_points()) {
    throw std::invalid_argument("bound and model disagree on dimensions");
  }
  const std::size_t n_points = model.n_points();
  state_.theta = std::move(theta0);
  state_.brightness = BrightnessSet(n_points);
  state_.cache = BrightCache(n_points, model.n_params(), kernel_->needs_gradient());

  // z ~ p(z | theta0) exactly.
  gibbs_sweep(state_.brightness, state_.theta, ResampleContext{lik_, *bound_, state_.cache}, rng_);

  if (const auto* im = std::get_if<ImplicitResample>(&resample_)) {
    auto_q_ = !(im->q_dark_to_bright > 0.0);
    mean_bright_ = static_cast<double>(state_.brightness.num_bright());
    q_db_ = auto_q_ ? 0.0 : im->q_dark_to_bright;
  }
  if (auto_q_) {
    const double n = static_cast<double>(std::max<std::size_t>(n_points, 1));
    q_db_ = std::clamp(mean_bright_ / n, std::min(1.0, 10.0 / n), 1.0);
  }

  target_ = std::make_unique<FireflyTarget>(lik_, *bound_, collapsed_, prior_, state_.brightness, state_.cache);
  pos_.theta = state_.theta;
  if (kernel_->needs_gradient()) {
    pos_.grad.resize(model.n_params());
    pos_.log_density = target_->log_density_cached(pos_.theta, pos_.grad);
    pos_.has_grad = true;
  } else {
    pos_.log_density = target_->log_density_cached(pos_.theta, {});
  }
  state_.cached_log_joint = pos_.log_density;
  if (adapt_iterations_ == 0) kernel_->freeze();
}

void FireflySampler::resample() {
  ResampleContext ctx{lik_, *bound_, state_.cache};
  if (const auto* ex = std::get_if<ExplicitResample>(&resample_)) {
    explicit_resample(state_.brightness, pos_.theta, *ex, ctx, rng_);
  } else {
    ImplicitResample im = std::get<ImplicitResample>(resample_);
    im.q_dark_to_bright = q_db_;
    implicit_resample(state_.brightness, pos_.theta, im, ctx, rng_);
  }
  if (kernel_->needs_gradient()) {
    pos_.log_density = target_->log_density_cached(pos_.theta, pos_.grad);
    pos_.has_grad = true;
  } else {
    pos_.log_density = target_->log_density_cached(pos_.theta, {});
  }
}

TraceRow FireflySampler::iterate() {
  resample();
  const StepResult step = kernel_->step(*target_, pos_, rng_);

  const bool adapting = iteration_ < adapt_iterations_;
  if (adapting) {
    kernel_->adapt(step.accept_prob);
    if (auto_q_) {
      mean_bright_ += 0.05 * (static_cast<double>(state_.brightness.num_bright()) - mean_bright_);
      const double n = static_cast<double>(model_->n_points());
      q_db_ = std::clamp(mean_bright_ / n, std::min(1.0, 10.0 / n), 1.0);
    }
    if (iteration_ + 1 == adapt_iterations_) kernel_->freeze();
  }

  state_.theta = pos_.theta;
  state_.cached_log_joint = pos_.log_density;
  TraceRow row{iteration_, pos_.log_density, state_.brightness.num_bright(), meter_->count(), step.accepted};
  ++iteration_;
  return row;
}

ChainTrace FireflySampler::run(std::size_t iterations) {
  ChainTrace trace;
  trace.dim = model_->n_params();
  trace.rows.reserve(iterations);
  trace.theta.reserve(iterations * trace.dim);
  for (std::size_t i = 0; i < iterations; ++i) {
    const TraceRow row = iterate();
    trace.append(row, state_.theta);
  }
  return trace;
}

double FireflySampler::recompute_log_joint() const {
  QueryMeter scratch_meter;
  MeteredLikelihood lik(*model_, scratch_meter);
  double value = collapsed_.evaluate(state_.theta) + log_prior(state_.theta, prior_);
  for (std::size_t n : state_.brightness.bright()) {
    value += bright_log_factor(lik.log_lik(n, state_.theta), bound_->log_bound(n, state_.theta));
  }
  return value;
}

FullDataSampler::FullDataSampler(const LikelihoodModel& model, const Prior& prior, KernelConfig kernel,
                                 ParameterVector theta0, std::uint64_t seed, std::size_t adapt_iterations,
                                 double temperature)
    : meter_(std::make_unique<QueryMeter>()),
      lik_(model, *meter_),
      target_(std::make_unique<FullDataTarget>(lik_, prior, temperature)),
      kernel_(make_kernel(kernel)),
      rng_(make_rng(seed, 0)),
      adapt_iterations_(adapt_iterations) {
  if (theta0.size() != model.n_params()) {
    throw std::invalid_argument(fmt::format("initial parameter length {} != {}", theta0.size(), model.n_params()));
  }
  pos_.theta = std::move(theta0);
  if (kernel_->needs_gradient()) {
    pos_.grad.resize(pos_.theta.size());
    pos_.log_density = target_->log_density_grad(pos_.theta, pos_.grad);
    pos_.has_grad = true;
  } else {
    pos_.log_density = target_->log_density(pos_.theta);
  }
  if (adapt_iterations_ == 0) kernel_->freeze();
}

TraceRow FullDataSampler::iterate() {
  const StepResult step = kernel_->step(*target_, pos_, rng_);
  if (iteration_ < adapt_iterations_) {
    kernel_->adapt(step.accept_prob);
    if (iteration_ + 1 == adapt_iterations_) kernel_->freeze();
  }
  TraceRow row{iteration_, pos_.log_density, lik_.model().n_points(), meter_->count(), step.accepted};
  ++iteration_;
  return row;
}

ChainTrace FullDataSampler::run(std::size_t iterations) {
  ChainTrace trace;
  trace.dim = pos_.theta.size();
  trace.rows.reserve(iterations);
  trace.theta.reserve(iterations * trace.dim);
  for (std::size_t i = 0; i < iterations; ++i) {
    const TraceRow row = iterate();
    trace.append(row, pos_.theta);
  }
  return trace;
}

}  // namespace flymc
