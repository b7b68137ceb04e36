#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "flymc/bounds.hpp"
#include "flymc/brightness.hpp"
#include "flymc/meter.hpp"
#include "flymc/model.hpp"

namespace flymc {

/// A log density the theta-kernels can query. Implementations count their own
/// likelihood queries.
class Target {
 public:
  virtual ~Target() = default;
  virtual std::size_t dim() const = 0;
  virtual double log_density(std::span<const double> theta) = 0;
  virtual double log_density_grad(std::span<const double> theta, std::span<double> grad) = 0;
  /// Called by a kernel when the most recent evaluation becomes the chain's
  /// current point.
  virtual void accept_last() {}
};

/// log p(theta) + temperature * sum_n log L_n(theta); N queries per call.
/// temperature != 1 is only used to build deliberately wrong chains.
class FullDataTarget final : public Target {
 public:
  FullDataTarget(const MeteredLikelihood& lik, const Prior& prior, double temperature = 1.0);
  std::size_t dim() const override { return lik_.model().n_params(); }
  double log_density(std::span<const double> theta) override;
  double log_density_grad(std::span<const double> theta, std::span<double> grad) override;

 private:
  MeteredLikelihood lik_;
  Prior prior_;
  double temperature_;
  std::vector<double> scratch_;
};

/// The augmented joint conditioned on the brightness variables:
///   log p(theta) + sum_n log B_n(theta) + sum_{n bright} log(L_n/B_n - 1).
/// The bound product comes from the collapsed statistics; each call queries
/// exactly the M bright likelihoods.
class FireflyTarget final : public Target {
 public:
  FireflyTarget(const MeteredLikelihood& lik, const LowerBound& bound, const CollapsedBound& collapsed,
                const Prior& prior, const BrightnessSet& set, BrightCache& cache);

  std::size_t dim() const override { return collapsed_->dim; }
  double log_density(std::span<const double> theta) override;
  double log_density_grad(std::span<const double> theta, std::span<double> grad) override;
  /// Moves the bright likelihoods of the last evaluation into the cache.
  void accept_last() override;

  /// The same density at the chain's current theta, rebuilt from the cache
  /// without any likelihood query. grad may be empty.
  double log_density_cached(std::span<const double> theta, std::span<double> grad) const;

 private:
  double evaluate(std::span<const double> theta, std::span<double> grad);

  MeteredLikelihood lik_;
  const LowerBound* bound_;
  const CollapsedBound* collapsed_;
  Prior prior_;
  const BrightnessSet* set_;
  BrightCache* cache_;

  std::vector<std::size_t> last_index_;
  std::vector<double> last_log_lik_;
  std::vector<double> last_log_bound_;
  std::vector<double> last_grads_;
  bool last_valid_ = false;
  bool last_has_grad_ = false;
  std::vector<double> g_lik_;
  std::vector<double> g_bound_;
};

enum class KernelKind { RandomWalk, Mala, Slice };

std::string_view kernel_name(KernelKind k);
KernelKind parse_kernel(std::string_view name);

struct KernelConfig {
  KernelKind kind = KernelKind::RandomWalk;
  double step = 0.1;  // proposal scale for random walk and MALA
  double width = 1.0;  // slice initial bracket width
  std::size_t max_steps_out = 10;
  bool auto_tune = true;  // Robbins-Monro on the step during burn-in

  double target_accept() const { return kind == KernelKind::Mala ? 0.57 : 0.234; }
};

void validate_kernel_config(const KernelConfig& config);

struct ChainPosition {
  ParameterVector theta;
  double log_density = 0.0;
  std::vector<double> grad;
  bool has_grad = false;
};

struct StepResult {
  bool accepted = false;
  double accept_prob = 0.0;
};

class ThetaKernel {
 public:
  virtual ~ThetaKernel() = default;
  virtual StepResult step(Target& target, ChainPosition& pos, Rng& rng) = 0;
  virtual bool needs_gradient() const { return false; }

  /// Feeds one acceptance probability to the step-size adapter.
  virtual void adapt(double /*accept_prob*/) {}
  /// Fixes the step size for the rest of the chain.
  virtual void freeze() {}
  virtual double step_size() const { return 0.0; }
};

std::unique_ptr<ThetaKernel> make_kernel(const KernelConfig& config);

/// Robbins-Monro adaptation of log(step) toward a target acceptance rate.
/// The frozen step is the average of log(step) over the second half of the
/// adaptation window.
class StepSizeAdapter {
 public:
  StepSizeAdapter(double initial_step, double target_accept, bool enabled);

  double step() const { return std::exp(log_step_); }
  void update(double accept_prob);
  void freeze();
  bool frozen() const { return frozen_; }

 private:
  double log_step_;
  double target_;
  bool enabled_;
  bool frozen_ = false;
  std::size_t t_ = 0;
  std::vector<double> history_;
};

class RandomWalkKernel final : public ThetaKernel {
 public:
  explicit RandomWalkKernel(const KernelConfig& config);
  StepResult step(Target& target, ChainPosition& pos, Rng& rng) override;
  void adapt(double accept_prob) override { adapter_.update(accept_prob); }
  void freeze() override { adapter_.freeze(); }
  double step_size() const override { return adapter_.step(); }

 private:
  StepSizeAdapter adapter_;
  std::vector<double> proposal_;
};

/// Metropolis-adjusted Langevin: drift (step^2 / 2) grad log pi, Gaussian
/// noise of scale step, MH correction for the asymmetric proposal.
class MalaKernel final : public ThetaKernel {
 public:
  explicit MalaKernel(const KernelConfig& config);
  StepResult step(Target& target, ChainPosition& pos, Rng& rng) override;
  bool needs_gradient() const override { return true; }
  void adapt(double accept_prob) override { adapter_.update(accept_prob); }
  void freeze() override { adapter_.freeze(); }
  double step_size() const override { return adapter_.step(); }

 private:
  StepSizeAdapter adapter_;
  std::vector<double> proposal_;
  std::vector<double> grad_prop_;
};

/// Coordinate-wise slice sampling with stepping out (Neal's randomized split
/// of the step-out budget) and shrinkage. One call is one sweep.
class SliceKernel final : public ThetaKernel {
 public:
  explicit SliceKernel(const KernelConfig& config);
  StepResult step(Target& target, ChainPosition& pos, Rng& rng) override;

  static constexpr std::size_t kMaxShrinkSteps = 1000;

 private:
  double width_;
  std::size_t max_steps_out_;
  std::vector<double> probe_;
};

// --- chains ---------------------------------------------------------------

struct TraceRow {
  std::size_t iteration = 0;
  double log_joint = 0.0;
  std::size_t n_bright = 0;
  std::uint64_t cum_queries = 0;
  bool accepted = false;
};

/// Per-iteration records plus one theta snapshot per row.
struct ChainTrace {
  std::size_t dim = 0;
  std::vector<TraceRow> rows;
  std::vector<double> theta;  // rows.size() x dim

  std::size_t size() const { return rows.size(); }
  std::span<const double> theta_at(std::size_t i) const { return {theta.data() + i * dim, dim}; }
  /// Coordinate d of rows [from, size()).
  std::vector<double> column(std::size_t d, std::size_t from = 0) const;
  void append(const TraceRow& row, std::span<const double> th);
};

/// CSV header: iteration,log_joint,m_bright,cum_queries,accept
void write_trace_csv(const ChainTrace& trace, const std::filesystem::path& path);
/// Binary theta snapshots: uint64 rows, uint64 dim, then rows*dim float64,
/// all little-endian.
void write_theta_bin(const ChainTrace& trace, const std::filesystem::path& path);
ChainTrace read_theta_bin(const std::filesystem::path& path);

struct JointPosteriorState {
  ParameterVector theta;
  BrightnessSet brightness;
  double cached_log_joint = 0.0;
  BrightCache cache;
};

/// Firefly chain: each iteration resamples the brightness variables and then
/// takes one theta-kernel step against the conditional joint.
class FireflySampler {
 public:
  /// Initial brightness is drawn from its exact conditional at theta0, which
  /// costs N queries. Adaptation (step size, automatic q_dark_to_bright) runs
  /// for the first `adapt_iterations` iterations and is frozen afterwards.
  FireflySampler(const LikelihoodModel& model, const LowerBound& bound, const Prior& prior, KernelConfig kernel,
                 ResampleConfig resample, ParameterVector theta0, std::uint64_t seed, std::size_t adapt_iterations);

  FireflySampler(const FireflySampler&) = delete;
  FireflySampler& operator=(const FireflySampler&) = delete;

  TraceRow iterate();
  ChainTrace run(std::size_t iterations);

  const JointPosteriorState& state() const { return state_; }
  const QueryMeter& meter() const { return *meter_; }
  const CollapsedBound& collapsed() const { return collapsed_; }
  const ThetaKernel& kernel() const { return *kernel_; }
  /// Current q_dark_to_bright for implicit resampling (0 for explicit).
  double q_dark_to_bright() const { return q_db_; }

  /// Fresh evaluation of the current log joint (queries a private meter).
  double recompute_log_joint() const;

 private:
  void resample();

  const LikelihoodModel* model_;
  const LowerBound* bound_;
  Prior prior_;
  ResampleConfig resample_;
  std::unique_ptr<QueryMeter> meter_;
  MeteredLikelihood lik_;
  CollapsedBound collapsed_;
  JointPosteriorState state_;
  std::unique_ptr<ThetaKernel> kernel_;
  std::unique_ptr<FireflyTarget> target_;
  ChainPosition pos_;
  Rng rng_;
  std::size_t adapt_iterations_;
  std::size_t iteration_ = 0;
  bool auto_q_ = false;
  double q_db_ = 0.0;
  double mean_bright_ = 0.0;
};

/// Regular MCMC against the full posterior; the exactness and cost baseline.
class FullDataSampler {
 public:
  FullDataSampler(const LikelihoodModel& model, const Prior& prior, KernelConfig kernel, ParameterVector theta0,
                  std::uint64_t seed, std::size_t adapt_iterations, double temperature = 1.0);

  FullDataSampler(const FullDataSampler&) = delete;
  FullDataSampler& operator=(const FullDataSampler&) = delete;

  TraceRow iterate();
  ChainTrace run(std::size_t iterations);

  const ChainPosition& position() const { return pos_; }
  const QueryMeter& meter() const { return *meter_; }
  const ThetaKernel& kernel() const { return *kernel_; }

 private:
  std::unique_ptr<QueryMeter> meter_;
  MeteredLikelihood lik_;
  std::unique_ptr<FullDataTarget> target_;
  std::unique_ptr<ThetaKernel> kernel_;
  ChainPosition pos_;
  Rng rng_;
  std::size_t adapt_iterations_;
  std::size_t iteration_ = 0;
};

/// Seeds a chain from (experiment seed, chain id) deterministically.
Rng make_rng(std::uint64_t seed, std::uint64_t stream);

}  // namespace flymc
