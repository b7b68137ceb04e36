#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flymc/bounds.hpp"
#include "flymc/brightness.hpp"
#include "flymc/diagnostics.hpp"
#include "flymc/model.hpp"
#include "flymc/samplers.hpp"

namespace flymc {

/// Thrown by config validation; the message lists every problem found.
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct SyntheticSpec {
  double theta_scale = 1.0;  // theta* ~ prior with this scale
  PriorKind theta_prior = PriorKind::Gaussian;
  double nu = 4.0;  // Student-t noise for regression targets
  double noise_scale = 1.0;
};

struct SyntheticData {
  Dataset data;
  ParameterVector theta_true;
};

/// Features are i.i.d. standard normal; targets are drawn from the model's
/// own likelihood at theta*. Deterministic in `seed`.
SyntheticData generate_synthetic(const SyntheticSpec& spec, Family family, std::size_t n_points,
                                 std::size_t n_features, std::size_t n_classes, std::uint64_t seed);

/// Metadata record written next to a generated dataset.
nlohmann::json synthetic_metadata(const SyntheticSpec& spec, Family family, const SyntheticData& synth,
                                  std::uint64_t seed);

enum class Algorithm { Regular, Untuned, MapTuned, Tempered };

std::string_view algorithm_name(Algorithm a);
Algorithm parse_algorithm(std::string_view name);

struct ExperimentConfig {
  ModelSpec model;
  std::size_t n_points = 2000;
  std::size_t n_features = 5;
  std::size_t n_classes = 0;
  double theta_scale = 1.0;  // synthetic theta* is drawn from the prior at this scale
  std::optional<std::filesystem::path> data_path;  // CSV instead of synthetic data

  Prior prior;
  BoundFamily bound_family = BoundFamily::JaakkolaJordan;
  std::optional<double> untuned_xi;  // overrides the family default
  SgdConfig sgd;
  std::optional<std::filesystem::path> tuned_bound_path;  // output of `tune`

  KernelConfig kernel;
  ResampleConfig resample = ImplicitResample{};
  std::vector<Algorithm> algorithms{Algorithm::Regular, Algorithm::Untuned, Algorithm::MapTuned};
  double tempered_temperature = 0.9;

  std::size_t iterations = 20000;
  double burn_in = 0.5;
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "flymc_out";

  std::size_t adapt_iterations() const {
    return static_cast<std::size_t>(burn_in * static_cast<double>(iterations));
  }
};

/// Desk-scale defaults for a model family: sizes, prior, bound and kernel.
ExperimentConfig default_config(Family family);

/// Every invalid field, all at once. Throws ConfigError when non-empty.
std::vector<std::string> config_problems(const ExperimentConfig& config);
void validate_config(const ExperimentConfig& config);

/// Reads a config, starting from default_config of its model family. Unknown
/// keys are reported as problems.
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Overlays the keys present in `j` onto `base`.
void merge_config_json(ExperimentConfig& base, const nlohmann::json& j, std::vector<std::string>& problems);
/// Complete echo; feeding it back to config_from_json reproduces the run.
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

SyntheticSpec synthetic_spec(const ExperimentConfig& config);

/// Synthetic data per the config, or the CSV at data_path.
SyntheticData load_experiment_data(const ExperimentConfig& config);

/// Deterministic per-purpose seed derived from the experiment seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Bound parameters for one FlyMC variant: the untuned defaults, a saved
/// tuning, or a fresh MAP tuning.
TuneResult experiment_bound(const ExperimentConfig& config, const LikelihoodModel& model, Algorithm algorithm);

/// Saved tuning: {"bound": BoundParams, "theta_map": [...]}.
nlohmann::json tune_result_to_json(const TuneResult& tune);
TuneResult tune_result_from_json(const nlohmann::json& j);

/// One FlyMC chain with the given bound, seeded for `algorithm`.
ChainTrace run_firefly_chain(const ExperimentConfig& config, const LikelihoodModel& model,
                             const BoundParams& params, Algorithm algorithm);

/// Runs one chain of the configured length from theta = 0.
ChainTrace run_algorithm(const ExperimentConfig& config, const LikelihoodModel& model, Algorithm algorithm);

struct ExperimentResult {
  std::filesystem::path directory;
  std::vector<AlgorithmSummary> summaries;
};

/// Writes config.json, data.csv + data_meta.json (synthetic runs),
/// <algorithm>/trace.csv and theta.bin, summary.json and table.csv.
/// FLYMC_OUTPUT_DIR, when set, replaces config.output_dir.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Fills speedups (against the regular chain) and moment flags.
std::vector<AlgorithmSummary> compare_chains(const std::vector<std::pair<std::string, const ChainTrace*>>& chains,
                                             std::size_t n_points, double burn_in);

void write_table_csv(const std::vector<AlgorithmSummary>& summaries, const std::filesystem::path& path);

/// trace.csv + theta.bin from a chain directory.
ChainTrace load_chain(const std::filesystem::path& directory);

// --- grid oracle ------------------------------------------------------------

/// Per-axis bounds and point counts. Empty bounds ask for an automatic range
/// of +-10 standard deviations around the located mode.
struct GridSpec {
  std::vector<double> lower;
  std::vector<double> upper;
  std::size_t points = 201;
};

struct GridOracle {
  std::size_t dim = 0;
  std::vector<std::vector<double>> axes;
  std::vector<double> density;  // normalized, row-major over axes (last axis fastest)
  std::vector<double> mean;
  std::vector<double> variance;
  double mass = 0.0;  // trapezoid integral of the normalized density

  MomentSummary moments() const;
};

using LogDensityFn = std::function<double(std::span<const double>)>;

/// Trapezoid quadrature of exp(log_density) on a rectangular grid. dim <= 2.
GridOracle grid_posterior_oracle(const LogDensityFn& log_density, std::size_t dim, const GridSpec& grid);
GridOracle grid_posterior_oracle(const LikelihoodModel& model, const Prior& prior, const GridSpec& grid);

nlohmann::json oracle_to_json(const GridOracle& oracle);

}  // namespace flymc
