#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "flymc/samplers.hpp"

namespace flymc {

/// T / (1 + 2 sum_k rho_k) with Geyer's initial monotone positive sequence
/// truncation, clamped to (0, T]. Needs at least 100 samples and nonzero
/// variance.
double effective_sample_size(std::span<const double> series);

/// Integrated autocorrelation time T / ESS.
double integrated_autocorrelation_time(std::span<const double> series);

struct EssReport {
  std::vector<double> ess;  // per dimension
  std::vector<double> tau;
  double min_ess = 0.0;
  double median_ess = 0.0;
  std::size_t n_samples = 0;

  double min_per_1000() const { return 1000.0 * min_ess / static_cast<double>(n_samples); }
  double median_per_1000() const { return 1000.0 * median_ess / static_cast<double>(n_samples); }
};

/// First row kept after discarding the burn-in fraction.
std::size_t burn_in_rows(const ChainTrace& trace, double burn_in_fraction);

EssReport ess_report(const ChainTrace& trace, double burn_in_fraction = 0.5);

/// Mean likelihood queries per iteration over the kept rows.
double average_queries_per_iteration(const ChainTrace& trace, double burn_in_fraction = 0.5);
double average_bright_count(const ChainTrace& trace, double burn_in_fraction = 0.5);
double acceptance_rate(const ChainTrace& trace, double burn_in_fraction = 0.5);

/// Queries spent after burn-in divided by the minimum per-dimension ESS.
double queries_per_effective_sample(const ChainTrace& trace, double burn_in_fraction = 0.5);

/// (queries/ES of baseline) / (queries/ES of the FlyMC chain).
double speedup(const ChainTrace& flymc_trace, const ChainTrace& baseline_trace, double burn_in_fraction = 0.5);

struct MomentSummary {
  std::vector<double> mean;
  std::vector<double> variance;
  std::vector<double> mean_se;      // zero for exact references
  std::vector<double> variance_se;  // zero for exact references
};

/// Sample moments with ESS-based Monte Carlo standard errors.
MomentSummary chain_moments(const ChainTrace& trace, double burn_in_fraction = 0.5);

struct MomentComparison {
  std::vector<double> mean_z;      // |difference| / combined SE, per dimension
  std::vector<double> variance_z;
  std::vector<bool> flags;         // any z above the threshold
  double threshold = 4.0;

  bool any_flag() const;
  double max_z() const;
};

MomentComparison moment_comparison(const MomentSummary& a, const MomentSummary& b, double threshold = 4.0);
MomentComparison moment_comparison(const ChainTrace& a, const ChainTrace& b, double burn_in_fraction = 0.5,
                                   double threshold = 4.0);

/// One line of the efficiency table.
struct AlgorithmSummary {
  std::string algorithm;
  double avg_queries_per_iter = 0.0;
  double ess_per_1000 = 0.0;         // minimum over dimensions
  double ess_per_1000_median = 0.0;
  double speedup = 1.0;
  double avg_bright_fraction = 0.0;
  double acceptance_rate = 0.0;
  double queries_per_es = 0.0;
  std::vector<bool> moment_flags;
};

AlgorithmSummary summarize(const std::string& algorithm, const ChainTrace& trace, std::size_t n_points,
                           double burn_in_fraction = 0.5);

void to_json(nlohmann::json& j, const AlgorithmSummary& s);

}  // namespace flymc
