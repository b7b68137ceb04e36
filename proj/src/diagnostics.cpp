#include "flymc/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "flymc/simd/kernels.hpp"

namespace flymc {

double effective_sample_size(std::span<const double> series) {
  const std::size_t t_len = series.size();
  if (t_len < 100) throw std::invalid_argument(fmt::format("ESS needs at least 100 samples, got {}", t_len));
  const double mean = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(t_len);
  std::vector<double> x(t_len);
  for (std::size_t i = 0; i < t_len; ++i) x[i] = series[i] - mean;

  const double gamma0 = simd::dot(x, x);
  if (!(gamma0 > 0.0)) throw std::invalid_argument("ESS of a constant series is undefined");
  auto rho = [&](std::size_t k) {
    if (k >= t_len) return 0.0;
    return simd::dot(std::span<const double>(x).first(t_len - k), std::span<const double>(x).subspan(k)) / gamma0;
  };

  // Geyer: sums of adjacent pairs are positive and decreasing for a
  // reversible chain; stop at the first non-positive pair.
  double sum_pairs = 0.0;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; 2 * m < t_len; ++m) {
    double pair = rho(2 * m) + rho(2 * m + 1);
    if (pair <= 0.0) break;
    pair = std::min(pair, prev);
    prev = pair;
    sum_pairs += pair;
  }
  const double tau = std::max(2.0 * sum_pairs - 1.0, 0.0);
  const double t = static_cast<double>(t_len);
  if (tau <= 1.0) return t;
  return t / tau;
}

double integrated_autocorrelation_time(std::span<const double> series) {
  return static_cast<double>(series.size()) / effective_sample_size(series);
}

std::size_t burn_in_rows(const ChainTrace& trace, double burn_in_fraction) {
  if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0)) {
    throw std::invalid_argument(fmt::format("burn-in fraction {} outside [0, 1)", burn_in_fraction));
  }
  return static_cast<std::size_t>(std::floor(burn_in_fraction * static_cast<double>(trace.size())));
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

EssReport ess_report(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  EssReport r;
  r.n_samples = trace.size() - from;
  for (std::size_t d = 0; d < trace.dim; ++d) {
    const auto col = trace.column(d, from);
    const double ess = effective_sample_size(col);
    r.ess.push_back(ess);
    r.tau.push_back(static_cast<double>(col.size()) / ess);
  }
  if (r.ess.empty()) throw std::invalid_argument("trace has no parameters");
  r.min_ess = *std::min_element(r.ess.begin(), r.ess.end());
  r.median_ess = median(r.ess);
  return r;
}

namespace {

// Queries spent in rows [from, size()).
double kept_queries(const ChainTrace& trace, std::size_t from) {
  if (trace.size() == 0) return 0.0;
  const std::uint64_t before = from == 0 ? 0 : trace.rows[from - 1].cum_queries;
  return static_cast<double>(trace.rows.back().cum_queries - before);
}

}  // namespace

double average_queries_per_iteration(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  if (trace.size() == from) throw std::invalid_argument("no rows after burn-in");
  return kept_queries(trace, from) / static_cast<double>(trace.size() - from);
}

double average_bright_count(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  if (trace.size() == from) throw std::invalid_argument("no rows after burn-in");
  double s = 0.0;
  for (std::size_t i = from; i < trace.size(); ++i) s += static_cast<double>(trace.rows[i].n_bright);
  return s / static_cast<double>(trace.size() - from);
}

double acceptance_rate(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  if (trace.size() == from) throw std::invalid_argument("no rows after burn-in");
  double s = 0.0;
  for (std::size_t i = from; i < trace.size(); ++i) s += trace.rows[i].accepted ? 1.0 : 0.0;
  return s / static_cast<double>(trace.size() - from);
}

double queries_per_effective_sample(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  const EssReport ess = ess_report(trace, burn_in_fraction);
  if (!(ess.min_ess > 0.0)) throw std::invalid_argument("zero effective sample size");
  return kept_queries(trace, from) / ess.min_ess;
}

double speedup(const ChainTrace& flymc_trace, const ChainTrace& baseline_trace, double burn_in_fraction) {
  return queries_per_effective_sample(baseline_trace, burn_in_fraction) /
         queries_per_effective_sample(flymc_trace, burn_in_fraction);
}

MomentSummary chain_moments(const ChainTrace& trace, double burn_in_fraction) {
  const std::size_t from = burn_in_rows(trace, burn_in_fraction);
  MomentSummary s;
  for (std::size_t d = 0; d < trace.dim; ++d) {
    const auto col = trace.column(d, from);
    const double m = mean_of(col);
    std::vector<double> sq(col.size());
    for (std::size_t i = 0; i < col.size(); ++i) sq[i] = (col[i] - m) * (col[i] - m);
    const double v = mean_of(sq);
    s.mean.push_back(m);
    s.variance.push_back(v);
    s.mean_se.push_back(std::sqrt(v / effective_sample_size(col)));

    double var_sq = 0.0;
    for (double y : sq) var_sq += (y - v) * (y - v);
    var_sq /= static_cast<double>(sq.size());
    s.variance_se.push_back(var_sq > 0.0 ? std::sqrt(var_sq / effective_sample_size(sq)) : 0.0);
  }
  return s;
}

bool MomentComparison::any_flag() const { return std::any_of(flags.begin(), flags.end(), [](bool f) { return f; }); }

double MomentComparison::max_z() const {
  double z = 0.0;
  for (double v : mean_z) z = std::max(z, v);
  for (double v : variance_z) z = std::max(z, v);
  return z;
}

namespace {

double z_score(double a, double b, double se_a, double se_b) {
  const double diff = std::abs(a - b);
  const double se = std::sqrt(se_a * se_a + se_b * se_b);
  if (se == 0.0) return diff == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return diff / se;
}

}  // namespace

MomentComparison moment_comparison(const MomentSummary& a, const MomentSummary& b, double threshold) {
  if (a.mean.size() != b.mean.size()) throw std::invalid_argument("moment summaries differ in dimension");
  MomentComparison c;
  c.threshold = threshold;
  for (std::size_t d = 0; d < a.mean.size(); ++d) {
    const double zm = z_score(a.mean[d], b.mean[d], a.mean_se[d], b.mean_se[d]);
    const double zv = z_score(a.variance[d], b.variance[d], a.variance_se[d], b.variance_se[d]);
    c.mean_z.push_back(zm);
    c.variance_z.push_back(zv);
    c.flags.push_back(zm > threshold || zv > threshold);
  }
  return c;
}

MomentComparison moment_comparison(const ChainTrace& a, const ChainTrace& b, double burn_in_fraction,
                                   double threshold) {
  return moment_comparison(chain_moments(a, burn_in_fraction), chain_moments(b, burn_in_fraction), threshold);
}

AlgorithmSummary summarize(const std::string& algorithm, const ChainTrace& trace, std::size_t n_points,
                           double burn_in_fraction) {
  AlgorithmSummary s;
  s.algorithm = algorithm;
  s.avg_queries_per_iter = average_queries_per_iteration(trace, burn_in_fraction);
  const EssReport ess = ess_report(trace, burn_in_fraction);
  s.ess_per_1000 = ess.min_per_1000();
  s.ess_per_1000_median = ess.median_per_1000();
  s.avg_bright_fraction = n_points == 0 ? 0.0 : average_bright_count(trace, burn_in_fraction) / n_points;
  s.acceptance_rate = acceptance_rate(trace, burn_in_fraction);
  s.queries_per_es = queries_per_effective_sample(trace, burn_in_fraction);
  return s;
}

void to_json(nlohmann::json& j, const AlgorithmSummary& s) {
  j = nlohmann::json{{"algorithm", s.algorithm},
                     {"avg_queries_per_iter", s.avg_queries_per_iter},
                     {"ess_per_1000", s.ess_per_1000},
                     {"ess_per_1000_median", s.ess_per_1000_median},
                     {"speedup", s.speedup},
                     {"avg_bright_fraction", s.avg_bright_fraction},
                     {"acceptance_rate", s.acceptance_rate},
                     {"queries_per_effective_sample", s.queries_per_es},
                     {"moment_flags", s.moment_flags}};
}

}  // namespace flymc
