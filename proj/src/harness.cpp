#include "flymc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace flymc {

using nlohmann::json;

namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string msg = fmt::format("invalid configuration ({} problem{}):", problems.size(),
                                problems.size() == 1 ? "" : "s");
  for (const auto& p : problems) msg += "\n  - " + p;
  return msg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << text;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(fmt::format("'{}' is not valid JSON: {}", path.string(), e.what()));
  }
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::invalid_argument(join_problems(problems)), problems_(std::move(problems)) {}

// --- synthetic data -----------------------------------------------------------

SyntheticData generate_synthetic(const SyntheticSpec& spec, Family family, std::size_t n_points,
                                 std::size_t n_features, std::size_t n_classes, std::uint64_t seed) {
  if (n_features == 0) throw std::invalid_argument("synthetic data needs at least one feature");
  if (!(spec.theta_scale > 0.0)) throw std::invalid_argument("theta_scale must be positive");
  if (family == Family::Softmax && n_classes < 2) throw std::invalid_argument("softmax needs at least 2 classes");
  if (family == Family::RobustT && !(spec.nu > 0.0 && spec.noise_scale > 0.0)) {
    throw std::invalid_argument("nu and noise_scale must be positive");
  }

  Rng rng = make_rng(seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  const std::size_t k = family == Family::Softmax ? n_classes : 1;
  SyntheticData out;
  out.theta_true.resize(k * n_features);
  for (double& v : out.theta_true) {
    if (spec.theta_prior == PriorKind::Gaussian) {
      v = spec.theta_scale * normal(rng);
    } else {
      const double e = -std::log1p(-uniform(rng));
      v = (uniform(rng) < 0.5 ? -1.0 : 1.0) * spec.theta_scale * e;
    }
  }

  Dataset& d = out.data;
  d.n_points = n_points;
  d.n_features = n_features;
  d.n_classes = family == Family::Softmax ? n_classes : 0;
  d.features.resize(n_points * n_features);
  d.targets.resize(n_points);
  std::student_t_distribution<double> student(spec.nu);
  std::vector<double> logits(k);
  for (std::size_t n = 0; n < n_points; ++n) {
    double* x = d.features.data() + n * n_features;
    for (std::size_t j = 0; j < n_features; ++j) x[j] = normal(rng);
    for (std::size_t c = 0; c < k; ++c) {
      logits[c] = std::inner_product(x, x + n_features, out.theta_true.begin() + c * n_features, 0.0);
    }
    switch (family) {
      case Family::Logistic: {
        const double p = 1.0 / (1.0 + std::exp(-logits[0]));
        d.targets[n] = uniform(rng) < p ? 1.0 : -1.0;
        break;
      }
      case Family::Softmax: {
        const double mx = *std::max_element(logits.begin(), logits.end());
        double total = 0.0;
        for (double& l : logits) total += (l = std::exp(l - mx));
        double u = uniform(rng) * total;
        std::size_t label = k - 1;
        for (std::size_t c = 0; c < k; ++c) {
          if (u < logits[c]) {
            label = c;
            break;
          }
          u -= logits[c];
        }
        d.targets[n] = static_cast<double>(label + 1);
        break;
      }
      case Family::RobustT:
        d.targets[n] = logits[0] + spec.noise_scale * student(rng);
        break;
    }
  }
  return out;
}

json synthetic_metadata(const SyntheticSpec& spec, Family family, const SyntheticData& synth, std::uint64_t seed) {
  return json{{"family", family_name(family)},
              {"n_points", synth.data.n_points},
              {"n_features", synth.data.n_features},
              {"n_classes", synth.data.n_classes},
              {"seed", seed},
              {"theta_scale", spec.theta_scale},
              {"theta_prior", spec.theta_prior == PriorKind::Gaussian ? "gaussian" : "laplace"},
              {"nu", spec.nu},
              {"noise_scale", spec.noise_scale},
              {"theta_true", synth.theta_true}};
}

// --- config -----------------------------------------------------------------

std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Regular: return "regular";
    case Algorithm::Untuned: return "untuned";
    case Algorithm::MapTuned: return "map_tuned";
    case Algorithm::Tempered: return "tempered";
  }
  throw std::invalid_argument("unknown algorithm");
}

Algorithm parse_algorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::Regular, Algorithm::Untuned, Algorithm::MapTuned, Algorithm::Tempered}) {
    if (algorithm_name(a) == name) return a;
  }
  throw std::invalid_argument(
      fmt::format("unknown algorithm '{}' (expected regular, untuned, map_tuned or tempered)", name));
}

namespace {

std::string_view prior_name(PriorKind k) { return k == PriorKind::Gaussian ? "gaussian" : "laplace"; }

PriorKind parse_prior(std::string_view name) {
  if (name == "gaussian") return PriorKind::Gaussian;
  if (name == "laplace") return PriorKind::Laplace;
  throw std::invalid_argument(fmt::format("unknown prior '{}' (expected gaussian or laplace)", name));
}

bool is_firefly(Algorithm a) { return a == Algorithm::Untuned || a == Algorithm::MapTuned; }

std::size_t n_params_of(const ExperimentConfig& c) {
  return c.model.family == Family::Softmax ? c.n_classes * c.n_features : c.n_features;
}

}  // namespace

ExperimentConfig default_config(Family family) {
  ExperimentConfig c;
  c.model.family = family;
  c.bound_family = default_bound_family(family);
  switch (family) {
    case Family::Logistic:
      c.n_points = 2000;
      c.n_features = 5;
      // Wide enough that many margins fall far from the untuned tangency.
      c.theta_scale = 2.0;
      c.prior.scale = 2.0;
      c.kernel.kind = KernelKind::RandomWalk;
      break;
    case Family::Softmax:
      c.n_points = 1500;
      c.n_features = 5;
      c.n_classes = 3;
      c.kernel.kind = KernelKind::Mala;
      break;
    case Family::RobustT:
      c.n_points = 5000;
      c.n_features = 5;
      c.prior.kind = PriorKind::Laplace;
      c.kernel.kind = KernelKind::Slice;
      break;
  }
  return c;
}

std::vector<std::string> config_problems(const ExperimentConfig& c) {
  std::vector<std::string> p;
  const Family fam = c.model.family;
  if (!c.data_path) {
    if (c.n_features == 0) p.push_back("n_features must be at least 1");
    if (!(c.theta_scale > 0.0 && std::isfinite(c.theta_scale))) p.push_back("theta_scale must be positive");
  } else if (!std::filesystem::exists(*c.data_path)) {
    p.push_back(fmt::format("data_path '{}' does not exist", c.data_path->string()));
  }
  if (fam == Family::Softmax && !c.data_path && c.n_classes < 2) p.push_back("softmax needs n_classes >= 2");
  if (fam != Family::Softmax && c.n_classes != 0) p.push_back("n_classes applies only to the softmax family");
  if (n_params_of(c) > kMaxCollapseDim) {
    p.push_back(fmt::format("{} parameters exceed the collapse limit {}", n_params_of(c), kMaxCollapseDim));
  }
  if (fam == Family::RobustT) {
    if (!(c.model.nu > 0.0)) p.push_back("nu must be positive");
    if (!(c.model.noise_scale > 0.0)) p.push_back("noise_scale must be positive");
  }
  if (!(c.prior.scale > 0.0 && std::isfinite(c.prior.scale))) p.push_back("prior_scale must be positive");

  if (default_bound_family(fam) != c.bound_family) {
    p.push_back(fmt::format("bound '{}' does not fit the {} model (use '{}')", bound_family_name(c.bound_family),
                            family_name(fam), bound_family_name(default_bound_family(fam))));
  }
  if (c.untuned_xi && !std::isfinite(*c.untuned_xi)) p.push_back("untuned_xi must be finite");
  if (c.untuned_xi && fam == Family::Softmax) p.push_back("untuned_xi does not apply to the bohning bound");
  if (!(c.sgd.step > 0.0)) p.push_back("sgd_step must be positive");
  if (c.sgd.minibatch == 0) p.push_back("sgd_minibatch must be at least 1");
  if (c.sgd.epochs == 0) p.push_back("sgd_epochs must be at least 1");
  if (c.tuned_bound_path && !std::filesystem::exists(*c.tuned_bound_path)) {
    p.push_back(fmt::format("tuned_bound_path '{}' does not exist", c.tuned_bound_path->string()));
  }

  try {
    validate_kernel_config(c.kernel);
  } catch (const std::exception& e) {
    p.push_back(e.what());
  }
  try {
    validate_resample_config(c.resample);
  } catch (const std::exception& e) {
    p.push_back(e.what());
  }

  if (c.algorithms.empty()) p.push_back("algorithms must name at least one chain");
  std::set<Algorithm> seen;
  for (Algorithm a : c.algorithms) {
    if (!seen.insert(a).second) p.push_back(fmt::format("algorithm '{}' listed twice", algorithm_name(a)));
  }
  if (!(c.tempered_temperature > 0.0 && std::isfinite(c.tempered_temperature))) {
    p.push_back("tempered_temperature must be positive");
  }
  if (!(c.burn_in >= 0.0 && c.burn_in < 1.0)) p.push_back("burn_in must lie in [0, 1)");
  if (c.burn_in >= 0.0 && c.burn_in < 1.0 &&
      static_cast<double>(c.iterations) * (1.0 - c.burn_in) < 100.0) {
    p.push_back("iterations after burn-in must be at least 100 for ESS estimation");
  }
  if (!c.seed) p.push_back("seed is mandatory");
  if (c.output_dir.empty()) p.push_back("output_dir must not be empty");
  return p;
}

void validate_config(const ExperimentConfig& config) {
  auto problems = config_problems(config);
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "family",        "n_points",          "n_features",       "n_classes",     "nu",
      "noise_scale",   "theta_scale",       "data_path",        "prior",         "prior_scale",
      "bound",         "untuned_xi",        "sgd_step",         "sgd_minibatch", "sgd_epochs",
      "tuned_bound_path", "kernel",         "kernel_step",      "slice_width",   "max_steps_out",
      "auto_tune",     "resample",          "explicit_fraction", "q_dark_to_bright", "q_bright_to_dark",
      "algorithms",    "tempered_temperature", "iterations",    "burn_in",       "seed",
      "output_dir"};
  return keys;
}

template <class T>
void read_field(const json& j, const char* key, T& out, std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    problems.push_back(fmt::format("{}: {}", key, e.what()));
  }
}

template <class T, class Parse>
void read_enum(const json& j, const char* key, T& out, Parse parse, std::vector<std::string>& problems) {
  if (!j.contains(key)) return;
  try {
    out = parse(j.at(key).get<std::string>());
  } catch (const std::exception& e) {
    problems.push_back(fmt::format("{}: {}", key, e.what()));
  }
}

}  // namespace

void merge_config_json(ExperimentConfig& c, const json& j, std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back("config must be a JSON object");
    return;
  }
  for (const auto& [key, value] : j.items()) {
    if (!known_keys().contains(key)) problems.push_back(fmt::format("unknown key '{}'", key));
  }
  read_enum(j, "family", c.model.family, parse_family, problems);
  read_field(j, "n_points", c.n_points, problems);
  read_field(j, "n_features", c.n_features, problems);
  read_field(j, "n_classes", c.n_classes, problems);
  read_field(j, "nu", c.model.nu, problems);
  read_field(j, "noise_scale", c.model.noise_scale, problems);
  read_field(j, "theta_scale", c.theta_scale, problems);
  if (j.contains("data_path")) {
    std::string s;
    read_field(j, "data_path", s, problems);
    c.data_path = s;
  }
  read_enum(j, "prior", c.prior.kind, parse_prior, problems);
  read_field(j, "prior_scale", c.prior.scale, problems);
  read_enum(j, "bound", c.bound_family, parse_bound_family, problems);
  if (j.contains("untuned_xi")) {
    double xi = 0.0;
    read_field(j, "untuned_xi", xi, problems);
    c.untuned_xi = xi;
  }
  read_field(j, "sgd_step", c.sgd.step, problems);
  read_field(j, "sgd_minibatch", c.sgd.minibatch, problems);
  read_field(j, "sgd_epochs", c.sgd.epochs, problems);
  if (j.contains("tuned_bound_path")) {
    std::string s;
    read_field(j, "tuned_bound_path", s, problems);
    c.tuned_bound_path = s;
  }

  read_enum(j, "kernel", c.kernel.kind, parse_kernel, problems);
  read_field(j, "kernel_step", c.kernel.step, problems);
  read_field(j, "slice_width", c.kernel.width, problems);
  read_field(j, "max_steps_out", c.kernel.max_steps_out, problems);
  read_field(j, "auto_tune", c.kernel.auto_tune, problems);

  bool explicit_kind = std::holds_alternative<ExplicitResample>(c.resample);
  if (j.contains("resample")) {
    std::string kind;
    read_field(j, "resample", kind, problems);
    if (kind == "explicit") {
      if (!explicit_kind) c.resample = ExplicitResample{};
      explicit_kind = true;
    } else if (kind == "implicit") {
      if (explicit_kind) c.resample = ImplicitResample{};
      explicit_kind = false;
    } else {
      problems.push_back(fmt::format("resample: unknown kind '{}' (expected explicit or implicit)", kind));
    }
  }
  if (explicit_kind) {
    read_field(j, "explicit_fraction", std::get<ExplicitResample>(c.resample).fraction, problems);
    for (const char* key : {"q_dark_to_bright", "q_bright_to_dark"}) {
      if (j.contains(key)) problems.push_back(fmt::format("{} applies only to implicit resampling", key));
    }
  } else {
    auto& im = std::get<ImplicitResample>(c.resample);
    read_field(j, "q_dark_to_bright", im.q_dark_to_bright, problems);
    read_field(j, "q_bright_to_dark", im.q_bright_to_dark, problems);
    if (j.contains("explicit_fraction")) problems.push_back("explicit_fraction applies only to explicit resampling");
  }

  if (j.contains("algorithms")) {
    std::vector<std::string> names;
    read_field(j, "algorithms", names, problems);
    std::vector<Algorithm> algs;
    for (const auto& n : names) {
      try {
        algs.push_back(parse_algorithm(n));
      } catch (const std::exception& e) {
        problems.push_back(fmt::format("algorithms: {}", e.what()));
      }
    }
    c.algorithms = algs;
  }
  read_field(j, "tempered_temperature", c.tempered_temperature, problems);
  read_field(j, "iterations", c.iterations, problems);
  read_field(j, "burn_in", c.burn_in, problems);
  if (j.contains("seed")) {
    std::uint64_t s = 0;
    read_field(j, "seed", s, problems);
    c.seed = s;
  }
  if (j.contains("output_dir")) {
    std::string s;
    read_field(j, "output_dir", s, problems);
    c.output_dir = s;
  }
}

ExperimentConfig config_from_json(const json& j) {
  std::vector<std::string> problems;
  Family fam = Family::Logistic;
  if (j.is_object()) read_enum(j, "family", fam, parse_family, problems);
  ExperimentConfig c = default_config(fam);
  merge_config_json(c, j, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  validate_config(c);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["family"] = family_name(c.model.family);
  j["n_points"] = c.n_points;
  j["n_features"] = c.n_features;
  j["n_classes"] = c.n_classes;
  j["nu"] = c.model.nu;
  j["noise_scale"] = c.model.noise_scale;
  j["theta_scale"] = c.theta_scale;
  if (c.data_path) j["data_path"] = c.data_path->string();
  j["prior"] = prior_name(c.prior.kind);
  j["prior_scale"] = c.prior.scale;
  j["bound"] = bound_family_name(c.bound_family);
  if (c.untuned_xi) j["untuned_xi"] = *c.untuned_xi;
  j["sgd_step"] = c.sgd.step;
  j["sgd_minibatch"] = c.sgd.minibatch;
  j["sgd_epochs"] = c.sgd.epochs;
  if (c.tuned_bound_path) j["tuned_bound_path"] = c.tuned_bound_path->string();
  j["kernel"] = kernel_name(c.kernel.kind);
  j["kernel_step"] = c.kernel.step;
  j["slice_width"] = c.kernel.width;
  j["max_steps_out"] = c.kernel.max_steps_out;
  j["auto_tune"] = c.kernel.auto_tune;
  if (const auto* ex = std::get_if<ExplicitResample>(&c.resample)) {
    j["resample"] = "explicit";
    j["explicit_fraction"] = ex->fraction;
  } else {
    const auto& im = std::get<ImplicitResample>(c.resample);
    j["resample"] = "implicit";
    j["q_dark_to_bright"] = im.q_dark_to_bright;
    j["q_bright_to_dark"] = im.q_bright_to_dark;
  }
  json algs = json::array();
  for (Algorithm a : c.algorithms) algs.push_back(algorithm_name(a));
  j["algorithms"] = algs;
  j["tempered_temperature"] = c.tempered_temperature;
  j["iterations"] = c.iterations;
  j["burn_in"] = c.burn_in;
  if (c.seed) j["seed"] = *c.seed;
  j["output_dir"] = c.output_dir.string();
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json_file(path)); }

SyntheticSpec synthetic_spec(const ExperimentConfig& config) {
  SyntheticSpec s;
  s.theta_scale = config.theta_scale;
  s.theta_prior = config.prior.kind;
  s.nu = config.model.nu;
  s.noise_scale = config.model.noise_scale;
  return s;
}

SyntheticData load_experiment_data(const ExperimentConfig& config) {
  if (config.data_path) {
    SyntheticData out;
    out.data = read_dataset_csv(*config.data_path, config.model.family);
    return out;
  }
  if (!config.seed) throw std::invalid_argument("seed is mandatory");
  return generate_synthetic(synthetic_spec(config), config.model.family, config.n_points, config.n_features,
                            config.n_classes, *config.seed);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  return rng();
}

// --- runs -------------------------------------------------------------------

namespace {

constexpr std::uint64_t kTuneStream = 100;

std::uint64_t chain_seed(const ExperimentConfig& config, Algorithm a) {
  return derive_seed(*config.seed, 1 + static_cast<std::uint64_t>(a));
}

}  // namespace

json tune_result_to_json(const TuneResult& tune) { return json{{"bound", tune.params}, {"theta_map", tune.theta_map}}; }

TuneResult tune_result_from_json(const json& j) {
  TuneResult t;
  t.params = j.at("bound").get<BoundParams>();
  t.theta_map = j.value("theta_map", std::vector<double>{});
  return t;
}

TuneResult experiment_bound(const ExperimentConfig& config, const LikelihoodModel& model, Algorithm algorithm) {
  if (algorithm == Algorithm::Untuned) {
    TuneResult t;
    t.params = untuned_bound_params(model.family(), model.n_params());
    if (config.untuned_xi) t.params.xi = {*config.untuned_xi};
    return t;
  }
  if (algorithm != Algorithm::MapTuned) {
    throw std::invalid_argument(fmt::format("algorithm '{}' has no bound", algorithm_name(algorithm)));
  }
  if (config.tuned_bound_path) return tune_result_from_json(read_json_file(*config.tuned_bound_path));
  SgdConfig sgd = config.sgd;
  sgd.seed = derive_seed(config.seed.value(), kTuneStream);
  return map_tune(model, config.prior, sgd);
}

ChainTrace run_firefly_chain(const ExperimentConfig& config, const LikelihoodModel& model,
                             const BoundParams& params, Algorithm algorithm) {
  const auto bound = make_bound(params, model);
  FireflySampler sampler(model, *bound, config.prior, config.kernel, config.resample,
                         ParameterVector(model.n_params(), 0.0), chain_seed(config, algorithm),
                         config.adapt_iterations());
  return sampler.run(config.iterations);
}

ChainTrace run_algorithm(const ExperimentConfig& config, const LikelihoodModel& model, Algorithm algorithm) {
  if (!config.seed) throw std::invalid_argument("seed is mandatory");
  if (is_firefly(algorithm)) {
    return run_firefly_chain(config, model, experiment_bound(config, model, algorithm).params, algorithm);
  }
  const double temperature = algorithm == Algorithm::Tempered ? config.tempered_temperature : 1.0;
  FullDataSampler sampler(model, config.prior, config.kernel, ParameterVector(model.n_params(), 0.0),
                          chain_seed(config, algorithm), config.adapt_iterations(), temperature);
  return sampler.run(config.iterations);
}

std::vector<AlgorithmSummary> compare_chains(const std::vector<std::pair<std::string, const ChainTrace*>>& chains,
                                             std::size_t n_points, double burn_in) {
  const ChainTrace* baseline = nullptr;
  for (const auto& [name, trace] : chains) {
    if (name == algorithm_name(Algorithm::Regular)) baseline = trace;
  }
  std::vector<AlgorithmSummary> out;
  for (const auto& [name, trace] : chains) {
    AlgorithmSummary s = summarize(name, *trace, n_points, burn_in);
    if (baseline) {
      s.speedup = speedup(*trace, *baseline, burn_in);
      s.moment_flags = moment_comparison(*trace, *baseline, burn_in).flags;
    } else {
      s.speedup = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_table_csv(const std::vector<AlgorithmSummary>& summaries, const std::filesystem::path& path) {
  std::string text = "algorithm,avg_queries_per_iter,ess_per_1000,speedup\n";
  for (const auto& s : summaries) {
    text += fmt::format("{},{:.6g},{:.6g},{:.6g}\n", s.algorithm, s.avg_queries_per_iter, s.ess_per_1000, s.speedup);
  }
  write_text(path, text);
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  validate_config(config);
  ExperimentResult result;
  result.directory = config.output_dir;
  if (const char* env = std::getenv("FLYMC_OUTPUT_DIR"); env && *env) result.directory = env;
  const auto& dir = result.directory;
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", config_to_json(config).dump(2) + "\n");

  const SyntheticData data = load_experiment_data(config);
  if (!config.data_path) {
    write_dataset_csv(data.data, dir / "data.csv");
    write_text(dir / "data_meta.json",
               synthetic_metadata(synthetic_spec(config), config.model.family, data, *config.seed).dump(2) + "\n");
  }
  validate_dataset(data.data, config.model.family);
  const auto model = make_model(config.model, data.data);

  std::vector<ChainTrace> traces;
  traces.reserve(config.algorithms.size());
  for (Algorithm a : config.algorithms) {
    const auto sub = dir / std::string(algorithm_name(a));
    std::filesystem::create_directories(sub);
    if (is_firefly(a)) {
      const TuneResult tune = experiment_bound(config, *model, a);
      write_text(sub / "bound.json", tune_result_to_json(tune).dump(2) + "\n");
      traces.push_back(run_firefly_chain(config, *model, tune.params, a));
    } else {
      traces.push_back(run_algorithm(config, *model, a));
    }
    write_trace_csv(traces.back(), sub / "trace.csv");
    write_theta_bin(traces.back(), sub / "theta.bin");
  }

  std::vector<std::pair<std::string, const ChainTrace*>> chains;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    chains.emplace_back(std::string(algorithm_name(config.algorithms[i])), &traces[i]);
  }
  result.summaries = compare_chains(chains, model->n_points(), config.burn_in);

  json summary{{"family", family_name(config.model.family)},
               {"n_points", model->n_points()},
               {"n_params", model->n_params()},
               {"burn_in", config.burn_in},
               {"algorithms", result.summaries}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_table_csv(result.summaries, dir / "table.csv");
  return result;
}

ChainTrace load_chain(const std::filesystem::path& directory) {
  ChainTrace t = read_theta_bin(directory / "theta.bin");
  std::ifstream in(directory / "trace.csv");
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}'", (directory / "trace.csv").string()));
  std::string line;
  std::getline(in, line);
  if (line != "iteration,log_joint,m_bright,cum_queries,accept") {
    throw std::runtime_error(fmt::format("unexpected trace header '{}'", line));
  }
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (i >= t.rows.size()) throw std::runtime_error("trace.csv has more rows than theta.bin");
    std::istringstream ss(line);
    TraceRow r;
    char c1, c2, c3, c4;
    int accepted = 0;
    ss >> r.iteration >> c1 >> r.log_joint >> c2 >> r.n_bright >> c3 >> r.cum_queries >> c4 >> accepted;
    if (!ss || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') {
      throw std::runtime_error(fmt::format("malformed trace row {}", i + 1));
    }
    r.accepted = accepted != 0;
    t.rows[i++] = r;
  }
  if (i != t.rows.size()) throw std::runtime_error("trace.csv and theta.bin disagree on the number of rows");
  return t;
}

// --- grid oracle -------------------------------------------------------------

MomentSummary GridOracle::moments() const {
  MomentSummary m;
  m.mean = mean;
  m.variance = variance;
  m.mean_se.assign(dim, 0.0);
  m.variance_se.assign(dim, 0.0);
  return m;
}

namespace {

std::vector<double> linspace(double lo, double hi, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  v.back() = hi;
  return v;
}

// Mode by successive zoomed grid scans, then +-10 marginal standard
// deviations from the inverse finite-difference Hessian.
void auto_range(const LogDensityFn& f, std::size_t dim, std::vector<double>& lower, std::vector<double>& upper) {
  std::vector<double> center(dim, 0.0);
  double half = 20.0;
  constexpr std::size_t kScan = 41;
  std::vector<double> probe(dim);
  for (int round = 0; round < 10; ++round) {
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> arg = center;
    const std::size_t total = dim == 1 ? kScan : kScan * kScan;
    for (std::size_t idx = 0; idx < total; ++idx) {
      std::size_t rem = idx;
      for (std::size_t d = dim; d-- > 0;) {
        probe[d] = center[d] - half + 2.0 * half * static_cast<double>(rem % kScan) / (kScan - 1);
        rem /= kScan;
      }
      const double v = f(probe);
      if (v > best) {
        best = v;
        arg = probe;
      }
    }
    if (!std::isfinite(best)) throw std::runtime_error("log density is not finite anywhere on the search grid");
    center = arg;
    half /= 3.0;
  }

  const double h = 1e-3;
  auto at = [&](double dx, double dy) {
    probe = center;
    probe[0] += dx;
    if (dim == 2) probe[1] += dy;
    return f(probe);
  };
  const double f0 = at(0, 0);
  std::vector<double> sd(dim, 1.0);
  const double hxx = (at(h, 0) - 2 * f0 + at(-h, 0)) / (h * h);
  if (dim == 1) {
    if (hxx < 0) sd[0] = 1.0 / std::sqrt(-hxx);
  } else {
    const double hyy = (at(0, h) - 2 * f0 + at(0, -h)) / (h * h);
    const double hxy = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4 * h * h);
    const double det = hxx * hyy - hxy * hxy;
    if (hxx < 0 && det > 0) {
      sd[0] = std::sqrt(-hyy / det);
      sd[1] = std::sqrt(-hxx / det);
    } else {
      if (hxx < 0) sd[0] = 1.0 / std::sqrt(-hxx);
      if (hyy < 0) sd[1] = 1.0 / std::sqrt(-hyy);
    }
  }
  lower.resize(dim);
  upper.resize(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    lower[d] = center[d] - 10.0 * sd[d];
    upper[d] = center[d] + 10.0 * sd[d];
  }
}

std::vector<double> trapezoid_weights(const std::vector<double>& axis) {
  const std::size_t n = axis.size();
  std::vector<double> w(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double h = axis[i + 1] - axis[i];
    w[i] += 0.5 * h;
    w[i + 1] += 0.5 * h;
  }
  return w;
}

}  // namespace

GridOracle grid_posterior_oracle(const LogDensityFn& log_density, std::size_t dim, const GridSpec& grid) {
  if (dim == 0 || dim > 2) throw std::invalid_argument(fmt::format("grid oracle supports 1 or 2 parameters, got {}", dim));
  if (grid.points < 3) throw std::invalid_argument("grid needs at least 3 points per axis");
  std::vector<double> lower = grid.lower;
  std::vector<double> upper = grid.upper;
  if (lower.empty() && upper.empty()) {
    auto_range(log_density, dim, lower, upper);
  } else if (lower.size() != dim || upper.size() != dim) {
    throw std::invalid_argument("grid bounds must have one entry per parameter");
  }
  for (std::size_t d = 0; d < dim; ++d) {
    if (!(lower[d] < upper[d])) throw std::invalid_argument("grid lower bound must be below the upper bound");
  }

  GridOracle g;
  g.dim = dim;
  std::vector<std::vector<double>> weights;
  for (std::size_t d = 0; d < dim; ++d) {
    g.axes.push_back(linspace(lower[d], upper[d], grid.points));
    weights.push_back(trapezoid_weights(g.axes.back()));
  }
  const std::size_t n = grid.points;
  const std::size_t total = dim == 1 ? n : n * n;
  std::vector<double> logp(total);
  std::vector<double> theta(dim);
  for (std::size_t idx = 0; idx < total; ++idx) {
    if (dim == 1) {
      theta[0] = g.axes[0][idx];
    } else {
      theta[0] = g.axes[0][idx / n];
      theta[1] = g.axes[1][idx % n];
    }
    logp[idx] = log_density(theta);
  }
  const double mx = *std::max_element(logp.begin(), logp.end());
  if (!std::isfinite(mx)) throw std::runtime_error("log density is not finite on the grid");

  auto weight = [&](std::size_t idx) {
    return dim == 1 ? weights[0][idx] : weights[0][idx / n] * weights[1][idx % n];
  };
  auto coord = [&](std::size_t idx, std::size_t d) {
    if (dim == 1) return g.axes[0][idx];
    return d == 0 ? g.axes[0][idx / n] : g.axes[1][idx % n];
  };

  g.density.resize(total);
  double z = 0.0;
  for (std::size_t idx = 0; idx < total; ++idx) {
    g.density[idx] = std::exp(logp[idx] - mx);
    z += weight(idx) * g.density[idx];
  }
  for (double& p : g.density) p /= z;

  g.mean.assign(dim, 0.0);
  g.variance.assign(dim, 0.0);
  for (std::size_t idx = 0; idx < total; ++idx) {
    const double wp = weight(idx) * g.density[idx];
    g.mass += wp;
    for (std::size_t d = 0; d < dim; ++d) g.mean[d] += wp * coord(idx, d);
  }
  for (std::size_t idx = 0; idx < total; ++idx) {
    const double wp = weight(idx) * g.density[idx];
    for (std::size_t d = 0; d < dim; ++d) {
      const double dv = coord(idx, d) - g.mean[d];
      g.variance[d] += wp * dv * dv;
    }
  }
  return g;
}

GridOracle grid_posterior_oracle(const LikelihoodModel& model, const Prior& prior, const GridSpec& grid) {
  QueryMeter meter;
  MeteredLikelihood lik(model, meter);
  return grid_posterior_oracle(
      [&](std::span<const double> theta) { return full_log_posterior(theta, lik, prior); }, model.n_params(), grid);
}

json oracle_to_json(const GridOracle& oracle) {
  json axes = json::array();
  for (const auto& a : oracle.axes) axes.push_back(json{{"lower", a.front()}, {"upper", a.back()}, {"points", a.size()}});
  return json{{"dim", oracle.dim}, {"axes", axes}, {"mean", oracle.mean}, {"variance", oracle.variance},
              {"mass", oracle.mass}};
}

}  // namespace flymc
