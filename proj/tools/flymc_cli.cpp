// Command-line front end: generate, tune, run, compare, oracle.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "flymc/harness.hpp"
#include "flymc/simd/kernels.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flymc;

namespace {

enum class FlagKind { Number, Bool, String, List };

struct FlagDef {
  const char* key;
  FlagKind kind;
  const char* help;
};

const std::vector<FlagDef>& flag_defs() {
  static const std::vector<FlagDef> defs{
      {"family", FlagKind::String, "logistic, softmax or robust_t"},
      {"n_points", FlagKind::Number, "number of data (synthetic)"},
      {"n_features", FlagKind::Number, "features per datum (synthetic)"},
      {"n_classes", FlagKind::Number, "classes (softmax)"},
      {"nu", FlagKind::Number, "Student-t degrees of freedom"},
      {"noise_scale", FlagKind::Number, "Student-t noise scale"},
      {"theta_scale", FlagKind::Number, "prior scale used to draw the true parameters"},
      {"data_path", FlagKind::String, "dataset CSV instead of synthetic data"},
      {"prior", FlagKind::String, "gaussian or laplace"},
      {"prior_scale", FlagKind::Number, "prior scale"},
      {"bound", FlagKind::String, "jaakkola_jordan, bohning or t_tangent"},
      {"untuned_xi", FlagKind::Number, "tightness location of the untuned bound"},
      {"sgd_step", FlagKind::Number, "MAP tuning base step"},
      {"sgd_minibatch", FlagKind::Number, "MAP tuning minibatch size"},
      {"sgd_epochs", FlagKind::Number, "MAP tuning epochs"},
      {"tuned_bound_path", FlagKind::String, "bound.json written by `tune`"},
      {"kernel", FlagKind::String, "rwmh, mala or slice"},
      {"kernel_step", FlagKind::Number, "initial random-walk / MALA step"},
      {"slice_width", FlagKind::Number, "slice bracket width"},
      {"max_steps_out", FlagKind::Number, "slice step-out budget"},
      {"auto_tune", FlagKind::Bool, "adapt the step size during burn-in"},
      {"resample", FlagKind::String, "explicit or implicit"},
      {"explicit_fraction", FlagKind::Number, "fraction of data resampled per iteration (explicit)"},
      {"q_dark_to_bright", FlagKind::Number, "dark->bright proposal probability, 0 = automatic (implicit)"},
      {"q_bright_to_dark", FlagKind::Number, "bright->dark proposal probability (implicit)"},
      {"algorithms", FlagKind::List, "comma-separated: regular,untuned,map_tuned,tempered"},
      {"tempered_temperature", FlagKind::Number, "likelihood power of the tempered control chain"},
      {"iterations", FlagKind::Number, "iterations per chain"},
      {"burn_in", FlagKind::Number, "discarded fraction of each chain"},
      {"seed", FlagKind::Number, "experiment seed (mandatory)"},
      {"output_dir", FlagKind::String, "artifact directory (FLYMC_OUTPUT_DIR overrides)"},
  };
  return defs;
}

struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> values;
};

void add_config_options(CLI::App* app, ConfigOptions& opts) {
  app->add_option("-c,--config", opts.config_file, "JSON config; its keys take precedence over flags")
      ->check(CLI::ExistingFile);
  for (const auto& def : flag_defs()) {
    std::string name = std::string("--") + def.key;
    for (auto& ch : name) {
      if (ch == '_') ch = '-';
    }
    app->add_option(name, opts.values[def.key], def.help);
  }
}

json flags_to_json(const CLI::App* app, const ConfigOptions& opts) {
  json j = json::object();
  for (const auto& def : flag_defs()) {
    std::string name = std::string("--") + def.key;
    for (auto& ch : name) {
      if (ch == '_') ch = '-';
    }
    if (app->get_option(name)->count() == 0) continue;
    const std::string& v = opts.values.at(def.key);
    switch (def.kind) {
      case FlagKind::String:
        j[def.key] = v;
        break;
      case FlagKind::Number:
      case FlagKind::Bool:
        try {
          j[def.key] = json::parse(v);
        } catch (const json::exception&) {
          throw CLI::ValidationError(name, fmt::format("'{}' is not a valid value", v));
        }
        break;
      case FlagKind::List: {
        json arr = json::array();
        std::size_t start = 0;
        while (start <= v.size()) {
          const std::size_t comma = v.find(',', start);
          const std::string item = v.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
          if (!item.empty()) arr.push_back(item);
          if (comma == std::string::npos) break;
          start = comma + 1;
        }
        j[def.key] = arr;
        break;
      }
    }
  }
  return j;
}

// Defaults of the chosen family, then flags, then the config file.
ExperimentConfig resolve_config(const CLI::App* app, const ConfigOptions& opts) {
  const json flags = flags_to_json(app, opts);
  json file = json::object();
  if (!opts.config_file.empty()) {
    std::ifstream in(opts.config_file);
    file = json::parse(in);
  }
  std::vector<std::string> problems;
  Family family = Family::Logistic;
  try {
    if (file.is_object() && file.contains("family")) {
      family = parse_family(file.at("family").get<std::string>());
    } else if (flags.contains("family")) {
      family = parse_family(flags.at("family").get<std::string>());
    }
  } catch (const std::exception& e) {
    problems.push_back(fmt::format("family: {}", e.what()));
  }
  ExperimentConfig c = default_config(family);
  merge_config_json(c, flags, problems);
  merge_config_json(c, file, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

fs::path output_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv("FLYMC_OUTPUT_DIR"); env && *env) return env;
  return c.output_dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << "\n";
}

int cmd_generate(const ExperimentConfig& c) {
  if (c.data_path) throw std::invalid_argument("generate makes synthetic data; drop data_path");
  auto problems = config_problems(c);
  if (!problems.empty()) throw ConfigError(std::move(problems));
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  const SyntheticData synth = load_experiment_data(c);
  write_dataset_csv(synth.data, dir / "data.csv");
  write_json(dir / "data_meta.json", synthetic_metadata(synthetic_spec(c), c.model.family, synth, *c.seed));
  fmt::print("wrote {} points to {}\n", synth.data.n_points, (dir / "data.csv").string());
  return 0;
}

int cmd_tune(const ExperimentConfig& c, const std::string& out_path) {
  validate_config(c);
  const SyntheticData synth = load_experiment_data(c);
  validate_dataset(synth.data, c.model.family);
  const auto model = make_model(c.model, synth.data);
  ExperimentConfig fresh = c;
  fresh.tuned_bound_path.reset();
  const TuneResult tune = experiment_bound(fresh, *model, Algorithm::MapTuned);
  fs::path path = out_path.empty() ? output_dir(c) / "bound.json" : fs::path(out_path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_json(path, tune_result_to_json(tune));
  fmt::print("wrote MAP-tuned {} bound to {}\n", bound_family_name(tune.params.family), path.string());
  return 0;
}

int cmd_run(const ExperimentConfig& c) {
  fmt::print(stderr, "simd kernels: {}\n", simd::isa_name(simd::active_isa()));
  const ExperimentResult r = run_experiment(c);
  fmt::print("{:<10} {:>22} {:>14} {:>10}\n", "algorithm", "avg_queries_per_iter", "ess_per_1000", "speedup");
  for (const auto& s : r.summaries) {
    fmt::print("{:<10} {:>22.2f} {:>14.2f} {:>10.2f}\n", s.algorithm, s.avg_queries_per_iter, s.ess_per_1000,
               s.speedup);
  }
  fmt::print("artifacts in {}\n", r.directory.string());
  return 0;
}

// N from the run's summary.json next to a chain directory, or 0 if unknown.
std::size_t run_n_points(const std::filesystem::path& chain_dir) {
  const auto summary = std::filesystem::absolute(chain_dir).lexically_normal().parent_path() / "summary.json";
  if (!std::filesystem::exists(summary)) return 0;
  std::ifstream in(summary);
  return json::parse(in).value("n_points", std::size_t{0});
}

int cmd_compare(const std::string& a_dir, const std::string& b_dir, double burn_in, double threshold,
                std::size_t n_points) {
  const ChainTrace a = load_chain(a_dir);
  const ChainTrace b = load_chain(b_dir);
  const MomentComparison m = moment_comparison(a, b, burn_in, threshold);
  auto summary = [&](const std::string& dir, const ChainTrace& t) {
    const std::size_t n = n_points != 0 ? n_points : run_n_points(dir);
    json s = summarize(dir, t, n, burn_in);
    if (n == 0) s["avg_bright_fraction"] = nullptr;
    return s;
  };
  const double s = speedup(a, b, burn_in);
  json ja = summary(a_dir, a);
  ja["speedup"] = s;
  json j{{"mean_z", m.mean_z},
         {"variance_z", m.variance_z},
         {"moment_flags", m.flags},
         {"threshold", m.threshold},
         {"speedup", s},
         {"a", ja},
         {"b", summary(b_dir, b)}};
  fmt::print("{}\n", j.dump(2));
  return m.any_flag() ? 2 : 0;
}

int cmd_oracle(const ExperimentConfig& c, std::size_t points) {
  validate_config(c);
  const SyntheticData synth = load_experiment_data(c);
  validate_dataset(synth.data, c.model.family);
  const auto model = make_model(c.model, synth.data);
  GridSpec grid;
  grid.points = points;
  const GridOracle oracle = grid_posterior_oracle(*model, c.prior, grid);
  const fs::path dir = output_dir(c);
  fs::create_directories(dir);
  write_json(dir / "oracle.json", oracle_to_json(oracle));
  std::ofstream out(dir / "oracle_density.csv", std::ios::binary);
  out << (oracle.dim == 1 ? "theta0,density\n" : "theta0,theta1,density\n");
  const std::size_t n = oracle.axes[0].size();
  for (std::size_t idx = 0; idx < oracle.density.size(); ++idx) {
    if (oracle.dim == 1) {
      out << fmt::format("{:.17g},{:.17g}\n", oracle.axes[0][idx], oracle.density[idx]);
    } else {
      out << fmt::format("{:.17g},{:.17g},{:.17g}\n", oracle.axes[0][idx / n], oracle.axes[1][idx % n],
                         oracle.density[idx]);
    }
  }
  fmt::print("{}\n", oracle_to_json(oracle).dump(2));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Firefly Monte Carlo experiments"};
  app.require_subcommand(1);

  ConfigOptions gen_opts, tune_opts, run_opts, oracle_opts;
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset and its true parameters");
  add_config_options(gen, gen_opts);

  auto* tune = app.add_subcommand("tune", "MAP-tune the bound and save it");
  add_config_options(tune, tune_opts);
  std::string tune_out;
  tune->add_option("-o,--out", tune_out, "bound file (default <output_dir>/bound.json)");

  auto* run = app.add_subcommand("run", "run the configured chains and write all artifacts");
  add_config_options(run, run_opts);

  auto* compare = app.add_subcommand("compare", "compare two chain directories");
  std::string cmp_a, cmp_b;
  double cmp_burn = 0.5, cmp_threshold = 4.0;
  std::size_t cmp_n = 0;
  compare->add_option("chain", cmp_a, "chain directory (trace.csv, theta.bin)")->required()->check(CLI::ExistingDirectory);
  compare->add_option("baseline", cmp_b, "baseline chain directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--burn-in", cmp_burn, "discarded fraction");
  compare->add_option("--threshold", cmp_threshold, "flag level in combined standard errors");
  compare->add_option("--n-points", cmp_n, "dataset size, for bright fractions");

  auto* oracle = app.add_subcommand("oracle", "grid-quadrature posterior moments (1 or 2 parameters)");
  add_config_options(oracle, oracle_opts);
  std::size_t oracle_points = 201;
  oracle->add_option("--points", oracle_points, "grid points per axis");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(resolve_config(gen, gen_opts));
    if (tune->parsed()) return cmd_tune(resolve_config(tune, tune_opts), tune_out);
    if (run->parsed()) return cmd_run(resolve_config(run, run_opts));
    if (compare->parsed()) return cmd_compare(cmp_a, cmp_b, cmp_burn, cmp_threshold, cmp_n);
    if (oracle->parsed()) return cmd_oracle(resolve_config(oracle, oracle_opts), oracle_points);
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 1;
}
