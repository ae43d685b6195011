// pfdil: command-line driver for federated domain-incremental experiments.
//
//   pfdil run       --config cfg.json --out DIR [--seed N]
//   pfdil eval      --out DIR
//   pfdil compare   --config cfg.json --out DIR [--modes a,b] [--seeds 0,1] [--lambdas 0,0.5,1]
//   pfdil gen-data  --config cfg.json --out DIR [--seed N]
//   pfdil gradcheck [--cases N]
//
// PFDL_THREADS caps the worker count. Exit codes: 0 ok, 2 config, 3 data, 4 invariant.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pfdil/pfdil.hpp"

namespace {

using namespace pfdil;

std::size_t worker_threads() {
  const char* env = std::getenv("PFDL_THREADS");
  if (env == nullptr || *env == '\0') return std::max(1u, std::thread::hardware_concurrency());
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1 || v > 1024) throw ConfigError("PFDL_THREADS", "PFDL_THREADS must be an integer in [1, 1024]");
  return static_cast<std::size_t>(v);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<RngSeed> parse_seeds(const std::string& s) {
  std::vector<RngSeed> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(item, &pos);
      if (pos != item.size() || item.front() == '-') throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("seeds", "--seeds: not a non-negative integer: " + item);
    }
  }
  if (out.empty()) throw ConfigError("seeds", "--seeds: empty list");
  return out;
}

std::vector<Mode> parse_modes(const std::string& s) {
  std::vector<Mode> out;
  for (const auto& item : split_list(s)) {
    const auto m = parse_mode(item);
    if (!m) throw ConfigError("modes", "--modes: unknown mode " + item);
    out.push_back(*m);
  }
  if (out.empty()) throw ConfigError("modes", "--modes: empty list");
  return out;
}

std::vector<double> parse_lambdas(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(item, &pos);
      if (pos != item.size() || !(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("lambdas", "--lambdas: not a value in [0, 1]: " + item);
    }
  }
  return out;
}

ExperimentConfig resolve_config(const std::string& path, std::optional<RngSeed> seed) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  if (seed) cfg.federation.seed = *seed;
  return cfg;
}

std::string json_escape(const std::string& s) { return nlohmann::json(s).dump(); }

int report_error(const char* category, const std::string& field, const std::string& message, int code) {
  std::cerr << "{\"error\":\"" << category << "\"";
  if (!field.empty()) std::cerr << ",\"field\":" << json_escape(field);
  std::cerr << ",\"message\":" << json_escape(message) << "}\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated domain-incremental learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, modes_arg, seeds_arg, lambdas_arg = "0,0.2,0.5,0.8,1";
  std::optional<RngSeed> seed;
  std::size_t cases = 100;

  auto* run = app.add_subcommand("run", "run one experiment and write its artifacts");
  run->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_option("--seed", seed, "override the config seed");

  auto* eval = app.add_subcommand("eval", "recompute metrics from a run directory's checkpoints");
  eval->add_option("--out", out_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  auto* compare = app.add_subcommand("compare", "compare modes over seeds and sweep lambda");
  compare->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  compare->add_option("--out", out_dir, "output directory")->required();
  compare->add_option("--modes", modes_arg, "comma-separated modes (default: all)");
  compare->add_option("--seeds", seeds_arg, "comma-separated seeds (default: 0,1,2,3,4)");
  compare->add_option("--lambdas", lambdas_arg, "comma-separated lambda sweep; empty to skip");

  auto* gen = app.add_subcommand("gen-data", "write the generated datasets and a manifest");
  gen->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "override the config seed");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
  grad->add_option("--cases", cases, "random cases per suite")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("config", "", e.what(), 2);
  }

  try {
    if (*run) {
      const auto cfg = resolve_config(config_path, seed);
      const auto outcome = cmd_run(cfg, out_dir, worker_threads());
      const auto& r = outcome.result;
      std::printf("mode=%s seed=%llu avg_final=%.6f mean_forgetting=%.6f pool_size_mean=%.3f out=%s\n",
                  to_string(cfg.federation.mode), static_cast<unsigned long long>(cfg.federation.seed),
                  r.metrics.avg_final, r.metrics.mean_forgetting, r.pool_size_mean, out_dir.c_str());
    } else if (*eval) {
      const auto ev = cmd_eval(out_dir, worker_threads());
      std::fputs(ev.metrics_csv.c_str(), stdout);
      std::printf("# avg_final=%.6f mean_forgetting=%.6f global_objective=%.6f\n", ev.metrics.avg_final,
                  ev.metrics.mean_forgetting, ev.metrics.global_objective);
      if (ev.stored_present && !ev.matches_stored)
        throw InvariantError("recomputed metrics differ from the stored metrics.csv");
      if (ev.stored_present) std::printf("# metrics.csv reproduced\n");
    } else if (*compare) {
      const auto cfg = resolve_config(config_path, std::nullopt);
      CompareOptions opt;
      if (!modes_arg.empty()) opt.modes = parse_modes(modes_arg);
      if (!seeds_arg.empty()) opt.seeds = parse_seeds(seeds_arg);
      opt.lambdas = parse_lambdas(lambdas_arg);
      opt.progress = [](const CompareRow& r) {
        std::printf("mode=%s seed=%llu lambda=%.2f avg_final=%.6f pool_size_mean=%.3f\n", to_string(r.mode),
                    static_cast<unsigned long long>(r.seed), r.lambda, r.result.metrics.avg_final,
                    r.result.pool_size_mean);
        std::fflush(stdout);
      };
      cmd_compare(cfg, opt, out_dir, worker_threads());
    } else if (*gen) {
      const auto cfg = resolve_config(config_path, seed);
      const auto manifest = cmd_gen_data(cfg, out_dir);
      std::printf("wrote %zu domains to %s (dataset_hash=%s)\n", manifest["domains"].size(), out_dir.c_str(),
                  manifest["dataset_hash"].get<std::string>().c_str());
    } else if (*grad) {
      GradcheckSpec spec;
      spec.cases = cases;
      const auto joint = gradcheck_joint_loss(spec);
      const auto km = gradcheck_migration(spec);
      std::printf("joint_loss cases=%zu components=%zu max_rel_error=%.3e\n", joint.cases, joint.components,
                  joint.max_rel_error);
      std::printf("migration  cases=%zu components=%zu max_rel_error=%.3e\n", km.cases, km.components,
                  km.max_rel_error);
      const double worst = std::max(joint.max_rel_error, km.max_rel_error);
      std::printf("max_rel_error=%.3e %s\n", worst, worst < 1e-4 ? "ok" : "FAILED");
      if (!(worst < 1e-4)) throw InvariantError("gradient check exceeded 1e-4 relative error");
    }
  } catch (const ConfigError& e) {
    return report_error("config", e.field(), e.what(), e.exit_code());
  } catch (const Error& e) {
    return report_error(e.category_name(), "", e.what(), e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("data", "", e.what(), 3);
  } catch (const std::exception& e) {
    return report_error("invariant", "", e.what(), 4);
  }
  return 0;
}
