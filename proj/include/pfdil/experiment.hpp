#pragma once

// Experiment persistence and the operations behind the command-line tool:
// run (artifacts + checkpoints), eval (metrics from checkpoints), compare
// (modes x seeds and a lambda sweep) and gen-data.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pfdil/config.hpp"
#include "pfdil/federation.hpp"
#include "pfdil/state_io.hpp"

namespace pfdil {

inline constexpr const char* kCodeVersion = "pfdil 0.1.0";

namespace fs = std::filesystem;

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string format_fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) { return io::fnv1a64(to_json(cfg).dump()); }

/// Output directory writer that records every file it creates.
class OutputDir {
 public:
  explicit OutputDir(fs::path root) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_, ec);
    if (ec || !fs::is_directory(root_)) throw DataError("cannot create output directory " + root_.string());
  }

  const fs::path& root() const noexcept { return root_; }

  fs::path declare(const fs::path& rel) {
    const auto full = root_ / rel;
    if (full.has_parent_path()) fs::create_directories(full.parent_path());
    if (std::find(files_.begin(), files_.end(), rel.generic_string()) == files_.end())
      files_.push_back(rel.generic_string());
    return full;
  }

  std::ofstream open(const fs::path& rel, bool binary = false) {
    std::ofstream out(declare(rel), binary ? std::ios::binary : std::ios::out);
    if (!out) throw DataError("cannot open " + (root_ / rel).string() + " for writing");
    return out;
  }

  void write_text(const fs::path& rel, const std::string& text) {
    auto out = open(rel);
    out << text;
    if (!out) throw DataError("write failed: " + (root_ / rel).string());
  }

  const std::vector<std::string>& files() const noexcept { return files_; }

 private:
  fs::path root_;
  std::vector<std::string> files_;
};

inline std::string metrics_csv_header() { return "mode,seed,client_weighting,n,m,accuracy\n"; }
inline std::string summary_csv_header() {
  return "mode,seed,avg_final,mean_forgetting,pool_size_mean,param_count_total\n";
}
inline std::string domains_csv_header() { return "mode,seed,task,acc_when_current,acc_final,forgetting\n"; }

/// A[n][m] rows, test-set-size weighted over clients.
inline std::string metrics_csv_rows(const MetricsMatrix& mm, Mode mode, RngSeed seed) {
  std::ostringstream os;
  for (std::size_t n = 0; n < mm.A.size(); ++n)
    for (std::size_t m = 0; m <= n; ++m)
      os << to_string(mode) << ',' << seed << ",test_size," << n << ',' << m << ',' << format_fixed(mm.A[n][m])
         << '\n';
  return os.str();
}

inline std::string summary_csv_row(const ExperimentResult& r, Mode mode, RngSeed seed) {
  std::ostringstream os;
  os << to_string(mode) << ',' << seed << ',' << format_fixed(r.metrics.avg_final) << ','
     << format_fixed(r.metrics.mean_forgetting) << ',' << format_fixed(r.pool_size_mean) << ','
     << r.param_count_total << '\n';
  return os.str();
}

inline std::string domains_csv_rows(const MetricsMatrix& mm, Mode mode, RngSeed seed) {
  std::ostringstream os;
  for (std::size_t m = 0; m < mm.num_tasks(); ++m)
    os << to_string(mode) << ',' << seed << ',' << m << ',' << format_fixed(mm.diag[m]) << ','
       << format_fixed(mm.final_row[m]) << ',' << format_fixed(mm.forgetting[m]) << '\n';
  return os.str();
}

inline fs::path checkpoint_path(std::size_t task, std::size_t client, const char* ext) {
  return fs::path("checkpoints") / ("task_" + std::to_string(task)) / ("client_" + std::to_string(client) + ext);
}

inline Json manifest_json(const ExperimentConfig& cfg, const std::string& command, std::uint64_t data_hash,
                          std::vector<RngSeed> seeds, const std::vector<std::string>& outputs,
                          const std::string& started, const std::string& finished) {
  Json m;
  m["command"] = command;
  m["code_version"] = kCodeVersion;
  m["config_hash"] = hex64(config_hash(cfg));
  m["dataset_hash"] = hex64(data_hash);
  m["seeds"] = seeds;
  m["config"] = to_json(cfg);
  m["outputs"] = outputs;
  m["started_utc"] = started;
  m["finished_utc"] = finished.empty() ? Json(nullptr) : Json(finished);
  return m;
}

struct RunOutcome {
  ExperimentResult result;
  std::uint64_t dataset_hash = 0;
};

/// Runs one experiment and writes its artifacts under `out`:
/// manifest.json, config.json, events.jsonl, metrics.csv, summary.csv,
/// domains.csv and one client-state checkpoint per (task, client).
inline RunOutcome cmd_run(const ExperimentConfig& cfg, const fs::path& out, std::size_t threads) {
  OutputDir dir(out);
  const auto data = build_experiment_data(cfg);
  const auto hash = dataset_hash(data.domains);
  const auto& f = cfg.federation;
  const std::size_t num_tasks = data.num_tasks();

  // Declared up front so the manifest lists every file before round 1.
  for (const char* name : {"config.json", "events.jsonl", "metrics.csv", "summary.csv", "domains.csv"})
    dir.declare(name);
  for (std::size_t t = 0; t < num_tasks; ++t)
    for (std::size_t k = 0; k < f.num_clients; ++k) {
      dir.declare(checkpoint_path(t, k, ".bin"));
      dir.declare(checkpoint_path(t, k, ".json"));
    }
  auto outputs = dir.files();
  outputs.insert(outputs.begin(), "manifest.json");
  const std::string started = utc_timestamp();
  dir.write_text("manifest.json", manifest_json(cfg, "run", hash, {f.seed}, outputs, started, "").dump(2) + "\n");
  dir.write_text("config.json", to_json(cfg).dump(2) + "\n");

  auto events = dir.open("events.jsonl");
  RunContext ctx;
  ctx.threads = threads;
  ctx.on_event = [&](const Event& e) { events << e.dump() << '\n'; };
  RunOutcome outcome{run_experiment(f, cfg.arch(), data, ctx), hash};
  events.close();
  if (!events) throw DataError("write failed: events.jsonl");

  const auto& r = outcome.result;
  for (std::size_t t = 0; t < r.states_after_task.size(); ++t)
    for (const auto& c : r.states_after_task[t]) {
      save_client_state(dir.root() / checkpoint_path(t, c.client_id, ".bin"), c);
      dir.write_text(checkpoint_path(t, c.client_id, ".json"), client_state_sidecar(c).dump(2) + "\n");
    }
  dir.write_text("metrics.csv", metrics_csv_header() + metrics_csv_rows(r.metrics, f.mode, f.seed));
  dir.write_text("summary.csv", summary_csv_header() + summary_csv_row(r, f.mode, f.seed));
  dir.write_text("domains.csv", domains_csv_header() + domains_csv_rows(r.metrics, f.mode, f.seed));

  auto manifest = manifest_json(cfg, "run", hash, {f.seed}, outputs, started, utc_timestamp());
  manifest["results"] = {{"avg_final", r.metrics.avg_final},
                         {"mean_forgetting", r.metrics.mean_forgetting},
                         {"global_objective", r.metrics.global_objective},
                         {"pool_size_mean", r.pool_size_mean},
                         {"param_count_total", r.param_count_total}};
  dir.write_text("manifest.json", manifest.dump(2) + "\n");
  return outcome;
}

struct EvalOutcome {
  MetricsMatrix metrics;
  std::string metrics_csv;
  bool matches_stored = false;
  bool stored_present = false;
};

/// Recomputes the metrics of a finished run from its checkpoints.
inline EvalOutcome cmd_eval(const fs::path& run_dir, std::size_t threads) {
  const auto cfg = load_config(run_dir / "config.json");
  const auto data = build_experiment_data(cfg);
  const auto manifest_path = run_dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    std::ifstream in(manifest_path);
    Json manifest;
    try {
      manifest = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(manifest_path.string() + ": " + e.what());
    }
    if (manifest.value("dataset_hash", "") != hex64(dataset_hash(data.domains)))
      throw DataError("dataset hash differs from the one recorded in " + manifest_path.string());
  }
  const auto& f = cfg.federation;
  std::vector<std::vector<ClientState>> states(data.num_tasks());
  for (std::size_t t = 0; t < data.num_tasks(); ++t)
    for (std::size_t k = 0; k < f.num_clients; ++k) {
      auto s = load_client_state(run_dir / checkpoint_path(t, k, ".bin"));
      if (s.client_id != k) throw DataError("checkpoint for client " + std::to_string(k) + " has the wrong id");
      if (!s.pool.empty() && s.pool.front().arch() != cfg.arch())
        throw DataError("checkpoint architecture differs from config.json");
      states[t].push_back(std::move(s));
    }
  EvalOutcome out;
  out.metrics = metrics_from_states(f, states, data, threads);
  out.metrics_csv = metrics_csv_header() + metrics_csv_rows(out.metrics, f.mode, f.seed);
  if (std::ifstream stored(run_dir / "metrics.csv"); stored) {
    std::stringstream ss;
    ss << stored.rdbuf();
    out.stored_present = true;
    out.matches_stored = ss.str() == out.metrics_csv;
  }
  return out;
}

struct CompareRow {
  Mode mode;
  RngSeed seed;
  double lambda;
  ExperimentResult result;
};

struct CompareOptions {
  std::vector<Mode> modes{Mode::pfeddil, Mode::fedavg, Mode::source_only, Mode::disjoint, Mode::sharing};
  std::vector<RngSeed> seeds{0, 1, 2, 3, 4};
  std::vector<double> lambdas{0.0, 0.2, 0.5, 0.8, 1.0};
  std::function<void(const CompareRow&)> progress;
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Baseline comparison (every mode x seed) and a pfeddil lambda sweep.
/// Writes compare_summary.csv, compare_domains.csv, compare_medians.csv,
/// lambda_sweep.csv and manifest.json.
inline std::vector<CompareRow> cmd_compare(const ExperimentConfig& base, const CompareOptions& opt, const fs::path& out,
                                           std::size_t threads) {
  OutputDir dir(out);
  for (const char* name :
       {"compare_summary.csv", "compare_domains.csv", "compare_medians.csv", "lambda_sweep.csv"})
    dir.declare(name);
  auto outputs = dir.files();
  outputs.insert(outputs.begin(), "manifest.json");
  const std::string started = utc_timestamp();

  std::vector<CompareRow> rows, sweep;
  std::uint64_t hash = 0;
  for (RngSeed seed : opt.seeds) {
    ExperimentConfig cfg = base;
    cfg.federation.seed = seed;
    const auto data = build_experiment_data(cfg);
    hash ^= dataset_hash(data.domains);
    RunContext ctx;
    ctx.threads = threads;
    for (Mode mode : opt.modes) {
      cfg.federation.mode = mode;
      rows.push_back({mode, seed, cfg.federation.lambda, run_experiment(cfg.federation, cfg.arch(), data, ctx)});
      rows.back().result.states_after_task.clear();
      rows.back().result.events.clear();
      if (opt.progress) opt.progress(rows.back());
    }
    cfg.federation.mode = Mode::pfeddil;
    for (double lambda : opt.lambdas) {
      cfg.federation.lambda = lambda;
      sweep.push_back({Mode::pfeddil, seed, lambda, run_experiment(cfg.federation, cfg.arch(), data, ctx)});
      sweep.back().result.states_after_task.clear();
      sweep.back().result.events.clear();
      if (opt.progress) opt.progress(sweep.back());
    }
  }

  std::string summary = summary_csv_header(), domains = domains_csv_header();
  for (const auto& r : rows) {
    summary += summary_csv_row(r.result, r.mode, r.seed);
    domains += domains_csv_rows(r.result.metrics, r.mode, r.seed);
  }
  std::string medians = "mode,seeds,median_avg_final,median_mean_forgetting,median_pool_size_mean\n";
  for (Mode mode : opt.modes) {
    std::vector<double> acc, forg, pool;
    for (const auto& r : rows)
      if (r.mode == mode) {
        acc.push_back(r.result.metrics.avg_final);
        forg.push_back(r.result.metrics.mean_forgetting);
        pool.push_back(r.result.pool_size_mean);
      }
    medians += std::string(to_string(mode)) + ',' + std::to_string(acc.size()) + ',' + format_fixed(median(acc)) +
               ',' + format_fixed(median(forg)) + ',' + format_fixed(median(pool)) + '\n';
  }
  std::string lambda_csv = "lambda,seed,avg_final,mean_forgetting,pool_size_mean,param_count_total\n";
  for (const auto& r : sweep)
    lambda_csv += format_fixed(r.lambda) + ',' + std::to_string(r.seed) + ',' + format_fixed(r.result.metrics.avg_final) +
                  ',' + format_fixed(r.result.metrics.mean_forgetting) + ',' + format_fixed(r.result.pool_size_mean) +
                  ',' + std::to_string(r.result.param_count_total) + '\n';

  dir.write_text("compare_summary.csv", summary);
  dir.write_text("compare_domains.csv", domains);
  dir.write_text("compare_medians.csv", medians);
  dir.write_text("lambda_sweep.csv", lambda_csv);
  auto manifest = manifest_json(base, "compare", hash, opt.seeds, outputs, started, utc_timestamp());
  Json modes = Json::array();
  for (Mode m : opt.modes) modes.push_back(to_string(m));
  manifest["modes"] = modes;
  manifest["lambdas"] = opt.lambdas;
  dir.write_text("manifest.json", manifest.dump(2) + "\n");
  rows.insert(rows.end(), sweep.begin(), sweep.end());
  return rows;
}

/// Writes each domain's dataset as a binary file plus a JSON manifest with
/// transforms, counts, per-client shard sizes and seeds.
inline Json cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out) {
  OutputDir dir(out);
  const auto data = build_experiment_data(cfg);
  Json manifest;
  manifest["code_version"] = kCodeVersion;
  manifest["seed"] = cfg.federation.seed;
  manifest["dataset_hash"] = hex64(dataset_hash(data.domains));
  manifest["num_classes"] = cfg.data.num_classes;
  manifest["input_dim"] = cfg.data.input_dim;
  manifest["samples_per_class"] = cfg.data.samples_per_class;
  manifest["class_separation"] = cfg.data.class_separation;
  manifest["cluster_sigma"] = cfg.data.cluster_sigma;
  manifest["alpha"] = cfg.federation.alpha;
  manifest["clients"] = cfg.federation.num_clients;
  Json domains = Json::array();
  const auto cfg_json = to_json(cfg);
  for (std::size_t d = 0; d < data.domains.size(); ++d) {
    const auto& ds = data.domains[d];
    const std::string file = "domain_" + std::to_string(d) + ".pfds";
    {
      auto os = dir.open(file, true);
      write_dataset(os, ds);
    }
    std::vector<std::size_t> per_class(ds.num_classes, 0);
    for (std::size_t i = 0; i < ds.train.size(); ++i) ++per_class[static_cast<std::size_t>(ds.train.y(i))];
    std::vector<std::size_t> shard_sizes;
    for (const auto& s : data.shards[d]) shard_sizes.push_back(s.train.size());
    domains.push_back({{"task_id", ds.task_id},
                       {"name", cfg.data.domains[d].name},
                       {"transforms", cfg_json["data"]["domains"][d]["transforms"]},
                       {"file", file},
                       {"train_count", ds.train.size()},
                       {"test_count", ds.test.size()},
                       {"train_class_counts", per_class},
                       {"client_shard_sizes", shard_sizes}});
  }
  manifest["domains"] = domains;
  manifest["client_streams"] = data.streams;
  dir.declare("manifest.json");
  manifest["outputs"] = dir.files();
  dir.write_text("manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace pfdil
