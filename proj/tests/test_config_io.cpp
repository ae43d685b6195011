#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "catch_amalgamated.hpp"
#include "pfdil/pfdil.hpp"

using namespace pfdil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pfdil_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinyConfig = R"({
  "clients": 3, "active_fraction": 1.0, "rounds_per_task": 2, "local_epochs": 1, "lr": 0.02,
  "arch": {"hidden_dims": [6]},
  "data": {"num_classes": 3, "input_dim": 4, "samples_per_class": 20,
           "domains": [{"name": "a", "transforms": [{"kind": "identity"}]},
                       {"name": "b", "transforms": [{"kind": "rotation", "degrees": 90}]}]}
})";

std::string config_field(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("empty config yields the documented defaults", "[config]") {
  const auto cfg = parse_config("{}");
  const auto& f = cfg.federation;
  CHECK(f.mode == Mode::pfeddil);
  CHECK(f.num_clients == 20);
  CHECK(f.active_fraction == 0.4);
  CHECK(f.rounds_per_task == 180);
  CHECK(f.local_epochs == 20);
  CHECK(f.batch_size == 32);
  CHECK(f.lr == 1e-3);
  CHECK(f.weight_decay == 1e-3);
  CHECK(f.lambda == 0.5);
  CHECK(f.alpha == 1.0);
  CHECK(f.max_pool_size == 10);
  CHECK_FALSE(f.km_include_self);
  CHECK(cfg.hidden_dims == std::vector<std::size_t>{64, 32});
  CHECK(cfg.data.domains.size() == 4);
  const auto echoed = to_json(cfg);
  for (const char* key : {"mode", "seed", "clients", "active_fraction", "rounds_per_task", "local_epochs", "lambda",
                          "alpha", "batch_size", "lr", "weight_decay", "max_pool_size", "km_include_self",
                          "stream_mode", "negatives", "arch", "data"})
    CHECK(echoed.contains(key));
}

TEST_CASE("invalid configs name the offending field", "[config]") {
  CHECK(config_field(R"({"lambda": 1.5})") == "lambda");
  CHECK(config_field(R"({"lambda": "high"})") == "lambda");
  CHECK(config_field(R"({"clients": 0})") == "clients");
  CHECK(config_field(R"({"active_fraction": 0})") == "active_fraction");
  CHECK(config_field(R"({"mode": "fedprox"})") == "mode");
  CHECK(config_field(R"({"lamda": 0.3})") == "lamda");
  CHECK(config_field(R"({"data": {"domains": [{"name": "x", "transforms": [{"kind": "rotation"}]}]}})").starts_with(
      "data.domains[0]"));
  CHECK(config_field(R"({"arch": {"hidden_dims": []}})") == "arch.hidden_dims");
  try {
    parse_config(R"({"lambda": 1.5})");
    FAIL("accepted lambda 1.5");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("1.5") != std::string::npos);
    CHECK(e.exit_code() == 2);
  }
}

TEST_CASE("syntax errors report line and column", "[config]") {
  try {
    parse_config("{\n  \"lambda\": 0.5,\n  \"seed\": }\n");
    FAIL("accepted malformed json");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(e.field() == "<syntax>");
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("column") != std::string::npos);
  }
}

TEST_CASE("config serialization is a fixed point", "[config]") {
  const auto cfg = parse_config(kTinyConfig);
  const auto once = to_json(cfg);
  const auto twice = to_json(config_from_json(once));
  CHECK(once == twice);
  const auto defaults = to_json(parse_config("{}"));
  CHECK(to_json(config_from_json(defaults)) == defaults);
}

TEST_CASE("client state round-trips through the binary format", "[io]") {
  ClientState c;
  c.client_id = 7;
  for (int i = 0; i < 3; ++i) c.pool.push_back(init_model(ArchSpec{4, {5}, 3}, static_cast<RngSeed>(i)));
  c.task_bindings = {{0, 0}, {1, 2}, {2, 1}};
  std::stringstream ss;
  write_client_state(ss, c);
  const auto back = read_client_state(ss);
  CHECK(back.client_id == 7);
  CHECK(back.pool == c.pool);
  CHECK(back.task_bindings == c.task_bindings);

  std::stringstream bytes;
  write_client_state(bytes, c);
  std::string raw = bytes.str();
  raw[0] = 'X';
  std::stringstream bad_magic(raw);
  CHECK_THROWS_AS(read_client_state(bad_magic), DataError);
  std::stringstream truncated(bytes.str().substr(0, bytes.str().size() - 3));
  CHECK_THROWS_AS(read_client_state(truncated), DataError);
}

TEST_CASE("run writes exactly the declared outputs and eval reproduces them", "[io][cli]") {
  const auto dir = scratch("run");
  const auto cfg = parse_config(kTinyConfig);
  const auto outcome = cmd_run(cfg, dir, 2);

  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  std::set<std::string> declared, present;
  for (const auto& f : manifest["outputs"]) declared.insert(f.get<std::string>());
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) present.insert(fs::relative(e.path(), dir).generic_string());
  CHECK(declared == present);
  CHECK(present.contains("checkpoints/task_1/client_2.bin"));
  CHECK(manifest.contains("config_hash"));
  CHECK(manifest.contains("dataset_hash"));
  CHECK(manifest["results"]["avg_final"] == outcome.result.metrics.avg_final);

  const auto metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.starts_with("mode,seed,client_weighting,n,m,accuracy\n"));
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 3);

  const auto eval = cmd_eval(dir, 1);
  CHECK(eval.stored_present);
  CHECK(eval.matches_stored);
  CHECK(eval.metrics_csv == metrics);

  std::ifstream events(dir / "events.jsonl");
  std::size_t rounds = 0;
  for (std::string line; std::getline(events, line);)
    if (nlohmann::json::parse(line)["type"] == "round") ++rounds;
  CHECK(rounds == 2 * 2);
  fs::remove_all(dir);
}

TEST_CASE("compare writes one summary row per mode and seed", "[io]") {
  const auto dir = scratch("compare");
  const auto cfg = parse_config(kTinyConfig);
  CompareOptions opt;
  opt.modes = {Mode::pfeddil, Mode::fedavg};
  opt.seeds = {0, 1, 2};
  opt.lambdas = {0.0, 1.0};
  const auto rows = cmd_compare(cfg, opt, dir, 1);
  CHECK(rows.size() == 6 + 6);  // mode rows, then the lambda sweep
  CHECK(std::count_if(rows.begin(), rows.end(), [](const CompareRow& r) { return r.mode == Mode::fedavg; }) == 3);
  const auto summary = slurp(dir / "compare_summary.csv");
  CHECK(std::count(summary.begin(), summary.end(), '\n') == 1 + 6);
  const auto sweep = slurp(dir / "lambda_sweep.csv");
  CHECK(std::count(sweep.begin(), sweep.end(), '\n') == 1 + 6);
  CHECK(fs::exists(dir / "compare_medians.csv"));
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  fs::remove_all(dir);
}

TEST_CASE("generated datasets read back identically", "[io]") {
  const auto dir = scratch("gen");
  const auto cfg = parse_config(kTinyConfig);
  const auto manifest = cmd_gen_data(cfg, dir);
  const auto data = build_experiment_data(cfg);
  std::ifstream in(dir / "domain_1.pfds", std::ios::binary);
  const auto back = read_dataset(in);
  CHECK(back.train == data.domains[1].train);
  CHECK(back.test == data.domains[1].test);
  CHECK(manifest.contains("dataset_hash"));
  fs::remove_all(dir);
}

TEST_CASE("cli exit codes", "[cli]") {
  const char* cli = std::getenv("PFDIL_CLI");
  if (!cli) SKIP("PFDIL_CLI not set");
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  {
    std::ofstream(dir / "bad.json") << R"({"lambda": 2})";
    std::ofstream(dir / "broken.json") << "{";
  }
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(cli) + " " + args + " > " + (dir / "out.txt").string() + " 2> " +
                            (dir / "err.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(run("run --config " + (dir / "bad.json").string() + " --out " + (dir / "r").string()) == 2);
  const auto err = nlohmann::json::parse(slurp(dir / "err.txt"));
  CHECK(err["error"] == "config");
  CHECK(err["field"] == "lambda");
  CHECK(run("run --config " + (dir / "broken.json").string() + " --out " + (dir / "r").string()) == 2);
  CHECK(run("run --config " + (dir / "missing.json").string() + " --out " + (dir / "r").string()) == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("eval --out " + (dir / "nothing_here").string()) != 0);
  CHECK(run("gradcheck --cases 20") == 0);
  fs::remove_all(dir);
}
