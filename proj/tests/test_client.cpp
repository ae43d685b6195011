#include <algorithm>
#include <set>
#include <vector>

#include "catch_amalgamated.hpp"
#include "pfdil/client.hpp"
#include "pfdil/data.hpp"

using namespace pfdil;
using Catch::Matchers::WithinAbs;

namespace {

const ArchSpec kArch{4, {8, 6}, 3};

TaskSetup setup_for(StrategyPolicy policy, double lambda, int task) {
  TaskSetup s;
  s.policy = policy;
  s.lambda = lambda;
  s.arch = kArch;
  s.init_seed = derive_seed(1, Stream::model_init, {static_cast<std::uint64_t>(task)});
  return s;
}

Samples shard(RngSeed seed, std::size_t per_class = 20) {
  return make_base_dataset(3, 4, per_class, 3.0, seed).train;
}

LocalTrainSpec quick_spec() {
  LocalTrainSpec s;
  s.epochs = 3;
  s.lr = 0.05;
  s.batch_size = 8;
  s.seed = 5;
  return s;
}

}  // namespace

TEST_CASE("first task creates the first model", "[client]") {
  ClientState c;
  const auto rep = begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.5, 0));
  REQUIRE(rep);
  CHECK(rep->rho.empty());
  CHECK(rep->decision == StrategyDecision::new_model());
  CHECK(c.pool.size() == 1);
  CHECK(c.snapshots.empty());
  CHECK(c.bound_index() == 0);
}

TEST_CASE("lambda zero reuses the only model without migration", "[client]") {
  ClientState c;
  begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.0, 0));
  local_train_round(c, nullptr, shard(1), quick_spec(), 1);
  finish_task(c, nullptr);
  const auto rep = begin_task(c, 1, shard(2), setup_for(StrategyPolicy::adaptive, 0.0, 1));
  REQUIRE(rep);
  CHECK(rep->decision == StrategyDecision::reuse(0));
  CHECK(c.pool.size() == 1);
  CHECK(c.snapshots.empty());
  CHECK(c.current_rho.empty());
  CHECK(migration_loss(c.bound_model(), c.snapshots, c.current_rho) == 0.0);
}

TEST_CASE("lambda one binds a distinct model to every task", "[client]") {
  ClientState c;
  for (int t = 0; t < 4; ++t) {
    const auto prev = c.pool.size();
    begin_task(c, t, shard(static_cast<RngSeed>(t)), setup_for(StrategyPolicy::adaptive, 1.0, t));
    CHECK(c.pool.size() == prev + 1);
    CHECK(c.snapshots.size() == prev);
    finish_task(c, nullptr);
  }
  CHECK(c.pool.size() == 4);
  std::set<std::size_t> bound;
  for (const auto& [task, index] : c.task_bindings) bound.insert(index);
  CHECK(bound.size() == 4);
}

TEST_CASE("km_include_self keeps the bound model among the snapshots", "[client]") {
  ClientState c;
  auto s = setup_for(StrategyPolicy::adaptive, 0.0, 0);
  s.km_include_self = true;
  begin_task(c, 0, shard(1), s);
  finish_task(c, nullptr);
  s.init_seed = 99;
  begin_task(c, 1, shard(2), s);
  REQUIRE(c.snapshots.size() == 1);
  CHECK(c.snapshot_source[0] == 0);
  CHECK(c.current_rho.size() == 1);
}

TEST_CASE("migration loss reference values", "[client]") {
  const std::vector<double> w{1.0, 1.0}, zero{0.0, 0.0};
  const std::vector<std::span<const double>> anchors{zero};
  const std::vector<double> rho{0.5};
  CHECK(migration_loss(w, anchors, rho) == 1.0);
  std::vector<double> g(2, 0.0);
  add_migration_gradient(w, anchors, rho, g);
  CHECK(g == std::vector<double>{1.0, 1.0});
  CHECK(migration_loss(w, {}, {}) == 0.0);
  CHECK_THROWS_AS(migration_loss(w, anchors, std::vector<double>{}), InputError);
}

TEST_CASE("empty shard leaves the client out of the task", "[client]") {
  ClientState c;
  const auto rep = begin_task(c, 0, Samples(4), setup_for(StrategyPolicy::adaptive, 0.5, 0));
  CHECK_FALSE(rep);
  CHECK_FALSE(c.active);
  CHECK(c.pool.size() == 1);  // an empty pool gets one model so it can still predict
  CHECK_FALSE(local_train_round(c, nullptr, Samples(4), quick_spec(), 1));
  finish_task(c, nullptr);

  begin_task(c, 1, shard(2), setup_for(StrategyPolicy::adaptive, 0.5, 1));
  finish_task(c, nullptr);
  const auto pool = c.pool.size();
  CHECK_FALSE(begin_task(c, 2, Samples(4), setup_for(StrategyPolicy::adaptive, 0.5, 2)));
  CHECK(c.pool.size() == pool);
  CHECK_FALSE(c.task_bindings.contains(2));
}

TEST_CASE("snapshots stay frozen while the bound model trains", "[client]") {
  ClientState c;
  begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 1.0, 0));
  local_train_round(c, nullptr, shard(1), quick_spec(), 1);
  finish_task(c, nullptr);
  begin_task(c, 1, shard(2), setup_for(StrategyPolicy::adaptive, 1.0, 1));
  const auto frozen = c.snapshots;
  const auto old_model = c.pool[0];
  for (int r = 1; r <= 3; ++r) local_train_round(c, nullptr, shard(2), quick_spec(), r);
  CHECK(c.snapshots.size() == frozen.size());
  for (std::size_t i = 0; i < frozen.size(); ++i) CHECK(c.snapshots[i] == frozen[i]);
  CHECK(c.pool[0] == old_model);
  CHECK_FALSE(c.pool[1] == frozen[0]);
}

TEST_CASE("local training is deterministic", "[client]") {
  auto run = [] {
    ClientState c;
    c.client_id = 3;
    begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.5, 0));
    return *local_train_round(c, nullptr, shard(1), quick_spec(), 1);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.params == b.params);
  CHECK(a.num_samples == 48);  // 80% train split of 3 x 20
  CHECK(a.train_loss == b.train_loss);
}

TEST_CASE("migration switch is inert without snapshots", "[client]") {
  auto run = [](bool km) {
    ClientState c;
    begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.5, 0));
    auto spec = quick_spec();
    spec.knowledge_migration = km;
    return local_train_round(c, nullptr, shard(1), spec, 1)->params;
  };
  CHECK(run(true) == run(false));
}

TEST_CASE("local training lowers the local objective", "[client]") {
  const auto data = shard(4, 60);
  ClientState c;
  begin_task(c, 0, data, setup_for(StrategyPolicy::adaptive, 1.0, 0));
  local_train_round(c, nullptr, data, quick_spec(), 1);
  finish_task(c, nullptr);
  const auto next = make_base_dataset(3, 4, 60, 3.0, 4);
  const auto shifted = apply_domain(next, DomainSpec{"r", {Rotation{1.0, 0}}}, 1).train;
  begin_task(c, 1, shifted, setup_for(StrategyPolicy::adaptive, 1.0, 1));
  REQUIRE(c.snapshots.size() == 1);

  Rng rng(12);
  const NegativeSynthesizer synth(shifted, {});
  const auto negatives = synth.synthesize_all(shifted, rng);
  const double before = local_objective(c.bound_model(), shifted, &negatives, c.snapshots, c.current_rho);
  auto spec = quick_spec();
  spec.epochs = 20;
  spec.lr = 0.01;
  local_train_round(c, nullptr, shifted, spec, 1);
  const double after = local_objective(c.bound_model(), shifted, &negatives, c.snapshots, c.current_rho);
  CHECK(after <= before);
}

TEST_CASE("broadcast parameters replace the bound model before training", "[client]") {
  ClientState c;
  begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.5, 0));
  auto spec = quick_spec();
  spec.epochs = 0;
  const auto global = init_model(kArch, 1234);
  const auto up = local_train_round(c, &global, shard(1), spec, 1);
  CHECK(up->params == global);
  const PersonalModel wrong(ArchSpec{4, {8}, 3});
  CHECK_THROWS_AS(local_train_round(c, &wrong, shard(1), spec, 2), InputError);
}

TEST_CASE("finish_task hands the final global to the bound model", "[client]") {
  ClientState c;
  begin_task(c, 0, shard(1), setup_for(StrategyPolicy::adaptive, 0.5, 0));
  const auto global = init_model(kArch, 4321);
  finish_task(c, &global);
  CHECK(c.pool[0] == global);
  CHECK_FALSE(c.current_task);
  CHECK(c.task_bindings.at(0) == 0);
}

TEST_CASE("pool grows by at most one model per task", "[client][property]") {
  Rng rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    ClientState c;
    for (int t = 0; t < 6; ++t) {
      const auto before = c.pool.size();
      auto s = setup_for(StrategyPolicy::adaptive, u(rng), t);
      s.max_pool_size = 3;
      begin_task(c, t, shard(static_cast<RngSeed>(t), 5), s);
      CHECK(c.pool.size() >= before);
      CHECK(c.pool.size() <= before + 1);
      CHECK(c.pool.size() <= 3);
      CHECK(c.current_rho.size() == c.snapshots.size());
      finish_task(c, nullptr);
    }
  }
}

TEST_CASE("trunk inheritance copies the previous trunk into the new model", "[client]") {
  ClientState c;
  auto s = setup_for(StrategyPolicy::always_new, 0.5, 0);
  s.inherit_trunk = true;
  begin_task(c, 0, shard(1), s);
  local_train_round(c, nullptr, shard(1), quick_spec(), 1);
  finish_task(c, nullptr);
  s.init_seed = 77;
  begin_task(c, 1, shard(2), s);
  const auto& l = c.pool[0].layout();
  CHECK(std::ranges::equal(c.pool[1].values(l.trunk_range()), c.pool[0].values(l.trunk_range())));
  CHECK_FALSE(std::ranges::equal(c.pool[1].values(l.cls_range()), c.pool[0].values(l.cls_range())));
}
