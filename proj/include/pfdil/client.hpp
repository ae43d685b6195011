#pragma once

// Per-client lifecycle: task arrival (matching + strategy), frozen pool
// snapshots, and local training on the joint loss
//   L_Local = CE(w) + BCE(theta) + sum_i rho_i * ||w - w_i||^2.

#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "pfdil/data.hpp"
#include "pfdil/matching.hpp"
#include "pfdil/nn.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

/// How a client picks the model for a new task.
enum class StrategyPolicy {
  adaptive,      // matching intensity vs lambda (pfeddil mode)
  single_model,  // one model for the whole stream (FedAvg, Source-Only)
  always_new,    // fresh model per task (Disjoint, Sharing)
};

struct TaskSetup {
  StrategyPolicy policy = StrategyPolicy::adaptive;
  double lambda = 0.5;
  std::size_t max_pool_size = 10;
  bool km_include_self = false;
  bool inherit_trunk = false;  // new model starts from the previous model's trunk (Sharing)
  ArchSpec arch;
  RngSeed init_seed = 0;  // seed of the fresh model for this task, shared by all clients
};

struct ClientState {
  std::size_t client_id = 0;
  std::vector<PersonalModel> pool;
  std::vector<PersonalModel> snapshots;      // frozen at begin_task
  std::vector<std::size_t> snapshot_source;  // pool index of each snapshot
  std::map<int, std::size_t> task_bindings;  // task -> pool index
  std::optional<int> current_task;
  std::vector<double> current_rho;  // aligned with snapshots
  bool active = false;
  std::map<int, MatchingReport> reports;

  std::size_t bound_index() const {
    if (!current_task) throw InvariantError("client has no current task");
    return task_bindings.at(*current_task);
  }
  PersonalModel& bound_model() { return pool.at(bound_index()); }
  const PersonalModel& bound_model() const { return pool.at(bound_index()); }
};

/// Starts a task: computes rho, selects the strategy, binds a model and
/// freezes snapshots of every other pool model. Returns nullopt when the
/// shard is empty and the client sits the task out.
inline std::optional<MatchingReport> begin_task(ClientState& state, int task_id, const Samples& shard,
                                                const TaskSetup& setup) {
  if (state.task_bindings.contains(task_id)) throw InvariantError("begin_task: task already bound");
  state.current_task = task_id;
  state.snapshots.clear();
  state.snapshot_source.clear();
  state.current_rho.clear();

  auto fresh_model = [&] {
    PersonalModel m = init_model(setup.arch, setup.init_seed);
    if (setup.inherit_trunk && !state.pool.empty()) {
      const auto& prev = state.pool[state.task_bindings.rbegin()->second];
      const auto r = prev.layout().trunk_range();
      auto src = prev.values(r);
      std::copy(src.begin(), src.end(), m.values(r).begin());
    }
    return m;
  };

  if (shard.empty()) {
    state.active = false;
    // A client must own at least one model to take part in inference later.
    if (state.pool.empty()) {
      state.pool.push_back(fresh_model());
      state.task_bindings[task_id] = 0;
    } else {
      state.current_task.reset();
    }
    return std::nullopt;
  }
  state.active = true;

  MatchingReport report;
  report.lambda = setup.lambda;
  switch (setup.policy) {
    case StrategyPolicy::adaptive:
      report = select_strategy(matching_intensity(state.pool, shard), setup.lambda, state.pool.size(),
                               setup.max_pool_size);
      break;
    case StrategyPolicy::single_model:
      report.decision = state.pool.empty() ? StrategyDecision::new_model() : StrategyDecision::reuse(0);
      break;
    case StrategyPolicy::always_new:
      report.decision = StrategyDecision::new_model();
      break;
  }

  const std::size_t old_size = state.pool.size();
  std::size_t bound = 0;
  if (report.decision.is_reuse()) {
    bound = report.decision.model_index;
  } else {
    state.pool.push_back(fresh_model());
    bound = old_size;
  }
  state.task_bindings[task_id] = bound;

  if (setup.policy == StrategyPolicy::adaptive) {
    for (std::size_t i = 0; i < old_size; ++i) {
      if (i == bound && !setup.km_include_self) continue;
      state.snapshots.push_back(state.pool[i]);
      state.snapshot_source.push_back(i);
      state.current_rho.push_back(report.rho[i]);
    }
  }
  state.reports[task_id] = report;
  return report;
}

/// sum_i rho_i * ||w - anchor_i||^2 over the full parameter vector.
inline double migration_loss(std::span<const double> w, std::span<const std::span<const double>> anchors,
                             std::span<const double> rho) {
  if (anchors.size() != rho.size()) throw InputError("migration_loss: need one rho per snapshot");
  double total = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i].size() != w.size()) throw InputError("migration_loss: snapshot size mismatch");
    double d2 = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double d = w[j] - anchors[i][j];
      d2 += d * d;
    }
    total += rho[i] * d2;
  }
  return total;
}

/// grad += sum_i 2 * rho_i * (w - anchor_i)
inline void add_migration_gradient(std::span<const double> w, std::span<const std::span<const double>> anchors,
                                   std::span<const double> rho, std::span<double> grad) {
  if (anchors.size() != rho.size()) throw InputError("migration_loss: need one rho per snapshot");
  if (grad.size() != w.size()) throw InputError("migration gradient: size mismatch");
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i].size() != w.size()) throw InputError("migration_loss: snapshot size mismatch");
    const double c = 2.0 * rho[i];
    for (std::size_t j = 0; j < w.size(); ++j) grad[j] += c * (w[j] - anchors[i][j]);
  }
}

inline std::vector<std::span<const double>> parameter_views(std::span<const PersonalModel> models) {
  std::vector<std::span<const double>> out;
  out.reserve(models.size());
  for (const auto& m : models) out.push_back(m.values());
  return out;
}

inline double migration_loss(const PersonalModel& w, std::span<const PersonalModel> snapshots,
                             std::span<const double> rho) {
  const auto views = parameter_views(snapshots);
  return migration_loss(w.values(), views, rho);
}

struct LocalTrainSpec {
  std::size_t epochs = 20;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t batch_size = 32;
  bool train_aux = true;
  bool knowledge_migration = true;
  NegativeSynthesisSpec negatives;
  RngSeed seed = 0;  // experiment seed; per-epoch streams hang off it
};

struct LocalUpdate {
  std::size_t client_id = 0;
  int task_id = 0;
  PersonalModel params;
  std::size_t num_samples = 0;
  double train_loss = 0.0;  // mean L_Local over the last epoch's batches
};

/// L_Local evaluated on the whole shard against a fixed negative set.
inline double local_objective(const PersonalModel& model, const Samples& shard, const Samples* negatives,
                              std::span<const PersonalModel> snapshots, std::span<const double> rho) {
  std::vector<Example> batch;
  for (std::size_t i = 0; i < shard.size(); ++i)
    batch.push_back({shard.x(i), shard.y(i), negatives != nullptr ? 1 : -1});
  if (negatives != nullptr)
    for (std::size_t i = 0; i < negatives->size(); ++i) batch.push_back({negatives->x(i), -1, 0});
  const LossSpec spec = negatives != nullptr ? LossSpec::joint : LossSpec::cls;
  return batch_loss(model, batch, spec) + migration_loss(model, snapshots, rho);
}

/// One federated round of local work: overwrite the bound model with the
/// broadcast parameters (if any), then E epochs of minibatch SGD on L_Local.
inline std::optional<LocalUpdate> local_train_round(ClientState& state, const PersonalModel* global_params,
                                                    const Samples& shard, const LocalTrainSpec& spec, int round) {
  if (!state.active || shard.empty()) return std::nullopt;
  if (spec.batch_size == 0) throw InputError("local_train_round: batch_size must be positive");
  PersonalModel& model = state.bound_model();
  if (global_params != nullptr) {
    if (!global_params->congruent_with(model)) throw InputError("local_train_round: global parameters incompatible");
    model = *global_params;
  }
  const int task = *state.current_task;
  const bool use_km = spec.knowledge_migration && !state.snapshots.empty();
  const auto anchors = parameter_views(state.snapshots);

  std::optional<NegativeSynthesizer> synth;
  if (spec.train_aux) synth.emplace(shard, spec.negatives);

  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double epoch_loss = 0.0;
  for (std::size_t e = 0; e < spec.epochs; ++e) {
    Rng rng(derive_seed(spec.seed, Stream::local_epoch,
                        {state.client_id, static_cast<std::uint64_t>(task), static_cast<std::uint64_t>(round), e}));
    std::shuffle(order.begin(), order.end(), rng);
    epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
      const std::size_t end = std::min(order.size(), start + spec.batch_size);
      BalancedBatch batch(shard, std::span<const std::size_t>(order).subspan(start, end - start),
                          synth ? &*synth : nullptr, true, rng);
      auto lg = loss_and_gradient(model, batch.examples(), spec.train_aux ? LossSpec::joint : LossSpec::cls);
      double loss = lg.loss;
      if (use_km) {
        loss += migration_loss(model.values(), anchors, state.current_rho);
        add_migration_gradient(model.values(), anchors, state.current_rho, lg.grads.values());
      }
      sgd_step(model, lg.grads, spec.lr, spec.weight_decay);
      epoch_loss += loss;
      ++batches;
    }
    epoch_loss /= static_cast<double>(std::max<std::size_t>(batches, 1));
  }
  if (!all_finite(model.values())) throw InvariantError("local training produced non-finite parameters");
  return LocalUpdate{state.client_id, task, model, shard.size(), epoch_loss};
}

/// Task end: the bound model takes the final global parameters and the binding is frozen.
inline void finish_task(ClientState& state, const PersonalModel* final_global) {
  if (state.current_task && state.task_bindings.contains(*state.current_task) && final_global != nullptr)
    state.bound_model() = *final_global;
  state.snapshots.clear();
  state.snapshot_source.clear();
  state.current_rho.clear();
  state.current_task.reset();
  state.active = false;
}

}  // namespace pfdil
