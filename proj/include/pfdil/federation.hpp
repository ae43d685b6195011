#pragma once

// Server-side orchestration: client sampling, broadcast, local rounds,
// sample-weighted aggregation and per-task scheduling, for the pfeddil mode and the
// FedAvg / Source-Only / Disjoint / Sharing reference baselines.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pfdil/client.hpp"
#include "pfdil/data.hpp"
#include "pfdil/evaluation.hpp"
#include "pfdil/nn.hpp"
#include "pfdil/rng.hpp"

namespace pfdil {

enum class Mode { pfeddil, fedavg, source_only, disjoint, sharing };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::pfeddil: return "pfeddil";
    case Mode::fedavg: return "fedavg";
    case Mode::source_only: return "source_only";
    case Mode::disjoint: return "disjoint";
    case Mode::sharing: return "sharing";
  }
  return "?";
}

inline std::optional<Mode> parse_mode(std::string_view s) {
  for (Mode m : {Mode::pfeddil, Mode::fedavg, Mode::source_only, Mode::disjoint, Mode::sharing})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

struct FederationConfig {
  std::size_t num_clients = 20;     // K
  double active_fraction = 0.4;     // C
  std::size_t rounds_per_task = 180;  // T
  std::size_t local_epochs = 20;    // E
  double lambda = 0.5;
  double alpha = 1.0;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t max_pool_size = 10;
  bool km_include_self = false;
  Mode mode = Mode::pfeddil;
  StreamMode stream_mode = StreamMode::synchronized;
  NegativeSynthesisSpec negatives;
  RngSeed seed = 0;
};

/// What a mode switches on.
struct ModeTraits {
  StrategyPolicy policy;
  bool train_aux;
  bool knowledge_migration;
  InferenceRule inference;
  bool inherit_trunk;
  bool frozen_after_first_task;
};

inline ModeTraits mode_traits(const FederationConfig& cfg) {
  switch (cfg.mode) {
    case Mode::pfeddil: {
      // At lambda = 0 every task reuses the single model and no snapshot
      // exists, so the auxiliary head is never read; it is not trained.
      const bool aux_used = cfg.lambda > 0.0 || cfg.km_include_self;
      return {StrategyPolicy::adaptive, aux_used, true, InferenceRule::ensemble, false, false};
    }
    case Mode::fedavg: return {StrategyPolicy::single_model, false, false, InferenceRule::single_model, false, false};
    case Mode::source_only:
      return {StrategyPolicy::single_model, false, false, InferenceRule::single_model, false, true};
    case Mode::disjoint: return {StrategyPolicy::always_new, false, false, InferenceRule::task_oracle, false, false};
    case Mode::sharing: return {StrategyPolicy::always_new, false, false, InferenceRule::task_oracle, true, false};
  }
  throw InvariantError("unknown mode");
}

inline std::size_t active_client_count(std::size_t num_clients, double fraction) {
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(num_clients) + 1e-9));
  return std::clamp<std::size_t>(n, 1, num_clients);
}

/// Uniform sample without replacement of max(1, floor(C*K)) client ids, sorted.
inline std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, Rng& rng) {
  if (num_clients == 0) throw InputError("sample_clients: need at least one client");
  const std::size_t m = active_client_count(num_clients, fraction);
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  // partial Fisher-Yates
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, num_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Parameter-wise mean weighted by num_samples, accumulated in list order.
inline PersonalModel aggregate(std::span<const LocalUpdate> updates) {
  if (updates.empty()) throw InputError("aggregate: no updates");
  double total = 0.0;
  for (const auto& u : updates) {
    if (u.num_samples == 0) throw InputError("aggregate: update with zero samples");
    if (!u.params.congruent_with(updates.front().params)) throw InputError("aggregate: architectures differ");
    total += static_cast<double>(u.num_samples);
  }
  PersonalModel out(updates.front().params.arch());
  auto acc = out.values();
  for (const auto& u : updates) {
    const double w = static_cast<double>(u.num_samples) / total;
    auto p = u.params.values();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * p[i];
  }
  return out;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first failure.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

/// Generated tasks, per-domain client shards and each client's domain order.
struct ExperimentData {
  std::vector<TaskDataset> domains;
  std::vector<std::vector<ClientShard>> shards;  // [domain][client]
  std::vector<std::vector<std::size_t>> streams;  // [client][task] -> domain

  std::size_t num_tasks() const noexcept { return domains.size(); }
  const Samples& shard(std::size_t client, std::size_t task) const { return shards[streams[client][task]][client].train; }
  const Samples& test_set(std::size_t client, std::size_t task) const { return domains[streams[client][task]].test; }
};

using Event = nlohmann::ordered_json;

struct RoundInfo {
  std::size_t task = 0;
  std::size_t round = 0;  // 1-based within the task
};

using RoundObserver = std::function<void(const RoundInfo&, const PersonalModel& global)>;

struct RunContext {
  std::size_t threads = 1;
  RoundObserver observer;
  std::function<void(const Event&)> on_event;
};

/// Global parameters of the task currently being trained.
struct GlobalModelSlot {
  std::size_t task_id = 0;
  std::optional<PersonalModel> parameters;
  std::size_t round = 0;
};

inline LocalTrainSpec local_spec(const FederationConfig& cfg, const ModeTraits& traits) {
  LocalTrainSpec spec;
  spec.epochs = cfg.local_epochs;
  spec.lr = cfg.lr;
  spec.weight_decay = cfg.weight_decay;
  spec.batch_size = cfg.batch_size;
  spec.train_aux = traits.train_aux;
  spec.knowledge_migration = traits.knowledge_migration;
  spec.negatives = cfg.negatives;
  spec.seed = cfg.seed;
  return spec;
}

inline Event matching_event(std::size_t client, std::size_t task, const MatchingReport& r) {
  Event e;
  e["type"] = "matching";
  e["client"] = client;
  e["task"] = task;
  e["rho"] = r.rho;
  e["lambda"] = r.lambda;
  e["decision"] = r.decision.is_reuse() ? "reuse" : "new_model";
  if (r.decision.is_reuse()) e["model_index"] = r.decision.model_index;
  e["budget_forced"] = r.budget_forced;
  return e;
}

/// All clients must have run begin_task for `task_index`. Runs T rounds of
/// {sample, broadcast, local train, aggregate} and hands the final global to
/// every participating client.
inline void run_task(const FederationConfig& cfg, std::size_t task_index, std::vector<ClientState>& clients,
                     GlobalModelSlot& slot, const ExperimentData& data, const RunContext& ctx) {
  const ModeTraits traits = mode_traits(cfg);
  const LocalTrainSpec spec = local_spec(cfg, traits);
  const bool frozen = traits.frozen_after_first_task && task_index > 0;
  slot = GlobalModelSlot{task_index, std::nullopt, 0};

  for (std::size_t r = 1; r <= cfg.rounds_per_task; ++r) {
    Event ev;
    ev["type"] = "round";
    ev["round"] = r;
    ev["task"] = task_index;
    ev["mode"] = to_string(cfg.mode);
    if (frozen) {
      ev["sampled_clients"] = nlohmann::ordered_json::array();
      ev["train_loss_mean"] = nullptr;
      ev["global_param_norm"] = nullptr;
      ev["frozen"] = true;
      if (ctx.on_event) ctx.on_event(ev);
      continue;
    }
    Rng rng(derive_seed(cfg.seed, Stream::sampling, {task_index, r}));
    const auto sampled = sample_clients(clients.size(), cfg.active_fraction, rng);

    std::vector<std::optional<LocalUpdate>> results(sampled.size());
    const PersonalModel* broadcast = slot.parameters ? &*slot.parameters : nullptr;
    parallel_for(sampled.size(), ctx.threads, [&](std::size_t i) {
      const std::size_t k = sampled[i];
      results[i] = local_train_round(clients[k], broadcast, data.shard(k, task_index), spec, static_cast<int>(r));
    });

    std::vector<LocalUpdate> updates;
    for (auto& u : results)
      if (u) updates.push_back(std::move(*u));

    ev["sampled_clients"] = sampled;
    if (updates.empty()) {
      Event warn;
      warn["type"] = "warning";
      warn["kind"] = "no_active_clients";
      warn["task"] = task_index;
      warn["round"] = r;
      if (ctx.on_event) ctx.on_event(warn);
      ev["train_loss_mean"] = nullptr;
    } else {
      double loss = 0.0;
      for (const auto& u : updates) loss += u.train_loss;
      ev["train_loss_mean"] = loss / static_cast<double>(updates.size());
      slot.parameters = aggregate(updates);
      slot.round = r;
    }
    ev["global_param_norm"] =
        slot.parameters ? nlohmann::ordered_json(std::sqrt(squared_norm(slot.parameters->values()))) : nullptr;
    if (ctx.on_event) ctx.on_event(ev);
    if (ctx.observer && slot.parameters) ctx.observer(RoundInfo{task_index, r}, *slot.parameters);
  }

  for (auto& c : clients) {
    const bool participated = c.current_task.has_value();
    finish_task(c, slot.parameters ? &*slot.parameters : nullptr);
    if (traits.inherit_trunk && participated && !c.task_bindings.empty()) {
      // Sharing: one physical trunk; every head now sits on the newest one.
      const auto& newest = c.pool[c.task_bindings.rbegin()->second];
      const auto range = newest.layout().trunk_range();
      const std::vector<double> trunk(newest.values(range).begin(), newest.values(range).end());
      for (auto& m : c.pool) std::copy(trunk.begin(), trunk.end(), m.values(range).begin());
    }
  }
}

/// Parameters a client has to store under `mode` (unused aux heads excluded,
/// the Sharing trunk counted once).
inline std::size_t stored_parameter_count(const ClientState& c, const FederationConfig& cfg) {
  if (c.pool.empty()) return 0;
  const auto& layout = c.pool.front().layout();
  const std::size_t trunk = layout.trunk_range().size();
  const std::size_t cls = layout.cls_range().size();
  const std::size_t aux = layout.aux_range().size();
  const bool aux_used = mode_traits(cfg).train_aux;
  const std::size_t d = c.pool.size();
  if (cfg.mode == Mode::sharing) return trunk + d * cls;
  return d * (trunk + cls + (aux_used ? aux : 0));
}

struct ExperimentResult {
  MetricsMatrix metrics;
  std::vector<std::vector<ClientState>> states_after_task;  // [task][client]
  std::vector<Event> events;
  double pool_size_mean = 0.0;
  double param_count_mean = 0.0;
  std::size_t param_count_total = 0;  // over all clients
};

/// Evaluates every client after task `n` and appends row n of its grid.
inline void evaluate_after_task(const FederationConfig& cfg, std::size_t n, const std::vector<ClientState>& clients,
                                const ExperimentData& data, std::vector<ClientEvaluation>& grids,
                                std::size_t threads) {
  const InferenceRule rule = mode_traits(cfg).inference;
  std::vector<std::vector<double>> rows(clients.size());
  parallel_for(clients.size(), threads, [&](std::size_t k) {
    std::vector<const Samples*> tests;
    for (std::size_t m = 0; m <= n; ++m) tests.push_back(&data.test_set(k, m));
    rows[k] = evaluate_client(clients[k], rule, tests);
  });
  for (std::size_t k = 0; k < clients.size(); ++k) {
    grids[k].accuracy.push_back(std::move(rows[k]));
    if (grids[k].weights.size() <= n) grids[k].weights.push_back(static_cast<double>(data.test_set(k, n).size()));
  }
}

/// Empirical objective: mean inference loss over every client's training
/// samples of every task, under the final pools.
inline double global_objective(const FederationConfig& cfg, const std::vector<ClientState>& clients,
                               const ExperimentData& data, std::size_t threads) {
  const InferenceRule rule = mode_traits(cfg).inference;
  std::vector<double> sums(clients.size(), 0.0);
  std::vector<std::size_t> counts(clients.size(), 0);
  parallel_for(clients.size(), threads, [&](std::size_t k) {
    for (std::size_t m = 0; m < data.num_tasks(); ++m) {
      const auto& shard = data.shard(k, m);
      sums[k] += inference_loss_sum(clients[k], rule, static_cast<int>(m), shard);
      counts[k] += shard.size();
    }
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    total += sums[k];
    n += counts[k];
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

inline MetricsMatrix metrics_from_states(const FederationConfig& cfg,
                                         const std::vector<std::vector<ClientState>>& states_after_task,
                                         const ExperimentData& data, std::size_t threads) {
  if (states_after_task.empty()) throw InvariantError("no task checkpoints");
  std::vector<ClientEvaluation> grids(states_after_task.front().size());
  for (std::size_t n = 0; n < states_after_task.size(); ++n)
    evaluate_after_task(cfg, n, states_after_task[n], data, grids, threads);
  auto mm = build_metrics(grids);
  mm.global_objective = global_objective(cfg, states_after_task.back(), data, threads);
  return mm;
}

inline void validate(const FederationConfig& cfg) {
  if (cfg.num_clients == 0) throw InputError("num_clients must be at least 1");
  if (!(cfg.active_fraction > 0.0 && cfg.active_fraction <= 1.0))
    throw InputError("active_fraction must be in (0, 1]");
  if (cfg.rounds_per_task == 0) throw InputError("rounds_per_task must be at least 1");
  if (cfg.batch_size == 0) throw InputError("batch_size must be positive");
  if (!(cfg.lr > 0.0)) throw InputError("lr must be positive");
  if (!(cfg.weight_decay >= 0.0)) throw InputError("weight_decay must be non-negative");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw InputError("lambda must be in [0, 1]");
  if (!(cfg.alpha > 0.0)) throw InputError("alpha must be positive");
  if (cfg.max_pool_size == 0) throw InputError("max_pool_size must be at least 1");
  cfg.negatives.validate();
}

/// Experiment driver: sequential tasks, each through run_task, with
/// evaluation after every task.
inline ExperimentResult run_experiment(const FederationConfig& cfg, const ArchSpec& arch, const ExperimentData& data,
                                       const RunContext& ctx = {}) {
  validate(cfg);
  if (data.num_tasks() == 0) throw InputError("run_experiment: no tasks");
  if (data.streams.size() != cfg.num_clients) throw InputError("run_experiment: stream count != num_clients");
  const ModeTraits traits = mode_traits(cfg);

  ExperimentResult result;
  auto emit = [&](const Event& e) {
    result.events.push_back(e);
    if (ctx.on_event) ctx.on_event(e);
  };
  RunContext inner = ctx;
  inner.on_event = emit;

  std::vector<ClientState> clients(cfg.num_clients);
  for (std::size_t k = 0; k < clients.size(); ++k) clients[k].client_id = k;
  std::vector<ClientEvaluation> grids(cfg.num_clients);
  GlobalModelSlot slot;

  for (std::size_t t = 0; t < data.num_tasks(); ++t) {
    TaskSetup setup;
    setup.policy = traits.policy;
    setup.lambda = cfg.lambda;
    setup.max_pool_size = cfg.max_pool_size;
    setup.km_include_self = cfg.km_include_self;
    setup.inherit_trunk = traits.inherit_trunk;
    setup.arch = arch;
    setup.init_seed = derive_seed(cfg.seed, Stream::model_init, {t});
    for (std::size_t k = 0; k < clients.size(); ++k) {
      const auto report = begin_task(clients[k], static_cast<int>(t), data.shard(k, t), setup);
      if (!report) {
        Event warn;
        warn["type"] = "warning";
        warn["kind"] = "empty_shard";
        warn["client"] = k;
        warn["task"] = t;
        emit(warn);
      } else if (cfg.mode == Mode::pfeddil) {
        emit(matching_event(k, t, *report));
      }
    }
    run_task(cfg, t, clients, slot, data, inner);
    evaluate_after_task(cfg, t, clients, data, grids, ctx.threads);
    result.states_after_task.push_back(clients);
  }

  result.metrics = build_metrics(grids);
  result.metrics.global_objective = global_objective(cfg, clients, data, ctx.threads);
  double pool = 0.0, params = 0.0;
  for (const auto& c : clients) {
    pool += static_cast<double>(c.pool.size());
    const std::size_t n = stored_parameter_count(c, cfg);
    params += static_cast<double>(n);
    result.param_count_total += n;
  }
  result.pool_size_mean = pool / static_cast<double>(clients.size());
  result.param_count_mean = params / static_cast<double>(clients.size());
  return result;
}

}  // namespace pfdil
