#pragma once

// Client state record, written once per (task, client) after evaluation:
//   "PFCS" | u32 version | u64 client_id | u32 pool_size | pool_size x model record
//   | u32 num_bindings | num_bindings x (i32 task, u32 pool_index)
// Model records use the checkpoint layout. A JSON sidecar carries the
// matching history, which evaluation does not need.

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "pfdil/checkpoint.hpp"
#include "pfdil/client.hpp"

namespace pfdil {

inline constexpr std::uint32_t kClientStateVersion = 1;

inline void write_client_state(std::ostream& out, const ClientState& state) {
  io::BinaryWriter w(out);
  w.magic("PFCS");
  w.u32(kClientStateVersion);
  w.u64(state.client_id);
  w.u32(static_cast<std::uint32_t>(state.pool.size()));
  for (const auto& m : state.pool) write_model(out, m);
  w.u32(static_cast<std::uint32_t>(state.task_bindings.size()));
  for (const auto& [task, index] : state.task_bindings) {
    w.i32(task);
    w.u32(static_cast<std::uint32_t>(index));
  }
  w.check();
}

inline ClientState read_client_state(std::istream& in, const std::string& context = "client state") {
  io::BinaryReader r(in, context);
  r.expect_magic("PFCS");
  if (const auto v = r.u32(); v != kClientStateVersion)
    throw DataError(context + ": unsupported client state version " + std::to_string(v));
  ClientState state;
  state.client_id = r.u64();
  const std::uint32_t pool_size = r.u32();
  if (pool_size > 4096) throw DataError(context + ": implausible pool size");
  for (std::uint32_t i = 0; i < pool_size; ++i) {
    state.pool.push_back(read_model(in, context));
    if (!state.pool.back().congruent_with(state.pool.front()))
      throw DataError(context + ": pool models have different architectures");
  }
  const std::uint32_t bindings = r.u32();
  for (std::uint32_t i = 0; i < bindings; ++i) {
    const int task = r.i32();
    const std::uint32_t index = r.u32();
    if (index >= pool_size) throw DataError(context + ": binding points outside the pool");
    state.task_bindings[task] = index;
  }
  return state;
}

inline nlohmann::ordered_json client_state_sidecar(const ClientState& state) {
  nlohmann::ordered_json j;
  j["client"] = state.client_id;
  j["pool_size"] = state.pool.size();
  auto& b = j["bindings"] = nlohmann::ordered_json::object();
  for (const auto& [task, index] : state.task_bindings) b[std::to_string(task)] = index;
  auto& hist = j["matching"] = nlohmann::ordered_json::array();
  for (const auto& [task, rep] : state.reports) {
    nlohmann::ordered_json e;
    e["task"] = task;
    e["rho"] = rep.rho;
    e["lambda"] = rep.lambda;
    e["decision"] = rep.decision.is_reuse() ? "reuse" : "new_model";
    e["model_index"] = rep.decision.model_index;
    e["budget_forced"] = rep.budget_forced;
    hist.push_back(std::move(e));
  }
  return j;
}

inline void save_client_state(const std::filesystem::path& path, const ClientState& state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_client_state(out, state);
}

inline ClientState load_client_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_client_state(in, path.string());
}

}  // namespace pfdil
