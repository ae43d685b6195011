#pragma once

// Binary checkpoint record for one PersonalModel:
//   "PFDL" | u32 version | u32 input_dim | u32 depth | u32 hidden[depth] | u32 num_classes
//   | f64 parameters (trunk -> cls_head -> aux_head, row-major weights then bias)
// All integers and floats little-endian.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "pfdil/binary_io.hpp"
#include "pfdil/nn.hpp"

namespace pfdil {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_arch(io::BinaryWriter& w, const ArchSpec& arch) {
  w.u32(static_cast<std::uint32_t>(arch.input_dim));
  w.u32(static_cast<std::uint32_t>(arch.hidden_dims.size()));
  for (std::size_t h : arch.hidden_dims) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(arch.num_classes));
}

inline ArchSpec read_arch(io::BinaryReader& r) {
  ArchSpec arch;
  arch.input_dim = r.u32();
  const std::uint32_t depth = r.u32();
  if (depth == 0 || depth > 64) throw DataError(r.context() + ": implausible trunk depth " + std::to_string(depth));
  arch.hidden_dims.resize(depth);
  for (auto& h : arch.hidden_dims) h = r.u32();
  arch.num_classes = r.u32();
  try {
    arch.validate();
  } catch (const InputError& e) {
    throw DataError(r.context() + ": " + e.what());
  }
  return arch;
}

inline void write_model(std::ostream& out, const PersonalModel& model) {
  io::BinaryWriter w(out);
  w.magic("PFDL");
  w.u32(kCheckpointVersion);
  write_arch(w, model.arch());
  w.f64s(model.values());
  w.check();
}

inline PersonalModel read_model(std::istream& in, const std::string& context = "checkpoint") {
  io::BinaryReader r(in, context);
  r.expect_magic("PFDL");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw DataError(context + ": unsupported checkpoint version " + std::to_string(version));
  PersonalModel model(read_arch(r));
  r.f64s(model.values());
  if (!all_finite(model.values())) throw DataError(context + ": non-finite parameter");
  return model;
}

inline void save_model(const std::filesystem::path& path, const PersonalModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_model(out, model);
}

inline PersonalModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_model(in, path.string());
}

}  // namespace pfdil
