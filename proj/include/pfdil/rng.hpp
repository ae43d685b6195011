#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace pfdil {

using Rng = std::mt19937_64;
using RngSeed = std::uint64_t;

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named stream tags; every random draw in the simulator hangs off one of these
// so that results never depend on scheduling order.
enum class Stream : std::uint64_t {
  model_init = 1,
  base_data = 2,
  domain = 3,
  partition = 4,
  task_stream = 5,
  sampling = 6,
  local_epoch = 7,
  negatives = 8,
};

/// Derives a child seed from `base` and a path of tags. Order of tags matters.
inline RngSeed derive_seed(RngSeed base, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

inline RngSeed derive_seed(RngSeed base, Stream stream, std::initializer_list<std::uint64_t> tags = {}) noexcept {
  std::uint64_t h = derive_seed(base, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(RngSeed seed) { return Rng(seed); }

}  // namespace pfdil
