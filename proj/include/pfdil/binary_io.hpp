#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "pfdil/error.hpp"

namespace pfdil::io {

// Little-endian primitive encoding shared by every binary record we write.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  void magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

  void u32(std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out_.write(b.data(), 4);
  }

  void u64(std::uint64_t v) {
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    out_.write(b.data(), 8);
  }

  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void f64s(std::span<const double> values) {
    for (double v : values) f64(v);
  }

  void check() const {
    if (!out_) throw DataError("binary write failed");
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string context) : in_(in), context_(std::move(context)) {}

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in_ || got != tag) throw DataError(context_ + ": bad magic, expected \"" + std::string(tag) + "\"");
  }

  std::uint32_t u32() {
    std::array<unsigned char, 4> b{};
    read(b.data(), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::array<unsigned char, 8> b{};
    read(b.data(), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }

  const std::string& context() const noexcept { return context_; }

 private:
  void read(unsigned char* dst, std::streamsize n) {
    in_.read(reinterpret_cast<char*>(dst), n);
    if (in_.gcount() != n) throw DataError(context_ + ": unexpected end of file");
  }

  std::istream& in_;
  std::string context_;
};

/// FNV-1a over a byte string; used for dataset and config fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace pfdil::io
