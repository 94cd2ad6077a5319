#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "usrn/error.hpp"

namespace usrn::io {

// Little-endian encoding independent of host byte order.

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void write_i32(std::ostream& os, std::int32_t v) { write_u32(os, static_cast<std::uint32_t>(v)); }

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void read_exact(std::istream& is, char* buf, std::size_t n) {
  is.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw DataError("unexpected end of binary stream");
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline std::int32_t read_i32(std::istream& is) { return static_cast<std::int32_t>(read_u32(is)); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  char buf[16];
  read_exact(is, buf, magic.size());
  if (std::string_view(buf, magic.size()) != magic)
    throw DataError("bad magic bytes, expected " + std::string(magic));
}

/// 64-bit FNV-1a, used for content hashes in manifests and split checks.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ull;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string hex64(std::uint64_t v);

}  // namespace usrn::io
