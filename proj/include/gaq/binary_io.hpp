#pragma once

// Little-endian primitives shared by the EQPK and EQMD formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "gaq/error.hpp"

namespace gaq::bin {

template <typename U>
void write_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw Error(ErrorCode::FormatError, "unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
inline void write_u16(std::ostream& os, std::uint16_t v) { write_le(os, v); }
inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
inline std::uint16_t read_u16(std::istream& is) { return read_le<std::uint16_t>(is); }
inline std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }
inline void expect_magic(std::istream& is, std::string_view magic) {
  char buf[4];
  if (!is.read(buf, 4) || std::memcmp(buf, magic.data(), 4) != 0)
    throw Error(ErrorCode::FormatError, "bad magic, expected " + std::string(magic));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw Error(ErrorCode::FormatError, "string too long");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw Error(ErrorCode::FormatError, "unexpected end of file");
  return s;
}

}  // namespace gaq::bin
