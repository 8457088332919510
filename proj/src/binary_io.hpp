#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace unifier::detail {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; add byte swapping for this target");

template <typename T>
  requires std::is_arithmetic_v<T>
void write_le(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
  requires std::is_arithmetic_v<T>
T read_le(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw std::runtime_error("unexpected end of binary file");
  }
  return value;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = read_le<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw std::runtime_error("unexpected end of binary file");
  return s;
}

inline void write_varint(std::ostream& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.put(static_cast<char>((v & 0x7f) | 0x80));
    v >>= 7;
  }
  out.put(static_cast<char>(v));
}

inline std::uint64_t read_varint(std::istream& in) {
  std::uint64_t v = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw std::runtime_error("truncated varint");
    v |= static_cast<std::uint64_t>(c & 0x7f) << shift;
    if ((c & 0x80) == 0) return v;
  }
  throw std::runtime_error("varint too long");
}

inline void write_magic(std::ostream& out, const char (&magic)[9], std::uint32_t version) {
  out.write(magic, 8);
  write_le(out, version);
}

/// Returns the stored version; throws when the magic does not match.
inline std::uint32_t read_magic(std::istream& in, const char (&magic)[9], const std::string& what) {
  char buf[8];
  if (!in.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw std::runtime_error(what + ": bad magic header");
  }
  return read_le<std::uint32_t>(in);
}

}  // namespace unifier::detail
