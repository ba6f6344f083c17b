#pragma once

// Little-endian binary primitives shared by the dataset and model formats.
// Byte order is pinned explicitly so files are portable across platforms.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "gsh/errors.hpp"

namespace gsh::bio {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError(IoErrorCode::io_failure, "write failed");
}

inline void read_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw IoError(IoErrorCode::truncated, "unexpected end of stream");
}

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>(
        (static_cast<std::make_unsigned_t<T>>(v) >> (8 * i)) & 0xff);
  write_bytes(out, buf, sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  read_bytes(in, buf, sizeof(T));
  std::make_unsigned_t<T> v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

inline void write_f32(std::ostream& out, float v) {
  write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

inline float read_f32(std::istream& in) {
  return std::bit_cast<float>(read_le<std::uint32_t>(in));
}

inline void write_f64(std::ostream& out, double v) {
  write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline double read_f64(std::istream& in) {
  return std::bit_cast<double>(read_le<std::uint64_t>(in));
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) {
  write_bytes(out, magic, 4);
}

inline void expect_magic(std::istream& in, const char (&magic)[5],
                         const std::string& what) {
  char buf[4];
  read_bytes(in, buf, 4);
  if (std::memcmp(buf, magic, 4) != 0)
    throw IoError(IoErrorCode::bad_magic, what + ": bad magic");
}

}  // namespace gsh::bio
