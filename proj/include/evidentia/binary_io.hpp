#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "evidentia/error.hpp"

namespace evidentia::io {

// Little-endian host assumed; every artifact begins with an 8-byte magic and
// a u32 format version.

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("truncated binary file");
  return value;
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 32)) throw DataError("corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("truncated binary file");
  return s;
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
void write_vector(std::ostream& out, const std::vector<T>& v) {
  write_pod<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
std::vector<T> read_vector(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (std::uint64_t{1} << 36) / sizeof(T)) throw DataError("corrupt vector length");
  std::vector<T> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw DataError("truncated binary file");
  return v;
}

inline void write_header(std::ostream& out, std::string_view magic, std::uint32_t version) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
  write_pod(out, version);
}

/// Reads and checks the magic; returns the stored version.
inline std::uint32_t read_header(std::istream& in, std::string_view magic,
                                 std::uint32_t max_version) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) {
    throw DataError("bad magic: expected " + std::string(magic));
  }
  const auto version = read_pod<std::uint32_t>(in);
  if (version == 0 || version > max_version) {
    throw DataError("unsupported " + std::string(magic) + " version " + std::to_string(version));
  }
  return version;
}

}  // namespace evidentia::io
