#pragma once

// Byte-level helpers shared by the binary parameter and state formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "use/errors.hpp"

namespace use {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(std::span<const std::byte> bytes) {
    for (std::byte b : bytes) {
      hash_ ^= static_cast<std::uint64_t>(b);
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view text) { update(std::as_bytes(std::span(text.data(), text.size()))); }
  template <typename T>
  void update_value(const T& v) {
    update(std::as_bytes(std::span(&v, 1)));
  }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline std::string to_hex(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

inline std::uint64_t from_hex(std::string_view s) {
  if (s.empty() || s.size() > 16) throw FormatError("bad hex value '" + std::string(s) + "'");
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') {
      v |= static_cast<std::uint64_t>(c - '0');
    } else if (c >= 'a' && c <= 'f') {
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    } else {
      throw FormatError("bad hex value '" + std::string(s) + "'");
    }
  }
  return v;
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, std::string_view what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("truncated record while reading " + std::string(what));
  return v;
}

inline void write_string(std::ostream& out, std::string_view s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, std::string_view what, std::uint32_t max_len = 1u << 20) {
  const auto n = read_pod<std::uint32_t>(in, what);
  if (n > max_len) throw FormatError("implausible length " + std::to_string(n) + " for " + std::string(what));
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError("truncated record while reading " + std::string(what));
  return s;
}

}  // namespace use
