#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>

#include "stdemand/common.hpp"

namespace stdemand::io {

// Little-endian primitive encoding shared by every on-disk format.
class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes.begin(), bytes.end());
    }
    out_.write(bytes.data(), sizeof(T));
  }

  void magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

  void raw(std::string_view bytes) { out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size())); }

  void string16(std::string_view s) {
    if (s.size() > 0xFFFF) throw DataError("string too long for u16 length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }

  bool ok() const { return static_cast<bool>(out_); }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    std::array<char, sizeof(T)> bytes;
    in_.read(bytes.data(), sizeof(T));
    if (!in_) throw DataError("unexpected end of file");
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes.begin(), bytes.end());
    }
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
  }

  void expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(tag.size()));
    if (!in_ || got != tag) throw DataError("bad magic: expected " + std::string(tag));
  }

  std::string raw(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw DataError("unexpected end of file");
    return s;
  }

  std::string string16() { return raw(get<std::uint16_t>()); }

  void expect_eof() {
    if (in_.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes after payload");
  }

 private:
  std::istream& in_;
};

}  // namespace stdemand::io
