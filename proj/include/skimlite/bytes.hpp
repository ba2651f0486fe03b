#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "skimlite/error.hpp"

namespace skimlite {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

// Little-endian fixed-width encoding. The hosts we target are little-endian;
// the static_assert keeps a big-endian port from silently producing garbage.
static_assert(std::endian::native == std::endian::little,
              "skimlite assumes a little-endian host");

template <typename T>
inline void put_le(Bytes& out, T value) {
  const auto pos = out.size();
  out.resize(pos + sizeof(T));
  std::memcpy(out.data() + pos, &value, sizeof(T));
}

inline void put_string(Bytes& out, std::string_view s) {
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

/// Bounds-checked little-endian reader over a byte view.
class ByteReader {
 public:
  explicit ByteReader(ByteView data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string() {
    const auto len = get<std::uint16_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw FormatError("truncated header: need " + std::to_string(n) +
                        " bytes at offset " + std::to_string(pos_));
    }
  }

  ByteView data_;
  std::size_t pos_ = 0;
};

}  // namespace skimlite
