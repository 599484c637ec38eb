// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace mambamoe::detail {

// Little-endian encode/decode of trivially copyable scalars, independent of
// host byte order.
template <typename Bits, typename T>
void write_le(std::ostream& os, std::span<const T> data) {
  static_assert(sizeof(Bits) == sizeof(T));
  std::vector<unsigned char> buf(data.size() * sizeof(T));
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Bits bits = std::bit_cast<Bits>(data[i]);
    for (std::size_t b = 0; b < sizeof(T); ++b) buf[i * sizeof(T) + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

/// False if the stream ran out before out was filled.
template <typename Bits, typename T>
bool read_le(std::istream& is, std::span<T> out) {
  static_assert(sizeof(Bits) == sizeof(T));
  std::vector<unsigned char> buf(out.size() * sizeof(T));
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) return false;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<Bits>(static_cast<Bits>(buf[i * sizeof(T) + b]) << (8 * b));
    out[i] = std::bit_cast<T>(bits);
  }
  return true;
}

}  // namespace mambamoe::detail
