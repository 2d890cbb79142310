#pragma once

// Little-endian scalar I/O for the binary blobs (network parameters, model
// checkpoints). Host byte order is swapped when needed.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "ctrl/common.hpp"

namespace ctrl::binio {

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_le(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated binary blob");
  return to_le(v);
}

inline void put_f64(std::ostream& out, double d) { put(out, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get<std::uint64_t>(in)); }

}  // namespace ctrl::binio
