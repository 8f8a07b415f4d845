#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace nvf {

// All on-NVM encodings are little-endian fixed width.
inline void store_u16(uint8_t* p, uint16_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
}
inline void store_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = uint8_t(v >> (8 * i));
}
inline void store_u64(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = uint8_t(v >> (8 * i));
}
inline uint16_t load_u16(const uint8_t* p) {
  return uint16_t(p[0]) | uint16_t(p[1]) << 8;
}
inline uint32_t load_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(p[i]) << (8 * i);
  return v;
}
inline uint64_t load_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

using Bytes = std::vector<uint8_t>;

inline Bytes to_bytes_u64(uint64_t v) {
  Bytes b(8);
  store_u64(b.data(), v);
  return b;
}

// Append helpers for record builders.
inline void put_u8(Bytes& b, uint8_t v) { b.push_back(v); }
inline void put_u16(Bytes& b, uint16_t v) {
  b.resize(b.size() + 2);
  store_u16(b.data() + b.size() - 2, v);
}
inline void put_u32(Bytes& b, uint32_t v) {
  b.resize(b.size() + 4);
  store_u32(b.data() + b.size() - 4, v);
}
inline void put_u64(Bytes& b, uint64_t v) {
  b.resize(b.size() + 8);
  store_u64(b.data() + b.size() - 8, v);
}
inline void put_bytes(Bytes& b, std::span<const uint8_t> s) {
  b.insert(b.end(), s.begin(), s.end());
}

}  // namespace nvf
