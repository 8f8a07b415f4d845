#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace nvf {

// CRC32C (Castagnoli polynomial), table driven.
uint32_t crc32c(std::span<const uint8_t> data, uint32_t seed = 0);

}  // namespace nvf
