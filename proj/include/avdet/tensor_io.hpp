#pragma once

#include <cstdint>
#include <iosfwd>

#include "avdet/tensor.hpp"

namespace avd {

// "FFT1" tensor blob: magic, rank (u32), extents (u32 each), dtype tag (u8),
// then the raw row-major payload. Everything little-endian. Shared by the
// corpus and checkpoint formats.
enum class DType : std::uint8_t { F64 = 0, F32 = 1 };

void write_tensor(std::ostream& os, const Tensor& t, DType dtype);

/// Reads one FFT1 blob. F32 payloads are widened to the 64-bit compute type
/// (exact). Corrupt or truncated input raises FormatError naming the byte
/// offset. dtype_out, when non-null, receives the on-disk type.
Tensor read_tensor(std::istream& is, DType* dtype_out = nullptr);

// Little-endian scalar helpers used by the container formats.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

/// Reads exactly n bytes or raises FormatError with the stream offset.
void read_exact(std::istream& is, char* buf, std::size_t n);

}  // namespace avd
