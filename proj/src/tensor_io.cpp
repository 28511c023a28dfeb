#include "avdet/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace avd {

namespace {

constexpr char kMagic[4] = {'F', 'F', 'T', '1'};
constexpr int kMaxRank = 16;
constexpr std::size_t kMaxNumel = 1ull << 32;

std::string offset_after_failed_read(std::istream& is) {
  is.clear();
  const auto pos = is.tellg();
  return pos < 0 ? std::string("unknown offset")
                 : "byte " + std::to_string(static_cast<long long>(pos));
}

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

std::uint32_t load_le32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t load_le64(const unsigned char* b) {
  return static_cast<std::uint64_t>(load_le32(b)) |
         (static_cast<std::uint64_t>(load_le32(b + 4)) << 32);
}

void store_le32(unsigned char* b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}

void store_le64(unsigned char* b, std::uint64_t v) {
  store_le32(b, static_cast<std::uint32_t>(v));
  store_le32(b + 4, static_cast<std::uint32_t>(v >> 32));
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_bytes(os, &v, 1); }

void write_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
  write_bytes(os, b, 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  store_le32(b, v);
  write_bytes(os, b, 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  store_le64(b, v);
  write_bytes(os, b, 8);
}

void read_exact(std::istream& is, char* buf, std::size_t n) {
  is.read(buf, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError("truncated input: wanted " + std::to_string(n) + " more bytes at " +
                      offset_after_failed_read(is));
}

std::uint8_t read_u8(std::istream& is) {
  char b;
  read_exact(is, &b, 1);
  return static_cast<std::uint8_t>(b);
}

std::uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  read_exact(is, reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4);
  return load_le32(b);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  read_exact(is, reinterpret_cast<char*>(b), 8);
  return load_le64(b);
}

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  write_bytes(os, kMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int e : t.shape()) write_u32(os, static_cast<std::uint32_t>(e));
  write_u8(os, static_cast<std::uint8_t>(dtype));
  const auto& v = t.data();
  const std::size_t elem = dtype == DType::F64 ? 8 : 4;
  std::vector<unsigned char> payload(v.size() * elem);
  if (dtype == DType::F64) {
    for (std::size_t i = 0; i < v.size(); ++i)
      store_le64(payload.data() + 8 * i, std::bit_cast<std::uint64_t>(v[i]));
  } else {
    for (std::size_t i = 0; i < v.size(); ++i)
      store_le32(payload.data() + 4 * i, std::bit_cast<std::uint32_t>(static_cast<float>(v[i])));
  }
  write_bytes(os, payload.data(), payload.size());
}

Tensor read_tensor(std::istream& is, DType* dtype_out) {
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("bad tensor magic at " + offset_after_failed_read(is) +
                      ": expected 'FFT1'");
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > kMaxRank)
    throw FormatError("implausible tensor rank " + std::to_string(rank) + " at " +
                      offset_after_failed_read(is));
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t e = read_u32(is);
    if (e == 0) throw FormatError("zero extent in tensor header at " + offset_after_failed_read(is));
    shape[i] = static_cast<int>(e);
    numel *= e;
    if (numel > kMaxNumel)
      throw FormatError("implausible tensor size at " + offset_after_failed_read(is));
  }
  const std::uint8_t tag = read_u8(is);
  if (tag > 1)
    throw FormatError("unknown dtype tag " + std::to_string(tag) + " at " +
                      offset_after_failed_read(is));
  const DType dtype = static_cast<DType>(tag);
  if (dtype_out) *dtype_out = dtype;

  const std::size_t elem = dtype == DType::F64 ? 8 : 4;
  std::vector<unsigned char> payload(numel * elem);
  read_exact(is, reinterpret_cast<char*>(payload.data()), payload.size());
  std::vector<double> data(numel);
  if (dtype == DType::F64) {
    for (std::size_t i = 0; i < numel; ++i)
      data[i] = std::bit_cast<double>(load_le64(payload.data() + 8 * i));
  } else {
    for (std::size_t i = 0; i < numel; ++i)
      data[i] = static_cast<double>(std::bit_cast<float>(load_le32(payload.data() + 4 * i)));
  }
  return Tensor::from(std::move(shape), std::move(data));
}

}  // namespace avd
