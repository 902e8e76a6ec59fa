#pragma once

// Flat binary arrays: 8-byte magic, u32 format version, u32 dtype, u32 rank,
// u64 extents, then little-endian row-major payload.

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/numerics/tensor.hpp"

namespace bev::io {

static_assert(std::endian::native == std::endian::little, "array files are written in native little-endian order");

inline constexpr std::array<char, 8> kArrayMagic = {'B', 'E', 'V', 'T', 'R', 'K', 'A', '1'};
inline constexpr std::uint32_t kArrayVersion = 1;

enum class DType : std::uint32_t { kF32 = 1, kF64 = 2, kI32 = 3, kU8 = 4 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI32: return 4;
    case DType::kU8: return 1;
  }
  throw IoError("unknown dtype");
}

struct ArrayFile {
  Shape shape;
  DType dtype = DType::kF64;
  std::vector<double> values;  // widened to f64 on read
};

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template <class T>
void append_pod(std::string& s, const T& v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  s.append(buf, sizeof(T));
}

inline std::string encode_array(const Shape& shape, std::span<const double> values, DType dtype) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) throw DimensionError("array payload does not match shape");
  std::string s(kArrayMagic.begin(), kArrayMagic.end());
  append_pod(s, kArrayVersion);
  append_pod(s, static_cast<std::uint32_t>(dtype));
  append_pod(s, static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) append_pod(s, static_cast<std::uint64_t>(e));
  s.reserve(s.size() + values.size() * dtype_size(dtype));
  for (double v : values) {
    switch (dtype) {
      case DType::kF32: append_pod(s, static_cast<float>(v)); break;
      case DType::kF64: append_pod(s, v); break;
      case DType::kI32: append_pod(s, static_cast<std::int32_t>(v)); break;
      case DType::kU8: append_pod(s, static_cast<std::uint8_t>(v)); break;
    }
  }
  return s;
}

inline ArrayFile decode_array(const std::string& bytes, const std::string& what = "array") {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw ChecksumError(what + ": truncated");
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  std::array<char, 8> magic{};
  take(magic.data(), 8);
  if (magic != kArrayMagic) throw IoError(what + ": bad magic");
  std::uint32_t version = 0, dtype = 0, rank = 0;
  take(&version, 4);
  if (version != kArrayVersion)
    throw VersionError(what + ": unsupported array version " + std::to_string(version));
  take(&dtype, 4);
  take(&rank, 4);
  if (dtype < 1 || dtype > 4) throw IoError(what + ": unknown dtype");
  if (rank == 0 || rank > 8) throw IoError(what + ": bad rank");
  ArrayFile out;
  out.dtype = static_cast<DType>(dtype);
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t e = 0;
    take(&e, 8);
    out.shape.push_back(static_cast<std::size_t>(e));
  }
  check_shape(out.shape);
  const std::size_t n = shape_numel(out.shape);
  if (bytes.size() - pos != n * dtype_size(out.dtype)) throw ChecksumError(what + ": payload size mismatch");
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (out.dtype) {
      case DType::kF32: { float v; take(&v, 4); out.values[i] = v; break; }
      case DType::kF64: { double v; take(&v, 8); out.values[i] = v; break; }
      case DType::kI32: { std::int32_t v; take(&v, 4); out.values[i] = v; break; }
      case DType::kU8: { std::uint8_t v; take(&v, 1); out.values[i] = v; break; }
    }
  }
  return out;
}

inline void write_array(const std::filesystem::path& path, const Shape& shape, std::span<const double> values,
                        DType dtype) {
  write_file(path, encode_array(shape, values, dtype));
}

inline ArrayFile read_array(const std::filesystem::path& path) { return decode_array(read_file(path), path.string()); }

inline void write_grid(const std::filesystem::path& path, const FeatureGrid& g, DType dtype = DType::kF32) {
  write_array(path, {g.height, g.width, g.channels}, g.values, dtype);
}

inline FeatureGrid read_grid(const std::filesystem::path& path) {
  auto a = read_array(path);
  if (a.shape.size() != 3) throw DimensionError(path.string() + ": expected an H x W x C grid");
  FeatureGrid g(a.shape[0], a.shape[1], a.shape[2]);
  g.values = std::move(a.values);
  return g;
}

}  // namespace bev::io
