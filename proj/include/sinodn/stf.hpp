#ifndef SINODN_STF_HPP
#define SINODN_STF_HPP

// STF1 tensor files:
//   bytes 0-3  magic "STF1"
//   byte  4    dtype code (1 = float32, little-endian)
//   byte  5    ndim
//   ndim x u32 little-endian dims, then the row-major payload.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "sinodn/error.hpp"
#include "sinodn/grid.hpp"

namespace sinodn {

inline constexpr std::array<std::uint8_t, 4> kStfMagic{0x53, 0x54, 0x46, 0x31};
inline constexpr std::uint8_t kStfFloat32 = 1;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t d) { return a * d; });
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

} // namespace detail

/// Serialises a tensor to its STF1 byte representation.
inline std::vector<std::uint8_t> encode_stf(const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > 255)
    throw ConfigError("STF1: ndim must be in [1, 255]");
  if (t.element_count() != t.values.size())
    throw ConfigError("STF1: payload size does not match dims");
  std::vector<std::uint8_t> out(kStfMagic.begin(), kStfMagic.end());
  out.push_back(kStfFloat32);
  out.push_back(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims)
    detail::put_u32(out, d);
  out.reserve(out.size() + 4 * t.values.size());
  for (float v : t.values)
    detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

/// Parses one STF1 tensor starting at `bytes[offset]`; advances `offset`.
inline Tensor decode_stf(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
  auto need = [&](std::size_t n) {
    if (offset + n > bytes.size())
      throw IoError("STF1: truncated data");
  };
  need(6);
  if (!std::equal(kStfMagic.begin(), kStfMagic.end(), bytes.begin() + offset))
    throw IoError("STF1: bad magic");
  if (bytes[offset + 4] != kStfFloat32)
    throw IoError("STF1: unsupported dtype code " + std::to_string(bytes[offset + 4]));
  const std::size_t ndim = bytes[offset + 5];
  if (ndim == 0)
    throw IoError("STF1: zero-dimensional tensor");
  offset += 6;
  need(4 * ndim);
  Tensor t;
  for (std::size_t i = 0; i < ndim; ++i, offset += 4)
    t.dims.push_back(detail::get_u32(bytes.data() + offset));
  const std::size_t n = t.element_count();
  need(4 * n);
  t.values.resize(n);
  for (std::size_t i = 0; i < n; ++i, offset += 4)
    t.values[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + offset));
  return t;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw IoError("write failed for " + path.string());
}

inline Tensor read_stf(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t offset = 0;
  Tensor t = decode_stf(bytes, offset);
  if (offset != bytes.size())
    throw IoError("STF1: trailing bytes in " + path.string());
  return t;
}

inline void write_stf(const std::filesystem::path& path, const Tensor& t) {
  write_bytes(path, encode_stf(t));
}

template <class T>
Tensor to_tensor(const Grid<T>& g) {
  Tensor t;
  t.dims = {static_cast<std::uint32_t>(g.rows()), static_cast<std::uint32_t>(g.cols())};
  t.values.assign(g.begin(), g.end());
  return t;
}

inline Grid2d grid_from_tensor(const Tensor& t) {
  if (t.dims.size() != 2)
    throw IoError("expected a 2D tensor, got ndim=" + std::to_string(t.dims.size()));
  std::vector<double> v(t.values.begin(), t.values.end());
  return Grid2d(t.dims[0], t.dims[1], std::move(v));
}

inline Grid2d read_grid(const std::filesystem::path& path) { return grid_from_tensor(read_stf(path)); }

template <class T>
void write_grid(const std::filesystem::path& path, const Grid<T>& g) {
  write_stf(path, to_tensor(g));
}

} // namespace sinodn

#endif
