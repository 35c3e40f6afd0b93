#pragma once

// CMF1 dense matrix container:
//   bytes 0-3   ASCII "CMF1"
//   bytes 4-7   row count, uint32 little-endian
//   bytes 8-11  column count, uint32 little-endian
//   then rows*cols IEEE-754 float32 little-endian values, row-major.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "cohesion/error.hpp"
#include "cohesion/matrix.hpp"

namespace cohesion::cmf {

inline constexpr std::array<char, 4> kMagic = {'C', 'M', 'F', '1'};

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<unsigned char>((v >> (8 * b)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

// Raw float32 payload as stored on disk.
struct RawMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;

  Matrix to_matrix() const {
    Matrix m(rows, cols);
    for (std::size_t k = 0; k < values.size(); ++k) m.values()[k] = values[k];
    return m;
  }
};

inline std::vector<unsigned char> encode(const RawMatrix& raw) {
  if (raw.values.size() != static_cast<std::size_t>(raw.rows) * raw.cols)
    throw ShapeError("cmf::encode: value count does not match rows*cols");
  std::vector<unsigned char> buf;
  buf.reserve(12 + 4 * raw.values.size());
  buf.insert(buf.end(), kMagic.begin(), kMagic.end());
  detail::put_u32(buf, raw.rows);
  detail::put_u32(buf, raw.cols);
  for (float f : raw.values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(f));
  return buf;
}

inline RawMatrix decode(const std::vector<unsigned char>& buf, const std::string& name = "<buffer>") {
  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic.data(), 4) != 0)
    throw FormatError(name + ": missing CMF1 magic");
  RawMatrix raw;
  raw.rows = detail::get_u32(buf.data() + 4);
  raw.cols = detail::get_u32(buf.data() + 8);
  const std::size_t count = static_cast<std::size_t>(raw.rows) * raw.cols;
  if (buf.size() != 12 + 4 * count)
    throw FormatError(name + ": payload size " + std::to_string(buf.size() - 12) +
                      " bytes, header promises " + std::to_string(4 * count));
  raw.values.resize(count);
  for (std::size_t k = 0; k < count; ++k)
    raw.values[k] = std::bit_cast<float>(detail::get_u32(buf.data() + 12 + 4 * k));
  return raw;
}

inline RawMatrix read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(buf, path.string());
}

inline void write_raw(const std::filesystem::path& path, const RawMatrix& raw) {
  const auto buf = encode(raw);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline RawMatrix to_raw(const Matrix& m) {
  if (m.rows() > std::numeric_limits<std::uint32_t>::max() ||
      m.cols() > std::numeric_limits<std::uint32_t>::max())
    throw ShapeError("cmf: matrix too large for a 32-bit header");
  RawMatrix raw{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), {}};
  raw.values.resize(m.size());
  for (std::size_t k = 0; k < m.size(); ++k) raw.values[k] = static_cast<float>(m.values()[k]);
  return raw;
}

inline Matrix read(const std::filesystem::path& path) { return read_raw(path).to_matrix(); }
inline void write(const std::filesystem::path& path, const Matrix& m) { write_raw(path, to_raw(m)); }

}  // namespace cohesion::cmf
