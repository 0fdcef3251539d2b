#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flow4d {

/// Sweep interval of the LiDAR (10 Hz).
inline constexpr double kSweepInterval = 0.1;

/// Speed (m/s) at which a point counts as dynamic.
inline constexpr double kDynamicSpeed = 0.5;

using Coord3 = std::array<int32_t, 3>;
using Coord4 = std::array<int32_t, 4>;  // (w, l, h, t)

// Dense row-major matrix. Features, weights and gradients all use it.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0))
      : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
  T* row(std::size_t r) { return data.data() + r * cols; }
  const T* row(std::size_t r) const { return data.data() + r * cols; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Matrix&) const = default;
};

inline std::string shape_str(std::size_t r, std::size_t c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename T>
std::string shape_str(const Matrix<T>& m) {
  return shape_str(m.rows, m.cols);
}

// ---------------------------------------------------------------------------
// Little-endian binary blobs

namespace detail {

template <typename T>
T byteswap_value(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return v;
}

}  // namespace detail

template <typename T>
void append_le(std::string& out, std::span<const T> values) {
  const std::size_t base = out.size();
  out.resize(base + values.size() * sizeof(T));
  char* dst = out.data() + base;
  for (std::size_t i = 0; i < values.size(); ++i) {
    T v = values[i];
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      v = detail::byteswap_value(v);
    }
    std::memcpy(dst + i * sizeof(T), &v, sizeof(T));
  }
}

template <typename T>
std::vector<T> parse_le(const char* src, std::size_t count) {
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      v = detail::byteswap_value(v);
    }
    out[i] = v;
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

template <typename T>
void write_blob(const std::filesystem::path& path, std::span<const T> values) {
  std::string bytes;
  append_le(bytes, values);
  write_file(path, bytes);
}

/// Reads a blob of T, checking that its size is a whole multiple of `stride`
/// elements.
template <typename T>
std::vector<T> read_blob(const std::filesystem::path& path,
                         std::size_t stride = 1) {
  const std::string bytes = read_file(path);
  if (bytes.size() % (sizeof(T) * stride) != 0) {
    throw std::runtime_error(path.string() + ": size " +
                             std::to_string(bytes.size()) +
                             " is not a multiple of the record size");
  }
  return parse_le<T>(bytes.data(), bytes.size() / sizeof(T));
}

}  // namespace flow4d
