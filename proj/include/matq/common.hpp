// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace matq {

/// Error raised by every library operation on contract violation or numerical failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix with value semantics.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.flat()[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;
/// Integer quantization codes; master bit-widths never exceed 8.
using CodeMatrix = Matrix<std::uint8_t>;

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

constexpr int zero_code(int bits) noexcept { return 1 << (bits - 1); }
constexpr int max_code(int bits) noexcept { return (1 << bits) - 1; }

/// Round half away from zero (the only rounding mode used for quantization).
inline double round_half_away(double x) noexcept { return std::round(x); }

inline void check_bits(int bits, const char* what) {
  if (bits < kMinBits || bits > kMaxBits)
    throw Error(std::string(what) + ": bit-width " + std::to_string(bits) + " outside [2, 8]");
}

// Randomness. mt19937_64 is fully specified by the standard; the distributions
// below are written out so streams are identical across standard libraries.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) throw Error("uniform_index: empty range");
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline MatrixD random_normal(std::size_t rows, std::size_t cols, std::uint64_t seed,
                             double stddev = 1.0) {
  Rng rng(seed);
  MatrixD m(rows, cols);
  for (auto& v : m.flat()) v = stddev * standard_normal(rng);
  return m;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace matq
