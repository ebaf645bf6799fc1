// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "matq/code.hpp"
#include "matq/common.hpp"

namespace matq {

// Bit-plane storage for 2/3/4-bit codes. Every run of 32 consecutive weights in
// a row is one pack unit:
//   base     64-bit word, weight i at bits [2i, 2i+1] holding code bits 0 and 1
//   plane_b2 32-bit word, bit i = code bit 2 of weight i (bits >= 3 only)
//   plane_b3 32-bit word, bit i = code bit 3 of weight i (bits == 4 only)
// A 2-bit tensor is the base plane alone, so every width shares one layout and
// costs exactly `bits` bits per (padded) weight.

inline constexpr std::size_t kPackUnit = 32;
inline constexpr std::size_t kInterleaveRows = 4;

enum class Layout : std::uint8_t { canonical = 0, interleaved = 1 };

/// Spread the 32 bits of x onto the even bit positions of a 64-bit word.
constexpr std::uint64_t spread_even(std::uint32_t x) noexcept {
  std::uint64_t v = x;
  v = (v | (v << 16)) & 0x0000FFFF0000FFFFull;
  v = (v | (v << 8)) & 0x00FF00FF00FF00FFull;
  v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0Full;
  v = (v | (v << 2)) & 0x3333333333333333ull;
  v = (v | (v << 1)) & 0x5555555555555555ull;
  return v;
}

/// Inverse of spread_even: gather the even bits of v.
constexpr std::uint32_t gather_even(std::uint64_t v) noexcept {
  v &= 0x5555555555555555ull;
  v = (v | (v >> 1)) & 0x3333333333333333ull;
  v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0Full;
  v = (v | (v >> 4)) & 0x00FF00FF00FF00FFull;
  v = (v | (v >> 8)) & 0x0000FFFF0000FFFFull;
  v = (v | (v >> 16)) & 0x00000000FFFFFFFFull;
  return static_cast<std::uint32_t>(v);
}

constexpr std::size_t padded_columns(std::size_t cols) noexcept {
  return (cols + kPackUnit - 1) / kPackUnit * kPackUnit;
}

/// The four bit planes of one pack unit; plane k bit i = bit k of weight i's code.
using UnitPlanes = std::array<std::uint32_t, 4>;

struct PackedTensor {
  int bits = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t padded_cols = 0;
  std::vector<std::uint64_t> base;
  std::vector<std::uint32_t> plane_b2;
  std::vector<std::uint32_t> plane_b3;
  Layout layout = Layout::canonical;

  std::size_t words_per_row() const noexcept { return padded_cols / kPackUnit; }

  std::size_t storage_rows() const noexcept {
    return layout == Layout::canonical ? rows : (rows + kInterleaveRows - 1) / kInterleaveRows * kInterleaveRows;
  }

  std::size_t word_count() const noexcept { return storage_rows() * words_per_row(); }

  std::size_t word_index(std::size_t row, std::size_t word) const noexcept {
    if (layout == Layout::canonical) return row * words_per_row() + word;
    return (row / kInterleaveRows) * words_per_row() * kInterleaveRows + word * kInterleaveRows +
           row % kInterleaveRows;
  }

  /// Payload size in bytes (planes only).
  std::size_t payload_bytes() const noexcept {
    return base.size() * sizeof(std::uint64_t) + (plane_b2.size() + plane_b3.size()) * sizeof(std::uint32_t);
  }

  UnitPlanes unit(std::size_t row, std::size_t word) const noexcept {
    const std::size_t idx = word_index(row, word);
    const std::uint64_t b = base[idx];
    return {gather_even(b), gather_even(b >> 1), bits >= 3 ? plane_b2[idx] : 0u, bits == 4 ? plane_b3[idx] : 0u};
  }

  void set_unit(std::size_t row, std::size_t word, const UnitPlanes& p) noexcept {
    const std::size_t idx = word_index(row, word);
    base[idx] = spread_even(p[0]) | (spread_even(p[1]) << 1);
    if (bits >= 3) plane_b2[idx] = p[2];
    if (bits == 4) plane_b3[idx] = p[3];
  }

  void validate() const {
    if (bits < 2 || bits > 4) throw Error("packed tensor: unsupported bits " + std::to_string(bits));
    if (padded_cols != padded_columns(cols)) throw Error("packed tensor: corrupted plane lengths (padding)");
    const std::size_t n = word_count();
    if (base.size() != n || plane_b2.size() != (bits >= 3 ? n : 0) || plane_b3.size() != (bits == 4 ? n : 0))
      throw Error("packed tensor: corrupted plane lengths");
  }

  friend bool operator==(const PackedTensor&, const PackedTensor&) = default;
};

inline PackedTensor make_packed(int bits, std::size_t rows, std::size_t cols, Layout layout = Layout::canonical) {
  if (bits < 2 || bits > 4) throw Error("unsupported bits " + std::to_string(bits));
  PackedTensor p;
  p.bits = bits;
  p.rows = rows;
  p.cols = cols;
  p.padded_cols = padded_columns(cols);
  p.layout = layout;
  const std::size_t n = p.word_count();
  p.base.assign(n, 0);
  if (bits >= 3) p.plane_b2.assign(n, 0);
  if (bits == 4) p.plane_b3.assign(n, 0);
  return p;
}

inline PackedTensor pack(const CodeMatrix& codes, int bits) {
  PackedTensor p = make_packed(bits, codes.rows(), codes.cols());
  for (std::size_t r = 0; r < codes.rows(); ++r) {
    const auto row = codes.row(r);
    for (std::size_t w = 0; w < p.words_per_row(); ++w) {
      UnitPlanes planes{};
      for (std::size_t i = 0; i < kPackUnit; ++i) {
        const std::size_t c = w * kPackUnit + i;
        if (c >= codes.cols()) break;
        const unsigned q = row[c];
        if (q > static_cast<unsigned>(max_code(bits)))
          throw Error("pack: code " + std::to_string(q) + " overflows " + std::to_string(bits) + " bits");
        for (std::size_t k = 0; k < planes.size() && k < static_cast<std::size_t>(bits); ++k)
          planes[k] |= ((q >> k) & 1u) << i;
      }
      p.set_unit(r, w, planes);
    }
  }
  return p;
}

inline CodeMatrix unpack(const PackedTensor& p) {
  p.validate();
  CodeMatrix codes(p.rows, p.cols);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t w = 0; w < p.words_per_row(); ++w) {
      const UnitPlanes planes = p.unit(r, w);
      for (std::size_t i = 0; i < kPackUnit; ++i) {
        const std::size_t c = w * kPackUnit + i;
        if (c >= p.cols) break;
        unsigned q = 0;
        for (int k = 0; k < 4; ++k) q |= ((planes[k] >> i) & 1u) << k;
        codes(r, c) = static_cast<std::uint8_t>(q);
      }
    }
  return codes;
}

/// Round-to-nearest MSB slice of a 4-bit packed tensor, computed plane-wise:
/// the kept high bits plus the first dropped bit, saturating at 2^r - 1.
inline PackedTensor pack_slice(const PackedTensor& p, int r) {
  p.validate();
  if (r > p.bits) throw Error("cannot slice upward: r=" + std::to_string(r) + " > " + std::to_string(p.bits));
  if (p.bits != 4) throw Error("pack_slice: source must be 4-bit");
  if (r < 2) throw Error("pack_slice: target bit-width below 2");
  if (r == 4) return p;
  PackedTensor out = make_packed(r, p.rows, p.cols, p.layout);
  for (std::size_t row = 0; row < p.rows; ++row)
    for (std::size_t w = 0; w < p.words_per_row(); ++w) {
      const UnitPlanes in = p.unit(row, w);
      UnitPlanes res{};
      if (r == 3) {
        // (b3 b2 b1) + b0
        const std::uint32_t s1 = in[1] ^ in[0], c1 = in[1] & in[0];
        const std::uint32_t s2 = in[2] ^ c1, c2 = in[2] & c1;
        const std::uint32_t s3 = in[3] ^ c2, overflow = in[3] & c2;
        res = {s1 | overflow, s2 | overflow, s3 | overflow, 0u};
      } else {
        // (b3 b2) + b1
        const std::uint32_t s2 = in[2] ^ in[1], c2 = in[2] & in[1];
        const std::uint32_t s3 = in[3] ^ c2, overflow = in[3] & c2;
        res = {s2 | overflow, s3 | overflow, 0u, 0u};
      }
      out.set_unit(row, w, res);
    }
  return out;
}

/// Reorder words into tiles of kInterleaveRows rows, word-major within a tile.
inline PackedTensor with_layout(const PackedTensor& p, Layout layout) {
  p.validate();
  if (p.layout == layout) return p;
  PackedTensor out = make_packed(p.bits, p.rows, p.cols, layout);
  for (std::size_t r = 0; r < p.rows; ++r)
    for (std::size_t w = 0; w < p.words_per_row(); ++w) out.set_unit(r, w, p.unit(r, w));
  return out;
}

/// Theoretical payload: bits * rows * padded_cols / 8.
inline std::size_t theoretical_payload_bytes(int bits, std::size_t rows, std::size_t cols) noexcept {
  return static_cast<std::size_t>(bits) * rows * padded_columns(cols) / 8;
}

}  // namespace matq
