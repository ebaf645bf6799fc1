// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "matq/common.hpp"

namespace matq {

// MSB slicing of a c-bit code down to r bits:
//   S(q, r) = clamp(round(q / 2^(c-r)), 0, 2^r - 1) * 2^(c-r)
// The rounding "pushes" a value into the next bucket when the first dropped
// bit is set, so small magnitudes are not truncated to the bottom code.

inline void check_slice_args(int q, int c, int r) {
  check_bits(c, "slice");
  if (r < kMinBits) throw Error("slice: target bit-width " + std::to_string(r) + " below 2");
  if (r > c) throw Error("cannot slice upward: r=" + std::to_string(r) + " > c=" + std::to_string(c));
  if (q < 0 || q > max_code(c))
    throw Error("slice: code " + std::to_string(q) + " out of range for " + std::to_string(c) + " bits");
}

/// Sliced code expressed on the master grid (a multiple of 2^(c-r)).
inline int slice_code(int q, int c, int r) {
  check_slice_args(q, c, r);
  const int shift = c - r;
  if (shift == 0) return q;
  // q is non-negative, so half-up equals half-away-from-zero.
  const int k = std::min((q + (1 << (shift - 1))) >> shift, max_code(r));
  return k << shift;
}

/// Sliced code as an r-bit integer.
inline int slice_to_code(int q, int c, int r) { return slice_code(q, c, r) >> (c - r); }

}  // namespace matq
