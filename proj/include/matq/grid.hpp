// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "matq/code.hpp"
#include "matq/common.hpp"

namespace matq {

/// Target bit-widths R with their importance weights; the master bit-width is max(R).
class BitWidthSet {
 public:
  BitWidthSet() = default;

  static BitWidthSet make(std::vector<int> bits, std::vector<double> lambdas) {
    if (bits.empty()) throw Error("bit-width set is empty");
    if (bits.size() != lambdas.size()) throw Error("lambda/bits length mismatch");
    std::vector<std::pair<int, double>> pairs;
    for (std::size_t i = 0; i < bits.size(); ++i) {
      check_bits(bits[i], "bit-width set");
      if (!(lambdas[i] > 0.0) || !std::isfinite(lambdas[i]))
        throw Error("lambda for " + std::to_string(bits[i]) + " bits must be positive and finite");
      pairs.emplace_back(bits[i], lambdas[i]);
    }
    std::sort(pairs.begin(), pairs.end());
    BitWidthSet s;
    for (const auto& [b, l] : pairs) {
      if (!s.targets_.empty() && s.targets_.back() == b)
        throw Error("duplicate bit-width " + std::to_string(b));
      s.targets_.push_back(b);
      s.lambdas_.push_back(l);
    }
    return s;
  }

  static BitWidthSet uniform(std::vector<int> bits) {
    std::vector<double> ones(bits.size(), 1.0);
    return make(std::move(bits), std::move(ones));
  }

  const std::vector<int>& targets() const noexcept { return targets_; }
  const std::vector<double>& lambdas() const noexcept { return lambdas_; }
  int master() const noexcept { return targets_.empty() ? 0 : targets_.back(); }
  std::size_t size() const noexcept { return targets_.size(); }
  bool single() const noexcept { return targets_.size() == 1; }

  bool contains(int r) const noexcept {
    return std::find(targets_.begin(), targets_.end(), r) != targets_.end();
  }

  friend bool operator==(const BitWidthSet&, const BitWidthSet&) = default;

 private:
  std::vector<int> targets_;
  std::vector<double> lambdas_;
};

inline constexpr double kScaleFloor = 1e-12;

/// Smallest float not below kScaleFloor.
inline float scale_floor_f32() noexcept {
  float f = static_cast<float>(kScaleFloor);
  while (static_cast<double>(f) < kScaleFloor) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

/// Scales are stored as 32-bit floats; everything computed from a scale uses the stored value.
inline float to_stored_scale(double s) noexcept {
  return std::max(static_cast<float>(s), scale_floor_f32());
}

inline double base_scale(double max_abs, int c) {
  check_bits(c, "base_scale");
  return std::max(max_abs / static_cast<double>(zero_code(c) - 1), kScaleFloor);
}

/// Round-to-nearest onto the c-bit symmetric grid.
inline int rtn(double w, double scale, int c) {
  if (!std::isfinite(w)) throw Error("non-finite weight");
  if (!(scale > 0.0)) throw Error("rtn: scale must be positive");
  const double v = round_half_away(w / scale + zero_code(c));
  return static_cast<int>(std::clamp(v, 0.0, static_cast<double>(max_code(c))));
}

/// Dequantize an r-bit code living on a c-bit grid with master scale `scale`.
inline double dequant(int code, double scale, int c, int r) {
  if (r > c) throw Error("dequant: r exceeds master bit-width");
  if (code < 0 || code > max_code(r))
    throw Error("dequant: code " + std::to_string(code) + " out of range for " + std::to_string(r) + " bits");
  return scale * static_cast<double>(1 << (c - r)) * static_cast<double>(code - zero_code(r));
}

/// Per-(row, group) symmetric grid at the master bit-width.
struct QuantGrid {
  int master_bits = 0;
  std::size_t group_size = 0;
  Matrix<float> scales;  // rows x ceil(cols / group_size)

  int zero_code() const noexcept { return matq::zero_code(master_bits); }
  std::size_t group_of(std::size_t col) const noexcept { return col / group_size; }
  double scale(std::size_t row, std::size_t col) const noexcept { return scales(row, col / group_size); }

  friend bool operator==(const QuantGrid&, const QuantGrid&) = default;
};

inline std::size_t group_count(std::size_t cols, std::size_t group_size) {
  return (cols + group_size - 1) / group_size;
}

struct ScaleSearch {
  double shrink_min = 0.5;
  int steps = 51;
};

/// For each target r, the master-grid offsets slice_code(q) - z for all q.
inline std::vector<std::vector<int>> slice_offset_table(const BitWidthSet& bits) {
  const int c = bits.master();
  std::vector<std::vector<int>> table;
  for (int r : bits.targets()) {
    std::vector<int> row(static_cast<std::size_t>(max_code(c)) + 1);
    for (int q = 0; q <= max_code(c); ++q) row[q] = slice_code(q, c, r) - zero_code(c);
    table.push_back(std::move(row));
  }
  return table;
}

/// Weighted multi-bit MSE of round-to-nearest codes for one group at scale `s`.
inline double group_objective(std::span<const double> w, double s, const BitWidthSet& bits,
                              const std::vector<std::vector<int>>& offsets) {
  const int c = bits.master();
  double total = 0.0;
  for (std::size_t k = 0; k < bits.size(); ++k) {
    double err = 0.0;
    for (double x : w) {
      const double d = x - s * offsets[k][rtn(x, s, c)];
      err += d * d;
    }
    total += bits.lambdas()[k] * err;
  }
  return total;
}

inline double group_objective(std::span<const double> w, double s, const BitWidthSet& bits) {
  return group_objective(w, s, bits, slice_offset_table(bits));
}

/// Shrink factors tried by the scale search, from 1 (max-abs scale) down to shrink_min.
inline std::vector<double> shrink_candidates(const ScaleSearch& search) {
  if (search.steps < 1) throw Error("scale search needs at least one step");
  std::vector<double> alphas(static_cast<std::size_t>(search.steps));
  for (int i = 0; i < search.steps; ++i)
    alphas[i] = search.steps == 1 ? 1.0 : 1.0 + (search.shrink_min - 1.0) * i / (search.steps - 1);
  return alphas;
}

/// Fit group scales minimizing the weighted multi-bit round-to-nearest error.
/// Ties keep the larger shrink factor (the earlier candidate).
inline QuantGrid fit_grid(const MatrixD& W, const BitWidthSet& bits, std::size_t group_size,
                          const ScaleSearch& search = {}) {
  if (group_size == 0) throw Error("fit_grid: group size must be positive");
  if (W.rows() == 0 || W.cols() == 0) throw Error("fit_grid: empty group");
  if (!all_finite(W.flat())) throw Error("non-finite weight");
  const int c = bits.master();
  const auto offsets = slice_offset_table(bits);
  const auto alphas = shrink_candidates(search);
  QuantGrid grid{c, group_size, Matrix<float>(W.rows(), group_count(W.cols(), group_size))};

  for (std::size_t row = 0; row < W.rows(); ++row) {
    const auto values = W.row(row);
    for (std::size_t g = 0; g < grid.scales.cols(); ++g) {
      const std::size_t begin = g * group_size;
      const auto group = values.subspan(begin, std::min(group_size, W.cols() - begin));
      double max_abs = 0.0;
      for (double x : group) max_abs = std::max(max_abs, std::abs(x));
      const double base = base_scale(max_abs, c);
      if (max_abs == 0.0) {
        grid.scales(row, g) = to_stored_scale(base);
        continue;
      }
      float best_scale = 0.0f;
      double best = std::numeric_limits<double>::infinity();
      for (double a : alphas) {
        const float s = to_stored_scale(a * base);
        const double obj = group_objective(group, s, bits, offsets);
        if (obj < best) {
          best = obj;
          best_scale = s;
        }
      }
      grid.scales(row, g) = best_scale;
    }
  }
  return grid;
}

}  // namespace matq
