// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "matq/code.hpp"
#include "matq/grid.hpp"

namespace matq {

/// A layer quantized at the master bit-width; every lower bit-width is a slice of it.
struct NestedLayer {
  std::string name;
  CodeMatrix codes;  // d_row x d_col, values in [0, 2^c - 1]
  QuantGrid grid;
  BitWidthSet bits;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }
  std::int64_t parameter_count() const noexcept { return static_cast<std::int64_t>(codes.size()); }

  void validate() const {
    const int c = grid.master_bits;
    if (c != bits.master()) throw Error(name + ": grid and bit-width set disagree on master bits");
    if (grid.group_size == 0 || grid.scales.rows() != codes.rows() ||
        grid.scales.cols() != group_count(codes.cols(), grid.group_size))
      throw Error(name + ": grid shape does not match codes");
    for (auto q : codes.flat())
      if (q > max_code(c)) throw Error(name + ": code out of range");
  }

  friend bool operator==(const NestedLayer&, const NestedLayer&) = default;
};

/// An r-bit child layer: codes on its own r-bit grid with effective scales scale * 2^(c-r).
struct SlicedLayer {
  std::string name;
  int bits = 0;         // r
  int source_bits = 0;  // c of the parent it was sliced from
  CodeMatrix codes;
  std::size_t group_size = 0;
  Matrix<float> scales;

  std::size_t rows() const noexcept { return codes.rows(); }
  std::size_t cols() const noexcept { return codes.cols(); }
  int zero_code() const noexcept { return matq::zero_code(bits); }

  double value(std::size_t row, std::size_t col) const noexcept {
    return static_cast<double>(scales(row, col / group_size)) *
           static_cast<double>(static_cast<int>(codes(row, col)) - zero_code());
  }

  MatrixD dequantize() const {
    MatrixD w(rows(), cols());
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t c = 0; c < cols(); ++c) w(r, c) = value(r, c);
    return w;
  }

  friend bool operator==(const SlicedLayer&, const SlicedLayer&) = default;
};

inline SlicedLayer slice_layer(const NestedLayer& layer, int r) {
  const int c = layer.grid.master_bits;
  check_slice_args(0, c, r);
  SlicedLayer out{layer.name, r, c, CodeMatrix(layer.rows(), layer.cols()), layer.grid.group_size,
                  layer.grid.scales};
  const int shift = c - r;
  for (std::size_t i = 0; i < layer.codes.size(); ++i)
    out.codes.flat()[i] = static_cast<std::uint8_t>(slice_to_code(layer.codes.flat()[i], c, r));
  // Power-of-two multiply: exact in float.
  for (auto& s : out.scales.flat()) s = std::ldexp(s, shift);
  return out;
}

/// Master-precision reconstruction of a nested layer.
inline MatrixD dequantize(const NestedLayer& layer) {
  return slice_layer(layer, layer.grid.master_bits).dequantize();
}

inline const std::vector<int>& default_ladder() {
  static const std::vector<int> ladder{2, 3, 4, 6, 8};
  return ladder;
}

/// Per-layer bit-width assignment with a parameter-bit budget.
struct BitConfig {
  std::map<std::string, int> assignment;
  std::vector<int> ladder = default_ladder();
  std::int64_t budget_bits = 0;

  friend bool operator==(const BitConfig&, const BitConfig&) = default;
};

inline std::int64_t config_bits(const BitConfig& config, const std::vector<NestedLayer>& layers) {
  std::int64_t total = 0;
  for (const auto& layer : layers) {
    const auto it = config.assignment.find(layer.name);
    if (it == config.assignment.end()) throw Error("incomplete config: missing layer " + layer.name);
    total += static_cast<std::int64_t>(it->second) * layer.parameter_count();
  }
  return total;
}

inline BitConfig uniform_config(const std::vector<NestedLayer>& layers, int r,
                                std::vector<int> ladder = default_ladder()) {
  BitConfig config;
  config.ladder = std::move(ladder);
  for (const auto& layer : layers) config.assignment[layer.name] = r;
  config.budget_bits = config_bits(config, layers);
  return config;
}

/// Slice every layer to its assigned bit-width.
inline std::vector<SlicedLayer> slice_model(const std::vector<NestedLayer>& layers, const BitConfig& config) {
  std::vector<SlicedLayer> out;
  out.reserve(layers.size());
  for (const auto& layer : layers) {
    const auto it = config.assignment.find(layer.name);
    if (it == config.assignment.end()) throw Error("incomplete config: missing layer " + layer.name);
    out.push_back(slice_layer(layer, it->second));
  }
  return out;
}

}  // namespace matq
