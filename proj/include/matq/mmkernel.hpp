// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#if defined(__AVX512F__) && defined(__BMI2__)
#include <immintrin.h>
#define MATQ_HAVE_AVX512 1
#else
#define MATQ_HAVE_AVX512 0
#endif

#include "matq/common.hpp"
#include "matq/nestpack.hpp"
#include "matq/slice.hpp"

namespace matq {

/// Packed r-bit weights (d_row x d_col) with per-(row, group) scales and symmetric zero.
struct PackedLayer {
  PackedTensor weights;
  Matrix<float> scales;
  std::size_t group_size = 0;

  int bits() const noexcept { return weights.bits; }
  int zero() const noexcept { return zero_code(weights.bits); }
  std::size_t rows() const noexcept { return weights.rows; }
  std::size_t cols() const noexcept { return weights.cols; }
};

inline PackedLayer make_packed_layer(const SlicedLayer& layer, Layout layout = Layout::canonical) {
  if (layer.bits < 2 || layer.bits > 4) throw Error("unsupported bits " + std::to_string(layer.bits));
  if (layer.group_size == 0 || layer.group_size % kPackUnit != 0)
    throw Error("packed matmul needs group_size to be a multiple of 32");
  PackedLayer out{with_layout(pack(layer.codes, layer.bits), layout), layer.scales, layer.group_size};
  return out;
}

namespace detail {

inline void check_task(const MatrixF& X, const PackedLayer& layer) {
  if (X.cols() != layer.cols())
    throw Error("matmul: shape mismatch, X has " + std::to_string(X.cols()) + " columns, layer expects " +
                std::to_string(layer.cols()));
  if (layer.bits() < 2 || layer.bits() > 4) throw Error("unsupported bits " + std::to_string(layer.bits()));
  if (layer.group_size == 0 || layer.group_size % kPackUnit != 0)
    throw Error("packed matmul needs group_size to be a multiple of 32");
  layer.weights.validate();
}

/// Decode one pack unit into (code - zero) as floats.
inline void decode_unit(const PackedTensor& p, std::size_t row, std::size_t word, int zero, float* out) noexcept {
  const std::size_t idx = p.word_index(row, word);
  const std::uint64_t base = p.base[idx];
  const std::uint32_t b2 = p.bits >= 3 ? p.plane_b2[idx] : 0u;
  const std::uint32_t b3 = p.bits == 4 ? p.plane_b3[idx] : 0u;
  for (int i = 0; i < 32; ++i) {
    const int code = static_cast<int>((base >> (2 * i)) & 3u) | static_cast<int>(((b2 >> i) & 1u) << 2) |
                     static_cast<int>(((b3 >> i) & 1u) << 3);
    out[i] = static_cast<float>(code - zero);
  }
}

inline constexpr int kLanes = 16;

/// Dot product of 32 values with 16 independent lane accumulators.
inline void lane_dot32(const float* w, const float* x, float* acc) noexcept {
  for (int l = 0; l < kLanes; ++l) acc[l] += w[l] * x[l];
  for (int l = 0; l < kLanes; ++l) acc[l] += w[kLanes + l] * x[kLanes + l];
}

inline float lane_sum(const float* acc) noexcept {
  float s = 0.0f;
  for (int l = 0; l < kLanes; ++l) s += acc[l];
  return s;
}

/// Zero-padded copy of X so every pack unit reads a full 32 activations.
inline MatrixF pad_activations(const MatrixF& X, std::size_t padded_cols) {
  MatrixF out(X.rows(), padded_cols, 0.0f);
  for (std::size_t b = 0; b < X.rows(); ++b) std::copy(X.row(b).begin(), X.row(b).end(), out.row(b).begin());
  return out;
}

/// Portable path: decode each unit once and stream it against each batch row.
inline MatrixF matmul_packed_rows(const MatrixF& X, const PackedLayer& layer) {
  const PackedTensor& p = layer.weights;
  const MatrixF xp = pad_activations(X, p.padded_cols);
  const std::size_t batch = X.rows();
  const std::size_t units_per_group = layer.group_size / kPackUnit;
  MatrixF Y(batch, p.rows, 0.0f);
  std::vector<float> acc(batch * kLanes);
  alignas(64) float vals[32];
  for (std::size_t o = 0; o < p.rows; ++o) {
    for (std::size_t g = 0; g < layer.scales.cols(); ++g) {
      std::fill(acc.begin(), acc.end(), 0.0f);
      const std::size_t w0 = g * units_per_group;
      const std::size_t w1 = std::min(w0 + units_per_group, p.words_per_row());
      for (std::size_t w = w0; w < w1; ++w) {
        decode_unit(p, o, w, layer.zero(), vals);
        for (std::size_t b = 0; b < batch; ++b) lane_dot32(vals, xp.row(b).data() + w * kPackUnit, &acc[b * kLanes]);
      }
      const float s = layer.scales(o, g);
      for (std::size_t b = 0; b < batch; ++b) Y(b, o) += s * lane_sum(&acc[b * kLanes]);
    }
  }
  return Y;
}

/// Batch >= 8: decode a whole group of one row into a buffer, then sweep batch tiles of 8.
inline MatrixF matmul_packed_blocked(const MatrixF& X, const PackedLayer& layer) {
  constexpr std::size_t kTile = 8;
  const PackedTensor& p = layer.weights;
  const MatrixF xp = pad_activations(X, p.padded_cols);
  const std::size_t batch = X.rows();
  const std::size_t units_per_group = layer.group_size / kPackUnit;
  MatrixF Y(batch, p.rows, 0.0f);
  std::vector<float> wbuf(layer.group_size);
  float acc[kTile][kLanes];
  for (std::size_t o = 0; o < p.rows; ++o) {
    for (std::size_t g = 0; g < layer.scales.cols(); ++g) {
      const std::size_t w0 = g * units_per_group;
      const std::size_t w1 = std::min(w0 + units_per_group, p.words_per_row());
      for (std::size_t w = w0; w < w1; ++w) decode_unit(p, o, w, layer.zero(), &wbuf[(w - w0) * kPackUnit]);
      const float s = layer.scales(o, g);
      for (std::size_t b0 = 0; b0 < batch; b0 += kTile) {
        const std::size_t nb = std::min(kTile, batch - b0);
        for (auto& a : acc) std::fill(std::begin(a), std::end(a), 0.0f);
        for (std::size_t w = w0; w < w1; ++w) {
          const float* wv = &wbuf[(w - w0) * kPackUnit];
          for (std::size_t t = 0; t < nb; ++t) lane_dot32(wv, xp.row(b0 + t).data() + w * kPackUnit, acc[t]);
        }
        for (std::size_t t = 0; t < nb; ++t) Y(b0 + t, o) += s * lane_sum(acc[t]);
      }
    }
  }
  return Y;
}

#if MATQ_HAVE_AVX512
/// Bit-plane kernel: sum_i x_i * code_i = sum_k 2^k * (sum of x_i where bit k of code_i is set),
/// evaluated with masked adds straight from the planes. Each (plane, half) has its own
/// accumulator, so the adds do not share a dependency chain and one activation load feeds
/// every plane. The zero offset 2^(b-1) folds into the top plane: code - zero equals the low
/// planes minus 2^(b-1) times the activations whose top bit is clear, so zero codes give exactly
/// zero. Groups fold into a vector row sum that is reduced once per output.
template <int Bits>
inline void planes_avx512_rows(const PackedLayer& layer, const MatrixF& xp, MatrixF& Y) {
  const PackedTensor& p = layer.weights;
  const std::size_t groups = layer.scales.cols();
  const std::size_t units_per_group = layer.group_size / kPackUnit;
  const std::size_t wpr = p.words_per_row();
  for (std::size_t o = 0; o < p.rows; ++o) {
    for (std::size_t b = 0; b < xp.rows(); ++b) {
      const float* x = xp.row(b).data();
      __m512 row_acc = _mm512_setzero_ps();
      for (std::size_t g = 0; g < groups; ++g) {
        __m512 lo[Bits], hi[Bits];
        for (int k = 0; k < Bits; ++k) lo[k] = hi[k] = _mm512_setzero_ps();
        const std::size_t w1 = std::min((g + 1) * units_per_group, wpr);
        for (std::size_t w = g * units_per_group; w < w1; ++w) {
          const std::size_t idx = p.word_index(o, w);
          const std::uint64_t base = p.base[idx];
          std::uint32_t masks[4];
          masks[0] = static_cast<std::uint32_t>(_pext_u64(base, 0x5555555555555555ull));
          masks[1] = static_cast<std::uint32_t>(_pext_u64(base, 0xAAAAAAAAAAAAAAAAull));
          if constexpr (Bits >= 3) masks[2] = p.plane_b2[idx];
          if constexpr (Bits == 4) masks[3] = p.plane_b3[idx];
          masks[Bits - 1] = ~masks[Bits - 1];
          const __m512 xlo = _mm512_loadu_ps(x + w * kPackUnit);
          const __m512 xhi = _mm512_loadu_ps(x + w * kPackUnit + 16);
          for (int k = 0; k < Bits; ++k) {
            lo[k] = _mm512_mask_add_ps(lo[k], static_cast<__mmask16>(masks[k] & 0xFFFFu), lo[k], xlo);
            hi[k] = _mm512_mask_add_ps(hi[k], static_cast<__mmask16>(masks[k] >> 16), hi[k], xhi);
          }
        }
        __m512 dot = _mm512_add_ps(lo[0], hi[0]);
        for (int k = 1; k + 1 < Bits; ++k)
          dot = _mm512_add_ps(dot, _mm512_mul_ps(_mm512_set1_ps(static_cast<float>(1 << k)), _mm512_add_ps(lo[k], hi[k])));
        const __m512 top = _mm512_add_ps(lo[Bits - 1], hi[Bits - 1]);
        dot = _mm512_sub_ps(dot, _mm512_mul_ps(_mm512_set1_ps(static_cast<float>(1 << (Bits - 1))), top));
        row_acc = _mm512_add_ps(row_acc, _mm512_mul_ps(_mm512_set1_ps(layer.scales(o, g)), dot));
      }
      Y(b, o) = _mm512_reduce_add_ps(row_acc);
    }
  }
}

inline MatrixF matmul_packed_planes_avx512(const MatrixF& X, const PackedLayer& layer) {
  const MatrixF xp = pad_activations(X, layer.weights.padded_cols);
  MatrixF Y(X.rows(), layer.rows(), 0.0f);
  switch (layer.bits()) {
    case 2: planes_avx512_rows<2>(layer, xp, Y); break;
    case 3: planes_avx512_rows<3>(layer, xp, Y); break;
    default: planes_avx512_rows<4>(layer, xp, Y); break;
  }
  return Y;
}
#endif

}  // namespace detail

/// Oracle: dequantize to floats, then a dense product accumulated in ascending k.
inline MatrixF matmul_ref(const MatrixF& X, const PackedLayer& layer) {
  detail::check_task(X, layer);
  const CodeMatrix codes = unpack(layer.weights);
  MatrixF W(layer.rows(), layer.cols());
  for (std::size_t o = 0; o < W.rows(); ++o)
    for (std::size_t k = 0; k < W.cols(); ++k)
      W(o, k) = layer.scales(o, k / layer.group_size) * static_cast<float>(static_cast<int>(codes(o, k)) - layer.zero());
  MatrixF Y(X.rows(), layer.rows());
  for (std::size_t b = 0; b < X.rows(); ++b)
    for (std::size_t o = 0; o < W.rows(); ++o) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < W.cols(); ++k) acc += X(b, k) * W(o, k);
      Y(b, o) = acc;
    }
  return Y;
}

/// Portable packed matmul: Y = (W^T X^T)^T with on-the-fly unit decoding.
inline MatrixF matmul_packed_portable(const MatrixF& X, const PackedLayer& layer) {
  detail::check_task(X, layer);
  return X.rows() < 8 ? detail::matmul_packed_rows(X, layer) : detail::matmul_packed_blocked(X, layer);
}

/// Packed matmul; below batch 8 streams rows (bit-plane kernel when AVX-512 is available),
/// from batch 8 on decodes each group once and reuses it across batch tiles.
inline MatrixF matmul_packed(const MatrixF& X, const PackedLayer& layer) {
  detail::check_task(X, layer);
  if (X.rows() >= 8) return detail::matmul_packed_blocked(X, layer);
#if MATQ_HAVE_AVX512
  return detail::matmul_packed_planes_avx512(X, layer);
#else
  return detail::matmul_packed_rows(X, layer);
#endif
}

/// Dense 32-bit baseline Y = X W^T (W is d_row x d_col).
inline MatrixF matmul_dense(const MatrixF& X, const MatrixF& W) {
  if (X.cols() != W.cols()) throw Error("matmul_dense: shape mismatch");
  const std::size_t k = W.cols();
  const std::size_t kv = k / detail::kLanes * detail::kLanes;
  MatrixF Y(X.rows(), W.rows());
  for (std::size_t b = 0; b < X.rows(); ++b) {
    const float* x = X.row(b).data();
    for (std::size_t o = 0; o < W.rows(); ++o) {
      const float* w = W.row(o).data();
      float acc[detail::kLanes] = {};
      for (std::size_t i = 0; i < kv; i += detail::kLanes)
        for (int l = 0; l < detail::kLanes; ++l) acc[l] += x[i + l] * w[i + l];
      float s = detail::lane_sum(acc);
      for (std::size_t i = kv; i < k; ++i) s += x[i] * w[i];
      Y(b, o) = s;
    }
  }
  return Y;
}

/// max |Y - Yref| / max |Yref| (0 when both are zero).
inline double relative_error(const MatrixF& Y, const MatrixF& ref) {
  if (Y.rows() != ref.rows() || Y.cols() != ref.cols()) throw Error("relative_error: shape mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < Y.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(Y.flat()[i]) - ref.flat()[i]));
    scale = std::max(scale, std::abs(static_cast<double>(ref.flat()[i])));
  }
  if (scale == 0.0) return diff;
  return diff / scale;
}

struct BenchReport {
  std::size_t m = 0, k = 0, batch = 0;
  int bits = 0;
  int reps = 0;
  std::vector<double> samples_ns;
  double median_ns = 0.0;
  double dense_median_ns = 0.0;
  std::size_t weight_bytes = 0;
  std::size_t bytes_moved = 0;
  double gbps = 0.0;
  double speedup = 0.0;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Random packed layer and activations for benchmarking and tests.
inline PackedLayer random_packed_layer(std::size_t m, std::size_t k, int bits, std::uint64_t seed,
                                       std::size_t group_size = 128) {
  if (bits < 2 || bits > 4) throw Error("unsupported bits " + std::to_string(bits));
  Rng rng(seed);
  SlicedLayer sl{"bench", bits, bits, CodeMatrix(m, k), group_size, Matrix<float>(m, (k + group_size - 1) / group_size)};
  for (auto& q : sl.codes.flat()) q = static_cast<std::uint8_t>(uniform_index(rng, std::size_t{1} << bits));
  for (auto& s : sl.scales.flat()) s = static_cast<float>(0.01 + 0.02 * uniform01(rng));
  return make_packed_layer(sl);
}

inline MatrixF random_activations(std::size_t batch, std::size_t k, std::uint64_t seed) {
  return random_normal(batch, k, seed).cast<float>();
}

inline BenchReport bench(std::size_t m, std::size_t k, std::size_t batch, int bits, int reps,
                         std::uint64_t seed = 0) {
  if (bits < 2 || bits > 4) throw Error("unsupported bits " + std::to_string(bits));
  if (reps < 3) throw Error("bench needs reps >= 3");
  const PackedLayer layer = random_packed_layer(m, k, bits, seed);
  const MatrixF X = random_activations(batch, k, seed + 1);
  const MatrixF W = random_normal(m, k, seed + 2, 0.02).cast<float>();

  using clock = std::chrono::steady_clock;
  BenchReport rep;
  rep.m = m;
  rep.k = k;
  rep.batch = batch;
  rep.bits = bits;
  rep.reps = reps;
  volatile float sink = 0.0f;
  (void)matmul_packed(X, layer);  // warm-up
  for (int i = 0; i < reps; ++i) {
    const auto t0 = clock::now();
    const MatrixF Y = matmul_packed(X, layer);
    const auto t1 = clock::now();
    sink = sink + Y.flat()[0];
    rep.samples_ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  std::vector<double> dense;
  (void)matmul_dense(X, W);
  for (int i = 0; i < reps; ++i) {
    const auto t0 = clock::now();
    const MatrixF Y = matmul_dense(X, W);
    const auto t1 = clock::now();
    sink = sink + Y.flat()[0];
    dense.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  rep.median_ns = median(rep.samples_ns);
  rep.dense_median_ns = median(dense);
  rep.weight_bytes = layer.weights.payload_bytes();
  rep.bytes_moved = rep.weight_bytes + batch * k * sizeof(float) + batch * m * sizeof(float);
  rep.gbps = static_cast<double>(rep.bytes_moved) / rep.median_ns;
  rep.speedup = rep.dense_median_ns / rep.median_ns;
  return rep;
}

}  // namespace matq
