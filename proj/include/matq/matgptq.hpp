// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "matq/common.hpp"
#include "matq/grid.hpp"
#include "matq/slice.hpp"

namespace matq {

/// Dampened layer Hessian H = 2 X X^T + damp_abs * I.
struct Hessian {
  MatrixD h;
  double damp_abs = 0.0;

  /// Undampened Gram matrix X X^T.
  MatrixD gram() const {
    MatrixD g = h;
    for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= damp_abs;
    for (auto& v : g.flat()) v *= 0.5;
    return g;
  }
};

/// X is feature-major: d_col x n_samples.
inline Hessian build_hessian(const MatrixD& X, double damp_rel = 0.01) {
  if (!(damp_rel > 0.0)) throw Error("build_hessian: damp_rel must be positive");
  if (X.cols() == 0 || X.rows() == 0) throw Error("build_hessian: empty calibration batch");
  if (!all_finite(X.flat())) throw Error("build_hessian: non-finite calibration input");
  const std::size_t d = X.rows();
  Hessian out{MatrixD(d, d), 0.0};
  for (std::size_t i = 0; i < d; ++i) {
    const auto xi = X.row(i);
    for (std::size_t j = i; j < d; ++j) {
      const auto xj = X.row(j);
      double acc = 0.0;
      for (std::size_t n = 0; n < xi.size(); ++n) acc += xi[n] * xj[n];
      out.h(i, j) = out.h(j, i) = 2.0 * acc;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_diag += out.h(i, i);
  mean_diag /= static_cast<double>(d);
  if (!(mean_diag > 0.0)) throw Error("degenerate calibration");
  out.damp_abs = damp_rel * mean_diag;
  for (std::size_t i = 0; i < d; ++i) out.h(i, i) += out.damp_abs;
  return out;
}

/// Lower Cholesky factor L with A = L L^T.
inline MatrixD cholesky_lower(const MatrixD& A) {
  const std::size_t n = A.rows();
  if (A.cols() != n) throw Error("factorization failed: matrix not square");
  MatrixD L(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = A(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= L(j, k) * L(j, k);
    if (!(diag > 0.0) || !std::isfinite(diag)) throw Error("factorization failed");
    const double ljj = std::sqrt(diag);
    L(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double v = A(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= L(i, k) * L(j, k);
      L(i, j) = v / ljj;
    }
  }
  return L;
}

/// Upper-triangular U with H^{-1} = U^T U.
struct HessianFactor {
  MatrixD chol_upper;
  double damp_rel = 0.01;
  double damp_abs = 0.0;

  std::size_t dim() const noexcept { return chol_upper.rows(); }
};

inline HessianFactor factor_inverse(const MatrixD& H, double damp_rel = 0.01, double damp_abs = 0.0) {
  const std::size_t n = H.rows();
  const MatrixD L = cholesky_lower(H);
  // Linv = L^{-1} by forward substitution, then H^{-1} = Linv^T Linv.
  MatrixD Linv(n, n);
  for (std::size_t col = 0; col < n; ++col) {
    Linv(col, col) = 1.0 / L(col, col);
    for (std::size_t i = col + 1; i < n; ++i) {
      double v = 0.0;
      for (std::size_t k = col; k < i; ++k) v -= L(i, k) * Linv(k, col);
      Linv(i, col) = v / L(i, i);
    }
  }
  MatrixD Hinv(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double v = 0.0;
      for (std::size_t k = j; k < n; ++k) v += Linv(k, i) * Linv(k, j);
      Hinv(i, j) = Hinv(j, i) = v;
    }
  const MatrixD L2 = cholesky_lower(Hinv);
  return {L2.transposed(), damp_rel, damp_abs};
}

inline HessianFactor factor_inverse(const Hessian& H, double damp_rel = 0.01) {
  return factor_inverse(H.h, damp_rel, H.damp_abs);
}

namespace detail {

/// Candidate tables for one bit-width set: offsets[k][q] = slice_code(q, c, r_k) - z.
struct Candidates {
  explicit Candidates(const BitWidthSet& bits)
      : master(bits.master()), lambdas(bits.lambdas()), offsets(slice_offset_table(bits)) {}

  int master;
  std::vector<double> lambdas;
  std::vector<std::vector<int>> offsets;
};

/// Select codes for one column of weights. Exhaustive over all 2^c codes with
/// strict-improvement updates in ascending q, so ties keep the smallest q.
/// With a single target the search reduces to round-to-nearest.
inline void select_column(std::span<const double> w, std::span<const double> scale,
                          const BitWidthSet& bits, const Candidates& cand, std::span<std::uint8_t> out,
                          std::vector<double>& best) {
  const int c = cand.master;
  const std::size_t n = w.size();
  if (bits.single()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(rtn(w[i], scale[i], c));
    return;
  }
  best.assign(n, std::numeric_limits<double>::infinity());
  const std::size_t nr = cand.offsets.size();
  for (int q = 0; q <= max_code(c); ++q) {
    for (std::size_t i = 0; i < n; ++i) {
      double err = 0.0;
      for (std::size_t k = 0; k < nr; ++k) {
        const double d = w[i] - scale[i] * cand.offsets[k][q];
        err += cand.lambdas[k] * (d * d);
      }
      if (err < best[i]) {
        best[i] = err;
        out[i] = static_cast<std::uint8_t>(q);
      }
    }
  }
}

}  // namespace detail

/// Per-weight minimal-error code over all master codes, weighting each target bit-width.
inline CodeMatrix select_codes(const MatrixD& W, const QuantGrid& grid, const BitWidthSet& bits) {
  if (grid.master_bits != bits.master()) throw Error("select_codes: grid/bit-width mismatch");
  if (grid.scales.rows() != W.rows() || grid.scales.cols() != group_count(W.cols(), grid.group_size))
    throw Error("select_codes: grid shape mismatch");
  if (!all_finite(W.flat())) throw Error("non-finite weight");
  const detail::Candidates cand(bits);
  CodeMatrix codes(W.rows(), W.cols());
  std::vector<double> w(W.rows()), s(W.rows()), best;
  std::vector<std::uint8_t> out(W.rows());
  for (std::size_t j = 0; j < W.cols(); ++j) {
    for (std::size_t i = 0; i < W.rows(); ++i) {
      w[i] = W(i, j);
      s[i] = grid.scale(i, j);
    }
    detail::select_column(w, s, bits, cand, out, best);
    for (std::size_t i = 0; i < W.rows(); ++i) codes(i, j) = out[i];
  }
  return codes;
}

/// Per target bit-width r: || dequant(S(Q, r)) X - W X ||_F^2, evaluated through the Gram matrix X X^T.
inline std::vector<double> layer_objective(const MatrixD& W, const NestedLayer& layer, const MatrixD& gram) {
  if (gram.rows() != W.cols() || layer.cols() != W.cols() || layer.rows() != W.rows())
    throw Error("layer_objective: dimension mismatch");
  std::vector<double> out;
  std::vector<double> delta(W.cols()), gd(W.cols());
  for (int r : layer.bits.targets()) {
    const SlicedLayer sl = slice_layer(layer, r);
    double total = 0.0;
    for (std::size_t row = 0; row < W.rows(); ++row) {
      for (std::size_t c = 0; c < W.cols(); ++c) delta[c] = sl.value(row, c) - W(row, c);
      for (std::size_t a = 0; a < W.cols(); ++a) {
        double v = 0.0;
        for (std::size_t b = 0; b < W.cols(); ++b) v += gram(a, b) * delta[b];
        gd[a] = v;
      }
      for (std::size_t a = 0; a < W.cols(); ++a) total += delta[a] * gd[a];
    }
    out.push_back(total);
  }
  return out;
}

inline double weighted_sum(const BitWidthSet& bits, const std::vector<double>& per_bit) {
  double total = 0.0;
  for (std::size_t k = 0; k < per_bit.size(); ++k) total += bits.lambdas()[k] * per_bit[k];
  return total;
}

struct LayerResult {
  NestedLayer layer;
  /// Each column as it was (after compensation) when its codes were selected.
  MatrixD quantized_input;
  /// Reconstruction error per target bit-width; empty unless a Hessian was supplied.
  std::vector<double> recon_error;
  double weighted_error = 0.0;
};

/// Blocked error-compensating quantization of one layer. Each column is coded
/// jointly for every target bit-width; the propagated error is the unweighted
/// mean of the per-target residuals, scaled by the factor's diagonal.
inline LayerResult quantize_layer(const MatrixD& W, const HessianFactor& factor, const QuantGrid& grid,
                                  const BitWidthSet& bits, std::size_t block_size = 128,
                                  const Hessian* hessian = nullptr, std::string name = {}) {
  const std::size_t rows = W.rows();
  const std::size_t cols = W.cols();
  if (factor.dim() != cols) throw Error("quantize_layer: dimension mismatch between weights and Hessian");
  if (block_size == 0) throw Error("quantize_layer: block size must be positive");
  if (grid.master_bits != bits.master() || grid.scales.rows() != rows ||
      grid.scales.cols() != group_count(cols, grid.group_size))
    throw Error("quantize_layer: dimension mismatch between weights and grid");
  if (!all_finite(W.flat())) throw Error("non-finite weight");

  const MatrixD& U = factor.chol_upper;
  const detail::Candidates cand(bits);
  const double inv_targets = 1.0 / static_cast<double>(bits.size());

  // Column-major working copy so each column is contiguous.
  MatrixD work = W.transposed();
  MatrixD err(block_size, rows);
  MatrixD quantized_input(cols, rows);
  CodeMatrix codes_t(cols, rows);
  std::vector<double> scale(rows), best;

  for (std::size_t i0 = 0; i0 < cols; i0 += block_size) {
    const std::size_t i1 = std::min(i0 + block_size, cols);
    for (std::size_t j = i0; j < i1; ++j) {
      auto col = work.row(j);
      std::copy(col.begin(), col.end(), quantized_input.row(j).begin());
      for (std::size_t r = 0; r < rows; ++r) scale[r] = grid.scale(r, j);
      auto q = codes_t.row(j);
      detail::select_column(col, scale, bits, cand, q, best);

      const double d = U(j, j);
      auto e = err.row(j - i0);
      for (std::size_t r = 0; r < rows; ++r) {
        double residual = 0.0;
        for (const auto& offsets : cand.offsets) residual += col[r] - scale[r] * offsets[q[r]];
        e[r] = residual * inv_targets / d;
        if (!std::isfinite(e[r])) throw Error("numerical blowup");
      }
      for (std::size_t jj = j; jj < i1; ++jj) {
        const double u = U(j, jj);
        auto target = work.row(jj);
        for (std::size_t r = 0; r < rows; ++r) target[r] -= e[r] * u;
      }
    }
    // Lazy update of every column right of the block, applied in column order.
    for (std::size_t jj = i1; jj < cols; ++jj) {
      auto target = work.row(jj);
      for (std::size_t j = i0; j < i1; ++j) {
        const double u = U(j, jj);
        const auto e = err.row(j - i0);
        for (std::size_t r = 0; r < rows; ++r) target[r] -= e[r] * u;
      }
      if (!all_finite(target)) throw Error("numerical blowup");
    }
  }

  LayerResult result{NestedLayer{std::move(name), codes_t.transposed(), grid, bits},
                     quantized_input.transposed(), {}, 0.0};
  if (hessian != nullptr) {
    result.recon_error = layer_objective(W, result.layer, hessian->gram());
    result.weighted_error = weighted_sum(bits, result.recon_error);
  }
  return result;
}

}  // namespace matq
