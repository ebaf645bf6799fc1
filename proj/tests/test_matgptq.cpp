// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "matq/matgptq.hpp"
#include "oracles/exhaustive_select.hpp"
#include "oracles/reference_gptq.hpp"

using namespace matq;

namespace {

oracle::Mat to_rows(const MatrixD& m) {
  oracle::Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

double frob_rel(const MatrixD& a, const oracle::Mat& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      num += (a(i, j) - b[i][j]) * (a(i, j) - b[i][j]);
      den += b[i][j] * b[i][j];
    }
  return std::sqrt(num / den);
}

MatrixD utu(const MatrixD& U) {
  const std::size_t n = U.rows();
  MatrixD out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (std::size_t k = 0; k < n; ++k) v += U(k, i) * U(k, j);
      out(i, j) = v;
    }
  return out;
}

}  // namespace

TEST(BuildHessian, AllZeroCalibrationIsDegenerate) {
  try {
    build_hessian(MatrixD(4, 8, 0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate calibration"), std::string::npos);
  }
}

TEST(BuildHessian, ScaledIdentity) {
  MatrixD X(4, 4);
  for (std::size_t i = 0; i < 4; ++i) X(i, i) = 1.0 / std::sqrt(2.0);
  const Hessian H = build_hessian(X, 0.01);
  EXPECT_NEAR(H.damp_abs, 0.01, 1e-15);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(H.h(i, j), i == j ? 1.01 : 0.0, 1e-15);
}

TEST(BuildHessian, MatchesTripleLoop) {
  const MatrixD X = random_normal(16, 64, 0);
  const Hessian H = build_hessian(X, 0.01);
  const auto ref = oracle::hessian(to_rows(X), 0.01);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(H.h(i, j), ref[i][j], 1e-10 * std::abs(ref[i][j]) + 1e-12);
  const MatrixD G = H.gram();
  for (std::size_t i = 0; i < 16; ++i) {
    double v = 0.0;
    for (std::size_t n = 0; n < 64; ++n) v += X(i, n) * X(i, n);
    EXPECT_NEAR(G(i, i), v, 1e-10 * v);
  }
}

TEST(BuildHessian, SingleSampleStaysPositiveDefinite) {
  const MatrixD X = random_normal(32, 1, 3);
  EXPECT_NO_THROW(factor_inverse(build_hessian(X)));
}

TEST(FactorInverse, ClosedForms) {
  MatrixD I(3, 3);
  for (std::size_t i = 0; i < 3; ++i) I(i, i) = 1.0;
  EXPECT_EQ(factor_inverse(I).chol_upper, I);

  MatrixD D(2, 2);
  D(0, 0) = D(1, 1) = 4.0;
  const auto f = factor_inverse(D);
  EXPECT_EQ(f.chol_upper(0, 0), 0.5);
  EXPECT_EQ(f.chol_upper(1, 1), 0.5);
  EXPECT_EQ(f.chol_upper(0, 1), 0.0);

  MatrixD A(2, 2);
  A(0, 0) = A(1, 1) = 2.0;
  A(0, 1) = A(1, 0) = 1.0;
  const MatrixD R = utu(factor_inverse(A).chol_upper);
  EXPECT_NEAR(R(0, 0), 2.0 / 3.0, 1e-10);
  EXPECT_NEAR(R(0, 1), -1.0 / 3.0, 1e-10);
  EXPECT_NEAR(R(1, 0), -1.0 / 3.0, 1e-10);
  EXPECT_NEAR(R(1, 1), 2.0 / 3.0, 1e-10);
}

TEST(FactorInverse, UpperTriangularAndReconstructsInverse) {
  for (std::size_t d : {8u, 64u, 256u}) {
    const Hessian H = build_hessian(random_normal(d, 2 * d, d));
    const auto f = factor_inverse(H);
    for (std::size_t i = 0; i < d; ++i) {
      EXPECT_GT(f.chol_upper(i, i), 0.0);
      for (std::size_t j = 0; j < i; ++j) ASSERT_EQ(f.chol_upper(i, j), 0.0);
    }
    EXPECT_LT(frob_rel(utu(f.chol_upper), oracle::inverse(to_rows(H.h))), 1e-6) << "d=" << d;
    EXPECT_EQ(f.damp_abs, H.damp_abs);
  }
}

TEST(FactorInverse, NonPositiveDefiniteFails) {
  MatrixD A(2, 2);
  A(0, 0) = 1.0;
  A(1, 1) = -1.0;
  try {
    factor_inverse(A);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("factorization failed"), std::string::npos);
  }
}

namespace {

QuantGrid unit_grid(int c, std::size_t rows = 1, std::size_t cols = 1, float s = 1.0f) {
  return QuantGrid{c, cols, Matrix<float>(rows, 1, s)};
}

}  // namespace

TEST(SelectCodes, WorkedExamples) {
  MatrixD W(1, 1, 0.9);
  EXPECT_EQ(select_codes(W, unit_grid(3), BitWidthSet::uniform({2, 3}))(0, 0), 5);
  EXPECT_EQ(select_codes(W, unit_grid(3), BitWidthSet::make({2, 3}, {10.0, 1.0}))(0, 0), 4);
  EXPECT_NEAR(oracle::weighted_error(0.9, 1.0, 5, 3, {2, 3}, {1, 1}), 1.22, 1e-12);
  EXPECT_NEAR(oracle::weighted_error(0.9, 1.0, 4, 3, {2, 3}, {1, 1}), 1.62, 1e-12);
  EXPECT_NEAR(oracle::weighted_error(0.9, 1.0, 4, 3, {2, 3}, {10, 1}), 8.91, 1e-12);
  EXPECT_NEAR(oracle::weighted_error(0.9, 1.0, 5, 3, {2, 3}, {10, 1}), 12.11, 1e-12);
}

TEST(SelectCodes, SingleTargetIsRoundToNearest) {
  const MatrixD W = random_normal(16, 96, 4);
  for (int c : {2, 4, 8}) {
    const auto bits = BitWidthSet::uniform({c});
    const QuantGrid g = fit_grid(W, bits, 32);
    const CodeMatrix Q = select_codes(W, g, bits);
    for (std::size_t i = 0; i < W.rows(); ++i)
      for (std::size_t j = 0; j < W.cols(); ++j) ASSERT_EQ(Q(i, j), rtn(W(i, j), g.scale(i, j), c));
  }
}

TEST(SelectCodes, MatchesExhaustiveOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    const int c = 2 + static_cast<int>(uniform_index(rng, 7));
    std::vector<int> t{c};
    std::vector<double> lam{0.1 + 3.0 * uniform01(rng)};
    for (int r = 2; r < c; ++r)
      if (uniform01(rng) < 0.4) {
        t.insert(t.end() - 1, r);
        lam.insert(lam.end() - 1, 0.1 + 3.0 * uniform01(rng));
      }
    const auto bits = BitWidthSet::make(t, lam);
    const float s = static_cast<float>(0.01 + uniform01(rng));
    const double w = (uniform01(rng) * 2.0 - 1.0) * s * (1 << c) * 0.7;
    const auto ref = oracle::select_exhaustive(w, s, c, bits.targets(), bits.lambdas());
    const int q = select_codes(MatrixD(1, 1, w), unit_grid(c, 1, 1, s), bits)(0, 0);
    if (bits.single()) {
      EXPECT_EQ(oracle::weighted_error(w, s, q, c, t, lam), ref.error);
    } else {
      ASSERT_EQ(q, ref.q) << "trial " << trial;
    }
  }
}

TEST(SelectCodes, RejectsMismatchedGrid) {
  const MatrixD W(2, 4, 0.1);
  EXPECT_THROW(select_codes(W, unit_grid(4, 2, 4), BitWidthSet::uniform({3})), Error);
  EXPECT_THROW(select_codes(W, QuantGrid{4, 4, Matrix<float>(3, 1, 1.0f)}, BitWidthSet::uniform({4})), Error);
}

namespace {

struct LayerCase {
  MatrixD W;
  Hessian H;
  HessianFactor f;
};

LayerCase make_case(std::size_t rows, std::size_t cols, std::size_t n, std::uint64_t seed) {
  MatrixD W = random_normal(rows, cols, seed);
  Hessian H = build_hessian(random_normal(cols, n, seed + 1000));
  HessianFactor f = factor_inverse(H);
  return {std::move(W), std::move(H), std::move(f)};
}

}  // namespace

TEST(QuantizeLayer, IdentityFactorMeansNoPropagation) {
  const MatrixD W = random_normal(12, 40, 8);
  MatrixD I(40, 40);
  for (std::size_t i = 0; i < 40; ++i) I(i, i) = 1.0;
  const HessianFactor f{I, 0.01, 0.0};
  const auto bits = BitWidthSet::uniform({3, 4, 8});
  const QuantGrid g = fit_grid(W, bits, 16);
  EXPECT_EQ(quantize_layer(W, f, g, bits, 7).layer.codes, select_codes(W, g, bits));
}

TEST(QuantizeLayer, SingleTargetMatchesReferenceGptq) {
  const auto lc = make_case(64, 64, 256, 1);
  const auto bits = BitWidthSet::uniform({4});
  const QuantGrid g = fit_grid(lc.W, bits, 32);
  const auto got = quantize_layer(lc.W, lc.f, g, bits, 16).layer.codes;
  const auto U = oracle::upper_cholesky(oracle::inverse(oracle::hessian(to_rows(random_normal(64, 256, 1001)), 0.01)));
  const auto ref = oracle::gptq_codes(to_rows(lc.W), U, 4, [&](std::size_t r, std::size_t c) { return double(g.scale(r, c)); });
  for (std::size_t i = 0; i < 64; ++i)
    for (std::size_t j = 0; j < 64; ++j) ASSERT_EQ(got(i, j), ref[i][j]) << i << "," << j;
}

TEST(QuantizeLayer, BlockSizeDoesNotChangeResult) {
  const auto lc = make_case(16, 50, 100, 9);
  const auto bits = BitWidthSet::uniform({2, 4, 6});
  const QuantGrid g = fit_grid(lc.W, bits, 25);
  const auto ref = quantize_layer(lc.W, lc.f, g, bits, 128);
  for (std::size_t b : {1u, 3u, 16u, 49u, 50u}) {
    const auto r = quantize_layer(lc.W, lc.f, g, bits, b);
    EXPECT_EQ(r.layer.codes, ref.layer.codes) << "B=" << b;
    EXPECT_EQ(r.quantized_input, ref.quantized_input) << "B=" << b;
  }
}

TEST(QuantizeLayer, CodesAreSelfConsistentWithCompensatedWeights) {
  const auto lc = make_case(24, 64, 128, 12);
  const auto bits = BitWidthSet::uniform({3, 4, 8});
  const QuantGrid g = fit_grid(lc.W, bits, 32);
  const auto r = quantize_layer(lc.W, lc.f, g, bits, 16);
  EXPECT_EQ(select_codes(r.quantized_input, g, bits), r.layer.codes);
  EXPECT_EQ(r.quantized_input.rows(), lc.W.rows());
  // First column is untouched by compensation.
  for (std::size_t i = 0; i < lc.W.rows(); ++i) EXPECT_EQ(r.quantized_input(i, 0), lc.W(i, 0));
}

TEST(QuantizeLayer, DiagnosticsMatchDirectObjective) {
  const auto lc = make_case(8, 32, 64, 21);
  const auto bits = BitWidthSet::make({3, 4, 8}, {1.0, 2.0, 0.5});
  const QuantGrid g = fit_grid(lc.W, bits, 32);
  const auto r = quantize_layer(lc.W, lc.f, g, bits, 8, &lc.H, "probe");
  EXPECT_EQ(r.layer.name, "probe");
  const auto direct = layer_objective(lc.W, r.layer, lc.H.gram());
  ASSERT_EQ(r.recon_error.size(), 3u);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(r.recon_error[k], direct[k]);
  EXPECT_DOUBLE_EQ(r.weighted_error, direct[0] + 2.0 * direct[1] + 0.5 * direct[2]);
  EXPECT_GT(r.recon_error[0], r.recon_error[2]);
}

TEST(QuantizeLayer, BeatsRoundToNearestOnWeightedObjective) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto lc = make_case(32, 64, 128, 100 + seed);
    const auto bits = BitWidthSet::uniform({3, 4, 8});
    const QuantGrid g = fit_grid(lc.W, bits, 64);
    const auto r = quantize_layer(lc.W, lc.f, g, bits, 128, &lc.H);
    CodeMatrix rq(lc.W.rows(), lc.W.cols());
    for (std::size_t i = 0; i < rq.rows(); ++i)
      for (std::size_t j = 0; j < rq.cols(); ++j) rq(i, j) = static_cast<std::uint8_t>(rtn(lc.W(i, j), g.scale(i, j), 8));
    const NestedLayer base{"rtn", rq, g, bits};
    wins += r.weighted_error < weighted_sum(bits, layer_objective(lc.W, base, lc.H.gram()));
  }
  EXPECT_GE(wins, 9);
}

TEST(QuantizeLayer, Deterministic) {
  const auto lc = make_case(16, 48, 96, 31);
  const auto bits = BitWidthSet::uniform({2, 3, 4});
  const QuantGrid g = fit_grid(lc.W, bits, 16);
  EXPECT_EQ(quantize_layer(lc.W, lc.f, g, bits, 16, &lc.H).layer, quantize_layer(lc.W, lc.f, g, bits, 16, &lc.H).layer);
}

TEST(QuantizeLayer, ShapeErrors) {
  const auto lc = make_case(4, 16, 32, 41);
  const auto bits = BitWidthSet::uniform({4});
  const QuantGrid g = fit_grid(lc.W, bits, 16);
  EXPECT_THROW(quantize_layer(random_normal(4, 15, 1), lc.f, g, bits), Error);
  EXPECT_THROW(quantize_layer(lc.W, lc.f, g, BitWidthSet::uniform({3})), Error);
  EXPECT_THROW(quantize_layer(lc.W, lc.f, g, bits, 0), Error);
}

TEST(QuantizeLayer, OverflowIsNumericalBlowup) {
  MatrixD W(2, 3, 1e300);
  MatrixD H(3, 3);
  for (std::size_t i = 0; i < 3; ++i) H(i, i) = 1e30;
  const auto bits = BitWidthSet::uniform({4});
  const QuantGrid g{4, 3, Matrix<float>(2, 1, 1e-12f)};
  try {
    quantize_layer(W, factor_inverse(H), g, bits);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("numerical blowup"), std::string::npos);
  }
}
