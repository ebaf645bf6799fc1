// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "matq/slice.hpp"
#include "oracles/exhaustive_select.hpp"

using namespace matq;

TEST(SliceCode, Examples) {
  EXPECT_EQ(slice_code(183, 8, 4), 176);
  EXPECT_EQ(slice_code(255, 8, 2), 192);
  EXPECT_EQ(slice_to_code(183, 8, 4), 11);
  EXPECT_EQ(slice_to_code(3, 3, 2), 2);  // 1.5 is pushed up
  EXPECT_EQ(slice_to_code(0, 6, 3), 0);
}

TEST(SliceCode, RejectsUpwardAndOutOfRange) {
  try {
    slice_code(3, 4, 6);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("cannot slice upward"), std::string::npos);
  }
  EXPECT_THROW(slice_code(16, 4, 2), Error);
  EXPECT_THROW(slice_code(-1, 4, 2), Error);
  EXPECT_THROW(slice_code(1, 4, 1), Error);
}

TEST(SliceCode, ExhaustiveRangeIdentityAndFloatDefinition) {
  for (int c = 2; c <= 8; ++c)
    for (int r = 2; r <= c; ++r)
      for (int q = 0; q <= max_code(c); ++q) {
        const int k = slice_to_code(q, c, r);
        ASSERT_GE(k, 0);
        ASSERT_LE(k, max_code(r));
        ASSERT_EQ(slice_code(q, c, r), oracle::slice_fp(q, c, r));
        if (r == c) {
          ASSERT_EQ(k, q);
        }
      }
}

TEST(SliceCode, DequantOfSliceMatchesMasterGrid) {
  for (int c = 2; c <= 8; ++c)
    for (int r = 2; r <= c; ++r)
      for (int q = 0; q <= max_code(c); ++q)
        ASSERT_EQ(dequant(slice_to_code(q, c, r), 0.125, c, r), 0.125 * (slice_code(q, c, r) - zero_code(c)));
}

namespace {

NestedLayer random_layer(std::string name, std::size_t rows, std::size_t cols, int c, std::uint64_t seed,
                         std::size_t group = 4) {
  Rng rng(seed);
  NestedLayer l{std::move(name), CodeMatrix(rows, cols), QuantGrid{c, group, Matrix<float>(rows, group_count(cols, group))},
                BitWidthSet::uniform({c})};
  for (auto& q : l.codes.flat()) q = static_cast<std::uint8_t>(uniform_index(rng, std::size_t{1} << c));
  for (auto& s : l.grid.scales.flat()) s = static_cast<float>(0.01 + uniform01(rng));
  return l;
}

}  // namespace

TEST(SliceLayer, IdentityAtMaster) {
  const auto l = random_layer("a", 5, 9, 6, 1);
  const auto s = slice_layer(l, 6);
  EXPECT_EQ(s.codes, l.codes);
  EXPECT_EQ(s.scales, l.grid.scales);
  EXPECT_EQ(s.bits, 6);
  EXPECT_EQ(s.source_bits, 6);
}

TEST(SliceLayer, ZeroCodesStayCentered) {
  auto l = random_layer("a", 3, 8, 8, 2);
  for (auto& q : l.codes.flat()) q = 128;
  for (int r = 2; r <= 8; ++r) {
    const auto s = slice_layer(l, r);
    for (auto q : s.codes.flat()) EXPECT_EQ(q, zero_code(r));
    const MatrixD w = s.dequantize();
    for (double v : w.flat()) EXPECT_EQ(v, 0.0);
  }
}

TEST(SliceLayer, MatchesElementwiseOracle) {
  const auto l = random_layer("a", 8, 8, 8, 3);
  const auto s = slice_layer(l, 3);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_EQ(s.codes(i, j), slice_to_code(l.codes(i, j), 8, 3));
      EXPECT_EQ(s.value(i, j), dequant(s.codes(i, j), l.grid.scale(i, j), 8, 3));
    }
  EXPECT_EQ(s.scales(0, 0), l.grid.scales(0, 0) * 32.0f);
}

TEST(SliceModel, UniformMasterReturnsParent) {
  const std::vector<NestedLayer> layers{random_layer("x", 4, 8, 4, 4), random_layer("y", 2, 8, 4, 5)};
  const auto m = slice_model(layers, uniform_config(layers, 4));
  ASSERT_EQ(m.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(m[i].codes, layers[i].codes);
    EXPECT_EQ(m[i].dequantize(), dequantize(layers[i]));
  }
}

TEST(SliceModel, MixedMatchesPerLayerSlicing) {
  const std::vector<NestedLayer> layers{random_layer("layer0", 4, 8, 8, 6), random_layer("layer1", 2, 8, 8, 7)};
  BitConfig cfg;
  cfg.assignment = {{"layer0", 2}, {"layer1", 4}};
  const auto m = slice_model(layers, cfg);
  EXPECT_EQ(m[0], slice_layer(layers[0], 2));
  EXPECT_EQ(m[1], slice_layer(layers[1], 4));
  EXPECT_EQ(config_bits(cfg, layers), 2 * 32 + 4 * 16);
}

TEST(SliceModel, MissingLayerIsIncompleteConfig) {
  const std::vector<NestedLayer> layers{random_layer("x", 4, 8, 4, 4), random_layer("y", 2, 8, 4, 5)};
  BitConfig cfg;
  cfg.assignment = {{"x", 2}};
  try {
    slice_model(layers, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("incomplete config"), std::string::npos);
  }
}

TEST(NestedLayer, ValidateCatchesBadShapes) {
  auto l = random_layer("x", 4, 8, 4, 4);
  EXPECT_NO_THROW(l.validate());
  l.codes(0, 0) = 16;
  EXPECT_THROW(l.validate(), Error);
  l = random_layer("x", 4, 8, 4, 4);
  l.grid.scales = Matrix<float>(4, 1, 1.0f);
  EXPECT_THROW(l.validate(), Error);
}
