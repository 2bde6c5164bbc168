// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "lrtp/tensor.hpp"

using namespace lrtp;

namespace {

// Triple loop with i,j outer; independent of the library's loop order.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  return out;
}

// Small generator for shapes.
struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}
  std::size_t dim(std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
  }
};

}  // namespace

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({2}, 0.0, 3), DimensionError);
  EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST(Tensor, ByteAccountingFollowsElementWidth) {
  Tensor t({4, 8}, 0.0, 2);
  EXPECT_EQ(t.bytes(), 64u);
  t.set_element_bytes(8);
  EXPECT_EQ(t.bytes(), 256u);
}

TEST(Tensor, MatmulHandExample) {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  const Tensor b = Tensor::matrix({{7, 8}, {9, 10}, {11, 12}});
  const auto r = matmul(a, b);
  EXPECT_EQ(r.out, Tensor::matrix({{58, 64}, {139, 154}}));
  EXPECT_EQ(r.flops, 2u * 2 * 2 * 3);
}

TEST(Tensor, MatmulInnerMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST(Tensor, MatmulMatchesNaiveOnRandomShapes) {
  Gen g(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = g.dim(1, 9), k = g.dim(1, 9), n = g.dim(1, 9);
    const Tensor a = seeded_fill({m, k}, 100 + trial), b = seeded_fill({k, n}, 200 + trial);
    EXPECT_LE(max_abs_diff(matmul(a, b).out, naive_matmul(a, b)), 1e-12);
  }
}

TEST(Tensor, LinearUsesOutInLayout) {
  const Tensor x = Tensor::matrix({{1, 2}});
  const Tensor w = Tensor::matrix({{1, 0}, {0, 1}, {1, 1}});  // [out=3, in=2]
  EXPECT_EQ(linear(x, w).out, Tensor::matrix({{1, 2, 3}}));
}

TEST(Tensor, BatchedMatmulIsOneLaunch) {
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (int i = 0; i < 3; ++i) pairs.emplace_back(seeded_fill({2, 4}, i), seeded_fill({4, 3}, 10 + i));
  const auto r = batched_matmul(pairs);
  EXPECT_EQ(r.launches, 1);
  EXPECT_EQ(r.flops, 3u * 2 * 2 * 3 * 4);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(r.outs[i], matmul(pairs[i].first, pairs[i].second).out);
}

TEST(Tensor, SwigluScalarOracle) {
  const Tensor g = Tensor::matrix({{-2.0, 0.0, 0.5}});
  const Tensor u = Tensor::matrix({{3.0, 7.0, -4.0}});
  const Tensor out = swiglu(g, u);
  for (std::size_t i = 0; i < 3; ++i) {
    const double gv = g[i];
    EXPECT_DOUBLE_EQ(out[i], gv / (1.0 + std::exp(-gv)) * u[i]);
  }
  EXPECT_THROW(swiglu(Tensor({1, 2}), Tensor({2, 1})), DimensionError);
}

TEST(Tensor, SplitConcatRoundTrip) {
  Gen g(5);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t parts = g.dim(1, 4);
    Shape shape{g.dim(1, 3), g.dim(1, 3) * parts, g.dim(1, 3)};
    const std::size_t axis = g.dim(0, 2);
    shape[axis] = g.dim(1, 3) * parts;
    const Tensor t = seeded_fill(shape, 300 + trial);
    const auto pieces = split_axis(t, axis, parts);
    ASSERT_EQ(pieces.size(), parts);
    EXPECT_EQ(concat_axis(pieces, axis), t);
  }
}

TEST(Tensor, SplitMatchesIndexSlicing) {
  const Tensor t = seeded_fill({2, 6}, 3);
  const auto cols = split_axis(t, 1, 3);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(cols[p](i, j), t(i, p * 2 + j));
}

TEST(Tensor, SplitIndivisibleThrows) {
  EXPECT_THROW(split_axis(Tensor({2, 6}), 1, 4), DivisibilityError);
  EXPECT_THROW(split_axis(Tensor({2, 6}), 2, 2), DimensionError);
}

TEST(Tensor, ScaleRowsAndAdd) {
  const Tensor t = Tensor::matrix({{1, 2}, {3, 4}});
  const std::vector<double> f{2.0, -1.0};
  EXPECT_EQ(scale_rows(t, f), Tensor::matrix({{2, 4}, {-3, -4}}));
  EXPECT_EQ(add(t, t), Tensor::matrix({{2, 4}, {6, 8}}));
  EXPECT_THROW(add(t, Tensor({2, 3})), DimensionError);
}

TEST(Tensor, UnitIntervalMappingEndpoints) {
  EXPECT_EQ(unit_interval_value(0), -1.0);
  EXPECT_LT(unit_interval_value(~0ULL), 1.0);
  EXPECT_EQ(unit_interval_value(1ULL << 63), 0.0);
}

// Goldens from tests/oracles/mt64.py (an independent MT19937-64).
TEST(Tensor, SeededFillGolden) {
  const Tensor t = seeded_fill({2, 3}, 42);
  const std::vector<double> expect{0.5103110659090779,  0.27806278770939485, 0.5042904014960532,
                                   -0.7274546327351259, 0.8065379328567566,  -0.8118633764743259};
  ASSERT_EQ(t.numel(), expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(t[i], expect[i]) << i;
}

TEST(Tensor, EngineMatchesReferenceSequence) {
  std::mt19937_64 e;
  e.discard(9999);
  EXPECT_EQ(e(), 9981545732273789042ULL);
}

TEST(Tensor, SeededFillRangeAndDeterminism) {
  const Tensor a = seeded_fill({64, 64}, 9), b = seeded_fill({64, 64}, 9), c = seeded_fill({64, 64}, 10);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
  for (double v : a.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Tensor, TransposeTwiceIsIdentity) {
  const Tensor t = seeded_fill({3, 5}, 1);
  EXPECT_EQ(transpose(transpose(t)), t);
  EXPECT_EQ(transpose(t)(4, 2), t(2, 4));
}
