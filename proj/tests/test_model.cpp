// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "lrtp/model.hpp"

using namespace lrtp;

namespace {

const ModelConfig kToy{.layers = 2, .heads = 4, .d = 16, .d_ff = 40, .r = 4};

// Scalar re-implementation of the block on flat arrays, written without the
// library's tensor ops.
struct Flat {
  std::size_t rows, cols;
  std::vector<double> v;
  double& at(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

Flat flat(const Tensor& t) { return {t.rows(), t.cols(), t.values()}; }

Flat apply(const Flat& x, const Tensor& w) {  // w is [out, in]
  Flat y{x.rows, w.extent(0), std::vector<double>(x.rows * w.extent(0))};
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t o = 0; o < w.extent(0); ++o) {
      double acc = 0.0;
      for (std::size_t c = 0; c < x.cols; ++c) acc += x.at(i, c) * w(o, c);
      y.at(i, o) = acc;
    }
  return y;
}

Flat rmsnorm(const Flat& x, const Tensor& g, double eps) {
  Flat y = x;
  for (std::size_t i = 0; i < x.rows; ++i) {
    double ms = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) ms += x.at(i, c) * x.at(i, c);
    const double rms = std::sqrt(ms / static_cast<double>(x.cols) + eps);
    for (std::size_t c = 0; c < x.cols; ++c) y.at(i, c) = x.at(i, c) / rms * g[c];
  }
  return y;
}

Flat causal_attention(const Flat& q, const Flat& k, const Flat& v, std::size_t b, std::size_t s,
                      std::size_t heads) {
  Flat o{q.rows, q.cols, std::vector<double>(q.v.size())};
  const std::size_t hd = q.cols / heads;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < s; ++i) {
        std::vector<double> w(i + 1);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q.at(bi * s + i, h * hd + c) * k.at(bi * s + j, h * hd + c);
          w[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[j]);
        }
        for (auto& e : w) z += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += w[j] / z * v.at(bi * s + j, h * hd + c);
          o.at(bi * s + i, h * hd + c) = acc;
        }
      }
  return o;
}

Flat plus(Flat a, const Flat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

Flat oracle_full_rank(const DecoderBlockWeights& blk, const Tensor& x) {
  const auto& c = blk.cfg;
  const std::size_t b = x.extent(0), s = x.extent(1);
  const Flat xf = flat(x);
  const Flat n1 = rmsnorm(xf, blk.norm1, c.eps);
  auto W = [&](Proj p) -> const Tensor& { return *blk[p].full; };
  const Flat a = causal_attention(apply(n1, W(Proj::Q)), apply(n1, W(Proj::K)), apply(n1, W(Proj::V)), b, s, c.heads);
  const Flat x2 = plus(xf, apply(a, W(Proj::O)));
  const Flat n2 = rmsnorm(x2, blk.norm2, c.eps);
  Flat g = apply(n2, W(Proj::Gate));
  const Flat u = apply(n2, W(Proj::Up));
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = g.v[i] / (1.0 + std::exp(-g.v[i])) * u.v[i];
  return plus(x2, apply(g, W(Proj::Down)));
}

double diff(const Flat& a, const Tensor& t) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) worst = std::max(worst, std::abs(a.v[i] - t[i]));
  return worst;
}

}  // namespace

TEST(Model, VariantNamesRoundTrip) {
  for (Variant v : {Variant::FullRank, Variant::SVD, Variant::CoLA, Variant::LaX})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("tucker"), ConfigError);
}

TEST(Model, ConfigValidation) {
  EXPECT_NO_THROW(kToy.validate());
  auto bad = kToy;
  bad.r = 32;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = kToy;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = kToy;
  bad.eps = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_EQ(kToy.alpha(), Ratio(5, 2));
  EXPECT_EQ(kToy.beta(), Ratio(4));
}

TEST(Model, PresetsFromModelTable) {
  const auto c = preset("7B");
  EXPECT_EQ(c.layers, 32u);
  EXPECT_EQ(c.d, 4096u);
  EXPECT_EQ(c.d_ff, 11008u);
  EXPECT_EQ(c.r, 1024u);
  EXPECT_EQ(c.heads, 32u);
  for (auto name : {"1B", "3B", "7B", "13B", "30B"}) EXPECT_EQ(preset(name).beta(), Ratio(4)) << name;
  EXPECT_THROW(preset("70B"), ConfigError);
}

TEST(Model, ParameterCountsMatchClosedForms) {
  const std::uint64_t d = kToy.d, f = kToy.d_ff, r = kToy.r;
  EXPECT_EQ(linear_parameter_count(build_block(kToy, Variant::FullRank, 1)), 4 * d * d + 3 * d * f);
  for (Variant v : {Variant::SVD, Variant::CoLA, Variant::LaX})
    EXPECT_EQ(linear_parameter_count(build_block(kToy, v, 1)), 11 * d * r + 3 * f * r);
}

TEST(Model, BuildIsDeterministic) {
  const auto a = build_block(kToy, Variant::CoLA, 5), b = build_block(kToy, Variant::CoLA, 5);
  const auto c = build_block(kToy, Variant::CoLA, 6);
  EXPECT_EQ(*a[Proj::Q].down, *b[Proj::Q].down);
  EXPECT_EQ(a.norm2, b.norm2);
  EXPECT_FALSE(*a[Proj::Q].down == *c[Proj::Q].down);
  EXPECT_EQ(a[Proj::Gate].up->shape(), (Shape{kToy.d_ff, kToy.r}));
  EXPECT_EQ(a[Proj::Down].down->shape(), (Shape{kToy.r, kToy.d_ff}));
}

TEST(Model, FullRankForwardMatchesScalarOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto blk = build_block(kToy, Variant::FullRank, seed);
    const Tensor x = seeded_fill({2, 8, kToy.d}, 50 + seed);
    EXPECT_LE(diff(oracle_full_rank(blk, x), reference_forward(blk, x).y), 1e-12);
  }
}

TEST(Model, SvdEqualsFullRankWithComposedWeights) {
  const auto lr = build_block(kToy, Variant::SVD, 4);
  DecoderBlockWeights fr = lr;
  fr.variant = Variant::FullRank;
  for (Proj p : kProjections) {
    fr[p].full = matmul(*lr[p].up, *lr[p].down).out;
    fr[p].down.reset();
    fr[p].up.reset();
  }
  const Tensor x = seeded_fill({1, 4, kToy.d}, 8);
  EXPECT_LE(max_abs_diff(reference_forward(lr, x).y, reference_forward(fr, x).y), 1e-12);
}

TEST(Model, PathwayFunctions) {
  const Tensor z = Tensor::matrix({{-1.0, 2.0}});
  const Tensor h = Tensor::matrix({{0.5, 0.25}});
  EXPECT_EQ(bottleneck(Variant::SVD, z, nullptr), z);
  EXPECT_EQ(bottleneck(Variant::LaX, z, &h), Tensor::matrix({{-0.5, 2.25}}));
  const Tensor c = bottleneck(Variant::CoLA, z, nullptr);
  EXPECT_DOUBLE_EQ(c[1], 2.0 / (1.0 + std::exp(-2.0)) * 2.0);
  EXPECT_THROW(bottleneck(Variant::LaX, z, nullptr), DimensionError);
}

TEST(Model, LaxLayerZeroUsesZeroResidual) {
  const auto lax = build_block(kToy, Variant::LaX, 9);
  DecoderBlockWeights svd = lax;
  svd.variant = Variant::SVD;
  const Tensor x = seeded_fill({2, 4, kToy.d}, 1);
  const auto out = reference_forward(lax, x);
  EXPECT_EQ(out.y, reference_forward(svd, x).y);
  ASSERT_TRUE(out.h_cur.has_value());
  EXPECT_EQ((*out.h_cur)[index(Proj::Q)].shape(), (Shape{2, 4, kToy.r}));
  EXPECT_THROW(reference_forward(lax, x, std::nullopt, 1), DimensionError);
  // A nonzero carried residual changes the output.
  const auto next = reference_forward(lax, x, out.h_cur, 1);
  EXPECT_GT(max_abs_diff(next.y, out.y), 0.0);
}

TEST(Model, AttentionIsCausal) {
  const Tensor q = seeded_fill({1, 4, 8}, 1), k = seeded_fill({1, 4, 8}, 2), v = seeded_fill({1, 4, 8}, 3);
  Tensor v2 = v;
  for (std::size_t c = 0; c < 8; ++c) v2[3 * 8 + c] += 1.0;  // perturb the last position
  const auto a = attention(q, k, v, 2), b = attention(q, k, v2, 2);
  for (std::size_t i = 0; i < 3 * 8; ++i) EXPECT_EQ(a.out[i], b.out[i]);
  EXPECT_EQ(a.flops, 4u * 1 * 4 * 4 * 8);
  EXPECT_THROW(attention(q, k, v, 3), DivisibilityError);
}

TEST(Model, RejectsWrongInputWidth) {
  const auto blk = build_block(kToy, Variant::SVD, 1);
  EXPECT_THROW(reference_forward(blk, Tensor({1, 2, 8})), DimensionError);
}
