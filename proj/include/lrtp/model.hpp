// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <boost/rational.hpp>

#include "lrtp/error.hpp"
#include "lrtp/norm.hpp"
#include "lrtp/tensor.hpp"

namespace lrtp {

using Ratio = boost::rational<std::int64_t>;

enum class Variant { FullRank, SVD, CoLA, LaX };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::FullRank: return "full-rank";
    case Variant::SVD: return "svd";
    case Variant::CoLA: return "cola";
    case Variant::LaX: return "lax";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  if (name == "full-rank" || name == "full" || name == "fullrank") return Variant::FullRank;
  if (name == "svd") return Variant::SVD;
  if (name == "cola") return Variant::CoLA;
  if (name == "lax") return Variant::LaX;
  throw ConfigError("unknown low-rank architecture type '" + std::string(name) + "'");
}

inline bool is_low_rank(Variant v) { return v != Variant::FullRank; }

/// The seven linear projections of a decoder block, in execution order.
enum class Proj { Q, K, V, O, Gate, Up, Down };
inline constexpr std::array<Proj, 7> kProjections{Proj::Q,    Proj::K,  Proj::V,   Proj::O,
                                                  Proj::Gate, Proj::Up, Proj::Down};

inline const char* to_string(Proj p) {
  constexpr std::array<const char*, 7> names{"q", "k", "v", "o", "gate", "up", "down"};
  return names[static_cast<std::size_t>(p)];
}

inline std::size_t index(Proj p) { return static_cast<std::size_t>(p); }

struct ModelConfig {
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t d = 0;
  std::size_t d_ff = 0;
  std::size_t r = 0;
  double eps = 1e-6;

  /// d_ff / d
  Ratio alpha() const { return {static_cast<std::int64_t>(d_ff), static_cast<std::int64_t>(d)}; }
  /// d / r
  Ratio beta() const { return {static_cast<std::int64_t>(d), static_cast<std::int64_t>(r)}; }

  void validate() const {
    if (layers == 0 || heads == 0 || d == 0 || d_ff == 0 || r == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (r > d) throw ConfigError("rank r=" + std::to_string(r) + " exceeds hidden width d=" + std::to_string(d));
    if (d % heads != 0) {
      throw ConfigError("hidden width d=" + std::to_string(d) + " is not divisible by heads=" +
                        std::to_string(heads));
    }
    if (!(eps >= 0.0)) throw ConfigError("rmsnorm epsilon must be non-negative");
  }

  std::size_t in_features(Proj p) const { return p == Proj::Down ? d_ff : d; }
  std::size_t out_features(Proj p) const {
    return (p == Proj::Gate || p == Proj::Up) ? d_ff : d;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig preset(std::string_view name) {
  struct Row {
    std::string_view name;
    ModelConfig cfg;
  };
  static const std::array<Row, 5> table{{
      {"1B", {24, 32, 2048, 5472, 512}},
      {"3B", {28, 24, 3072, 8192, 768}},
      {"7B", {32, 32, 4096, 11008, 1024}},
      {"13B", {40, 40, 5120, 13824, 1280}},
      {"30B", {36, 64, 8192, 22016, 2048}},
  }};
  for (const auto& row : table)
    if (row.name == name) return row.cfg;
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

/// Either one full matrix [out, in] or a factor pair: down [r, in] then up [out, r].
struct ProjectionWeights {
  std::optional<Tensor> full;
  std::optional<Tensor> down;
  std::optional<Tensor> up;
};

/// Low-rank pre-activations of every projection, each [b, s, r].
using HBundle = std::array<Tensor, 7>;

struct DecoderBlockWeights {
  ModelConfig cfg;
  Variant variant = Variant::FullRank;
  std::array<ProjectionWeights, 7> proj;
  Tensor norm1;  // [d]
  Tensor norm2;  // [d]

  const ProjectionWeights& operator[](Proj p) const { return proj[index(p)]; }
  ProjectionWeights& operator[](Proj p) { return proj[index(p)]; }
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over (seed, stream)
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Tensor scaled_fill(const Shape& shape, std::uint64_t seed, double scale) {
  Tensor t = seeded_fill(shape, seed);
  for (auto& v : t.data()) v *= scale;
  return t;
}

}  // namespace detail

inline DecoderBlockWeights build_block(const ModelConfig& cfg, Variant variant, std::uint64_t seed) {
  cfg.validate();
  DecoderBlockWeights block;
  block.cfg = cfg;
  block.variant = variant;
  std::uint64_t stream = 0;
  for (Proj p : kProjections) {
    const std::size_t in = cfg.in_features(p), out = cfg.out_features(p);
    auto& w = block[p];
    if (variant == Variant::FullRank) {
      w.full = detail::scaled_fill({out, in}, detail::derive_seed(seed, stream++),
                                   1.0 / std::sqrt(static_cast<double>(in)));
    } else {
      w.down = detail::scaled_fill({cfg.r, in}, detail::derive_seed(seed, stream++),
                                   1.0 / std::sqrt(static_cast<double>(in)));
      w.up = detail::scaled_fill({out, cfg.r}, detail::derive_seed(seed, stream++),
                                 1.0 / std::sqrt(static_cast<double>(cfg.r)));
    }
  }
  // Scales near one keep the toy activations well conditioned.
  block.norm1 = detail::scaled_fill({cfg.d}, detail::derive_seed(seed, 100), 0.25);
  block.norm2 = detail::scaled_fill({cfg.d}, detail::derive_seed(seed, 101), 0.25);
  for (auto& v : block.norm1.data()) v += 1.0;
  for (auto& v : block.norm2.data()) v += 1.0;
  return block;
}

/// Number of linear-layer parameters actually held by the block.
inline std::uint64_t linear_parameter_count(const DecoderBlockWeights& block) {
  std::uint64_t n = 0;
  for (const auto& w : block.proj)
    for (const auto* t : {&w.full, &w.down, &w.up})
      if (*t) n += (*t)->numel();
  return n;
}

/// Rank-r pathway function between the down and up factor.
///   SVD  - identity
///   CoLA - silu(z) * z
///   LaX  - z + h_prev
inline Tensor bottleneck(Variant variant, const Tensor& z, const Tensor* h_prev) {
  switch (variant) {
    case Variant::CoLA: return swiglu(z, z);
    case Variant::LaX:
      if (!h_prev) throw DimensionError("lax pathway needs the previous layer's activations");
      return add(z, *h_prev);
    default: return z;
  }
}

struct AttentionResult {
  Tensor out;
  std::uint64_t flops = 0;
};

/// Causal softmax attention over heads laid out contiguously along the last axis.
/// q, k, v are [b, s, heads * head_dim].
inline AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::size_t heads) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention expects equal [b,s,w] operands");
  }
  const std::size_t b = q.extent(0), s = q.extent(1), w = q.extent(2);
  if (heads == 0 || w % heads != 0) {
    throw DivisibilityError("attention width " + std::to_string(w) + " is not divisible by " +
                            std::to_string(heads) + " heads");
  }
  const std::size_t hd = w / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out({b, s, w}, 0.0, q.element_bytes());
  std::vector<double> p(s);
  auto at = [&](std::size_t bi, std::size_t si, std::size_t col) { return (bi * s + si) * w + col; };
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * hd;
      for (std::size_t i = 0; i < s; ++i) {
        double peak = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q[at(bi, i, c0 + c)] * k[at(bi, j, c0 + c)];
          p[j] = dot * scale;
          peak = std::max(peak, p[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - peak);
          total += p[j];
        }
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += p[j] * v[at(bi, j, c0 + c)];
          out[at(bi, i, c0 + c)] = acc / total;
        }
      }
    }
  }
  // Score and value products counted densely: 2 * (2 * s * s * head_dim) per head.
  return {std::move(out), 4ULL * b * s * s * w};
}

struct ForwardResult {
  Tensor y;
  std::optional<HBundle> h_cur;
};

namespace detail {

inline Tensor project(const DecoderBlockWeights& block, Proj p, const Tensor& x,
                      const std::optional<HBundle>& h_prev, std::optional<HBundle>& h_cur) {
  Shape out_shape = x.shape();
  out_shape.back() = block.cfg.out_features(p);
  const auto& w = block[p];
  if (block.variant == Variant::FullRank) {
    return linear(x, *w.full).out.reshaped(out_shape);
  }
  Shape mid_shape = x.shape();
  mid_shape.back() = block.cfg.r;
  Tensor h = linear(x, *w.down).out.reshaped(mid_shape);
  const Tensor* prev = h_prev ? &(*h_prev)[index(p)] : nullptr;
  Tensor z = bottleneck(block.variant, h, prev);
  if (h_cur) (*h_cur)[index(p)] = h;
  return linear(z, *w.up).out.reshaped(out_shape);
}

}  // namespace detail

/// Single-device decoder block: pre-norm attention and SwiGLU MLP, both residual.
/// `layer` only matters for LaX: layer 0 without h_prev uses a zero pathway residual.
inline ForwardResult reference_forward(const DecoderBlockWeights& block, const Tensor& x,
                                       std::optional<HBundle> h_prev = std::nullopt,
                                       std::size_t layer = 0) {
  const auto& cfg = block.cfg;
  if (x.rank() != 3 || x.extent(2) != cfg.d) {
    throw DimensionError("block input must be [b,s," + std::to_string(cfg.d) + "], got " +
                         shape_str(x.shape()));
  }
  std::optional<HBundle> h_cur;
  if (block.variant == Variant::LaX) {
    if (!h_prev) {
      if (layer > 0) {
        throw DimensionError("lax layer " + std::to_string(layer) +
                             " requires the previous layer's low-rank activations");
      }
      h_prev.emplace();
      for (auto& h : *h_prev) h = Tensor({x.extent(0), x.extent(1), cfg.r});
    }
    h_cur.emplace();
  } else {
    h_prev.reset();
  }

  auto proj = [&](Proj p, const Tensor& in) { return detail::project(block, p, in, h_prev, h_cur); };

  const Tensor n1 = norm::rmsnorm_reference(x, block.norm1, cfg.eps);
  const Tensor q = proj(Proj::Q, n1), k = proj(Proj::K, n1), v = proj(Proj::V, n1);
  const Tensor attn = attention(q, k, v, cfg.heads).out;
  const Tensor x2 = add(x, proj(Proj::O, attn));
  const Tensor n2 = norm::rmsnorm_reference(x2, block.norm2, cfg.eps);
  const Tensor m = swiglu(proj(Proj::Gate, n2), proj(Proj::Up, n2));
  return {add(x2, proj(Proj::Down, m)), std::move(h_cur)};
}

}  // namespace lrtp
