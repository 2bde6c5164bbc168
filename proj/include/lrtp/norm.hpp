// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "lrtp/collectives.hpp"
#include "lrtp/tensor.hpp"

namespace lrtp::norm {

namespace detail {

inline Shape stat_shape(const Tensor& x) {
  Shape s = x.shape();
  s.back() = 1;
  return s;
}

inline void check_eps(double eps) {
  if (!(eps >= 0.0)) throw Error("rmsnorm epsilon must be non-negative");
}

inline void check_gamma(const Tensor& x, const Tensor& gamma) {
  if (gamma.numel() != x.cols()) {
    throw DimensionError("rmsnorm scale length " + std::to_string(gamma.numel()) +
                         " does not match hidden width " + std::to_string(x.cols()));
  }
}

}  // namespace detail

/// Per-row sum of squares over the innermost axis, shaped [..., 1].
inline Tensor sum_of_squares(const Tensor& x) {
  Tensor out(detail::stat_shape(x), 0.0, x.element_bytes());
  const std::size_t w = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w; ++j) acc += x[i * w + j] * x[i * w + j];
    out[i] = acc;
  }
  return out;
}

/// sqrt(sum_sq / width + eps), elementwise over the statistic tensor.
inline Tensor rms_from_sum_sq(const Tensor& sum_sq, std::size_t width, double eps) {
  Tensor out = sum_sq;
  for (auto& v : out.data()) v = std::sqrt(v / static_cast<double>(width) + eps);
  return out;
}

/// x * gamma / rms, with one rms value per row.
inline Tensor normalize(const Tensor& x, const Tensor& gamma, const Tensor& rms) {
  detail::check_gamma(x, gamma);
  if (rms.numel() != x.rows()) throw DimensionError("rmsnorm statistic count mismatch");
  Tensor out = x;
  const std::size_t w = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * w + j] * gamma[j] / rms[i];
  return out;
}

inline Tensor rmsnorm_reference(const Tensor& x, const Tensor& gamma, double eps) {
  detail::check_eps(eps);
  return normalize(x, gamma, rms_from_sum_sq(sum_of_squares(x), x.cols(), eps));
}

/// Statistics of one sharded normalization. `correction[i]` is rms_local[i] / rms_global;
/// identically one when the group has a single rank.
struct NormStats {
  std::vector<Tensor> rms_local;
  Tensor rms_global;
  std::vector<Tensor> correction;
};

inline std::vector<Tensor> corrections(const std::vector<Tensor>& rms_local,
                                       const Tensor& rms_global) {
  std::vector<Tensor> out;
  for (const auto& local : rms_local) {
    Tensor c = local;
    for (std::size_t i = 0; i < c.numel(); ++i) c[i] = local[i] / rms_global[i];
    out.push_back(std::move(c));
  }
  return out;
}

namespace detail {

inline void check_shards(std::span<const Tensor> shards, std::span<const Tensor> gammas) {
  if (shards.empty() || shards.size() != gammas.size()) {
    throw DimensionError("rmsnorm needs one scale shard per activation shard");
  }
  for (std::size_t r = 0; r < shards.size(); ++r) {
    if (shards[r].shape() != shards[0].shape()) {
      throw DimensionError("rmsnorm shard " + std::to_string(r) + " width differs from rank 0");
    }
    check_gamma(shards[r], gammas[r]);
  }
}

}  // namespace detail

struct ShardedNormResult {
  std::vector<Tensor> out;
  NormStats stats;
};

/// Explicit statistic synchronization: one standalone all-reduce of per-rank sums of
/// squares, then every shard is normalized by the exact global RMS.
inline ShardedNormResult sync_rmsnorm(std::span<const Tensor> shards, std::span<const Tensor> gammas,
                                      double eps, const ProcessGroup& group) {
  detail::check_eps(eps);
  detail::check_shards(shards, gammas);
  const std::size_t width = shards[0].cols() * shards.size();

  std::vector<Tensor> partial_ss;
  ShardedNormResult result;
  for (const auto& x : shards) {
    partial_ss.push_back(sum_of_squares(x));
    result.stats.rms_local.push_back(rms_from_sum_sq(partial_ss.back(), x.cols(), eps));
  }
  const Tensor total = all_reduce(group, partial_ss, Tag::NormStat);
  result.stats.rms_global = rms_from_sum_sq(total, width, eps);
  result.stats.correction = corrections(result.stats.rms_local, result.stats.rms_global);
  for (std::size_t r = 0; r < shards.size(); ++r)
    result.out.push_back(normalize(shards[r], gammas[r], result.stats.rms_global));
  return result;
}

/// Local half of the online scheme: each rank normalizes with its own RMS.
struct LocalNorm {
  Tensor normalized;
  Tensor sum_sq;
  Tensor rms_local;
};

inline LocalNorm online_local(const Tensor& shard, const Tensor& gamma, double eps) {
  detail::check_eps(eps);
  LocalNorm ln;
  ln.sum_sq = sum_of_squares(shard);
  ln.rms_local = rms_from_sum_sq(ln.sum_sq, shard.cols(), eps);
  ln.normalized = normalize(shard, gamma, ln.rms_local);
  return ln;
}

/// Undo the local scaling on a partial GEMM output before it enters the reduction:
/// partial * rms_local reconstructs the contribution of the un-normalized shard.
inline Tensor premultiply_local(const Tensor& partial, const Tensor& rms_local) {
  return scale_rows(partial, rms_local.data());
}

/// Apply the common 1/rms_global factor to a reduced output.
inline Tensor recover(const Tensor& reduced, const Tensor& rms_global) {
  std::vector<double> inv(rms_global.numel());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0 / rms_global[i];
  return scale_rows(reduced, inv);
}

struct OnlineChunkResult {
  Tensor y;
  NormStats stats;
};

/// Normalization with local statistics, a row-split GEMM (weights stored
/// [d_local, r] per rank), and one coalesced all-reduce carrying both the GEMM
/// output and the statistics. Recovery reproduces normalization by the global RMS.
inline OnlineChunkResult online_rmsnorm_chunk(std::span<const Tensor> shards,
                                              std::span<const Tensor> weights,
                                              std::span<const Tensor> gammas, double eps,
                                              const ProcessGroup& group) {
  detail::check_shards(shards, gammas);
  if (weights.size() != shards.size()) throw DimensionError("one weight shard per rank required");
  const std::size_t width = shards[0].cols() * shards.size();

  std::vector<Tensor> partials, stats;
  OnlineChunkResult result;
  for (std::size_t r = 0; r < shards.size(); ++r) {
    if (weights[r].rank() != 2 || weights[r].extent(0) != shards[r].cols()) {
      throw DimensionError("online rmsnorm weight shard " + std::to_string(r) +
                           " does not match local width");
    }
    LocalNorm ln = online_local(shards[r], gammas[r], eps);
    Tensor h = matmul(ln.normalized.as_matrix(), weights[r]).out;
    partials.push_back(premultiply_local(h, ln.rms_local));
    stats.push_back(ln.sum_sq);
    result.stats.rms_local.push_back(std::move(ln.rms_local));
  }
  auto [reduced, total_ss] = all_reduce_coalesced(group, partials, stats);
  result.stats.rms_global = rms_from_sum_sq(total_ss, width, eps);
  result.stats.correction = corrections(result.stats.rms_local, result.stats.rms_global);

  Shape out_shape = shards[0].shape();
  out_shape.back() = weights[0].extent(1);
  result.y = recover(reduced, result.stats.rms_global).reshaped(out_shape);
  return result;
}

}  // namespace lrtp::norm
