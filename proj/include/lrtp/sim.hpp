// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lrtp/collectives.hpp"
#include "lrtp/model.hpp"
#include "lrtp/norm.hpp"
#include "lrtp/plan.hpp"

namespace lrtp::sim {

inline std::string weight_key(Proj p, Factor f) {
  return std::string(to_string(p)) + "." + to_string(f);
}

inline std::string norm_key(int slot) { return "norm" + std::to_string(slot); }

struct RankState {
  int rank = 0;
  std::map<std::string, Tensor> weights;
  std::map<std::string, Tensor> ws;

  const Tensor& buffer(const std::string& name) const {
    auto it = ws.find(name);
    if (it == ws.end()) {
      throw SimulationFault("rank " + std::to_string(rank) + " has no buffer '" + name + "'");
    }
    return it->second;
  }
  const Tensor& weight(const std::string& key) const {
    auto it = weights.find(key);
    if (it == weights.end()) {
      throw SimulationFault("rank " + std::to_string(rank) + " has no weight '" + key + "'");
    }
    return it->second;
  }
};

namespace detail {

inline const Tensor& logical_weight(const DecoderBlockWeights& block, Proj p, Factor f) {
  const auto& w = block[p];
  const std::optional<Tensor>& t = f == Factor::Full ? w.full : f == Factor::Down ? w.down : w.up;
  if (!t) {
    throw SimulationFault(std::string("block has no ") + to_string(f) + " weight for " + to_string(p));
  }
  return *t;
}

inline Tensor shard_of(const Tensor& w, const ShardSpec& spec, std::size_t tp, std::size_t rank) {
  if (spec.kind == ShardKind::Replicated || tp == 1) return w;
  if (w.extent(spec.axis) != spec.global) {
    throw SimulationFault("weight " + shape_str(w.shape()) + " does not match shard spec extent " +
                          std::to_string(spec.global));
  }
  return split_axis(w, spec.axis, tp)[rank];
}

template <class F>
void for_each_op(const ShardPlan& plan, F&& f) {
  for (const auto& c : plan.chunks)
    for (const auto& op : c.ops) f(op);
  for (const auto& op : plan.tail) f(op);
}

}  // namespace detail

/// Per-rank weight shards laid out as the plan's shard specs require.
inline std::vector<RankState> shard_weights(const ShardPlan& plan, const DecoderBlockWeights& block) {
  if (block.variant != plan.variant || !(block.cfg == plan.cfg)) {
    throw SimulationFault("block weights were built for a different configuration than the plan");
  }
  const std::size_t tp = plan.shape.tp;
  std::vector<RankState> ranks(tp);
  for (std::size_t r = 0; r < tp; ++r) {
    ranks[r].rank = static_cast<int>(r);
    const bool sharded = plan.residual == Layout::ShardedAlongD && tp > 1;
    ranks[r].weights[norm_key(1)] = sharded ? split_axis(block.norm1, 0, tp)[r] : block.norm1;
    ranks[r].weights[norm_key(2)] = sharded ? split_axis(block.norm2, 0, tp)[r] : block.norm2;
  }
  detail::for_each_op(plan, [&](const Op& op) {
    if (op.kind != OpKind::Linear && op.kind != OpKind::GroupedLinear && op.kind != OpKind::BatchedLinear) return;
    for (Proj p : op.projs) {
      const Tensor& w = detail::logical_weight(block, p, op.factor);
      for (std::size_t r = 0; r < tp; ++r)
        ranks[r].weights[weight_key(p, op.factor)] = detail::shard_of(w, op.shard, tp, r);
    }
  });
  return ranks;
}

/// Rank-0 compute counters.
struct Counters {
  std::uint64_t launches = 0;
  std::uint64_t gemm_flops = 0;
  std::uint64_t attention_flops = 0;
};

/// Interprets plan ops over all ranks in a round-robin. Collectives are rendezvous
/// points recorded into the trace under the current chunk id and pass.
class Executor {
 public:
  Executor(const ShardPlan& plan, std::vector<RankState>& ranks, Trace& trace, Pass pass = Pass::Forward)
      : plan_(plan), ranks_(ranks) {
    group_.size = static_cast<int>(ranks.size());
    group_.trace = &trace;
    group_.element_bytes = plan.options.element_bytes;
    group_.pass = pass;
  }

  const Counters& counters() const { return counters_; }

  void set_chunk(const std::string& id) { group_.chunk_id = id; }

  void run_op(const Op& op) {
    switch (op.kind) {
      case OpKind::RmsNorm: return run_norm(op);
      case OpKind::Linear: return run_linear(op);
      case OpKind::GroupedLinear: return run_grouped(op);
      case OpKind::BatchedLinear: return run_batched(op);
      case OpKind::Gather: return run_gather(op);
      default: break;
    }
    for (auto& rs : ranks_) {
      auto in = [&](std::size_t i) -> const Tensor& { return rs.buffer(op.in.at(i)); };
      switch (op.kind) {
        case OpKind::Split: {
          auto parts = split_axis(in(0), in(0).rank() - 1, op.out.size());
          for (std::size_t i = 0; i < parts.size(); ++i) rs.ws[op.out[i]] = std::move(parts[i]);
          break;
        }
        case OpKind::Bottleneck:
          rs.ws[op.out[0]] = bottleneck(plan_.variant, in(0), op.in.size() > 1 ? &in(1) : nullptr);
          break;
        case OpKind::Attention: {
          const std::size_t heads = op.sharded ? plan_.cfg.heads / ranks_.size() : plan_.cfg.heads;
          auto res = attention(in(0), in(1), in(2), heads);
          if (rs.rank == 0) counters_.attention_flops += res.flops;
          rs.ws[op.out[0]] = std::move(res.out);
          break;
        }
        case OpKind::SwiGLU: rs.ws[op.out[0]] = swiglu(in(0), in(1)); break;
        case OpKind::ResidualAdd: rs.ws[op.out[0]] = add(in(0), in(1)); break;
        default: throw SimulationFault(std::string("unhandled op ") + to_string(op.kind));
      }
    }
  }

  void run_collective(const ChunkCollective& c) {
    const std::size_t tp = ranks_.size();
    std::vector<Tensor> mains, stats;
    for (auto& rs : ranks_) {
      std::vector<Tensor> parts;
      for (const auto& name : c.in) {
        const Tensor& t = rs.buffer(name);
        parts.push_back(c.recover_slot ? norm::premultiply_local(t, rs.buffer(local_rms_name(c.recover_slot)))
                                       : t);
      }
      mains.push_back(parts.size() == 1 ? parts[0] : concat_axis(parts, parts[0].rank() - 1));
      if (c.stats_slot) stats.push_back(rs.buffer(sum_sq_name(c.stats_slot)));
    }
    Tensor reduced;
    if (c.stats_slot) {
      auto [main, total] = all_reduce_coalesced(group_, mains, stats);
      const Tensor global = norm::rms_from_sum_sq(total, plan_.cfg.d, plan_.cfg.eps);
      for (auto& rs : ranks_) rs.ws[stat_name(c.stats_slot)] = global;
      reduced = std::move(main);
    } else {
      reduced = all_reduce(group_, mains);
    }
    if (c.recover_slot) reduced = norm::recover(reduced, ranks_[0].buffer(stat_name(c.recover_slot)));
    std::vector<Tensor> outs{reduced};
    if (c.out.size() > 1) {
      outs.clear();
      std::size_t offset = 0;
      const std::size_t w = reduced.cols();
      for (std::size_t width : c.widths) {
        Shape shape = reduced.shape();
        shape.back() = width;
        Tensor part(shape);
        for (std::size_t i = 0; i < reduced.rows(); ++i)
          for (std::size_t j = 0; j < width; ++j) part[i * width + j] = reduced[i * w + offset + j];
        outs.push_back(std::move(part));
        offset += width;
      }
    }
    for (std::size_t r = 0; r < tp; ++r)
      for (std::size_t i = 0; i < c.out.size(); ++i) ranks_[r].ws[c.out[i]] = outs[i];
  }

  void run_chunk(const TPChunk& chunk) {
    set_chunk(chunk.id);
    for (const auto& op : chunk.ops) run_op(op);
    run_collective(chunk.collective);
  }

 private:
  Shape with_width(const Tensor& x, std::size_t w) const {
    Shape s = x.shape();
    s.back() = w;
    return s;
  }

  void count_gemm(const RankState& rs, std::uint64_t flops, int launches) {
    if (rs.rank != 0) return;
    counters_.gemm_flops += flops;
    counters_.launches += static_cast<std::uint64_t>(launches);
  }

  void run_norm(const Op& op) {
    const double eps = plan_.cfg.eps;
    const std::string& in = op.in[0];
    const std::string& out = op.out[0];
    const std::string gamma = norm_key(op.slot);
    if (op.norm == NormMode::Online) {
      for (auto& rs : ranks_) {
        auto ln = norm::online_local(rs.buffer(in), rs.weight(gamma), eps);
        rs.ws[out] = std::move(ln.normalized);
        rs.ws[sum_sq_name(op.slot)] = std::move(ln.sum_sq);
        rs.ws[local_rms_name(op.slot)] = std::move(ln.rms_local);
      }
      return;
    }
    if (op.norm == NormMode::Sync) {
      const std::string stat = stat_name(op.slot);
      // A re-forward reuses the stored global statistic instead of reducing again.
      if (group_.pass == Pass::Reforward && ranks_[0].ws.contains(stat)) {
        for (auto& rs : ranks_) rs.ws[out] = norm::normalize(rs.buffer(in), rs.weight(gamma), rs.buffer(stat));
        return;
      }
      std::vector<Tensor> shards, gammas;
      for (auto& rs : ranks_) {
        shards.push_back(rs.buffer(in));
        gammas.push_back(rs.weight(gamma));
      }
      auto res = norm::sync_rmsnorm(shards, gammas, eps, group_);
      for (std::size_t r = 0; r < ranks_.size(); ++r) {
        ranks_[r].ws[out] = std::move(res.out[r]);
        ranks_[r].ws[stat] = res.stats.rms_global;
      }
      return;
    }
    for (auto& rs : ranks_) {
      const Tensor& x = rs.buffer(in);
      Tensor stat = norm::rms_from_sum_sq(norm::sum_of_squares(x), x.cols(), eps);
      rs.ws[out] = norm::normalize(x, rs.weight(gamma), stat);
      rs.ws[stat_name(op.slot)] = std::move(stat);
    }
  }

  void run_linear(const Op& op) {
    for (auto& rs : ranks_) {
      const Tensor& x = rs.buffer(op.in[0]);
      const Tensor& w = rs.weight(weight_key(op.projs[0], op.factor));
      auto res = linear(x, w);
      count_gemm(rs, res.flops, 1);
      rs.ws[op.out[0]] = res.out.reshaped(with_width(x, w.extent(0)));
    }
  }

  void run_grouped(const Op& op) {
    for (auto& rs : ranks_) {
      std::vector<Tensor> parts;
      for (Proj p : op.projs) parts.push_back(rs.weight(weight_key(p, op.factor)));
      const Tensor w = concat_axis(parts, 0);
      const Tensor& x = rs.buffer(op.in[0]);
      auto res = linear(x, w);
      count_gemm(rs, res.flops, 1);
      rs.ws[op.out[0]] = res.out.reshaped(with_width(x, w.extent(0)));
    }
  }

  void run_batched(const Op& op) {
    for (auto& rs : ranks_) {
      std::vector<std::pair<Tensor, Tensor>> pairs;
      std::vector<Shape> shapes;
      for (std::size_t i = 0; i < op.projs.size(); ++i) {
        const Tensor& x = rs.buffer(op.in[i]);
        const Tensor& w = rs.weight(weight_key(op.projs[i], op.factor));
        if (x.cols() != w.extent(1)) {
          throw DimensionError("batched linear input " + std::to_string(i) + " width mismatch");
        }
        pairs.emplace_back(x.as_matrix(), transpose(w));
        shapes.push_back(with_width(x, w.extent(0)));
      }
      auto res = batched_matmul(pairs);
      count_gemm(rs, res.flops, res.launches);
      for (std::size_t i = 0; i < op.out.size(); ++i) rs.ws[op.out[i]] = res.outs[i].reshaped(shapes[i]);
    }
  }

  void run_gather(const Op& op) {
    std::vector<Tensor> shards;
    for (auto& rs : ranks_) shards.push_back(rs.buffer(op.in[0]));
    Tensor full = all_gather(group_, shards, op.tag);
    for (auto& rs : ranks_) rs.ws[op.out[0]] = full;
  }

  const ShardPlan& plan_;
  std::vector<RankState>& ranks_;
  ProcessGroup group_;
  Counters counters_;
};

struct SimResult {
  Tensor y;
  Trace trace;
  std::optional<HBundle> h_cur;
  std::vector<RankState> ranks;
};

/// Places the block input (and LaX pathway residuals) into every rank's workspace,
/// sliced along the last axis wherever the plan keeps that dimension sharded.
inline void load_inputs(const ShardPlan& plan, std::vector<RankState>& ranks, const Tensor& x,
                        const std::optional<HBundle>& h_prev, std::size_t layer) {
  const auto& cfg = plan.cfg;
  const std::size_t tp = ranks.size();
  if (x.rank() != 3 || x.extent(0) != plan.shape.b || x.extent(1) != plan.shape.s || x.extent(2) != cfg.d) {
    throw DimensionError("block input must be [" + std::to_string(plan.shape.b) + "," +
                         std::to_string(plan.shape.s) + "," + std::to_string(cfg.d) + "], got " +
                         shape_str(x.shape()));
  }
  const auto xs = plan.residual == Layout::ShardedAlongD ? split_axis(x, 2, tp) : std::vector<Tensor>(tp, x);
  for (std::size_t r = 0; r < tp; ++r) ranks[r].ws["x"] = xs[r];

  if (plan.variant != Variant::LaX) return;
  if (!h_prev && layer > 0) {
    throw DimensionError("lax layer " + std::to_string(layer) +
                         " requires the previous layer's low-rank activations");
  }
  for (Proj p : kProjections) {
    const Tensor h = h_prev ? (*h_prev)[index(p)] : Tensor({plan.shape.b, plan.shape.s, cfg.r});
    const auto hs = plan.strategy == Strategy::VanillaTP ? split_axis(h, 2, tp) : std::vector<Tensor>(tp, h);
    for (std::size_t r = 0; r < tp; ++r) ranks[r].ws[h_prev_name(p)] = hs[r];
  }
}

/// Runs one forward pass of the plan on tp simulated ranks.
inline SimResult execute_forward(const ShardPlan& plan, const DecoderBlockWeights& block, const Tensor& x,
                                 const std::optional<HBundle>& h_prev = std::nullopt, std::size_t layer = 0) {
  SimResult result;
  result.ranks = shard_weights(plan, block);
  load_inputs(plan, result.ranks, x, h_prev, layer);

  Executor exec(plan, result.ranks, result.trace);
  for (const auto& chunk : plan.chunks) exec.run_chunk(chunk);
  exec.set_chunk("tail");
  for (const auto& op : plan.tail) exec.run_op(op);
  if (plan.boundary) {
    exec.set_chunk("boundary");
    exec.run_op(*plan.boundary);
  }
  result.trace.gemm_launches = exec.counters().launches;
  result.trace.gemm_flops = exec.counters().gemm_flops;
  result.trace.attention_flops = exec.counters().attention_flops;

  result.y = result.ranks[0].buffer(plan.output);
  for (const auto& rs : result.ranks) {
    if (!(rs.buffer(plan.output) == result.y)) {
      throw SimulationFault("rank " + std::to_string(rs.rank) + " output diverges from rank 0");
    }
  }

  if (plan.variant == Variant::LaX) {
    result.h_cur.emplace();
    for (Proj p : kProjections) {
      const std::string name = lrtp::detail::Builder::h_name(p);
      if (plan.strategy == Strategy::VanillaTP) {
        std::vector<Tensor> parts;
        for (const auto& rs : result.ranks) parts.push_back(rs.buffer(name));
        (*result.h_cur)[index(p)] = concat_axis(parts, 2);
      } else {
        (*result.h_cur)[index(p)] = result.ranks[0].buffer(name);
      }
    }
  }
  return result;
}

}  // namespace lrtp::sim
