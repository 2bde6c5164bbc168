// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lrtp/collectives.hpp"
#include "lrtp/error.hpp"
#include "lrtp/model.hpp"

namespace lrtp {

enum class Strategy { FullRankTP, VanillaTP, BTP };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::FullRankTP: return "full-rank-tp";
    case Strategy::VanillaTP: return "vanilla-tp";
    case Strategy::BTP: return "btp";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view name) {
  if (name == "full-rank-tp" || name == "full-rank" || name == "full") return Strategy::FullRankTP;
  if (name == "vanilla-tp" || name == "vanilla") return Strategy::VanillaTP;
  if (name == "btp") return Strategy::BTP;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

struct RunShape {
  std::size_t b = 1;
  std::size_t s = 1;
  std::size_t tp = 1;
  std::size_t p = 1;

  std::uint64_t tokens() const { return static_cast<std::uint64_t>(b) * s; }
  friend bool operator==(const RunShape&, const RunShape&) = default;
};

enum class ShardKind { ColumnParallel, RowParallel, Replicated };

/// How one weight is cut across ranks. Weights are stored [out, in], so column
/// parallelism slices axis 0 and row parallelism slices axis 1.
struct ShardSpec {
  ShardKind kind = ShardKind::Replicated;
  std::size_t axis = 0;
  std::size_t global = 0;
  std::size_t local = 0;

  static ShardSpec column(std::size_t global, std::size_t tp) {
    return {ShardKind::ColumnParallel, 0, global, global / tp};
  }
  static ShardSpec row(std::size_t global, std::size_t tp) {
    return {ShardKind::RowParallel, 1, global, global / tp};
  }
  static ShardSpec replicated(std::size_t global) { return {ShardKind::Replicated, 0, global, global}; }

  friend bool operator==(const ShardSpec&, const ShardSpec&) = default;
};

enum class Factor { Full, Down, Up };
enum class NormMode { Local, Sync, Online };
enum class Layout { Replicated, ShardedAlongD };

enum class OpKind {
  RmsNorm,
  Linear,
  GroupedLinear,
  BatchedLinear,
  Split,
  Bottleneck,
  Attention,
  SwiGLU,
  ResidualAdd,
  Gather
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::RmsNorm: return "rmsnorm";
    case OpKind::Linear: return "linear";
    case OpKind::GroupedLinear: return "grouped_linear";
    case OpKind::BatchedLinear: return "batched_linear";
    case OpKind::Split: return "split";
    case OpKind::Bottleneck: return "bottleneck";
    case OpKind::Attention: return "attention";
    case OpKind::SwiGLU: return "swiglu";
    case OpKind::ResidualAdd: return "residual_add";
    case OpKind::Gather: return "gather";
  }
  return "?";
}

inline OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : {OpKind::RmsNorm, OpKind::Linear, OpKind::GroupedLinear, OpKind::BatchedLinear,
                   OpKind::Split, OpKind::Bottleneck, OpKind::Attention, OpKind::SwiGLU,
                   OpKind::ResidualAdd, OpKind::Gather}) {
    if (name == to_string(k)) return k;
  }
  throw PlanError("unknown op kind '" + std::string(name) + "'");
}

inline const char* to_string(Factor f) {
  return f == Factor::Full ? "full" : f == Factor::Down ? "down" : "up";
}
inline const char* to_string(NormMode m) {
  return m == NormMode::Local ? "local" : m == NormMode::Sync ? "sync" : "online";
}
inline const char* to_string(ShardKind k) {
  return k == ShardKind::ColumnParallel ? "col" : k == ShardKind::RowParallel ? "row" : "rep";
}

/// One step of the per-rank program. Buffer names refer to each rank's workspace.
struct Op {
  OpKind kind = OpKind::ResidualAdd;
  std::vector<std::string> in;
  std::vector<std::string> out;
  std::vector<Proj> projs;  // linears and pathway functions
  Factor factor = Factor::Full;
  ShardSpec shard;
  NormMode norm = NormMode::Local;
  int slot = 0;          // rmsnorm: 1 before attention, 2 before the MLP
  bool sharded = false;  // operands are cut across ranks along their last axis
  Tag tag = Tag::Block;  // gather
  std::size_t width = 0; // gather: global width of the gathered buffer
};

/// The all-reduce ending a chunk. Several input buffers are reduced as one payload.
/// With `stats_slot` set the norm statistics of that slot ride the same call; with
/// `recover_slot` set the partial sums are rescaled for an online-normalized input.
struct ChunkCollective {
  CollectiveKind kind = CollectiveKind::AllReduce;
  std::vector<std::string> in;
  std::vector<std::string> out;
  std::vector<std::size_t> widths;
  int stats_slot = 0;
  int recover_slot = 0;
};

struct TPChunk {
  std::string id;
  std::vector<Op> ops;
  ChunkCollective collective;
};

struct PlanOptions {
  bool grouping = false;
  bool online_norm = false;
  bool lowrank_ckpt = false;
  int element_bytes = 2;
};

struct ShardPlan {
  Strategy strategy = Strategy::FullRankTP;
  Variant variant = Variant::FullRank;
  ModelConfig cfg;
  RunShape shape;
  PlanOptions options;
  Layout residual = Layout::Replicated;
  std::vector<TPChunk> chunks;
  std::vector<Op> tail;           // ops after the last collective
  std::optional<Op> boundary;     // gather before the replicated final projection
  std::string output = "y";       // buffer holding the logical block output
  std::vector<std::string> warnings;
};

inline std::string stat_name(int slot) { return "stat" + std::to_string(slot); }
inline std::string sum_sq_name(int slot) { return "ss" + std::to_string(slot); }
inline std::string local_rms_name(int slot) { return "rmsl" + std::to_string(slot); }
inline std::string h_prev_name(Proj p) { return std::string("hprev.") + to_string(p); }

/// Every buffer the collective reads, including statistics.
inline std::vector<std::string> collective_inputs(const ChunkCollective& c) {
  std::vector<std::string> in = c.in;
  if (c.stats_slot) in.push_back(sum_sq_name(c.stats_slot));
  if (c.recover_slot) {
    in.push_back(local_rms_name(c.recover_slot));
    if (c.recover_slot != c.stats_slot) in.push_back(stat_name(c.recover_slot));
  }
  return in;
}

inline std::vector<std::string> collective_outputs(const ChunkCollective& c) {
  std::vector<std::string> out = c.out;
  if (c.stats_slot) out.push_back(stat_name(c.stats_slot));
  return out;
}

enum class Safety { ShardedSafe, ShardedUnsafe };

struct ClassifyContext {
  bool sharded = false;            // operand cut across ranks along its last axis
  bool identically_sharded = true; // binary ops: both operands cut the same way
  std::size_t heads = 1;
  std::size_t tp = 1;
};

inline Safety classify(OpKind kind, const ClassifyContext& ctx) {
  switch (kind) {
    case OpKind::Bottleneck:
    case OpKind::SwiGLU:
    case OpKind::Split:
    case OpKind::Linear:
    case OpKind::GroupedLinear:
    case OpKind::BatchedLinear: return Safety::ShardedSafe;
    case OpKind::ResidualAdd:
      return ctx.identically_sharded ? Safety::ShardedSafe : Safety::ShardedUnsafe;
    case OpKind::Attention:
      if (ctx.sharded && ctx.heads % ctx.tp != 0) {
        throw PlanError("attention heads=" + std::to_string(ctx.heads) +
                        " not divisible by tp=" + std::to_string(ctx.tp));
      }
      return Safety::ShardedSafe;
    case OpKind::RmsNorm: return ctx.sharded ? Safety::ShardedUnsafe : Safety::ShardedSafe;
    case OpKind::Gather: return Safety::ShardedUnsafe;
  }
  throw PlanError("unknown op kind");
}

inline Safety classify(std::string_view kind, const ClassifyContext& ctx) {
  return classify(parse_op_kind(kind), ctx);
}

namespace detail {

inline void require_divisible(const char* what, std::size_t value, std::size_t tp) {
  if (value % tp != 0) {
    throw PlanError(std::string(what) + "=" + std::to_string(value) + " not divisible by tp=" +
                    std::to_string(tp));
  }
}

inline void check_plan_inputs(Strategy strategy, Variant variant, const ModelConfig& cfg,
                              const RunShape& shape) {
  cfg.validate();
  if (shape.b == 0 || shape.s == 0 || shape.tp == 0 || shape.p == 0) {
    throw PlanError("run shape extents must be positive");
  }
  if ((strategy == Strategy::FullRankTP) != (variant == Variant::FullRank)) {
    throw PlanError(std::string("strategy ") + to_string(strategy) + " cannot run variant " +
                    to_string(variant));
  }
  require_divisible("heads", cfg.heads, shape.tp);
  require_divisible("d", cfg.d, shape.tp);
  require_divisible("d_ff", cfg.d_ff, shape.tp);
  if (strategy == Strategy::VanillaTP) require_divisible("r", cfg.r, shape.tp);
}

/// Builds op lists with the buffer naming shared by all strategies.
class Builder {
 public:
  Builder(const ModelConfig& cfg, const RunShape& shape, Variant variant)
      : cfg_(cfg), tp_(shape.tp), variant_(variant) {}

  Op norm(const std::string& in, const std::string& out, int slot, NormMode mode, bool sharded) const {
    Op op{.kind = OpKind::RmsNorm, .in = {in}, .norm = mode, .slot = slot, .sharded = sharded};
    if (mode == NormMode::Online) {
      op.out = {out, sum_sq_name(slot), local_rms_name(slot)};
    } else {
      op.out = {out, stat_name(slot)};
    }
    return op;
  }

  Op linear(Proj p, Factor f, ShardSpec spec, const std::string& in, const std::string& out) const {
    return {.kind = OpKind::Linear, .in = {in}, .out = {out}, .projs = {p}, .factor = f, .shard = spec};
  }

  Op grouped(std::vector<Proj> ps, Factor f, ShardSpec spec, const std::string& in,
             const std::string& out) const {
    return {.kind = OpKind::GroupedLinear, .in = {in}, .out = {out}, .projs = std::move(ps),
            .factor = f, .shard = spec};
  }

  Op batched(std::vector<Proj> ps, Factor f, ShardSpec spec, std::vector<std::string> in,
             std::vector<std::string> out) const {
    return {.kind = OpKind::BatchedLinear, .in = std::move(in), .out = std::move(out),
            .projs = std::move(ps), .factor = f, .shard = spec};
  }

  static Op split(const std::string& in, std::vector<std::string> out) {
    return {.kind = OpKind::Split, .in = {in}, .out = std::move(out)};
  }

  static Op binary(OpKind kind, const std::string& a, const std::string& b, const std::string& out,
                   bool sharded) {
    return {.kind = kind, .in = {a, b}, .out = {out}, .sharded = sharded};
  }

  static Op attention(bool sharded) {
    return {.kind = OpKind::Attention, .in = {"q", "k", "v"}, .out = {"attn"}, .sharded = sharded};
  }

  /// Appends the pathway function for `p` when the variant has one and returns the
  /// buffer feeding the up factor.
  std::string pathway(std::vector<Op>& ops, Proj p, bool sharded) const {
    const std::string h = h_name(p);
    if (variant_ == Variant::SVD) return h;
    Op op{.kind = OpKind::Bottleneck, .in = {h}, .out = {z_name(p)}, .projs = {p}, .sharded = sharded};
    if (variant_ == Variant::LaX) op.in.push_back(h_prev_name(p));
    ops.push_back(std::move(op));
    return z_name(p);
  }

  static std::string h_name(Proj p) { return std::string("h.") + to_string(p); }
  static std::string z_name(Proj p) { return std::string("z.") + to_string(p); }
  static std::string act_name(Proj p) {
    switch (p) {
      case Proj::Q: return "q";
      case Proj::K: return "k";
      case Proj::V: return "v";
      case Proj::O: return "o";
      case Proj::Gate: return "g";
      case Proj::Up: return "u";
      case Proj::Down: return "dn";
    }
    return "?";
  }
  static std::string partial(const std::string& name) { return name + ".p"; }

  const ModelConfig& cfg() const { return cfg_; }
  std::size_t tp() const { return tp_; }

 private:
  ModelConfig cfg_;
  std::size_t tp_;
  Variant variant_;
};

inline ChunkCollective reduce(std::vector<std::string> buffers, std::vector<std::size_t> widths) {
  ChunkCollective c;
  for (const auto& b : buffers) {
    c.in.push_back(Builder::partial(b));
    c.out.push_back(b);
  }
  c.widths = std::move(widths);
  return c;
}

inline void build_full_rank(ShardPlan& plan, const Builder& B) {
  const auto& cfg = B.cfg();
  const std::size_t tp = B.tp();
  const bool grouped = plan.options.grouping;
  auto col = [&](std::size_t n) { return ShardSpec::column(n, tp); };
  auto row = [&](std::size_t n) { return ShardSpec::row(n, tp); };

  TPChunk attn{"attn", {}, reduce({"o"}, {cfg.d})};
  attn.ops.push_back(B.norm("x", "n1", 1, NormMode::Local, false));
  if (grouped) {
    attn.ops.push_back(B.grouped({Proj::Q, Proj::K, Proj::V}, Factor::Full, col(cfg.d), "n1", "qkv"));
    attn.ops.push_back(Builder::split("qkv", {"q", "k", "v"}));
  } else {
    for (Proj p : {Proj::Q, Proj::K, Proj::V})
      attn.ops.push_back(B.linear(p, Factor::Full, col(cfg.d), "n1", Builder::act_name(p)));
  }
  attn.ops.push_back(Builder::attention(true));
  attn.ops.push_back(B.linear(Proj::O, Factor::Full, row(cfg.d), "attn", "o.p"));

  TPChunk mlp{"mlp", {}, reduce({"dn"}, {cfg.d})};
  mlp.ops.push_back(Builder::binary(OpKind::ResidualAdd, "x", "o", "x2", false));
  mlp.ops.push_back(B.norm("x2", "n2", 2, NormMode::Local, false));
  if (grouped) {
    mlp.ops.push_back(B.grouped({Proj::Gate, Proj::Up}, Factor::Full, col(cfg.d_ff), "n2", "gu"));
    mlp.ops.push_back(Builder::split("gu", {"g", "u"}));
  } else {
    mlp.ops.push_back(B.linear(Proj::Gate, Factor::Full, col(cfg.d_ff), "n2", "g"));
    mlp.ops.push_back(B.linear(Proj::Up, Factor::Full, col(cfg.d_ff), "n2", "u"));
  }
  mlp.ops.push_back(Builder::binary(OpKind::SwiGLU, "g", "u", "m", true));
  mlp.ops.push_back(B.linear(Proj::Down, Factor::Full, row(cfg.d_ff), "m", "dn.p"));

  plan.chunks = {std::move(attn), std::move(mlp)};
  plan.tail = {Builder::binary(OpKind::ResidualAdd, "x2", "dn", "y", false)};
}

// Rank dimension sharded: down factor column-parallel over r, up factor row-parallel
// over r, one all-reduce per projection on the full-width output.
inline void build_vanilla(ShardPlan& plan, const Builder& B) {
  const auto& cfg = B.cfg();
  const std::size_t tp = B.tp();
  const ShardSpec down = ShardSpec::column(cfg.r, tp);
  const ShardSpec up = ShardSpec::row(cfg.r, tp);

  auto single = [&](TPChunk& c, Proj p, const std::string& in) {
    c.ops.push_back(B.linear(p, Factor::Down, down, in, Builder::h_name(p)));
    const std::string z = B.pathway(c.ops, p, true);
    c.ops.push_back(B.linear(p, Factor::Up, up, z, Builder::partial(Builder::act_name(p))));
  };
  auto group = [&](TPChunk& c, std::vector<Proj> ps, const std::string& in, const std::string& fused) {
    std::vector<std::string> hs, zs, outs;
    for (Proj p : ps) hs.push_back(Builder::h_name(p));
    c.ops.push_back(B.grouped(ps, Factor::Down, down, in, fused));
    c.ops.push_back(Builder::split(fused, hs));
    for (Proj p : ps) {
      zs.push_back(B.pathway(c.ops, p, true));
      outs.push_back(Builder::partial(Builder::act_name(p)));
    }
    c.ops.push_back(B.batched(ps, Factor::Up, up, zs, outs));
  };

  std::vector<TPChunk> chunks;
  if (plan.options.grouping) {
    TPChunk qkv{"qkv", {B.norm("x", "n1", 1, NormMode::Local, false)},
                reduce({"q", "k", "v"}, {cfg.d, cfg.d, cfg.d})};
    group(qkv, {Proj::Q, Proj::K, Proj::V}, "n1", "h.qkv");
    chunks.push_back(std::move(qkv));
  } else {
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) {
      TPChunk c{to_string(p), {}, reduce({Builder::act_name(p)}, {cfg.d})};
      if (p == Proj::Q) c.ops.push_back(B.norm("x", "n1", 1, NormMode::Local, false));
      single(c, p, "n1");
      chunks.push_back(std::move(c));
    }
  }

  TPChunk o{"o", {Builder::attention(false)}, reduce({"o"}, {cfg.d})};
  single(o, Proj::O, "attn");
  chunks.push_back(std::move(o));

  std::vector<Op> mlp_entry{Builder::binary(OpKind::ResidualAdd, "x", "o", "x2", false),
                            B.norm("x2", "n2", 2, NormMode::Local, false)};
  if (plan.options.grouping) {
    TPChunk gu{"gate_up", mlp_entry, reduce({"g", "u"}, {cfg.d_ff, cfg.d_ff})};
    group(gu, {Proj::Gate, Proj::Up}, "n2", "h.gate_up");
    chunks.push_back(std::move(gu));
  } else {
    TPChunk gate{"gate", mlp_entry, reduce({"g"}, {cfg.d_ff})};
    single(gate, Proj::Gate, "n2");
    TPChunk upc{"up", {}, reduce({"u"}, {cfg.d_ff})};
    single(upc, Proj::Up, "n2");
    chunks.push_back(std::move(gate));
    chunks.push_back(std::move(upc));
  }

  TPChunk dn{"down", {Builder::binary(OpKind::SwiGLU, "g", "u", "m", false)}, reduce({"dn"}, {cfg.d})};
  single(dn, Proj::Down, "m");
  chunks.push_back(std::move(dn));

  plan.chunks = std::move(chunks);
  plan.tail = {Builder::binary(OpKind::ResidualAdd, "x2", "dn", "y", false)};
}

// Chunks run from an up factor (column-parallel over the wide output) to the next
// down factor (row-parallel over the wide input); the all-reduce carries [b,s,r].
inline void build_btp(ShardPlan& plan, const Builder& B) {
  const auto& cfg = B.cfg();
  const std::size_t tp = B.tp();
  const NormMode mode = plan.options.online_norm ? NormMode::Online : NormMode::Sync;
  auto down = [&](std::size_t in) { return ShardSpec::row(in, tp); };
  auto up = [&](std::size_t out) { return ShardSpec::column(out, tp); };
  const bool grouped = plan.options.grouping;
  const bool online = mode == NormMode::Online;

  auto reduce_h = [&](std::vector<std::string> names, int slot, bool carries) {
    ChunkCollective c = reduce(names, std::vector<std::size_t>(names.size(), cfg.r));
    if (online && slot) {
      c.recover_slot = slot;
      if (carries) {
        c.stats_slot = slot;
        c.kind = CollectiveKind::AllReduceCoalesced;
      }
    }
    return c;
  };
  auto up_path = [&](std::vector<Op>& ops, Proj p) {
    const std::string z = B.pathway(ops, p, false);
    ops.push_back(B.linear(p, Factor::Up, up(cfg.out_features(p)), z, Builder::act_name(p)));
  };
  auto batched_up = [&](std::vector<Op>& ops, std::vector<Proj> ps) {
    std::vector<std::string> zs, outs;
    for (Proj p : ps) {
      zs.push_back(B.pathway(ops, p, false));
      outs.push_back(Builder::act_name(p));
    }
    ops.push_back(B.batched(ps, Factor::Up, up(cfg.out_features(ps.front())), zs, outs));
  };

  std::vector<TPChunk> chunks;
  const Op norm1 = B.norm("x", "n1", 1, mode, true);
  if (grouped) {
    TPChunk qkv{"qkv", {norm1}, reduce_h({"h.qkv"}, 1, true)};
    qkv.collective.widths = {3 * cfg.r};
    qkv.ops.push_back(B.grouped({Proj::Q, Proj::K, Proj::V}, Factor::Down, down(cfg.d), "n1", "h.qkv.p"));
    chunks.push_back(std::move(qkv));
  } else {
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) {
      TPChunk c{to_string(p), {}, reduce_h({Builder::h_name(p)}, 1, p == Proj::Q)};
      if (p == Proj::Q) c.ops.push_back(norm1);
      c.ops.push_back(B.linear(p, Factor::Down, down(cfg.d), "n1", Builder::partial(Builder::h_name(p))));
      chunks.push_back(std::move(c));
    }
  }

  TPChunk o{"o", {}, reduce_h({"h.o"}, 0, false)};
  if (grouped) {
    o.ops.push_back(Builder::split("h.qkv", {"h.q", "h.k", "h.v"}));
    batched_up(o.ops, {Proj::Q, Proj::K, Proj::V});
  } else {
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) up_path(o.ops, p);
  }
  o.ops.push_back(Builder::attention(true));
  o.ops.push_back(B.linear(Proj::O, Factor::Down, down(cfg.d), "attn", "h.o.p"));
  chunks.push_back(std::move(o));

  std::vector<Op> mlp_entry;
  up_path(mlp_entry, Proj::O);
  mlp_entry.push_back(Builder::binary(OpKind::ResidualAdd, "x", "o", "x2", true));
  mlp_entry.push_back(B.norm("x2", "n2", 2, mode, true));
  if (grouped) {
    TPChunk gu{"gate_up", mlp_entry, reduce_h({"h.gate_up"}, 2, true)};
    gu.collective.widths = {2 * cfg.r};
    gu.ops.push_back(B.grouped({Proj::Gate, Proj::Up}, Factor::Down, down(cfg.d), "n2", "h.gate_up.p"));
    chunks.push_back(std::move(gu));
  } else {
    TPChunk gate{"gate", mlp_entry, reduce_h({"h.gate"}, 2, true)};
    gate.ops.push_back(B.linear(Proj::Gate, Factor::Down, down(cfg.d), "n2", "h.gate.p"));
    TPChunk upc{"up", {}, reduce_h({"h.up"}, 2, false)};
    upc.ops.push_back(B.linear(Proj::Up, Factor::Down, down(cfg.d), "n2", "h.up.p"));
    chunks.push_back(std::move(gate));
    chunks.push_back(std::move(upc));
  }

  TPChunk dn{"down", {}, reduce_h({"h.down"}, 0, false)};
  if (grouped) {
    dn.ops.push_back(Builder::split("h.gate_up", {"h.gate", "h.up"}));
    batched_up(dn.ops, {Proj::Gate, Proj::Up});
  } else {
    up_path(dn.ops, Proj::Gate);
    up_path(dn.ops, Proj::Up);
  }
  dn.ops.push_back(Builder::binary(OpKind::SwiGLU, "g", "u", "m", true));
  dn.ops.push_back(B.linear(Proj::Down, Factor::Down, down(cfg.d_ff), "m", "h.down.p"));
  chunks.push_back(std::move(dn));

  plan.chunks = std::move(chunks);
  up_path(plan.tail, Proj::Down);
  plan.tail.push_back(Builder::binary(OpKind::ResidualAdd, "x2", "dn", "y", true));
  plan.boundary = Op{.kind = OpKind::Gather, .in = {"y"}, .out = {"y.full"}, .tag = Tag::Boundary,
                     .width = cfg.d};
  plan.output = "y.full";
}

}  // namespace detail

/// Rejects plans that leave a sharded-unsafe op without a handler.
inline void validate_plan(const ShardPlan& plan) {
  const ClassifyContext base{.heads = plan.cfg.heads, .tp = plan.shape.tp};
  auto check = [&](const Op& op, const std::string& where) {
    ClassifyContext ctx = base;
    ctx.sharded = op.sharded;
    if (classify(op.kind, ctx) == Safety::ShardedSafe) return;
    if (op.kind == OpKind::RmsNorm && op.norm != NormMode::Local) return;
    throw PlanError(std::string(to_string(op.kind)) + " in " + where +
                    " is sharded-unsafe and has no handler");
  };
  for (const auto& chunk : plan.chunks) {
    if (chunk.collective.in.empty() || chunk.collective.in.size() != chunk.collective.widths.size()) {
      throw PlanError("chunk " + chunk.id + " must end in exactly one all-reduce");
    }
    for (const auto& op : chunk.ops) check(op, "chunk " + chunk.id);
  }
  for (const auto& op : plan.tail) check(op, "tail");
}

inline ShardPlan plan(Strategy strategy, Variant variant, const ModelConfig& cfg,
                      const RunShape& shape, PlanOptions options = {}) {
  detail::check_plan_inputs(strategy, variant, cfg, shape);
  ShardPlan out;
  out.strategy = strategy;
  out.variant = variant;
  out.cfg = cfg;
  out.shape = shape;
  if (options.online_norm && strategy != Strategy::BTP) {
    out.warnings.push_back("online rmsnorm needs a sharded hidden dimension; " +
                           std::string(to_string(strategy)) + " keeps the replicated rmsnorm");
    options.online_norm = false;
  }
  if (options.lowrank_ckpt && strategy == Strategy::FullRankTP) {
    out.warnings.push_back("low-rank checkpointing needs a low-rank variant; disabled");
    options.lowrank_ckpt = false;
  }
  out.options = options;
  out.residual = strategy == Strategy::BTP ? Layout::ShardedAlongD : Layout::Replicated;

  const detail::Builder builder(cfg, shape, variant);
  switch (strategy) {
    case Strategy::FullRankTP: detail::build_full_rank(out, builder); break;
    case Strategy::VanillaTP: detail::build_vanilla(out, builder); break;
    case Strategy::BTP: detail::build_btp(out, builder); break;
  }
  validate_plan(out);
  return out;
}

/// Grouped form of an ungrouped plan: shared-input down factors are concatenated
/// into one GEMM, distinct-input up factors run as one batched launch.
inline ShardPlan apply_grouping(const ShardPlan& ungrouped) {
  if (ungrouped.options.grouping) return ungrouped;
  // Members of a group must be cut identically to be fused into one GEMM.
  auto spec_of = [&](Proj p, Factor f) -> std::optional<ShardSpec> {
    for (const auto& c : ungrouped.chunks)
      for (const auto& op : c.ops)
        if (op.kind == OpKind::Linear && op.projs[0] == p && op.factor == f) return op.shard;
    return std::nullopt;
  };
  const Factor shared = ungrouped.strategy == Strategy::FullRankTP ? Factor::Full : Factor::Down;
  for (const auto& group : {std::vector<Proj>{Proj::Q, Proj::K, Proj::V},
                            std::vector<Proj>{Proj::Gate, Proj::Up}}) {
    const auto first = spec_of(group[0], shared);
    for (Proj p : group) {
      const auto spec = spec_of(p, shared);
      if (!first || !spec || spec->kind != first->kind || spec->local != first->local) {
        throw PlanError(std::string("cannot group ") + to_string(p) +
                        " with incompatible shard spec");
      }
    }
  }
  PlanOptions options = ungrouped.options;
  options.grouping = true;
  return plan(ungrouped.strategy, ungrouped.variant, ungrouped.cfg, ungrouped.shape, options);
}

/// Static prediction of every forward-pass collective, in execution order.
inline std::vector<CollectiveRecord> enumerate_collectives(const ShardPlan& plan) {
  const std::uint64_t tokens = plan.shape.tokens();
  const ProcessGroup g{.size = static_cast<int>(plan.shape.tp), .element_bytes = plan.options.element_bytes};
  std::vector<CollectiveRecord> out;
  auto op_records = [&](const Op& op, const std::string& chunk) {
    if (op.kind == OpKind::RmsNorm && op.norm == NormMode::Sync) {
      out.push_back({CollectiveKind::AllReduce, chunk, Pass::Forward, g.payload(Tag::NormStat, tokens), {}});
    } else if (op.kind == OpKind::Gather) {
      out.push_back({CollectiveKind::AllGather, chunk, Pass::Forward, g.payload(op.tag, tokens * op.width), {}});
    }
  };
  for (const auto& chunk : plan.chunks) {
    for (const auto& op : chunk.ops) op_records(op, chunk.id);
    const auto& c = chunk.collective;
    std::uint64_t width = 0;
    for (auto w : c.widths) width += w;
    CollectiveRecord rec{c.kind, chunk.id, Pass::Forward, g.payload(Tag::Block, tokens * width), {}};
    if (c.stats_slot) rec.extra = g.payload(Tag::FusedStat, tokens);
    out.push_back(rec);
  }
  for (const auto& op : plan.tail) op_records(op, "tail");
  if (plan.boundary) op_records(*plan.boundary, "boundary");
  return out;
}

/// Predicted GEMM launches for one forward pass.
inline std::uint64_t predicted_launches(const ShardPlan& plan) {
  std::uint64_t n = 0;
  auto count = [&](const Op& op) {
    n += (op.kind == OpKind::Linear || op.kind == OpKind::GroupedLinear ||
          op.kind == OpKind::BatchedLinear) ? 1 : 0;
  };
  for (const auto& c : plan.chunks)
    for (const auto& op : c.ops) count(op);
  for (const auto& op : plan.tail) count(op);
  return n;
}

/// Test hook: returns a copy of `plan` with a deliberate defect that still computes
/// the right values. "redundant-gather" gathers the first chunk's input inside the
/// chunk, adding traffic the closed-form volume does not contain.
inline ShardPlan inject_fault(ShardPlan plan, std::string_view fault) {
  if (fault != "redundant-gather") throw ConfigError("unknown plan fault '" + std::string(fault) + "'");
  auto& chunk = plan.chunks.front();
  const std::size_t local = plan.residual == Layout::ShardedAlongD ? plan.cfg.d / plan.shape.tp : plan.cfg.d;
  Op gather{.kind = OpKind::Gather, .in = {"x"}, .out = {"x.gathered"}, .sharded = true,
            .tag = Tag::Block, .width = local * plan.shape.tp};
  chunk.ops.insert(chunk.ops.begin(), std::move(gather));
  return plan;
}

namespace detail {

inline std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

inline std::string op_text(const Op& op) {
  std::ostringstream os;
  os << to_string(op.kind);
  if (!op.projs.empty()) {
    std::vector<std::string> names;
    for (Proj p : op.projs) names.emplace_back(to_string(p));
    os << '[' << join(names, "+");
    if (op.kind != OpKind::Bottleneck) os << '.' << to_string(op.factor);
    os << ']';
  }
  if (op.kind == OpKind::Linear || op.kind == OpKind::GroupedLinear || op.kind == OpKind::BatchedLinear) {
    os << '{' << to_string(op.shard.kind) << ' ' << op.shard.global << "->" << op.shard.local << '}';
  }
  if (op.kind == OpKind::RmsNorm) os << '{' << to_string(op.norm) << '}';
  if (op.kind == OpKind::Gather) os << '{' << to_string(op.tag) << ' ' << op.width << '}';
  os << '(' << join(op.in) << "->" << join(op.out) << ')';
  return os.str();
}

}  // namespace detail

/// One line per chunk: ops, shard specs and the collective payload.
inline std::string to_text(const ShardPlan& plan) {
  std::ostringstream os;
  os << "plan " << to_string(plan.strategy) << " variant=" << to_string(plan.variant)
     << " b=" << plan.shape.b << " s=" << plan.shape.s << " tp=" << plan.shape.tp
     << " grouping=" << (plan.options.grouping ? "on" : "off")
     << " online_norm=" << (plan.options.online_norm ? "on" : "off")
     << " residual=" << (plan.residual == Layout::ShardedAlongD ? "sharded-d" : "replicated") << '\n';
  const auto records = enumerate_collectives(plan);
  for (const auto& chunk : plan.chunks) {
    os << "chunk " << chunk.id << ':';
    for (const auto& op : chunk.ops) os << ' ' << detail::op_text(op);
    const auto& c = chunk.collective;
    std::uint64_t width = 0;
    for (auto w : c.widths) width += w;
    os << " | " << to_string(c.kind) << '(' << detail::join(c.in) << "->" << detail::join(c.out)
       << ") block=" << plan.shape.tokens() * width;
    if (c.stats_slot) os << " fused-stat=" << plan.shape.tokens();
    if (c.recover_slot) os << " recover=norm" << c.recover_slot;
    os << '\n';
  }
  os << "tail:";
  for (const auto& op : plan.tail) os << ' ' << detail::op_text(op);
  os << '\n';
  if (plan.boundary) os << "boundary: " << detail::op_text(*plan.boundary) << '\n';
  return os.str();
}

}  // namespace lrtp
