// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lrtp/error.hpp"
#include "lrtp/tensor.hpp"

namespace lrtp {

enum class CollectiveKind { AllReduce, AllGather, AllReduceCoalesced };

// Which volume counter a payload is charged to.
//   Block     - per-block TP traffic covered by the closed-form volume models
//   FusedStat - norm statistics riding inside a coalesced all-reduce
//   NormStat  - standalone statistic all-reduce issued by Sync RMSNorm
//   Boundary  - embedding/final-projection boundary traffic
enum class Tag { Block, FusedStat, NormStat, Boundary };

enum class Pass { Forward, Reforward };

inline const char* to_string(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::AllReduce: return "all_reduce";
    case CollectiveKind::AllGather: return "all_gather";
    case CollectiveKind::AllReduceCoalesced: return "all_reduce_coalesced";
  }
  return "?";
}

inline const char* to_string(Tag t) {
  switch (t) {
    case Tag::Block: return "block";
    case Tag::FusedStat: return "fused-stat";
    case Tag::NormStat: return "norm-stat";
    case Tag::Boundary: return "boundary";
  }
  return "?";
}

inline const char* to_string(Pass p) { return p == Pass::Forward ? "forward" : "reforward"; }

struct Payload {
  Tag tag = Tag::Block;
  std::uint64_t elements = 0;
  std::uint64_t bytes = 0;

  friend bool operator==(const Payload&, const Payload&) = default;
};

/// One collective call. A coalesced call carries a second payload (the statistics).
struct CollectiveRecord {
  CollectiveKind kind = CollectiveKind::AllReduce;
  std::string chunk_id;
  Pass pass = Pass::Forward;
  Payload main;
  std::optional<Payload> extra;

  friend bool operator==(const CollectiveRecord&, const CollectiveRecord&) = default;
};

/// Append-only execution log of one simulation. Compute counters are per device
/// (rank 0); every rank executes the same SPMD program.
struct Trace {
  std::vector<CollectiveRecord> records;
  std::uint64_t gemm_launches = 0;
  std::uint64_t gemm_flops = 0;
  std::uint64_t attention_flops = 0;
  std::uint64_t stored_activation_elements = 0;

  friend bool operator==(const Trace&, const Trace&) = default;
};

struct VolumeSummary {
  std::uint64_t elements = 0;
  std::uint64_t bytes = 0;
  std::uint64_t calls = 0;

  friend bool operator==(const VolumeSummary&, const VolumeSummary&) = default;
};

/// Sums payloads carrying `tag`; a call is counted once if any of its payloads match.
inline VolumeSummary trace_volume(const Trace& trace, Tag tag,
                                  std::optional<Pass> pass = std::nullopt) {
  VolumeSummary v;
  for (const auto& rec : trace.records) {
    if (pass && rec.pass != *pass) continue;
    bool hit = false;
    for (const Payload* p : {&rec.main, rec.extra ? &*rec.extra : nullptr}) {
      if (p && p->tag == tag) {
        v.elements += p->elements;
        v.bytes += p->bytes;
        hit = true;
      }
    }
    if (hit) ++v.calls;
  }
  return v;
}

inline std::uint64_t collective_calls(const Trace& trace, Pass pass) {
  std::uint64_t n = 0;
  for (const auto& rec : trace.records) n += rec.pass == pass ? 1 : 0;
  return n;
}

/// CSV with fixed columns chunk_id,kind,tag,elements,bytes,pass. A coalesced call
/// produces one row per payload.
inline void write_trace_csv(std::ostream& os, const Trace& trace) {
  os << "chunk_id,kind,tag,elements,bytes,pass\n";
  for (const auto& rec : trace.records) {
    for (const Payload* p : {&rec.main, rec.extra ? &*rec.extra : nullptr}) {
      if (!p) continue;
      os << rec.chunk_id << ',' << to_string(rec.kind) << ',' << to_string(p->tag) << ','
         << p->elements << ',' << p->bytes << ',' << to_string(rec.pass) << '\n';
    }
  }
}

/// Simulated TP group: ranks 0..size-1 executed inline. Every collective appends
/// one record to `trace` under the group's current chunk id and pass.
struct ProcessGroup {
  int size = 1;
  Trace* trace = nullptr;
  int element_bytes = 2;
  std::string chunk_id;
  Pass pass = Pass::Forward;

  Payload payload(Tag tag, std::uint64_t elements) const {
    return {tag, elements, elements * static_cast<std::uint64_t>(element_bytes)};
  }

  void record(CollectiveKind kind, Payload main, std::optional<Payload> extra = std::nullopt) const {
    if (trace) trace->records.push_back({kind, chunk_id, pass, main, extra});
  }
};

namespace detail {

inline void check_rank_shapes(std::span<const Tensor> per_rank, int group_size, const char* what) {
  if (per_rank.empty()) throw SimulationFault(std::string(what) + ": no ranks supplied");
  if (static_cast<int>(per_rank.size()) != group_size) {
    throw SimulationFault(std::string(what) + ": expected " + std::to_string(group_size) +
                          " ranks, got " + std::to_string(per_rank.size()));
  }
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    if (per_rank[r].shape() != per_rank[0].shape()) {
      throw SimulationFault(std::string(what) + ": rank " + std::to_string(r) + " shape " +
                            shape_str(per_rank[r].shape()) + " diverges from rank 0 shape " +
                            shape_str(per_rank[0].shape()));
    }
  }
}

// Ascending rank order: ((t0 + t1) + t2) + ...
inline Tensor rank_ordered_sum(std::span<const Tensor> per_rank) {
  Tensor acc = per_rank[0];
  for (std::size_t r = 1; r < per_rank.size(); ++r)
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += per_rank[r][i];
  return acc;
}

}  // namespace detail

/// Elementwise sum over ranks; the payload charged is one rank's tensor.
inline Tensor all_reduce(const ProcessGroup& group, std::span<const Tensor> per_rank,
                         Tag tag = Tag::Block) {
  detail::check_rank_shapes(per_rank, group.size, "all_reduce");
  group.record(CollectiveKind::AllReduce, group.payload(tag, per_rank[0].numel()));
  return detail::rank_ordered_sum(per_rank);
}

inline Tensor all_reduce(const ProcessGroup& group, const std::vector<Tensor>& per_rank,
                         Tag tag = Tag::Block) {
  return all_reduce(group, std::span<const Tensor>(per_rank), tag);
}

/// Reduces a main tensor and its statistics in a single call. The main payload is
/// charged to `main_tag`, the statistics to the fused-stat counter.
inline std::pair<Tensor, Tensor> all_reduce_coalesced(const ProcessGroup& group,
                                                      std::span<const Tensor> mains,
                                                      std::span<const Tensor> stats,
                                                      Tag main_tag = Tag::Block) {
  detail::check_rank_shapes(mains, group.size, "all_reduce_coalesced(main)");
  detail::check_rank_shapes(stats, group.size, "all_reduce_coalesced(stats)");
  group.record(CollectiveKind::AllReduceCoalesced, group.payload(main_tag, mains[0].numel()),
               group.payload(Tag::FusedStat, stats[0].numel()));
  return {detail::rank_ordered_sum(mains), detail::rank_ordered_sum(stats)};
}

inline std::pair<Tensor, Tensor> all_reduce_coalesced(
    const ProcessGroup& group, const std::vector<std::pair<Tensor, Tensor>>& per_rank,
    Tag main_tag = Tag::Block) {
  std::vector<Tensor> mains, stats;
  for (const auto& [m, s] : per_rank) {
    mains.push_back(m);
    stats.push_back(s);
  }
  return all_reduce_coalesced(group, mains, stats, main_tag);
}

/// Concatenates rank shards along the innermost axis; payload is the gathered tensor.
inline Tensor all_gather(const ProcessGroup& group, std::span<const Tensor> per_rank,
                         Tag tag = Tag::Block) {
  detail::check_rank_shapes(per_rank, group.size, "all_gather");
  Tensor out = concat_axis(per_rank, per_rank[0].rank() - 1);
  group.record(CollectiveKind::AllGather, group.payload(tag, out.numel()));
  return out;
}

}  // namespace lrtp
