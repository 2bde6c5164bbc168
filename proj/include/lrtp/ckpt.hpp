// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lrtp/model.hpp"
#include "lrtp/plan.hpp"
#include "lrtp/sim.hpp"

namespace lrtp::ckpt {

enum class Policy { None, LowRankBoundary };

inline const char* to_string(Policy p) { return p == Policy::None ? "none" : "low-rank-boundary"; }

struct CkptReport {
  Policy policy = Policy::None;
  std::uint64_t stored_with = 0;     // elements kept for backward under the policy (rank 0)
  std::uint64_t stored_without = 0;  // elements kept for backward with no checkpointing
  std::uint64_t delta_mem = 0;
  std::uint64_t recompute_flops = 0;
  std::uint64_t reforward_collectives = 0;
  std::vector<std::string> checkpointed;
  std::vector<std::string> recomputed;
};

/// Memory saved per recomputed FLOP.
inline Ratio eff_ckpt(const CkptReport& report) {
  if (report.recompute_flops == 0) throw Error("checkpoint efficiency undefined: nothing was recomputed");
  return {static_cast<std::int64_t>(report.delta_mem), static_cast<std::int64_t>(report.recompute_flops)};
}

/// Buffers an op keeps alive for its backward pass.
inline std::vector<std::string> saved_for_backward(const Op& op, Variant variant) {
  switch (op.kind) {
    case OpKind::RmsNorm: return {op.in[0], stat_name(op.slot)};
    case OpKind::Linear:
    case OpKind::GroupedLinear:
    case OpKind::BatchedLinear: return op.in;
    case OpKind::Bottleneck:
      return variant == Variant::CoLA ? std::vector<std::string>{op.in[0]} : std::vector<std::string>{};
    case OpKind::Attention: return {op.in[0], op.in[1], op.in[2], op.out[0]};
    case OpKind::SwiGLU: return op.in;
    default: return {};
  }
}

namespace detail {

template <class F>
void for_each_op(const ShardPlan& plan, F&& f) {
  for (const auto& c : plan.chunks)
    for (const auto& op : c.ops) f(op);
  for (const auto& op : plan.tail) f(op);
}

inline void insert_unique(std::vector<std::string>& v, const std::string& s) {
  if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
}

}  // namespace detail

/// Union of saved buffers in forward order.
inline std::vector<std::string> saved_set(const ShardPlan& plan) {
  std::vector<std::string> out;
  detail::for_each_op(plan, [&](const Op& op) {
    for (const auto& b : saved_for_backward(op, plan.variant)) detail::insert_unique(out, b);
  });
  return out;
}

/// Block input, norm statistics and the rank-r tensor entering each pathway
/// (taken before the pathway function when there is one).
inline std::vector<std::string> checkpoint_set(const ShardPlan& plan) {
  std::vector<std::string> out{"x", stat_name(1), stat_name(2)};
  std::map<std::string, std::string> pathway_input;
  detail::for_each_op(plan, [&](const Op& op) {
    if (op.kind == OpKind::Bottleneck) pathway_input[op.out[0]] = op.in[0];
  });
  detail::for_each_op(plan, [&](const Op& op) {
    const bool up = (op.kind == OpKind::Linear || op.kind == OpKind::BatchedLinear) && op.factor == Factor::Up;
    if (!up) return;
    for (const auto& in : op.in) {
      auto it = pathway_input.find(in);
      detail::insert_unique(out, it == pathway_input.end() ? in : it->second);
    }
  });
  return out;
}

inline std::uint64_t elements(const std::vector<std::string>& names, const sim::RankState& rank0) {
  std::uint64_t n = 0;
  for (const auto& name : names) n += rank0.buffer(name).numel();
  return n;
}

struct CkptRun {
  sim::SimResult sim;
  CkptReport report;
};

namespace detail {

// A forward step: one op, or (op == nullptr) the chunk's closing collective.
struct Step {
  std::size_t chunk = 0;  // plan.chunks.size() for the tail
  const Op* op = nullptr;
};

}  // namespace detail

/// Forward pass, then the re-forward a backward sweep would trigger: every dropped
/// saved buffer is rebuilt from checkpointed tensors by re-running the ops (and
/// collectives) it depends on, once each, in forward order.
inline CkptRun run_with_ckpt(const ShardPlan& plan, const DecoderBlockWeights& block, const Tensor& x,
                             Policy policy, const std::optional<HBundle>& h_prev = std::nullopt,
                             std::size_t layer = 0) {
  if (policy == Policy::LowRankBoundary && !is_low_rank(plan.variant)) {
    throw PlanError(std::string("checkpoint policy ") + to_string(policy) + " needs a low-rank variant, got " +
                    lrtp::to_string(plan.variant));
  }
  CkptRun run{sim::execute_forward(plan, block, x, h_prev, layer), {}};
  CkptReport& rep = run.report;
  rep.policy = policy;
  const sim::RankState& rank0 = run.sim.ranks[0];
  const auto saved = saved_set(plan);
  rep.stored_without = elements(saved, rank0);
  if (policy == Policy::None) {
    rep.stored_with = rep.stored_without;
    run.sim.trace.stored_activation_elements = rep.stored_with;
    return run;
  }

  rep.checkpointed = checkpoint_set(plan);
  rep.stored_with = elements(rep.checkpointed, rank0);
  if (rep.stored_with > rep.stored_without) {
    throw SimulationFault("checkpoint set is larger than the saved set");
  }
  rep.delta_mem = rep.stored_without - rep.stored_with;
  run.sim.trace.stored_activation_elements = rep.stored_with;

  std::vector<detail::Step> steps;
  std::map<std::string, std::size_t> producer;
  for (std::size_t c = 0; c < plan.chunks.size(); ++c) {
    for (const auto& op : plan.chunks[c].ops) {
      for (const auto& b : op.out) producer[b] = steps.size();
      steps.push_back({c, &op});
    }
    for (const auto& b : collective_outputs(plan.chunks[c].collective)) producer[b] = steps.size();
    steps.push_back({c, nullptr});
  }
  for (const auto& op : plan.tail) {
    for (const auto& b : op.out) producer[b] = steps.size();
    steps.push_back({plan.chunks.size(), &op});
  }

  std::set<std::string> available(rep.checkpointed.begin(), rep.checkpointed.end());
  for (Proj p : kProjections) available.insert(h_prev_name(p));
  std::vector<bool> needed(steps.size(), false);
  std::vector<std::string> work;
  for (const auto& b : saved)
    if (!available.contains(b)) work.push_back(b);
  while (!work.empty()) {
    const std::string b = work.back();
    work.pop_back();
    if (available.contains(b)) continue;
    auto it = producer.find(b);
    if (it == producer.end()) throw SimulationFault("no producer for dropped buffer '" + b + "'");
    if (needed[it->second]) continue;
    needed[it->second] = true;
    const auto& step = steps[it->second];
    const auto inputs = step.op ? step.op->in : collective_inputs(plan.chunks[step.chunk].collective);
    for (const auto& in : inputs) work.push_back(in);
  }

  std::vector<sim::RankState> ranks;
  for (const auto& rs : run.sim.ranks) {
    sim::RankState fresh{rs.rank, rs.weights, {}};
    for (const auto& name : available)
      if (auto f = rs.ws.find(name); f != rs.ws.end()) fresh.ws.emplace(name, f->second);
    ranks.push_back(std::move(fresh));
  }
  sim::Executor exec(plan, ranks, run.sim.trace, Pass::Reforward);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (!needed[i]) continue;
    const auto& step = steps[i];
    exec.set_chunk(step.chunk < plan.chunks.size() ? plan.chunks[step.chunk].id : "tail");
    if (step.op) {
      exec.run_op(*step.op);
    } else {
      exec.run_collective(plan.chunks[step.chunk].collective);
    }
  }

  // Recompute repeats identical deterministic math, so every rebuilt buffer must
  // match its forward value bit for bit.
  for (std::size_t r = 0; r < ranks.size(); ++r) {
    for (const auto& [name, t] : ranks[r].ws) {
      if (!(t == run.sim.ranks[r].buffer(name))) {
        throw SimulationFault("re-forward of '" + name + "' on rank " + std::to_string(r) +
                              " differs from the forward pass");
      }
      if (r == 0 && !available.contains(name)) rep.recomputed.push_back(name);
    }
  }
  rep.recompute_flops = exec.counters().gemm_flops + exec.counters().attention_flops;
  rep.reforward_collectives = collective_calls(run.sim.trace, Pass::Reforward);
  return run;
}

}  // namespace lrtp::ckpt
