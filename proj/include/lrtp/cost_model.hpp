// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "lrtp/error.hpp"
#include "lrtp/model.hpp"
#include "lrtp/plan.hpp"

namespace lrtp::cost {

enum class Parallelism { DP, PP, TP };

inline const char* to_string(Parallelism p) {
  return p == Parallelism::DP ? "dp" : p == Parallelism::PP ? "pp" : "tp";
}

namespace detail {

inline void require_positive(std::initializer_list<double> values, const char* what) {
  for (double v : values)
    if (!(v > 0.0)) throw Error(std::string(what) + ": arguments must be positive");
}

inline std::int64_t i64(std::uint64_t v) { return static_cast<std::int64_t>(v); }

}  // namespace detail

/// FLOPs per byte of an [M,K] x [K,N] GEMM that reads both operands and writes the result once.
inline double ai_matmul(double m, double n, double k, double bytes) {
  detail::require_positive({m, n, k, bytes}, "ai_matmul");
  return 2.0 * m * n * k / ((m * k + k * n + m * n) * bytes);
}

/// Elements moved by TP collectives for one block in one pass.
inline std::uint64_t tp_block_volume(Strategy strategy, std::uint64_t b, std::uint64_t s, std::uint64_t d,
                                     std::uint64_t d_ff, std::optional<std::uint64_t> r = std::nullopt) {
  if (b == 0 || s == 0 || d == 0 || d_ff == 0) throw Error("tp_block_volume: dimensions must be positive");
  switch (strategy) {
    case Strategy::FullRankTP: return 2 * b * s * d;
    case Strategy::VanillaTP: return 5 * b * s * d + 2 * b * s * d_ff;
    case Strategy::BTP:
      if (!r || *r == 0) throw Error("tp_block_volume: btp needs the low rank r");
      return 7 * b * s * *r;
  }
  throw Error("tp_block_volume: unknown strategy");
}

inline std::uint64_t tp_block_volume(Strategy strategy, const ModelConfig& cfg, const RunShape& shape) {
  return tp_block_volume(strategy, shape.b, shape.s, cfg.d, cfg.d_ff, cfg.r);
}

inline std::uint64_t dp_parameters(const ModelConfig& cfg, bool low_rank) {
  const std::uint64_t d = cfg.d, f = cfg.d_ff, r = cfg.r;
  return low_rank ? 11 * d * r + 3 * f * r : 4 * d * d + 3 * d * f;
}

/// Elements moved per training iteration. DP: gradient all-reduce of every linear
/// parameter; PP: one activation send forward and one backward per stage; TP: the
/// per-block volume mirrored for backward across all layers.
inline std::uint64_t iter_volume(Parallelism par, Strategy strategy, const ModelConfig& cfg,
                                 const RunShape& shape) {
  const std::uint64_t l = cfg.layers;
  switch (par) {
    case Parallelism::DP: return l * dp_parameters(cfg, strategy != Strategy::FullRankTP);
    case Parallelism::PP: return 2ULL * shape.p * shape.b * shape.s * cfg.d;
    case Parallelism::TP: return 2 * l * tp_block_volume(strategy, cfg, shape);
  }
  throw Error("iter_volume: unknown combination");
}

// Per-MLP-block closed forms with d_ff = alpha*d and d = beta*r. They model a
// two-linear MLP (up then down) and are evaluated exactly as printed.

inline double mlp_flops(Strategy strategy, double alpha, double beta, double b, double s, double d, double tp) {
  detail::require_positive({alpha, beta, b, s, d, tp}, "mlp_flops");
  if (strategy == Strategy::FullRankTP) return 4.0 * alpha * b * s * d * d / tp;
  return 4.0 * (1.0 + alpha) * b * s * d * d / (beta * tp);
}

inline double mlp_data_movement(Strategy strategy, double alpha, double beta, double b, double s, double d,
                                double tp) {
  detail::require_positive({alpha, beta, b, s, d, tp}, "mlp_data_movement");
  const double bs = b * s;
  switch (strategy) {
    case Strategy::FullRankTP: return 4.0 * d * (bs + alpha * (d + bs) / tp);
    case Strategy::VanillaTP:
      return 4.0 * d * ((1.0 + alpha) * bs + ((1.0 + alpha) * d + 2.0 * bs) / (beta * tp));
    case Strategy::BTP:
      return 4.0 * d * (((1.0 + alpha) * (beta * bs + d) + 2.0 * bs * tp) / (beta * tp));
  }
  throw Error("mlp_data_movement: unknown strategy");
}

inline double mlp_ai(Strategy strategy, double alpha, double beta, double b, double s, double d, double tp) {
  detail::require_positive({alpha, beta, b, s, d, tp}, "mlp_ai");
  if (beta < 1.0 || tp < 1.0) throw Error("mlp_ai: beta and tp must be at least 1");
  const double bs = b * s;
  const double a1 = 1.0 + alpha;
  switch (strategy) {
    case Strategy::FullRankTP: return alpha * bs * d * d / (bs * d * tp + alpha * d * (d + bs));
    case Strategy::VanillaTP:
      return 4.0 * bs * d * d * a1 / (4.0 * bs * d * beta * tp * a1 + 4.0 * d * d * a1 + 8.0 * bs * d);
    case Strategy::BTP:
      return 4.0 * bs * d * d * a1 / (4.0 * beta * bs * d * a1 + 4.0 * d * d * a1 + 8.0 * bs * d * tp);
  }
  throw Error("mlp_ai: unknown strategy");
}

inline double mlp_ai(Strategy strategy, const ModelConfig& cfg, const RunShape& shape) {
  return mlp_ai(strategy, boost::rational_cast<double>(cfg.alpha()), boost::rational_cast<double>(cfg.beta()),
                static_cast<double>(shape.b), static_cast<double>(shape.s), static_cast<double>(cfg.d),
                static_cast<double>(shape.tp));
}

struct StrategyCost {
  Strategy strategy = Strategy::FullRankTP;
  std::uint64_t block_volume = 0;
  std::uint64_t tp_iter = 0;
  std::uint64_t dp_iter = 0;
  std::uint64_t pp_iter = 0;
  double mlp_ai = 0.0;
};

struct CostReport {
  ModelConfig cfg;
  RunShape shape;
  int element_bytes = 2;
  std::vector<StrategyCost> strategies;  // full-rank, vanilla, btp
  Ratio vanilla_over_full;
  Ratio full_over_btp;
  Ratio vanilla_over_btp;
  Ratio dp_full_over_lowrank;
  double ai_btp_over_vanilla = 0.0;
  double ai_vanilla_over_full = 0.0;
  bool ratio_identities_hold = false;
  std::vector<std::string> notes;

  const StrategyCost& at(Strategy s) const { return strategies.at(static_cast<std::size_t>(s)); }
};

inline CostReport ratio_report(const ModelConfig& cfg, const RunShape& shape, int element_bytes = 2) {
  cfg.validate();
  CostReport rep{.cfg = cfg, .shape = shape, .element_bytes = element_bytes};
  for (Strategy s : {Strategy::FullRankTP, Strategy::VanillaTP, Strategy::BTP}) {
    rep.strategies.push_back({s, tp_block_volume(s, cfg, shape), iter_volume(Parallelism::TP, s, cfg, shape),
                              iter_volume(Parallelism::DP, s, cfg, shape),
                              iter_volume(Parallelism::PP, s, cfg, shape), mlp_ai(s, cfg, shape)});
  }
  using detail::i64;
  const auto& full = rep.at(Strategy::FullRankTP);
  const auto& van = rep.at(Strategy::VanillaTP);
  const auto& btp = rep.at(Strategy::BTP);
  rep.vanilla_over_full = Ratio(i64(van.block_volume), i64(full.block_volume));
  rep.full_over_btp = Ratio(i64(full.block_volume), i64(btp.block_volume));
  rep.vanilla_over_btp = Ratio(i64(van.block_volume), i64(btp.block_volume));
  rep.dp_full_over_lowrank = Ratio(i64(full.dp_iter), i64(btp.dp_iter));
  rep.ai_btp_over_vanilla = btp.mlp_ai / van.mlp_ai;
  rep.ai_vanilla_over_full = van.mlp_ai / full.mlp_ai;
  rep.ratio_identities_hold = rep.vanilla_over_full == (Ratio(5) + 2 * cfg.alpha()) / 2 &&
                              Ratio(i64(btp.block_volume), i64(full.block_volume)) == Ratio(7) / (2 * cfg.beta());
  rep.notes.push_back("mlp arithmetic intensity follows the two-linear MLP closed forms; "
                      "the simulated block has three MLP linears");
  return rep;
}

inline nlohmann::ordered_json ratio_json(const Ratio& r) {
  nlohmann::ordered_json j;
  j["num"] = r.numerator();
  j["den"] = r.denominator();
  j["value"] = boost::rational_cast<double>(r);
  return j;
}

inline nlohmann::ordered_json to_json(const CostReport& rep) {
  nlohmann::ordered_json j;
  j["element_bytes"] = rep.element_bytes;
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  const std::uint64_t eb = static_cast<std::uint64_t>(rep.element_bytes);
  for (const auto& s : rep.strategies) {
    nlohmann::ordered_json e;
    e["strategy"] = to_string(s.strategy);
    e["block_volume_elements"] = s.block_volume;
    e["block_volume_bytes"] = s.block_volume * eb;
    e["tp_iter_elements"] = s.tp_iter;
    e["dp_iter_elements"] = s.dp_iter;
    e["pp_iter_elements"] = s.pp_iter;
    e["mlp_ai"] = s.mlp_ai;
    per.push_back(std::move(e));
  }
  j["strategies"] = std::move(per);
  nlohmann::ordered_json ratios;
  ratios["vanilla_over_full"] = ratio_json(rep.vanilla_over_full);
  ratios["full_over_btp"] = ratio_json(rep.full_over_btp);
  ratios["vanilla_over_btp"] = ratio_json(rep.vanilla_over_btp);
  ratios["dp_full_over_lowrank"] = ratio_json(rep.dp_full_over_lowrank);
  ratios["ai_btp_over_vanilla"] = rep.ai_btp_over_vanilla;
  ratios["ai_vanilla_over_full"] = rep.ai_vanilla_over_full;
  j["ratios"] = std::move(ratios);
  j["ratio_identities_hold"] = rep.ratio_identities_hold;
  j["notes"] = rep.notes;
  return j;
}

inline void write_csv(std::ostream& os, const CostReport& rep) {
  os << "strategy,block_volume_elements,block_volume_bytes,tp_iter_elements,dp_iter_elements,"
        "pp_iter_elements,mlp_ai\n";
  for (const auto& s : rep.strategies) {
    os << to_string(s.strategy) << ',' << s.block_volume << ',' << s.block_volume * rep.element_bytes << ','
       << s.tp_iter << ',' << s.dp_iter << ',' << s.pp_iter << ',' << nlohmann::json(s.mlp_ai).dump() << '\n';
  }
}

}  // namespace lrtp::cost
