// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "lrtp/plan.hpp"

using namespace lrtp;

namespace {

const ModelConfig kToy{.layers = 2, .heads = 4, .d = 16, .d_ff = 40, .r = 4};
const RunShape kShape{.b = 2, .s = 8, .tp = 2};

std::string read_golden(const std::string& name) {
  std::ifstream in(std::string(LRTP_SOURCE_DIR) + "/tests/golden/" + name);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::uint64_t block_elements(const ShardPlan& p) {
  std::uint64_t n = 0;
  for (const auto& r : enumerate_collectives(p))
    if (r.main.tag == Tag::Block) n += r.main.elements;
  return n;
}

std::uint64_t block_calls(const ShardPlan& p) {
  std::uint64_t n = 0;
  for (const auto& r : enumerate_collectives(p)) n += r.main.tag == Tag::Block;
  return n;
}

}  // namespace

TEST(Plan, NamesRoundTrip) {
  for (Strategy s : {Strategy::FullRankTP, Strategy::VanillaTP, Strategy::BTP}) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_THROW(parse_strategy("sequence"), ConfigError);
  EXPECT_EQ(parse_op_kind("attention"), OpKind::Attention);
}

TEST(Plan, GoldenText) {
  struct Case {
    const char* file;
    Strategy s;
    Variant v;
    PlanOptions o;
  };
  const Case cases[] = {
      {"full_rank_tp2.txt", Strategy::FullRankTP, Variant::FullRank, {}},
      {"vanilla_svd_tp2.txt", Strategy::VanillaTP, Variant::SVD, {}},
      {"vanilla_cola_tp2_grouped.txt", Strategy::VanillaTP, Variant::CoLA, {.grouping = true}},
      {"btp_svd_tp2_sync.txt", Strategy::BTP, Variant::SVD, {}},
      {"btp_lax_tp2_online_grouped.txt", Strategy::BTP, Variant::LaX, {.grouping = true, .online_norm = true}},
  };
  for (const auto& c : cases) EXPECT_EQ(to_text(plan(c.s, c.v, kToy, kShape, c.o)), read_golden(c.file)) << c.file;
}

TEST(Plan, ChunkCountsAndPredictedVolumes) {
  const std::uint64_t bs = kShape.b * kShape.s;
  const auto full = plan(Strategy::FullRankTP, Variant::FullRank, kToy, kShape);
  const auto van = plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape);
  const auto btp = plan(Strategy::BTP, Variant::SVD, kToy, kShape);
  EXPECT_EQ(full.chunks.size(), 2u);
  EXPECT_EQ(van.chunks.size(), 7u);
  EXPECT_EQ(btp.chunks.size(), 7u);
  EXPECT_EQ(block_elements(full), 2 * bs * kToy.d);
  EXPECT_EQ(block_elements(van), 5 * bs * kToy.d + 2 * bs * kToy.d_ff);
  EXPECT_EQ(block_elements(btp), 7 * bs * kToy.r);
}

TEST(Plan, GroupingCutsCallsOnlyForLowRank) {
  for (auto [s, v] : {std::pair{Strategy::FullRankTP, Variant::FullRank}, std::pair{Strategy::VanillaTP, Variant::SVD},
                      std::pair{Strategy::BTP, Variant::CoLA}}) {
    const auto plain = plan(s, v, kToy, kShape);
    const auto grouped = apply_grouping(plain);
    EXPECT_TRUE(grouped.options.grouping);
    EXPECT_EQ(block_elements(grouped), block_elements(plain));
    EXPECT_LT(predicted_launches(grouped), predicted_launches(plain));
    if (s == Strategy::FullRankTP) {
      EXPECT_EQ(block_calls(grouped), block_calls(plain));
    } else {
      EXPECT_EQ(block_calls(plain), 7u);
      EXPECT_EQ(block_calls(grouped), 4u);
    }
  }
}

TEST(Plan, LaunchCounts) {
  EXPECT_EQ(predicted_launches(plan(Strategy::FullRankTP, Variant::FullRank, kToy, kShape)), 7u);
  EXPECT_EQ(predicted_launches(plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape)), 14u);
  EXPECT_EQ(predicted_launches(plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape, {.grouping = true})), 8u);
  EXPECT_EQ(predicted_launches(plan(Strategy::BTP, Variant::SVD, kToy, kShape, {.grouping = true})), 8u);
}

TEST(Plan, EveryChunkEndsInOneCollective) {
  for (bool g : {false, true})
    for (auto [s, v] : {std::pair{Strategy::FullRankTP, Variant::FullRank}, std::pair{Strategy::VanillaTP, Variant::LaX},
                        std::pair{Strategy::BTP, Variant::SVD}}) {
      const auto p = plan(s, v, kToy, kShape, {.grouping = g});
      std::map<std::string, int> per_chunk;
      for (const auto& r : enumerate_collectives(p))
        if (r.main.tag == Tag::Block) ++per_chunk[r.chunk_id];
      EXPECT_EQ(per_chunk.size(), p.chunks.size());
      for (const auto& [id, n] : per_chunk) EXPECT_EQ(n, 1) << id;
    }
}

TEST(Plan, OnlineNormRemovesStandaloneStatCollectives) {
  auto stat_calls = [](const ShardPlan& p) {
    int n = 0;
    for (const auto& r : enumerate_collectives(p)) n += r.main.tag == Tag::NormStat;
    return n;
  };
  EXPECT_EQ(stat_calls(plan(Strategy::BTP, Variant::SVD, kToy, kShape)), 2);
  EXPECT_EQ(stat_calls(plan(Strategy::BTP, Variant::SVD, kToy, kShape, {.online_norm = true})), 0);
  EXPECT_EQ(stat_calls(plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape)), 0);
}

TEST(Plan, OnlineNormFallsBackOutsideBtp) {
  const auto p = plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape, {.online_norm = true});
  EXPECT_FALSE(p.options.online_norm);
  ASSERT_EQ(p.warnings.size(), 1u);
  const auto f = plan(Strategy::FullRankTP, Variant::FullRank, kToy, kShape, {.lowrank_ckpt = true});
  EXPECT_FALSE(f.options.lowrank_ckpt);
}

TEST(Plan, DivisibilityErrors) {
  auto cfg = kToy;
  cfg.heads = 2;
  try {
    plan(Strategy::BTP, Variant::SVD, cfg, {.b = 1, .s = 4, .tp = 4});
    FAIL() << "expected PlanError";
  } catch (const PlanError& e) {
    EXPECT_STREQ(e.what(), "heads=2 not divisible by tp=4");
  }
  auto narrow = kToy;
  narrow.r = 2;
  // r only has to divide tp when the rank dimension is sharded
  EXPECT_THROW(plan(Strategy::VanillaTP, Variant::SVD, narrow, {.b = 1, .s = 4, .tp = 4}), PlanError);
  EXPECT_NO_THROW(plan(Strategy::BTP, Variant::SVD, narrow, {.b = 1, .s = 4, .tp = 4}));
  EXPECT_THROW(plan(Strategy::FullRankTP, Variant::SVD, kToy, kShape), PlanError);
  EXPECT_THROW(plan(Strategy::BTP, Variant::FullRank, kToy, kShape), PlanError);
}

TEST(Plan, Classification) {
  const ClassifyContext shard{.sharded = true, .heads = 4, .tp = 2};
  EXPECT_EQ(classify("swiglu", shard), Safety::ShardedSafe);
  EXPECT_EQ(classify("bottleneck", shard), Safety::ShardedSafe);
  EXPECT_EQ(classify("attention", shard), Safety::ShardedSafe);
  EXPECT_EQ(classify("rmsnorm", shard), Safety::ShardedUnsafe);
  EXPECT_EQ(classify("rmsnorm", ClassifyContext{}), Safety::ShardedSafe);
  EXPECT_EQ(classify("gather", shard), Safety::ShardedUnsafe);
  EXPECT_EQ(classify(OpKind::ResidualAdd, {.sharded = true, .identically_sharded = false}), Safety::ShardedUnsafe);
  EXPECT_THROW(classify("attention", {.sharded = true, .heads = 6, .tp = 4}), PlanError);
}

TEST(Plan, LocalRmsNormOnShardedInputIsRejected) {
  auto p = plan(Strategy::BTP, Variant::SVD, kToy, kShape);
  p.chunks[0].ops[0].norm = NormMode::Local;
  EXPECT_THROW(validate_plan(p), PlanError);
}

TEST(Plan, ShardSpecsFollowStrategy) {
  const auto btp = plan(Strategy::BTP, Variant::SVD, kToy, kShape);
  for (const auto& c : btp.chunks)
    for (const auto& op : c.ops) {
      if (op.kind != OpKind::Linear) continue;
      if (op.factor == Factor::Down) {
        EXPECT_EQ(op.shard.kind, ShardKind::RowParallel);
      } else {
        EXPECT_EQ(op.shard.kind, ShardKind::ColumnParallel);
      }
    }
  const auto van = plan(Strategy::VanillaTP, Variant::SVD, kToy, kShape);
  for (const auto& c : van.chunks)
    for (const auto& op : c.ops)
      if (op.kind == OpKind::Linear) EXPECT_EQ(op.shard.global, kToy.r);
}

TEST(Plan, FaultHookAddsTraffic) {
  const auto p = plan(Strategy::BTP, Variant::SVD, kToy, kShape);
  const auto bad = inject_fault(p, "redundant-gather");
  EXPECT_GT(block_elements(bad), block_elements(p));
  EXPECT_THROW(inject_fault(p, "nope"), ConfigError);
}
