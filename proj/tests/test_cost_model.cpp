// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "lrtp/cost_model.hpp"

using namespace lrtp;
using cost::Parallelism;

TEST(CostModel, AiMatmulExamples) {
  EXPECT_DOUBLE_EQ(cost::ai_matmul(1, 1, 1, 1), 2.0 / 3.0);
  EXPECT_NEAR(cost::ai_matmul(4096, 1024, 4096, 2), 682.67, 0.005);
  EXPECT_DOUBLE_EQ(cost::ai_matmul(7, 3, 5, 2), cost::ai_matmul(3, 7, 5, 2));
  EXPECT_THROW(cost::ai_matmul(0, 1, 1, 1), Error);
  EXPECT_THROW(cost::ai_matmul(1, 1, 1, -2), Error);
}

TEST(CostModel, BlockVolumeExamples) {
  EXPECT_EQ(cost::tp_block_volume(Strategy::FullRankTP, 1, 2, 8, 20), 32u);
  EXPECT_EQ(cost::tp_block_volume(Strategy::VanillaTP, 1, 2, 8, 20), 160u);
  EXPECT_EQ(cost::tp_block_volume(Strategy::BTP, 1, 2, 8, 20, 2), 28u);
  EXPECT_THROW(cost::tp_block_volume(Strategy::BTP, 1, 2, 8, 20), Error);
}

TEST(CostModel, DpVolumeSevenB) {
  const auto cfg = preset("7B");
  const RunShape sh{.b = 4, .s = 4096, .tp = 4};
  const auto full = cost::iter_volume(Parallelism::DP, Strategy::FullRankTP, cfg, sh);
  const auto low = cost::iter_volume(Parallelism::DP, Strategy::BTP, cfg, sh);
  EXPECT_EQ(full, 6'476'005'376ULL);
  EXPECT_EQ(low, 2'558'525'440ULL);
  EXPECT_EQ(low, cost::iter_volume(Parallelism::DP, Strategy::VanillaTP, cfg, sh));
  EXPECT_NEAR(static_cast<double>(full) / static_cast<double>(low), 2.53, 0.005);
}

TEST(CostModel, PipelineAndTensorIterVolumes) {
  const ModelConfig cfg{.layers = 3, .heads = 4, .d = 16, .d_ff = 40, .r = 4};
  const RunShape sh{.b = 2, .s = 8, .tp = 2, .p = 1};
  EXPECT_EQ(cost::iter_volume(Parallelism::PP, Strategy::BTP, cfg, sh), 2u * 2 * 8 * 16);
  for (Strategy s : {Strategy::FullRankTP, Strategy::VanillaTP, Strategy::BTP})
    EXPECT_EQ(cost::iter_volume(Parallelism::TP, s, cfg, sh), 2 * 3 * cost::tp_block_volume(s, cfg, sh));
}

TEST(CostModel, RatioReproduction) {
  const RunShape sh{.b = 1, .s = 4, .tp = 2};
  const auto a = cost::ratio_report({.layers = 1, .heads = 4, .d = 16, .d_ff = 40, .r = 4}, sh);
  EXPECT_EQ(a.vanilla_over_full, Ratio(5));
  EXPECT_EQ(a.full_over_btp, Ratio(8, 7));
  EXPECT_EQ(a.vanilla_over_btp, Ratio(40, 7));
  EXPECT_TRUE(a.ratio_identities_hold);
  const auto b = cost::ratio_report({.layers = 1, .heads = 4, .d = 16, .d_ff = 64, .r = 4}, sh);
  EXPECT_EQ(b.vanilla_over_full, Ratio(13, 2));
}

TEST(CostModel, MlpAiSevenB) {
  const double alpha = 11008.0 / 4096.0;
  const double btp = cost::mlp_ai(Strategy::BTP, alpha, 4, 4, 4096, 4096, 4);
  const double van = cost::mlp_ai(Strategy::VanillaTP, alpha, 4, 4, 4096, 4096, 4);
  const double full = cost::mlp_ai(Strategy::FullRankTP, alpha, 4, 4, 4096, 4096, 4);
  EXPECT_NEAR(btp / van, 2.616, 0.001);
  EXPECT_NEAR(van / full, 0.163, 0.001);
  EXPECT_THROW(cost::mlp_ai(Strategy::BTP, alpha, 0.5, 4, 4096, 4096, 4), Error);
}

TEST(CostModel, LowRankStrategiesShareFlops) {
  for (double tp : {1.0, 2.0, 8.0})
    EXPECT_DOUBLE_EQ(cost::mlp_flops(Strategy::VanillaTP, 2.5, 4, 2, 16, 64, tp),
                     cost::mlp_flops(Strategy::BTP, 2.5, 4, 2, 16, 64, tp));
}

// Each intensity form is its FLOPs cell over its data-movement cell.
TEST(CostModel, AiFormsAreFlopsOverMovement) {
  const double a = 2.5, be = 4, b = 2, s = 128, d = 256, tp = 4;
  for (Strategy st : {Strategy::FullRankTP, Strategy::VanillaTP, Strategy::BTP}) {
    const double lhs = cost::mlp_ai(st, a, be, b, s, d, tp);
    const double rhs = cost::mlp_flops(st, a, be, b, s, d, tp) / cost::mlp_data_movement(st, a, be, b, s, d, tp);
    EXPECT_NEAR(lhs / rhs, 1.0, 1e-12) << to_string(st);
  }
}

// Holds where the bottleneck is real and wide enough: beta * (1 + alpha) >= 2.
TEST(CostModel, BtpIntensityDominatesVanilla) {
  std::mt19937_64 rng(77);
  auto pick = [&](std::initializer_list<double> v) { return *(v.begin() + rng() % v.size()); };
  int points = 0;
  for (int i = 0; i < 1500; ++i) {
    const double b = pick({1, 2, 4, 8}), s = pick({128, 512, 2048, 4096}), d = pick({512, 1024, 4096, 8192});
    const double alpha = pick({1.0, 2.0, 2.6875, 3.5, 4.0}), beta = pick({1.5, 2, 4, 8, 16}), tp = pick({2, 4, 8});
    if (beta * (1 + alpha) < 2) continue;
    ++points;
    EXPECT_GE(cost::mlp_ai(Strategy::BTP, alpha, beta, b, s, d, tp),
              cost::mlp_ai(Strategy::VanillaTP, alpha, beta, b, s, d, tp))
        << b << ' ' << s << ' ' << d << ' ' << alpha << ' ' << beta << ' ' << tp;
  }
  EXPECT_GE(points, 1000);
}

TEST(CostModel, BatchScaling) {
  const ModelConfig cfg{.layers = 2, .heads = 4, .d = 16, .d_ff = 40, .r = 4};
  for (Strategy s : {Strategy::FullRankTP, Strategy::VanillaTP, Strategy::BTP}) {
    const RunShape one{.b = 1, .s = 8, .tp = 2}, two{.b = 2, .s = 8, .tp = 2};
    EXPECT_EQ(cost::tp_block_volume(s, cfg, two), 2 * cost::tp_block_volume(s, cfg, one));
    EXPECT_EQ(cost::iter_volume(Parallelism::PP, s, cfg, two), 2 * cost::iter_volume(Parallelism::PP, s, cfg, one));
    EXPECT_EQ(cost::iter_volume(Parallelism::DP, s, cfg, two), cost::iter_volume(Parallelism::DP, s, cfg, one));
  }
}

TEST(CostModel, JsonKeyOrderAndCsv) {
  const auto rep = cost::ratio_report({.layers = 1, .heads = 4, .d = 16, .d_ff = 40, .r = 4}, {.b = 1, .s = 4, .tp = 2});
  const auto j = cost::to_json(rep);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"element_bytes", "strategies", "ratios", "ratio_identities_hold", "notes"}));
  EXPECT_EQ(j["ratios"]["vanilla_over_btp"]["num"], 40);
  std::ostringstream os;
  cost::write_csv(os, rep);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "strategy,block_volume_elements,block_volume_bytes,tp_iter_elements,dp_iter_elements,pp_iter_elements,mlp_ai");
}
