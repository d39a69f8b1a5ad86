#include <gtest/gtest.h>

#include <cmath>

#include "hyspec/theory.hpp"
#include "test_util.hpp"

using namespace hyspec;
using namespace hyspec::testing;

TEST(ExpectedTokens, Values) {
  EXPECT_EQ(expected_tokens(0.0, 3), 1.0);
  EXPECT_NEAR(expected_tokens(0.5, 2), 1.75, 1e-12);
  EXPECT_NEAR(expected_tokens(0.68, 2), 2.1424, 1e-12);
  EXPECT_THROW(expected_tokens(1.0, 2), Error);
  EXPECT_THROW(expected_tokens(-0.1, 2), Error);
  EXPECT_THROW(expected_tokens(0.5, 0), Error);
}

TEST(ExpectedTokens, Monotone) {
  for (int k = 1; k <= 8; ++k) {
    double prev = 0.0;
    for (double a = 0.0; a < 0.99; a += 0.05) {
      const double e = expected_tokens(a, k);
      EXPECT_GT(e, prev);
      EXPECT_GE(e, 1.0);
      EXPECT_LE(e, k + 1.0);
      if (k > 1 && a > 0.0) { EXPECT_GT(e, expected_tokens(a, k - 1)); }
      prev = e;
    }
  }
}

TEST(Speedup, Values) {
  EXPECT_NEAR(speedup(0.0, 1, 1e-12), 1.0, 1e-9);
  EXPECT_NEAR(speedup(0.68, 2, 0.784), 2.1424 / 2.568, 1e-12);
  EXPECT_NEAR(speedup(0.68, 2, 0.784), 0.8343, 1e-4);
  EXPECT_NEAR(speedup(0.9, 4, 0.1), (1.0 - std::pow(0.9, 5)) / 0.1 / 1.4, 1e-12);
  EXPECT_NEAR(speedup(0.9, 4, 0.1), 2.925, 1e-3);
  // all-token 0.68 at k=2 read as per-token sqrt(0.68)
  EXPECT_NEAR(speedup(per_token_from_all_token(0.68, 2), 2, 0.784), 0.975, 1e-3);
  EXPECT_THROW(speedup(0.5, 2, 0.0), Error);
  for (double a : {0.2, 0.7}) EXPECT_NEAR(speedup(a, 3, 1e-10), expected_tokens(a, 3), 1e-8);
}

TEST(OptimalK, Sweeps) {
  EXPECT_EQ(optimal_k(0.0, 0.3, 8), 1);
  EXPECT_EQ(optimal_k(0.99, 0.01, 16), 16);
  const int k = optimal_k(0.68, 0.784, 8);
  EXPECT_LE(k, 2);
  for (int j = 1; j <= 8; ++j) EXPECT_LE(speedup(0.68, j, 0.784), speedup(0.68, k, 0.784));
  EXPECT_EQ(optimal_k(0.5, 0.1, 1), 1);
  EXPECT_THROW(optimal_k(0.5, 0.1, 0), Error);
}

TEST(FlopRatio, IdentityIsOne) {
  for (Arch a : {Arch::parallel_hybrid, Arch::sequential_hybrid, Arch::transformer}) {
    const auto cfg = tiny_config(a, 8);
    const auto c = flop_ratio(cfg, DraftStrategy::identity());
    EXPECT_EQ(c.cost_ratio, 1.0);
    EXPECT_EQ(c.draft_params, c.target_params);
  }
  EXPECT_THROW(flop_ratio(tiny_config(Arch::transformer, 8), DraftStrategy::component_only()), Error);
}

TEST(FlopRatio, TransformerLayerSkipHandCount) {
  ModelConfig c;
  c.arch = Arch::transformer;
  c.n_layers = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_state = 2;
  c.vocab_size = 10;
  c.context_limit = 16;
  c.d_ff = 12;
  // per layer: attention 8 + 4*64 = 264, ffn 8 + 2*96 = 200; final norm + head = 8 + 80
  const double layer = 264 + 200, tail = 88;
  const auto r = flop_ratio(c, DraftStrategy::layer_skip(0.33));  // skips layer 1
  EXPECT_EQ(r.target_params, static_cast<std::size_t>(3 * layer + tail));
  EXPECT_EQ(r.draft_params, static_cast<std::size_t>(2 * layer + tail));
  EXPECT_DOUBLE_EQ(r.cost_ratio, (2 * layer + tail) / (3 * layer + tail));
  const auto e = flop_ratio(c, DraftStrategy::early_exit(0.34));  // keeps ceil(1.02) = 2 layers
  EXPECT_EQ(e.draft_params, static_cast<std::size_t>(2 * layer + tail));
}

TEST(FlopRatio, ParallelComponentOnlyHandCount) {
  // d = 8, d_state = 4, d_ff = 2: attention 8 + 256 = 264; recurrence
  // 8 + 3*64 + 2*32 + 8 + 8 = 280; ffn 8 + 32 = 40. Attention is 264/584.
  ModelConfig c;
  c.arch = Arch::parallel_hybrid;
  c.n_layers = 4;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_state = 4;
  c.vocab_size = 10;
  c.context_limit = 16;
  c.d_ff = 2;
  const double layer = 584, attn = 264, tail = 88;
  const auto r = flop_ratio(c, DraftStrategy::component_only());
  EXPECT_DOUBLE_EQ(r.cost_ratio, (4 * (layer - attn) + tail) / (4 * layer + tail));
  EXPECT_EQ(r.draft_attention_fraction, 0.0);
  EXPECT_EQ(flop_ratio(c, DraftStrategy::identity()).draft_attention_fraction, 1.0);
}

TEST(FlopRatio, SequentialComponentOnly) {
  const auto cfg = tiny_config(Arch::sequential_hybrid, 8);
  const auto r = flop_ratio(cfg, DraftStrategy::component_only());
  EXPECT_LT(r.cost_ratio, 1.0);
  EXPECT_GT(r.cost_ratio, 0.0);
}

TEST(ContextCost, ReducesToPlainSpeedup) {
  const auto cfg = tiny_config(Arch::parallel_hybrid, 8);
  const auto c = flop_ratio(cfg, DraftStrategy::component_only());
  EXPECT_DOUBLE_EQ(speedup_at_context(0.6, 2, c, 1000.0, 0.0), speedup(0.6, 2, c.cost_ratio));
  // an attention-free draft gets relatively cheaper as the context grows
  EXPECT_GT(speedup_at_context(0.6, 2, c, 4096.0, 1e-3), speedup_at_context(0.6, 2, c, 128.0, 1e-3));
}
