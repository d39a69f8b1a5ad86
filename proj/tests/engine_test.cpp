#include <gtest/gtest.h>

#include "hyspec/engine.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace hyspec;
using namespace hyspec::testing;

namespace {

const Arch kArchs[] = {Arch::parallel_hybrid, Arch::sequential_hybrid, Arch::transformer};

std::vector<DraftStrategy> strategies_for(Arch a) {
  std::vector<DraftStrategy> s{DraftStrategy::identity(), DraftStrategy::layer_skip(0.33),
                               DraftStrategy::early_exit(0.5)};
  if (a != Arch::transformer) s.push_back(DraftStrategy::component_only());
  return s;
}

ModelConfig eight_layer(Arch a) {
  ModelConfig c = tiny_config(a, 8);
  return c;
}

}  // namespace

TEST(BuildMask, ParallelComponentOnly) {
  const auto cfg = eight_layer(Arch::parallel_hybrid);
  const auto m = build_mask(cfg, DraftStrategy::component_only());
  ASSERT_EQ(m.layers.size(), 8u);
  for (const auto& l : m.layers) {
    EXPECT_FALSE(l.attn_enabled);
    EXPECT_TRUE(l.alt_enabled);
    EXPECT_FALSE(l.layer_skipped);
  }
}

TEST(BuildMask, SequentialComponentOnlySkipsAttentionLayers) {
  const auto cfg = eight_layer(Arch::sequential_hybrid);
  const auto m = build_mask(cfg, DraftStrategy::component_only());
  const auto attn = cfg.attention_layers();
  ASSERT_FALSE(attn.empty());
  for (int l = 0; l < 8; ++l) {
    const bool is_attn = std::find(attn.begin(), attn.end(), l) != attn.end();
    EXPECT_EQ(m.layers[static_cast<std::size_t>(l)].layer_skipped, is_attn) << l;
  }
}

TEST(BuildMask, IdentityAndErrors) {
  for (Arch a : kArchs) {
    const auto cfg = eight_layer(a);
    const auto m = build_mask(cfg, DraftStrategy::identity());
    for (const auto& l : m.layers) {
      EXPECT_TRUE(l.attn_enabled);
      EXPECT_TRUE(l.alt_enabled);
      EXPECT_FALSE(l.layer_skipped);
    }
    EXPECT_FALSE(m.max_layer.has_value());
  }
  EXPECT_THROW(build_mask(eight_layer(Arch::transformer), DraftStrategy::component_only()), Error);
  EXPECT_THROW(build_mask(eight_layer(Arch::parallel_hybrid), DraftStrategy::layer_skip(1.0)), Error);
  EXPECT_THROW(build_mask(eight_layer(Arch::parallel_hybrid), DraftStrategy::early_exit(0.0)), Error);
  EXPECT_THROW(build_mask(tiny_config(Arch::transformer, 2), DraftStrategy::layer_skip(0.33)), Error);
}

TEST(BuildMask, LayerSkipSpacing) {
  EXPECT_EQ(layer_skip_indices(8, 0.33), (std::vector<int>{2, 4, 6}));
  EXPECT_EQ(layer_skip_indices(8, 0.0), std::vector<int>{});
  EXPECT_EQ(layer_skip_indices(4, 0.5), (std::vector<int>{1, 2}));
  for (int L = 3; L <= 24; ++L) {
    for (double f : {0.1, 0.25, 0.33, 0.5}) {
      const int m = static_cast<int>(std::ceil(f * L - 1e-12));
      if (m > L - 2) {
        EXPECT_THROW(layer_skip_indices(L, f), Error);
        continue;
      }
      const auto idx = layer_skip_indices(L, f);
      ASSERT_EQ(static_cast<int>(idx.size()), m);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        EXPECT_GT(idx[i], 0);
        EXPECT_LT(idx[i], L - 1);
        if (i > 0) { EXPECT_GT(idx[i], idx[i - 1]); }
      }
    }
  }
}

TEST(BuildMask, EarlyExitKeepsLeadingLayers) {
  const auto cfg = eight_layer(Arch::transformer);
  const auto m = build_mask(cfg, DraftStrategy::early_exit(0.5));
  ASSERT_TRUE(m.max_layer.has_value());
  EXPECT_EQ(*m.max_layer, 4);
  for (int l = 0; l < 8; ++l) EXPECT_EQ(m.layers[static_cast<std::size_t>(l)].layer_skipped, l >= 4);
  EXPECT_FALSE(build_mask(cfg, DraftStrategy::early_exit(1.0)).layers.back().layer_skipped);
}

TEST(Strategy, ParseAndName) {
  for (const char* s : {"identity", "component_only", "layer_skip:0.33", "early_exit:0.5", "layer_skip:0.25"}) {
    EXPECT_EQ(DraftStrategy::parse(s).name(), s);
  }
  EXPECT_EQ(DraftStrategy::parse("layer_skip").skip_fraction, 0.33);
  EXPECT_THROW(DraftStrategy::parse("medusa"), Error);
  EXPECT_THROW(DraftStrategy::parse("layer_skip:1.5"), Error);
}

TEST(Acceptance, HandCases) {
  EXPECT_DOUBLE_EQ(acceptance_probability(0.4, 0.8), 0.5);
  EXPECT_DOUBLE_EQ(acceptance_probability(0.5, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(acceptance_probability(0.9, 0.3), 1.0);
  EXPECT_THROW(acceptance_probability(0.5, 0.0), Error);
  const auto r = residual_distribution(Distribution(Vec{0.5, 0.5}), Distribution(Vec{1.0, 0.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 1.0);
  const auto same = residual_distribution(Distribution(Vec{0.3, 0.7}), Distribution(Vec{0.3, 0.7}));
  EXPECT_DOUBLE_EQ(same[1], 0.7);
}

// Two-token vocabulary, zero weights so the target is exactly (0.5, 0.5);
// the draft claims (1, 0) and proposes token 0.
TEST(Verify, TwoTokenRejectionRule) {
  const auto cfg = tiny_config(Arch::parallel_hybrid, 2, 2);
  const Model model(cfg, zero_weights(cfg));
  const auto full = ComponentMask::all_enabled(2);
  DecodeSettings ds;
  ds.k = 1;
  ds.temperature = 1.0;
  DecodeState base = empty_state(model, full);
  forward_extend(model, full, base, TokenSeq{0, 1});
  DraftSequence d;
  d.tokens = {0};
  d.draft_probs = {Distribution(Vec{1.0, 0.0})};
  d.start_position = base.position;
  int accepted = 0;
  const int n = 20000;
  Rng rng(5);
  for (int t = 0; t < n; ++t) {
    DecodeState st = base;
    const auto r = verify_and_accept(model, full, st, 1, d, ds, rng);
    ASSERT_EQ(r.emitted_tokens.size(), static_cast<std::size_t>(r.accepted_count) + 1);
    if (r.accepted_count == 1) {
      ++accepted;
      EXPECT_TRUE(r.all_accepted);
      EXPECT_EQ(st.position, base.position + 2);
    } else {
      EXPECT_EQ(r.emitted_tokens[0], 1);
      EXPECT_EQ(st.position, base.position + 1);
    }
  }
  EXPECT_NEAR(static_cast<double>(accepted) / n, 0.5, 0.015);
}

TEST(Verify, PrefixMismatch) {
  const Model model = tiny_model(Arch::parallel_hybrid);
  const auto full = ComponentMask::all_enabled(4);
  DecodeState st = empty_state(model, full);
  forward_extend(model, full, st, TokenSeq{1, 2, 3});
  DraftSequence d;
  d.tokens = {4};
  d.draft_probs = {Distribution::uniform(11)};
  d.start_position = 1;
  Rng rng(0);
  EXPECT_THROW(verify_and_accept(model, full, st, 5, d, DecodeSettings{}, rng), Error);
  d.start_position = 3;
  d.draft_probs.clear();
  EXPECT_THROW(verify_and_accept(model, full, st, 5, d, DecodeSettings{}, rng), Error);
}

TEST(Draft, IdentityGreedyIsTargetContinuation) {
  for (Arch a : kArchs) {
    const Model model = tiny_model(a);
    const auto full = ComponentMask::all_enabled(4);
    const TokenSeq prompt = random_tokens(6, 11, 8);
    DecodeSettings ds;
    ds.k = 5;
    ds.max_new_tokens = 5;
    const TokenSeq want = autoregressive_generate(model, prompt, ds);
    DecodeState st = empty_state(model, full);
    forward_extend(model, full, st, std::span<const Token>(prompt).first(5));
    Rng rng(1);
    const auto d = draft_k(model, full, st, prompt.back(), ds, rng);
    EXPECT_EQ(d.tokens, want);
    EXPECT_EQ(d.start_position, 5);
    EXPECT_EQ(st.position, 5 + ds.k);
  }
}

TEST(Draft, DeterministicAndBaseCase) {
  const Model model = tiny_model(Arch::sequential_hybrid);
  const auto mask = build_mask(model.cfg, DraftStrategy::component_only());
  DecodeSettings ds;
  ds.k = 4;
  ds.temperature = 0.8;
  auto run = [&](int k) {
    DecodeSettings s = ds;
    s.k = k;
    DecodeState st = empty_state(model, mask);
    forward_extend(model, mask, st, TokenSeq{1, 2});
    Rng rng(42);
    return draft_k(model, mask, st, 3, s, rng);
  };
  const auto a = run(4), b = run(4);
  EXPECT_EQ(a.tokens, b.tokens);
  for (std::size_t i = 0; i < a.tokens.size(); ++i) EXPECT_EQ(a.draft_probs[i].values(), b.draft_probs[i].values());
  const auto one = run(1);
  ASSERT_EQ(one.tokens.size(), 1u);
  ASSERT_EQ(one.draft_probs.size(), 1u);
  EXPECT_GT(one.draft_probs[0][static_cast<std::size_t>(one.tokens[0])], 0.0);
}

TEST(Draft, ContextOverflow) {
  const Model model = tiny_model(Arch::transformer);
  const auto full = ComponentMask::all_enabled(4);
  DecodeState st = empty_state(model, full);
  forward_extend(model, full, st, random_tokens(46, 11, 2));
  DecodeSettings ds;
  ds.k = 4;
  Rng rng(0);
  EXPECT_THROW(draft_k(model, full, st, 1, ds, rng), Error);
}

TEST(Speculative, GreedyLosslessAllStrategies) {
  for (Arch a : kArchs) {
    const ModelConfig cfg = eight_layer(a);
    const Model model(cfg, init_weights(cfg, 11));
    const auto full = ComponentMask::all_enabled(cfg.n_layers);
    for (const auto& s : strategies_for(a)) {
      for (int k : {1, 2, 4, 8}) {
        for (std::uint64_t p = 0; p < 3; ++p) {
          const TokenSeq prompt = random_tokens(1 + 4 * p, 11, 100 + p);
          DecodeSettings ds;
          ds.k = k;
          ds.max_new_tokens = 24;
          const auto spec = speculative_generate(model, full, s, prompt, ds);
          const auto ar = autoregressive_generate(model, prompt, ds);
          EXPECT_EQ(spec.tokens, ar) << to_string(a) << " " << s.name() << " k=" << k;
          std::size_t total = 0;
          for (const auto& r : spec.rounds) {
            EXPECT_GE(r.emitted_tokens.size(), 1u);
            EXPECT_LE(r.emitted_tokens.size(), static_cast<std::size_t>(k) + 1);
            EXPECT_EQ(r.all_accepted, r.accepted_count == k);
            EXPECT_EQ(r.per_position_match.size(), static_cast<std::size_t>(k));
            total += r.emitted_tokens.size();
          }
          EXPECT_GE(total, 24u);
          if (s.kind == StrategyKind::identity) {
            for (const auto& r : spec.rounds) EXPECT_TRUE(r.all_accepted);
          }
        }
      }
    }
  }
}

TEST(Speculative, SingleTokenAndErrors) {
  const Model model = tiny_model(Arch::parallel_hybrid);
  const auto full = ComponentMask::all_enabled(4);
  DecodeSettings ds;
  ds.max_new_tokens = 1;
  const auto out = speculative_generate(model, full, DraftStrategy::component_only(), TokenSeq{3}, ds);
  EXPECT_EQ(out.rounds.size(), 1u);
  EXPECT_EQ(out.tokens.size(), 1u);
  EXPECT_THROW(speculative_generate(model, full, DraftStrategy::identity(), TokenSeq{}, ds), Error);
  EXPECT_THROW(autoregressive_generate(model, TokenSeq{}, ds), Error);
  ds.k = 0;
  EXPECT_THROW(speculative_generate(model, full, DraftStrategy::identity(), TokenSeq{1}, ds), Error);
}

TEST(Speculative, SamplingDeterministicUnderSeed) {
  const Model model = tiny_model(Arch::sequential_hybrid);
  const auto full = ComponentMask::all_enabled(4);
  DecodeSettings ds;
  ds.temperature = 0.6;
  ds.k = 3;
  ds.max_new_tokens = 30;
  ds.seed = 77;
  const auto a = speculative_generate(model, full, DraftStrategy::component_only(), TokenSeq{1, 2}, ds);
  const auto b = speculative_generate(model, full, DraftStrategy::component_only(), TokenSeq{1, 2}, ds);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(autoregressive_generate(model, TokenSeq{1, 2}, ds), autoregressive_generate(model, TokenSeq{1, 2}, ds));
}

TEST(Speculative, CallCounts) {
  const Model model = tiny_model(Arch::parallel_hybrid);
  const auto full = ComponentMask::all_enabled(4);
  DecodeSettings ds;
  ds.k = 2;
  ds.max_new_tokens = 20;
  const auto out = speculative_generate(model, full, DraftStrategy::identity(), TokenSeq{1}, ds);
  // identity drafts are always fully accepted: k+1 tokens and k+1 draft steps per round
  EXPECT_EQ(out.rounds.size(), 7u);
  EXPECT_EQ(out.counts.verify_passes, 7);
  EXPECT_EQ(out.counts.draft_steps, 21);
}

// Exhaustive one-round enumeration on small vocabularies.
TEST(Lossless, ExhaustiveTree) {
  for (Arch a : {Arch::parallel_hybrid, Arch::sequential_hybrid}) {
    for (int vocab : {2, 5, 8}) {
      const Model model = tiny_model(a, 21, 4, vocab);
      const auto draft = build_mask(model.cfg, DraftStrategy::component_only());
      for (double t : {0.6, 1.0, 2.5}) {
        for (int k : {1, 2}) {
          RoundTree tree(model, draft, TokenSeq{1, 0, 1}, t);
          double total = 0.0;
          for (const auto& [e, p] : tree.outcomes(k)) total += p;
          EXPECT_NEAR(total, 1.0, 1e-12);
          EXPECT_LT(tree.first_token_error(k), 1e-12) << vocab << " " << t << " " << k;
          EXPECT_LT(tree.joint_error(k), 1e-12) << vocab << " " << t << " " << k;
        }
      }
    }
  }
}

TEST(Lossless, MonteCarloVocab4) {
  const Model model = tiny_model(Arch::parallel_hybrid, 9, 4, 4);
  const auto draft = build_mask(model.cfg, DraftStrategy::component_only());
  const TokenSeq prompt{0, 3, 2};
  const auto counts = first_token_counts(model, draft, prompt, 2, 0.6, 200000, 3);
  const auto ph = softmax(forward_prefix(model, nullptr, prompt).logits.back(), 0.6);
  EXPECT_GT(chi_square_p(counts, ph.probs()), 0.01);
}
