#pragma once

// Closed-form speculative decoding cost model.

#include <cmath>
#include <string>

#include "hyspec/config.hpp"
#include "hyspec/engine.hpp"
#include "hyspec/model.hpp"
#include "hyspec/weights.hpp"

namespace hyspec {

/// Tokens emitted per round when each draft position is accepted
/// independently with probability alpha: (1 - alpha^(k+1)) / (1 - alpha).
/// At alpha = 1 the value would be k + 1; that limit is rejected here.
inline double expected_tokens(double alpha, int k) {
  require(alpha >= 0.0 && alpha < 1.0, "expected_tokens: alpha must be in [0,1) (alpha = 1 gives k+1)");
  require(k >= 1, "expected_tokens: k must be >= 1");
  return (1.0 - std::pow(alpha, k + 1)) / (1.0 - alpha);
}

/// Expected tokens per round over the cost of a round, in units of one
/// target forward: k draft steps plus one verification.
inline double speedup(double alpha, int k, double cost_ratio) {
  require(cost_ratio > 0.0 && std::isfinite(cost_ratio), "speedup: cost_ratio must be positive");
  return expected_tokens(alpha, k) / (1.0 + k * cost_ratio);
}

/// Per-token acceptance implied by an all-k acceptance rate, assuming
/// independent positions: alpha_k^(1/k).
inline double per_token_from_all_token(double alpha_k, int k) {
  require(alpha_k >= 0.0 && alpha_k <= 1.0, "per_token_from_all_token: rate must be in [0,1]");
  require(k >= 1, "per_token_from_all_token: k must be >= 1");
  return std::pow(alpha_k, 1.0 / k);
}

/// Best draft length in [1, k_max]; ties go to the smaller k.
inline int optimal_k(double alpha_per_token, double cost_ratio, int k_max) {
  require(k_max >= 1, "optimal_k: k_max must be >= 1");
  int best = 1;
  double best_s = speedup(alpha_per_token, 1, cost_ratio);
  for (int k = 2; k <= k_max; ++k) {
    const double s = speedup(alpha_per_token, k, cost_ratio);
    if (s > best_s) {
      best = k;
      best_s = s;
    }
  }
  return best;
}

struct CostModel {
  double cost_ratio = 1.0;            // draft / target parameters touched per token
  double draft_param_fraction = 1.0;  // same count, kept separate from any context term
  std::size_t draft_params = 0;
  std::size_t target_params = 0;
  double draft_attention_fraction = 1.0;  // share of the target's attention layers the draft runs
  std::string notes;
};

namespace detail {
template <class B>
std::size_t block_params(const B& b) {
  std::size_t n = 0;
  auto add = [&](const Mat& m) { n += static_cast<std::size_t>(m.size()); };
  if constexpr (std::is_same_v<B, AttentionBlock>) {
    add(b.norm); add(b.wq); add(b.wk); add(b.wv); add(b.wo);
  } else if constexpr (std::is_same_v<B, RecurrenceBlock>) {
    add(b.norm); add(b.w_x); add(b.w_z); add(b.w_b); add(b.w_c); add(b.decay_logit); add(b.skip); add(b.w_o);
  } else {
    add(b.norm); add(b.w1); add(b.w2);
  }
  return n;
}

inline std::size_t touched_params(const ModelConfig& cfg, const Weights& w, const ComponentMask& m) {
  std::size_t n = static_cast<std::size_t>(w.final_norm.size() + w.head.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!m.active(l)) continue;
    const auto& sw = m.layers[static_cast<std::size_t>(l)];
    const auto& L = w.layers[static_cast<std::size_t>(l)];
    if (L.attn && sw.attn_enabled) n += block_params(*L.attn);
    if (L.rec && sw.alt_enabled) n += block_params(*L.rec);
    n += block_params(L.ffn);
  }
  return n;
}

inline int attention_layers_run(const ModelConfig& cfg, const ComponentMask& m) {
  int n = 0;
  for (int l : cfg.attention_layers())
    if (m.active(l) && m.layers[static_cast<std::size_t>(l)].attn_enabled) ++n;
  return n;
}
}  // namespace detail

/// Draft-to-target cost from counting the parameters each mode multiplies
/// per token: projections, recurrence, feed-forward, final norm and head.
/// The embedding is a lookup and attention-score work grows with context;
/// both are left out.
inline CostModel flop_ratio(const ModelConfig& cfg, const DraftStrategy& strategy) {
  const ComponentMask draft = build_mask(cfg, strategy);
  const ComponentMask full = ComponentMask::all_enabled(cfg.n_layers);
  const Weights w = zero_weights(cfg);
  CostModel c;
  c.draft_params = detail::touched_params(cfg, w, draft);
  c.target_params = detail::touched_params(cfg, w, full);
  c.cost_ratio = static_cast<double>(c.draft_params) / static_cast<double>(c.target_params);
  c.draft_param_fraction = c.cost_ratio;
  const int full_attn = detail::attention_layers_run(cfg, full);
  c.draft_attention_fraction =
      full_attn == 0 ? 0.0 : static_cast<double>(detail::attention_layers_run(cfg, draft)) / full_attn;
  c.notes = "parameter-count proxy; excludes embedding lookup and context-dependent attention scores";
  return c;
}

/// Speedup with an additive per-token KV-cache read cost kv_coefficient * n
/// on every attention-bearing forward (in units of one target forward at
/// n = 0). The draft pays it in proportion to the attention layers it runs.
/// kv_coefficient = 0 reduces to speedup().
inline double speedup_at_context(double alpha, int k, const CostModel& c, double context_len, double kv_coefficient) {
  require(kv_coefficient >= 0.0 && context_len >= 0.0, "speedup_at_context: coefficient and length must be >= 0");
  const double target = 1.0 + kv_coefficient * context_len;
  const double draft = c.cost_ratio + kv_coefficient * context_len * c.draft_attention_fraction;
  return speedup(alpha, k, draft / target);
}

}  // namespace hyspec
