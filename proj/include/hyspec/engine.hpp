#pragma once

// Draft / verify / accept speculative decoding over a single model whose
// draft is a masked sub-network of itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "hyspec/config.hpp"
#include "hyspec/model.hpp"
#include "hyspec/numerics.hpp"

namespace hyspec {

enum class StrategyKind { component_only, layer_skip, early_exit, identity };

struct DraftStrategy {
  StrategyKind kind = StrategyKind::identity;
  double skip_fraction = 0.33;  // layer_skip
  double exit_fraction = 0.5;   // early_exit

  static DraftStrategy component_only() { return {StrategyKind::component_only}; }
  static DraftStrategy identity() { return {StrategyKind::identity}; }
  static DraftStrategy layer_skip(double f = 0.33) { return {StrategyKind::layer_skip, f, 0.5}; }
  static DraftStrategy early_exit(double f = 0.5) { return {StrategyKind::early_exit, 0.33, f}; }

  void validate() const {
    require(skip_fraction >= 0.0 && skip_fraction < 1.0, "DraftStrategy: skip_fraction must be in [0,1)");
    require(exit_fraction > 0.0 && exit_fraction <= 1.0, "DraftStrategy: exit_fraction must be in (0,1]");
  }

  /// "component_only", "identity", "layer_skip:0.33", "early_exit:0.5"
  [[nodiscard]] std::string name() const {
    std::ostringstream os;
    switch (kind) {
      case StrategyKind::component_only: return "component_only";
      case StrategyKind::identity: return "identity";
      case StrategyKind::layer_skip: os << "layer_skip:" << skip_fraction; return os.str();
      case StrategyKind::early_exit: os << "early_exit:" << exit_fraction; return os.str();
    }
    return "?";
  }

  static DraftStrategy parse(const std::string& s) {
    const auto colon = s.find(':');
    const std::string head = s.substr(0, colon);
    const bool has_arg = colon != std::string::npos;
    const double arg = has_arg ? std::stod(s.substr(colon + 1)) : 0.0;
    DraftStrategy d;
    if (head == "component_only" || head == "component") {
      d = component_only();
    } else if (head == "identity") {
      d = identity();
    } else if (head == "layer_skip") {
      d = layer_skip(has_arg ? arg : 0.33);
    } else if (head == "early_exit") {
      d = early_exit(has_arg ? arg : 0.5);
    } else {
      throw Error("unknown draft strategy '" + s + "'");
    }
    d.validate();
    return d;
  }
};

/// Interior layers skipped by layer_skip: ceil(f*L) indices spread evenly over
/// 1..L-2 (the first and last layers always run).
inline std::vector<int> layer_skip_indices(int n_layers, double fraction) {
  const int m = static_cast<int>(std::ceil(fraction * n_layers - 1e-12));
  if (m <= 0) return {};
  const int interior = n_layers - 2;
  require(m <= interior, "layer_skip: cannot skip " + std::to_string(m) + " of " + std::to_string(n_layers) +
                             " layers without touching the first or last");
  std::vector<int> out;
  for (int i = 0; i < m; ++i) out.push_back(1 + static_cast<int>(std::floor((i + 0.5) * interior / m)));
  return out;
}

inline ComponentMask build_mask(const ModelConfig& cfg, const DraftStrategy& s) {
  cfg.validate();
  s.validate();
  ComponentMask m = ComponentMask::all_enabled(cfg.n_layers);
  const LayerSwitch skipped{false, false, true};
  switch (s.kind) {
    case StrategyKind::identity:
      break;
    case StrategyKind::component_only:
      if (cfg.arch == Arch::transformer)
        throw Error("component_only drafting needs a hybrid architecture (transformer has no alternative component)");
      if (cfg.arch == Arch::parallel_hybrid) {
        for (auto& l : m.layers) l.attn_enabled = false;
      } else {
        for (int l : cfg.attention_layers()) m.layers[static_cast<std::size_t>(l)] = skipped;
      }
      break;
    case StrategyKind::layer_skip:
      for (int l : layer_skip_indices(cfg.n_layers, s.skip_fraction)) m.layers[static_cast<std::size_t>(l)] = skipped;
      break;
    case StrategyKind::early_exit: {
      const int keep = static_cast<int>(std::ceil(s.exit_fraction * cfg.n_layers - 1e-12));
      m.max_layer = keep;
      for (int l = keep; l < cfg.n_layers; ++l) m.layers[static_cast<std::size_t>(l)] = skipped;
      break;
    }
  }
  validate_mask(cfg, m);
  return m;
}

struct DecodeSettings {
  int k = 4;
  double temperature = 0.0;
  int max_new_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const {
    require(k >= 1, "DecodeSettings: k must be >= 1");
    require(temperature >= 0.0, "DecodeSettings: temperature must be >= 0");
    require(max_new_tokens >= 1, "DecodeSettings: max_new_tokens must be >= 1");
  }
};

struct DraftSequence {
  TokenSeq tokens;
  std::vector<Distribution> draft_probs;  // full P_S at each drafted position
  int start_position = 0;                 // stream position the draft was made from
};

struct SpecRoundResult {
  int accepted_count = 0;
  bool all_accepted = false;
  TokenSeq emitted_tokens;               // accepted drafts + correction or bonus
  std::vector<bool> per_position_match;  // argmax P_S == argmax P_H, all k positions
};

// ---------------------------------------------------------------------------
// Acceptance primitives

/// min(1, P_H(x) / P_S(x)).
inline double acceptance_probability(double p_target, double p_draft) {
  require(p_draft > 0.0, "acceptance_probability: drafted token has zero draft probability");
  return std::min(1.0, p_target / p_draft);
}

/// norm(max(0, P_H - P_S)). When P_H == P_S there is nothing to correct and a
/// rejection cannot happen; P_H is returned so the result is still valid.
inline Distribution residual_distribution(const Distribution& target, const Distribution& draft) {
  require(target.size() == draft.size(), "residual_distribution: vocabulary mismatch");
  Vec r(target.size());
  double total = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = std::max(0.0, target[i] - draft[i]);
    total += r[i];
  }
  if (total <= 0.0) return target;
  for (double& v : r) v /= total;
  return Distribution(std::move(r));
}

inline Token choose(const Distribution& d, bool greedy, Rng& rng) {
  return static_cast<Token>(greedy ? argmax_tiebreak(d) : sample_categorical(d, rng));
}

// ---------------------------------------------------------------------------
// Draft and verify

/// Draft k tokens autoregressively from `state` under the draft mask. `state`
/// has consumed everything before `pending`; `pending` (the last token of the
/// sequence so far) is fed first. Afterwards `state` has consumed pending and
/// the first k-1 drafts; marks[i] is the state after i+1 fed tokens.
inline DraftSequence draft_k(const Model& model, const ComponentMask& draft_mask, DecodeState& state, Token pending,
                             const DecodeSettings& settings, Rng& rng, std::vector<StateMark>* marks = nullptr) {
  settings.validate();
  DraftSequence d;
  d.start_position = state.position;
  if (marks) marks->clear();
  Token feed = pending;
  const bool greedy = settings.temperature == 0.0;
  for (int i = 0; i < settings.k; ++i) {
    const Vec logits = decode_step(model, draft_mask, state, feed);
    if (marks) marks->push_back(mark(state));
    Distribution p = softmax(logits, settings.temperature);
    const Token tok = choose(p, greedy, rng);
    d.tokens.push_back(tok);
    d.draft_probs.push_back(std::move(p));
    feed = tok;
  }
  // The last drafted token is not fed; position stays start + k.
  return d;
}

/// Verify a draft with one batched pass of the target over [pending, drafts].
/// On return `target_state` has consumed pending and the accepted drafts, so
/// the last emitted token becomes the next round's pending token.
inline SpecRoundResult verify_and_accept(const Model& model, const ComponentMask& target_mask,
                                         DecodeState& target_state, Token pending, const DraftSequence& draft,
                                         const DecodeSettings& settings, Rng& rng) {
  settings.validate();
  const int k = static_cast<int>(draft.tokens.size());
  require(k >= 1 && draft.draft_probs.size() == draft.tokens.size(), "verify: malformed draft");
  require(draft.start_position == target_state.position, "verify: draft was not produced on this prefix");
  const bool greedy = settings.temperature == 0.0;

  TokenSeq block;
  block.reserve(static_cast<std::size_t>(k) + 1);
  block.push_back(pending);
  block.insert(block.end(), draft.tokens.begin(), draft.tokens.end());
  std::vector<StateMark> marks;
  const std::vector<Vec> logits = forward_extend(model, target_mask, target_state, block, &marks);

  std::vector<Distribution> target;
  target.reserve(logits.size());
  for (const auto& l : logits) target.push_back(softmax(l, settings.temperature));

  SpecRoundResult res;
  res.per_position_match.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    res.per_position_match[static_cast<std::size_t>(i)] =
        argmax_tiebreak(draft.draft_probs[static_cast<std::size_t>(i)]) == argmax_tiebreak(target[static_cast<std::size_t>(i)]);

  int accepted = 0;
  std::optional<Token> correction;
  for (int i = 0; i < k; ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    const Token x = draft.tokens[ii];
    bool ok;
    if (greedy) {
      ok = static_cast<std::size_t>(x) == argmax_tiebreak(target[ii]);
    } else {
      const double a = acceptance_probability(target[ii][static_cast<std::size_t>(x)],
                                              draft.draft_probs[ii][static_cast<std::size_t>(x)]);
      ok = rng.uniform() < a;
    }
    if (!ok) {
      correction = greedy ? static_cast<Token>(argmax_tiebreak(target[ii]))
                          : choose(residual_distribution(target[ii], draft.draft_probs[ii]), false, rng);
      break;
    }
    res.emitted_tokens.push_back(x);
    ++accepted;
  }
  res.accepted_count = accepted;
  res.all_accepted = accepted == k;
  if (res.all_accepted) {
    res.emitted_tokens.push_back(choose(target[static_cast<std::size_t>(k)], greedy, rng));
  } else {
    res.emitted_tokens.push_back(*correction);
  }
  // Keep pending + accepted drafts; the correction/bonus is the new pending.
  rewind(target_state, marks[static_cast<std::size_t>(accepted)]);
  return res;
}

// ---------------------------------------------------------------------------
// Generation loops

struct CallCounts {
  std::int64_t draft_steps = 0;     // single-token draft forwards
  std::int64_t verify_passes = 0;   // batched target forwards
  std::int64_t verify_tokens = 0;   // tokens fed through verification
};

/// A speculative decoding stream with separate draft and target states.
class SpeculativeSession {
 public:
  SpeculativeSession(const Model& model, ComponentMask target_mask, ComponentMask draft_mask, DecodeSettings settings,
                     std::span<const Token> prompt)
      : model_(&model),
        target_mask_(std::move(target_mask)),
        draft_mask_(std::move(draft_mask)),
        settings_(settings),
        rng_(settings.seed) {
    settings_.validate();
    require(!prompt.empty(), "speculative: empty prompt");
    const auto head = prompt.first(prompt.size() - 1);
    target_ = empty_state(model, target_mask_);
    draft_ = empty_state(model, draft_mask_);
    if (!head.empty()) {
      forward_extend(model, target_mask_, target_, head);
      forward_extend(model, draft_mask_, draft_, head);
    }
    pending_ = prompt.back();
  }

  /// One draft-verify-accept round.
  SpecRoundResult round() {
    std::vector<StateMark> dmarks;
    const DraftSequence d = draft_k(*model_, draft_mask_, draft_, pending_, settings_, rng_, &dmarks);
    counts_.draft_steps += settings_.k;
    SpecRoundResult r = verify_and_accept(*model_, target_mask_, target_, pending_, d, settings_, rng_);
    counts_.verify_passes += 1;
    counts_.verify_tokens += settings_.k + 1;
    if (r.accepted_count < settings_.k) {
      rewind(draft_, dmarks[static_cast<std::size_t>(r.accepted_count)]);
    } else {
      decode_step(*model_, draft_mask_, draft_, d.tokens.back());
      counts_.draft_steps += 1;
    }
    pending_ = r.emitted_tokens.back();
    generated_.insert(generated_.end(), r.emitted_tokens.begin(), r.emitted_tokens.end());
    return r;
  }

  /// Restart the random stream, e.g. to replay a round from a copied session.
  void reseed(std::uint64_t seed) noexcept { rng_ = Rng(seed); }

  [[nodiscard]] const TokenSeq& generated() const noexcept { return generated_; }
  [[nodiscard]] const CallCounts& counts() const noexcept { return counts_; }

 private:
  const Model* model_;
  ComponentMask target_mask_;
  ComponentMask draft_mask_;
  DecodeSettings settings_;
  Rng rng_;
  DecodeState target_;
  DecodeState draft_;
  Token pending_ = 0;
  TokenSeq generated_;
  CallCounts counts_;
};

struct SpeculativeOutput {
  TokenSeq tokens;  // new tokens only, exactly max_new_tokens long
  std::vector<SpecRoundResult> rounds;
  CallCounts counts;
};

inline SpeculativeOutput speculative_generate(const Model& model, const ComponentMask& target_mask,
                                              const DraftStrategy& strategy, std::span<const Token> prompt,
                                              const DecodeSettings& settings) {
  SpeculativeSession s(model, target_mask, build_mask(model.cfg, strategy), settings, prompt);
  SpeculativeOutput out;
  while (static_cast<int>(s.generated().size()) < settings.max_new_tokens) out.rounds.push_back(s.round());
  out.tokens.assign(s.generated().begin(), s.generated().begin() + settings.max_new_tokens);
  out.counts = s.counts();
  return out;
}

inline TokenSeq autoregressive_generate(const Model& model, std::span<const Token> prompt,
                                        const DecodeSettings& settings) {
  settings.validate();
  require(!prompt.empty(), "autoregressive: empty prompt");
  const ComponentMask full = ComponentMask::all_enabled(model.cfg.n_layers);
  Rng rng(settings.seed);
  const bool greedy = settings.temperature == 0.0;
  DecodeState st = empty_state(model, full);
  Vec logits = forward_extend(model, full, st, prompt).back();
  TokenSeq out;
  out.reserve(static_cast<std::size_t>(settings.max_new_tokens));
  while (true) {
    const Token t = choose(softmax(logits, settings.temperature), greedy, rng);
    out.push_back(t);
    if (static_cast<int>(out.size()) == settings.max_new_tokens) break;
    logits = decode_step(model, full, st, t);
  }
  return out;
}

}  // namespace hyspec
