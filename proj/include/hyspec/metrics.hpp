#pragma once

// Acceptance rates, draft/target divergence, output match rate and
// perplexity, with percentile-bootstrap intervals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "hyspec/engine.hpp"
#include "hyspec/model.hpp"
#include "hyspec/numerics.hpp"

namespace hyspec {

struct BootstrapOptions {
  int resamples = 10000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

/// Percentile bootstrap interval of the mean. The bounds are widened to the
/// sample mean if the percentiles fall on one side of it.
inline std::pair<double, double> bootstrap_ci(std::span<const double> samples, const BootstrapOptions& opt = {}) {
  require(!samples.empty(), "bootstrap_ci: empty sample");
  require(opt.resamples >= 1, "bootstrap_ci: resamples must be >= 1");
  require(opt.level > 0.0 && opt.level < 1.0, "bootstrap_ci: level must be in (0,1)");
  const std::size_t n = samples.size();
  if (std::all_of(samples.begin(), samples.end(), [&](double v) { return v == samples[0]; }))
    return {samples[0], samples[0]};
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);

  Rng rng(opt.seed);
  std::vector<double> means(static_cast<std::size_t>(opt.resamples));
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += samples[rng.below(n)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return means[lo] + frac * (means[hi] - means[lo]);
  };
  const double tail = (1.0 - opt.level) / 2.0;
  return {std::min(quantile(tail), mean), std::max(quantile(1.0 - tail), mean)};
}

inline std::pair<double, double> bootstrap_ci(std::span<const double> samples, int resamples, double level,
                                              std::uint64_t seed) {
  return bootstrap_ci(samples, BootstrapOptions{resamples, level, seed});
}

// ---------------------------------------------------------------------------
// Acceptance

struct AcceptanceStats {
  int k = 0;
  double all_token_alpha = 0.0;
  double per_token_alpha = 0.0;
  double mean_accepted_per_round = 0.0;  // accepted drafts + 1
  int n_rounds = 0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

/// Summary over rounds of one (model, strategy, k, T) cell. Per-token alpha
/// is the mean greedy match flag when T = 0 and the realized acceptance
/// fraction among verified positions otherwise.
inline AcceptanceStats all_token_alpha(std::span<const SpecRoundResult> rounds, int k, double temperature = 0.0,
                                       const BootstrapOptions& boot = {}) {
  require(!rounds.empty(), "all_token_alpha: no rounds");
  require(k >= 1, "all_token_alpha: k must be >= 1");
  AcceptanceStats s;
  s.k = k;
  s.n_rounds = static_cast<int>(rounds.size());
  std::vector<double> full(rounds.size());
  double emitted = 0.0;
  std::int64_t matches = 0, accepted = 0, tested = 0;
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    const auto& r = rounds[i];
    require(r.accepted_count >= 0 && r.accepted_count <= k && r.per_position_match.size() == static_cast<std::size_t>(k),
            "all_token_alpha: round does not belong to a k=" + std::to_string(k) + " cell");
    full[i] = r.all_accepted ? 1.0 : 0.0;
    emitted += r.accepted_count + 1;
    matches += std::count(r.per_position_match.begin(), r.per_position_match.end(), true);
    accepted += r.accepted_count;
    tested += r.accepted_count + (r.all_accepted ? 0 : 1);
  }
  const double n = static_cast<double>(rounds.size());
  s.all_token_alpha = std::accumulate(full.begin(), full.end(), 0.0) / n;
  s.per_token_alpha = temperature == 0.0 ? static_cast<double>(matches) / (n * k)
                                         : static_cast<double>(accepted) / static_cast<double>(tested);
  s.mean_accepted_per_round = emitted / n;
  std::tie(s.ci_low, s.ci_high) = bootstrap_ci(full, boot);
  return s;
}

// ---------------------------------------------------------------------------
// Divergence

/// Total variation over the union of both top-k_top index sets, each
/// distribution renormalized on that union. k_top is clamped to the vocabulary.
inline double tv_distance_topk(const Distribution& p, const Distribution& q, int k_top = 100) {
  require(p.size() == q.size(), "tv_distance_topk: vocabulary mismatch");
  require(k_top >= 1, "tv_distance_topk: k_top must be >= 1");
  const std::size_t v = p.size();
  const std::size_t kk = std::min(static_cast<std::size_t>(k_top), v);
  std::vector<char> in(v, 0);
  auto mark_top = [&](const Distribution& d) {
    std::vector<std::size_t> idx(v);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
    for (std::size_t i = 0; i < kk; ++i) in[idx[i]] = 1;
  };
  mark_top(p);
  mark_top(q);
  double mp = 0.0, mq = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    if (!in[i]) continue;
    mp += p[i];
    mq += q[i];
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < v; ++i) {
    if (in[i]) l1 += std::abs(p[i] / mp - q[i] / mq);
  }
  return std::clamp(0.5 * l1, 0.0, 1.0);
}

using DistributionPair = std::pair<Distribution, Distribution>;

inline double top1_agreement(std::span<const DistributionPair> pairs) {
  require(!pairs.empty(), "top1_agreement: no positions");
  std::size_t agree = 0;
  for (const auto& [a, b] : pairs) agree += argmax_tiebreak(a) == argmax_tiebreak(b) ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

struct DivergenceStats {
  double tv_mean = 0.0;
  double top1_agreement = 0.0;
  std::int64_t n_positions = 0;
};

/// Teacher-forced comparison of draft and target next-token distributions at
/// every position of every prompt.
inline DivergenceStats divergence(const Model& model, const ComponentMask& draft_mask,
                                  std::span<const TokenSeq> prompts, double temperature = 1.0, int k_top = 100) {
  require(!prompts.empty(), "divergence: no prompts");
  const ComponentMask full = ComponentMask::all_enabled(model.cfg.n_layers);
  DivergenceStats s;
  double tv = 0.0;
  std::int64_t agree = 0;
  for (const auto& p : prompts) {
    require(!p.empty(), "divergence: empty prompt");
    const auto target = forward_prefix(model, full, p).logits;
    const auto draft = forward_prefix(model, draft_mask, p).logits;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const Distribution pt = softmax(target[i], temperature);
      const Distribution pd = softmax(draft[i], temperature);
      tv += tv_distance_topk(pd, pt, k_top);
      agree += argmax_tiebreak(pd) == argmax_tiebreak(pt) ? 1 : 0;
      ++s.n_positions;
    }
  }
  s.tv_mean = tv / static_cast<double>(s.n_positions);
  s.top1_agreement = static_cast<double>(agree) / static_cast<double>(s.n_positions);
  return s;
}

// ---------------------------------------------------------------------------
// Output agreement and likelihood

/// Fraction of prompts whose greedy speculative output equals greedy
/// autoregressive output.
inline double match_rate(const Model& model, const DraftStrategy& strategy, std::span<const TokenSeq> prompts,
                         const DecodeSettings& settings) {
  require(!prompts.empty(), "match_rate: no prompts");
  require(settings.temperature == 0.0, "match_rate: defined for greedy decoding only");
  const ComponentMask full = ComponentMask::all_enabled(model.cfg.n_layers);
  std::size_t same = 0;
  for (const auto& p : prompts) {
    const auto spec = speculative_generate(model, full, strategy, p, settings);
    same += spec.tokens == autoregressive_generate(model, p, settings) ? 1 : 0;
  }
  return static_cast<double>(same) / static_cast<double>(prompts.size());
}

/// exp(mean next-token NLL). Windows of the context length start every
/// `stride` tokens (0 means stride = context); each target is scored once,
/// by the first window that contains it and its predecessor, so with
/// non-overlapping windows the first token of every window is context only.
inline double perplexity(const Model& model, const ComponentMask& mask, std::span<const Token> corpus, int stride = 0) {
  require(corpus.size() >= 2, "perplexity: corpus needs at least 2 tokens");
  const int ctx = model.cfg.context_limit;
  if (stride == 0) stride = ctx;
  require(stride >= 1 && stride <= ctx, "perplexity: stride must be in [1, context_limit]");
  const std::size_t n = corpus.size();
  double nll = 0.0;
  std::int64_t scored = 0;
  std::size_t next = 1;  // first unscored target index
  for (std::size_t s = 0; next < n && s + 1 < n; s += static_cast<std::size_t>(stride)) {
    const std::size_t e = std::min(n, s + static_cast<std::size_t>(ctx));
    if (e <= std::max(next, s + 1)) continue;
    const auto logits = forward_prefix(model, mask, corpus.subspan(s, e - s)).logits;
    for (std::size_t t = std::max(next, s + 1); t < e; ++t) {
      const Vec lp = log_softmax(logits[t - 1 - s]);
      nll -= lp[static_cast<std::size_t>(corpus[t])];
      ++scored;
    }
    next = e;
  }
  return std::exp(nll / static_cast<double>(scored));
}

}  // namespace hyspec
