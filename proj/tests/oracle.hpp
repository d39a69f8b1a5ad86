#pragma once

// Exact enumeration of one speculative round: every draft sequence, every
// accept/reject branch, every correction or bonus token.

#include <algorithm>
#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <map>

#include "hyspec/engine.hpp"
#include "hyspec/model.hpp"

namespace hyspec::testing {

class RoundTree {
 public:
  RoundTree(const Model& model, ComponentMask draft_mask, TokenSeq prompt, double temperature)
      : model_(model),
        full_(ComponentMask::all_enabled(model.cfg.n_layers)),
        draft_(std::move(draft_mask)),
        prompt_(std::move(prompt)),
        temperature_(temperature) {}

  /// Next-token target distribution after prompt + suffix.
  const Distribution& target(const TokenSeq& suffix) { return lookup(target_cache_, full_, suffix); }
  const Distribution& draft(const TokenSeq& suffix) { return lookup(draft_cache_, draft_, suffix); }

  /// Probability of each emitted-token list for a k-token round.
  std::map<TokenSeq, double> outcomes(int k) {
    std::map<TokenSeq, double> out;
    TokenSeq drafted;
    enumerate(k, drafted, 1.0, out);
    return out;
  }

  /// Max deviation of the emitted first-token marginal from the target.
  double first_token_error(int k) {
    const auto outs = outcomes(k);
    const int v = model_.cfg.vocab_size;
    Vec marg(static_cast<std::size_t>(v), 0.0);
    for (const auto& [e, p] : outs) marg[static_cast<std::size_t>(e.front())] += p;
    const Distribution& ph = target({});
    double err = 0.0;
    for (int y = 0; y < v; ++y) err = std::max(err, std::abs(marg[static_cast<std::size_t>(y)] - ph[static_cast<std::size_t>(y)]));
    return err;
  }

  /// Max deviation, over all strings s of length k+1, between the probability
  /// that a round followed by exact target sampling starts with s and the
  /// target's own probability of s.
  double joint_error(int k) {
    const auto outs = outcomes(k);
    const int len = k + 1;
    const int v = model_.cfg.vocab_size;
    double err = 0.0;
    TokenSeq s(static_cast<std::size_t>(len), 0);
    while (true) {
      double want = 1.0;
      for (int j = 0; j < len; ++j) want *= target(TokenSeq(s.begin(), s.begin() + j))[static_cast<std::size_t>(s[static_cast<std::size_t>(j)])];
      double got = 0.0;
      for (const auto& [e, p] : outs) {
        const std::size_t m = e.size();
        if (!std::equal(e.begin(), e.end(), s.begin())) continue;
        double tail = 1.0;
        for (std::size_t j = m; j < s.size(); ++j)
          tail *= target(TokenSeq(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(j)))[static_cast<std::size_t>(s[j])];
        got += p * tail;
      }
      err = std::max(err, std::abs(got - want));
      int pos = len - 1;
      while (pos >= 0 && ++s[static_cast<std::size_t>(pos)] == v) s[static_cast<std::size_t>(pos--)] = 0;
      if (pos < 0) break;
    }
    return err;
  }

 private:
  const Distribution& lookup(std::map<TokenSeq, Distribution>& cache, const ComponentMask& mask, const TokenSeq& suffix) {
    auto it = cache.find(suffix);
    if (it != cache.end()) return it->second;
    TokenSeq ctx = prompt_;
    ctx.insert(ctx.end(), suffix.begin(), suffix.end());
    const auto r = forward_prefix(model_, mask, ctx);
    return cache.emplace(suffix, softmax(r.logits.back(), temperature_)).first->second;
  }

  void enumerate(int k, TokenSeq& drafted, double prob, std::map<TokenSeq, double>& out) {
    if (static_cast<int>(drafted.size()) == k) {
      settle(drafted, prob, out);
      return;
    }
    const Distribution ps = draft(drafted);
    for (std::size_t x = 0; x < ps.size(); ++x) {
      if (ps[x] == 0.0) continue;
      drafted.push_back(static_cast<Token>(x));
      enumerate(k, drafted, prob * ps[x], out);
      drafted.pop_back();
    }
  }

  void settle(const TokenSeq& drafted, double prob, std::map<TokenSeq, double>& out) {
    double q = prob;
    TokenSeq emitted;
    for (std::size_t j = 0; j < drafted.size(); ++j) {
      const TokenSeq ctx(drafted.begin(), drafted.begin() + static_cast<std::ptrdiff_t>(j));
      const Distribution ph = target(ctx);
      const Distribution ps = draft(ctx);
      const auto x = static_cast<std::size_t>(drafted[j]);
      const double a = acceptance_probability(ph[x], ps[x]);
      if (a < 1.0) {
        const Distribution r = residual_distribution(ph, ps);
        for (std::size_t y = 0; y < r.size(); ++y) {
          if (r[y] == 0.0) continue;
          TokenSeq e = emitted;
          e.push_back(static_cast<Token>(y));
          out[e] += q * (1.0 - a) * r[y];
        }
      }
      q *= a;
      emitted.push_back(drafted[j]);
    }
    const Distribution bonus = target(drafted);
    for (std::size_t y = 0; y < bonus.size(); ++y) {
      if (bonus[y] == 0.0) continue;
      TokenSeq e = emitted;
      e.push_back(static_cast<Token>(y));
      out[e] += q * bonus[y];
    }
  }

  const Model& model_;
  ComponentMask full_;
  ComponentMask draft_;
  TokenSeq prompt_;
  double temperature_;
  std::map<TokenSeq, Distribution> target_cache_;
  std::map<TokenSeq, Distribution> draft_cache_;
};

/// Chi-square goodness of fit of counts against expected probabilities.
/// Cells are merged in ascending order of expectation until each bucket
/// expects at least 5 draws. Returns the p-value.
inline double chi_square_p(const std::vector<std::int64_t>& counts, std::span<const double> probs) {
  std::int64_t n = 0;
  for (auto c : counts) n += c;
  std::vector<std::size_t> order(counts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] < probs[b]; });
  std::vector<std::pair<double, double>> buckets;  // (expected, observed)
  double be = 0.0, bo = 0.0;
  for (std::size_t i : order) {
    be += static_cast<double>(n) * probs[i];
    bo += static_cast<double>(counts[i]);
    if (be >= 5.0) {
      buckets.emplace_back(be, bo);
      be = bo = 0.0;
    }
  }
  if (be > 0.0 || bo > 0.0) {
    if (buckets.empty()) return 1.0;
    buckets.back().first += be;
    buckets.back().second += bo;
  }
  if (buckets.size() < 2) return 1.0;
  double chi2 = 0.0;
  for (const auto& [e, o] : buckets) chi2 += (o - e) * (o - e) / e;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared(static_cast<double>(buckets.size() - 1)), chi2));
}

/// First emitted token of `trials` independent rounds from the same prefix.
inline std::vector<std::int64_t> first_token_counts(const Model& model, const ComponentMask& draft_mask,
                                                    const TokenSeq& prompt, int k, double temperature,
                                                    int trials, std::uint64_t seed) {
  DecodeSettings ds;
  ds.k = k;
  ds.temperature = temperature;
  ds.max_new_tokens = 1;
  const SpeculativeSession base(model, ComponentMask::all_enabled(model.cfg.n_layers), draft_mask, ds, prompt);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(model.cfg.vocab_size), 0);
  const Rng root(seed);
  for (int t = 0; t < trials; ++t) {
    SpeculativeSession s = base;
    s.reseed(root.split(static_cast<std::uint64_t>(t)).seed());
    counts[static_cast<std::size_t>(s.round().emitted_tokens.front())] += 1;
  }
  return counts;
}

}  // namespace hyspec::testing
