#pragma once

// Inference forward pass for the three architecture families, with per-layer
// component masking and incremental decoding.
//
// Layer structure (pre-norm residual blocks):
//   parallel_hybrid   h += rec(norm_r(h)) + attn(norm_a(h)); h += ffn(norm_f(h))
//   sequential_hybrid h += mixer_l(norm_m(h));               h += ffn(norm_f(h))
//                     where mixer_l is a recurrence or attention by layer_pattern
//   transformer       h += attn(norm_a(h));                  h += ffn(norm_f(h))
// A disabled component contributes zero to the residual add. A skipped layer
// is the identity on the residual stream (its norm and FFN are skipped too).
//
// Every position is computed with the same per-row kernels whether it arrives
// through a batched extend or an incremental decode step, so the two agree
// bitwise.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "hyspec/config.hpp"
#include "hyspec/numerics.hpp"
#include "hyspec/weights.hpp"

namespace hyspec {

struct LayerSwitch {
  bool attn_enabled = true;
  bool alt_enabled = true;
  bool layer_skipped = false;
  bool operator==(const LayerSwitch&) const = default;
};

/// Per-layer on/off switches realizing a draft strategy.
struct ComponentMask {
  std::vector<LayerSwitch> layers;
  std::optional<int> max_layer;  // layers with index >= max_layer are skipped

  static ComponentMask all_enabled(int n_layers) {
    ComponentMask m;
    m.layers.assign(static_cast<std::size_t>(n_layers), LayerSwitch{});
    return m;
  }

  [[nodiscard]] bool active(int l) const {
    return !layers[static_cast<std::size_t>(l)].layer_skipped && (!max_layer || l < *max_layer);
  }

  bool operator==(const ComponentMask&) const = default;
};

inline void validate_mask(const ModelConfig& cfg, const ComponentMask& m) {
  require(static_cast<int>(m.layers.size()) == cfg.n_layers, "ComponentMask: length must equal n_layers");
  if (m.max_layer) require(*m.max_layer >= 0 && *m.max_layer <= cfg.n_layers, "ComponentMask: max_layer out of range");
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& s = m.layers[static_cast<std::size_t>(l)];
    if (s.layer_skipped)
      require(!s.attn_enabled && !s.alt_enabled, "ComponentMask: skipped layer must disable both components");
    if (cfg.arch == Arch::transformer && m.active(l))
      require(s.attn_enabled, "ComponentMask: transformer layer cannot run with attention disabled (no alternative component)");
  }
}

/// What actually runs at layer l under a mask.
struct LayerPlan {
  bool active = false;
  bool attention = false;
  bool recurrence = false;
};

inline LayerPlan plan_layer(const ModelConfig& cfg, const ComponentMask& m, int l) {
  LayerPlan p;
  p.active = m.active(l);
  if (!p.active) return p;
  const auto& s = m.layers[static_cast<std::size_t>(l)];
  p.attention = cfg.has_attention(l) && s.attn_enabled;
  p.recurrence = cfg.has_recurrence(l) && s.alt_enabled;
  return p;
}

inline std::uint64_t mask_signature(const ComponentMask& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto put = [&](std::uint64_t v) { h = (h ^ v) * 0x100000001b3ULL; };
  for (const auto& s : m.layers) put((s.attn_enabled ? 1u : 0u) | (s.alt_enabled ? 2u : 0u) | (s.layer_skipped ? 4u : 0u));
  put(m.max_layer ? static_cast<std::uint64_t>(*m.max_layer) + 1 : 0);
  return h;
}

struct Model {
  ModelConfig cfg;
  Weights weights;

  Model(ModelConfig c, Weights w) : cfg(std::move(c)), weights(std::move(w)) {
    cfg.validate();
    check_shapes(cfg, weights);
  }
};

struct LayerCache {
  Vec keys;    // position-major, rotated keys (pos * d)
  Vec values;  // position-major (pos * d)
  Vec rec;     // d * d_state recurrent state, empty for layers without recurrence
};

/// KV caches and recurrent states of one generation stream.
struct DecodeState {
  int position = 0;
  std::vector<LayerCache> layers;
  std::uint64_t signature = 0;  // mask lineage
  int d_model = 0;
  int d_state = 0;

  /// Number of doubles held, the memory footprint of the stream.
  [[nodiscard]] std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.keys.size() + l.values.size() + l.rec.size();
    return n;
  }
  [[nodiscard]] std::size_t kv_elements() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.keys.size() + l.values.size();
    return n;
  }
};

/// Restorable snapshot of a DecodeState at some position. KV caches are
/// append-only, so only the position and the recurrent states are stored.
struct StateMark {
  int position = 0;
  std::vector<Vec> rec;
};

inline StateMark mark(const DecodeState& s) {
  StateMark m;
  m.position = s.position;
  m.rec.reserve(s.layers.size());
  for (const auto& l : s.layers) m.rec.push_back(l.rec);
  return m;
}

inline void rewind(DecodeState& s, const StateMark& m) {
  require(m.position <= s.position && m.rec.size() == s.layers.size(), "rewind: mark does not belong to this state");
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    auto& c = s.layers[l];
    const std::size_t d = static_cast<std::size_t>(s.d_model);
    if (!c.keys.empty()) {
      c.keys.resize(static_cast<std::size_t>(m.position) * d);
      c.values.resize(static_cast<std::size_t>(m.position) * d);
    }
    c.rec = m.rec[l];
  }
  s.position = m.position;
}

inline DecodeState empty_state(const Model& model, const ComponentMask& mask) {
  const auto& cfg = model.cfg;
  DecodeState s;
  s.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  s.signature = mask_signature(mask);
  s.d_model = cfg.d_model;
  s.d_state = cfg.d_state;
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (plan_layer(cfg, mask, l).recurrence)
      s.layers[static_cast<std::size_t>(l)].rec.assign(static_cast<std::size_t>(cfg.d_model * cfg.d_state), 0.0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Per-row kernels

namespace detail {
inline Vec linear(std::span<const double> x, const Mat& w) {
  Vec y(static_cast<std::size_t>(w.cols()));
  matvec_rowmajor(x, w.data(), static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols()), y.data());
  return y;
}

inline std::span<const double> row(const Mat& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }

/// Rotate (x[2i], x[2i+1]) pairs inside each head by pos * base^(-2i/hd).
inline void apply_rope(std::span<double> x, int n_heads, int head_dim, int pos, double base) {
  for (int h = 0; h < n_heads; ++h) {
    double* v = x.data() + static_cast<std::size_t>(h * head_dim);
    for (int i = 0; i < head_dim / 2; ++i) {
      const double theta = pos * std::pow(base, -2.0 * i / head_dim);
      const double c = std::cos(theta), s = std::sin(theta);
      const double a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * c - b * s;
      v[2 * i + 1] = a * s + b * c;
    }
  }
}
}  // namespace detail

/// One step of the diagonal gated linear recurrence on an already-normalized
/// input row u:
///   x = u W_x, z = u W_z, B = u W_b, C = u W_c
///   S[c,:] <- sigmoid(decay_logit[c]) * S[c,:] + x[c] * B
///   y[c]    = <C, S[c,:]> + skip[c] * x[c]
///   out     = (y * silu(z)) W_o
/// `state` is d * d_state, updated in place. State size never changes.
inline Vec recurrence_step(const RecurrenceBlock& blk, int d_state, std::span<double> state,
                           std::span<const double> u) {
  const std::size_t d = static_cast<std::size_t>(blk.w_x.rows());
  const std::size_t n = static_cast<std::size_t>(d_state);
  require(u.size() == d && state.size() == d * n, "recurrence_step: shape mismatch");
  const Vec x = detail::linear(u, blk.w_x);
  const Vec z = detail::linear(u, blk.w_z);
  const Vec B = detail::linear(u, blk.w_b);
  const Vec C = detail::linear(u, blk.w_c);
  Vec g(d);
  for (std::size_t c = 0; c < d; ++c) {
    const double decay = sigmoid(blk.decay_logit(0, static_cast<Eigen::Index>(c)));
    double* s = state.data() + c * n;
    double y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = decay * s[i] + x[c] * B[i];
      y += C[i] * s[i];
    }
    y += blk.skip(0, static_cast<Eigen::Index>(c)) * x[c];
    g[c] = y * silu(z[c]);
  }
  return detail::linear(g, blk.w_o);
}

/// Causal softmax attention for one query row at `pos`; appends this
/// position's rotated key and value to the cache first.
inline Vec attention_step(const AttentionBlock& blk, const ModelConfig& cfg, LayerCache& cache, int pos,
                          std::span<const double> u) {
  const int d = cfg.d_model, H = cfg.n_heads, hd = cfg.head_dim();
  Vec q = detail::linear(u, blk.wq);
  Vec k = detail::linear(u, blk.wk);
  const Vec v = detail::linear(u, blk.wv);
  detail::apply_rope(q, H, hd, pos, cfg.rope_base);
  detail::apply_rope(k, H, hd, pos, cfg.rope_base);
  require(cache.keys.size() == static_cast<std::size_t>(pos * d), "attention_step: KV cache length != position");
  cache.keys.insert(cache.keys.end(), k.begin(), k.end());
  cache.values.insert(cache.values.end(), v.begin(), v.end());

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const int T = pos + 1;
  Vec o(static_cast<std::size_t>(d), 0.0);
  Vec score(static_cast<std::size_t>(T));
  for (int h = 0; h < H; ++h) {
    const double* qh = q.data() + h * hd;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < T; ++j) {
      const double* kj = cache.keys.data() + static_cast<std::size_t>(j * d + h * hd);
      double s = 0.0;
      for (int i = 0; i < hd; ++i) s += qh[i] * kj[i];
      score[j] = s * scale;
      mx = std::max(mx, score[j]);
    }
    double total = 0.0;
    for (int j = 0; j < T; ++j) {
      score[j] = std::exp(score[j] - mx);
      total += score[j];
    }
    double* oh = o.data() + h * hd;
    for (int j = 0; j < T; ++j) {
      const double wgt = score[j] / total;
      const double* vj = cache.values.data() + static_cast<std::size_t>(j * d + h * hd);
      for (int i = 0; i < hd; ++i) oh[i] += wgt * vj[i];
    }
  }
  return detail::linear(o, blk.wo);
}

inline Vec ffn_step(const FfnBlock& blk, std::span<const double> u) {
  Vec a = detail::linear(u, blk.w1);
  for (double& v : a) v = silu(v);
  return detail::linear(a, blk.w2);
}

/// Optional per-layer record of the residual stream, used by diagnostics.
struct LayerTrace {
  std::vector<Vec> input;          // residual stream entering the layer
  std::vector<Vec> rec_branch;     // recurrence contribution (empty if not run)
  std::vector<Vec> attn_branch;    // attention contribution (empty if not run)
  std::vector<Vec> mixer_output;   // total mixer contribution added to the stream
  std::vector<Vec> output;         // residual stream leaving the layer
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

// ---------------------------------------------------------------------------
// Forward passes

/// Feed `tokens` through the model starting from `state`, one layer at a
/// time over the whole block. Returns next-token logits for every fed
/// position. If `marks` is given it receives the state after each position.
inline std::vector<Vec> forward_extend(const Model& model, const ComponentMask& mask, DecodeState& state,
                                       std::span<const Token> tokens, std::vector<StateMark>* marks = nullptr,
                                       ForwardTrace* trace = nullptr) {
  const auto& cfg = model.cfg;
  const auto& w = model.weights;
  validate_mask(cfg, mask);
  require(state.signature == mask_signature(mask) && static_cast<int>(state.layers.size()) == cfg.n_layers &&
              state.d_model == cfg.d_model && state.d_state == cfg.d_state,
          "DecodeState does not match this model/mask");
  const std::size_t T = tokens.size();
  require(state.position + static_cast<int>(T) <= cfg.context_limit, "forward: context overflow");
  for (Token t : tokens) require(t >= 0 && t < cfg.vocab_size, "forward: token out of range");

  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const int start = state.position;
  std::vector<Vec> h(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double* e = w.embedding.data() + static_cast<std::size_t>(tokens[t]) * d;
    h[t].assign(e, e + d);
  }
  if (marks) {
    marks->assign(T, StateMark{});
    for (std::size_t t = 0; t < T; ++t) {
      (*marks)[t].position = start + static_cast<int>(t) + 1;
      (*marks)[t].rec.resize(state.layers.size());
    }
  }
  if (trace) trace->layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerTrace{});

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& L = w.layers[static_cast<std::size_t>(l)];
    auto& cache = state.layers[static_cast<std::size_t>(l)];
    const LayerPlan plan = plan_layer(cfg, mask, l);
    LayerTrace* tr = trace ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
    if (tr) tr->input = h;
    if (plan.active) {
      for (std::size_t t = 0; t < T; ++t) {
        Vec mix(d, 0.0);
        Vec rb, ab;
        if (plan.recurrence) {
          const Vec u = rms_norm(h[t], detail::row(L.rec->norm), cfg.norm_eps);
          rb = recurrence_step(*L.rec, cfg.d_state, cache.rec, u);
          if (marks) (*marks)[t].rec[static_cast<std::size_t>(l)] = cache.rec;
        }
        if (plan.attention) {
          const Vec u = rms_norm(h[t], detail::row(L.attn->norm), cfg.norm_eps);
          ab = attention_step(*L.attn, cfg, cache, start + static_cast<int>(t), u);
        }
        if (!rb.empty() && !ab.empty()) {
          for (std::size_t i = 0; i < d; ++i) mix[i] = rb[i] + ab[i];
        } else if (!rb.empty()) {
          mix = rb;
        } else if (!ab.empty()) {
          mix = ab;
        }
        for (std::size_t i = 0; i < d; ++i) h[t][i] += mix[i];
        const Vec uf = rms_norm(h[t], detail::row(L.ffn.norm), cfg.norm_eps);
        const Vec f = ffn_step(L.ffn, uf);
        for (std::size_t i = 0; i < d; ++i) h[t][i] += f[i];
        if (tr) {
          tr->rec_branch.push_back(std::move(rb));
          tr->attn_branch.push_back(std::move(ab));
          tr->mixer_output.push_back(std::move(mix));
        }
      }
    } else if (marks) {
      for (std::size_t t = 0; t < T; ++t) (*marks)[t].rec[static_cast<std::size_t>(l)] = cache.rec;
    }
    if (marks && plan.active && !plan.recurrence) {
      for (std::size_t t = 0; t < T; ++t) (*marks)[t].rec[static_cast<std::size_t>(l)] = cache.rec;
    }
    if (tr) tr->output = h;
  }

  std::vector<Vec> logits(T);
  for (std::size_t t = 0; t < T; ++t) {
    const Vec u = rms_norm(h[t], detail::row(w.final_norm), cfg.norm_eps);
    logits[t] = detail::linear(u, w.head);
    require(all_finite(logits[t]), "forward: non-finite logits");
  }
  state.position = start + static_cast<int>(T);
  return logits;
}

struct PrefixResult {
  std::vector<Vec> logits;
  DecodeState state;
};

inline PrefixResult forward_prefix(const Model& model, const ComponentMask* mask, std::span<const Token> tokens) {
  const ComponentMask m = mask ? *mask : ComponentMask::all_enabled(model.cfg.n_layers);
  PrefixResult r;
  r.state = empty_state(model, m);
  r.logits = forward_extend(model, m, r.state, tokens);
  return r;
}

inline PrefixResult forward_prefix(const Model& model, const ComponentMask& mask, std::span<const Token> tokens) {
  return forward_prefix(model, &mask, tokens);
}

inline Vec decode_step(const Model& model, const ComponentMask& mask, DecodeState& state, Token token) {
  const Token one[1] = {token};
  return std::move(forward_extend(model, mask, state, one).front());
}

}  // namespace hyspec
