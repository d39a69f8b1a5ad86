#pragma once

// Training-side forward graph (same function as model.hpp's inference pass,
// built on the autograd tape), Adam training loop and finite-difference
// gradient check.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "hyspec/autograd.hpp"
#include "hyspec/config.hpp"
#include "hyspec/model.hpp"
#include "hyspec/numerics.hpp"
#include "hyspec/weights.hpp"

namespace hyspec {

struct TrainConfig {
  std::string corpus_path;
  int steps = 2000;
  int batch_size = 8;
  int seq_len = 64;
  double learning_rate = 3e-3;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int warmup_steps = 50;
  double grad_clip = 1.0;
  std::string log_path;  // CSV "step,loss"; empty disables

  void validate(const ModelConfig& cfg) const {
    require(steps >= 0, "TrainConfig: steps must be >= 0");
    require(batch_size > 0 && seq_len > 0, "TrainConfig: batch size and sequence length must be positive");
    require(seq_len <= cfg.context_limit, "TrainConfig: seq_len exceeds context_limit");
    require(learning_rate > 0.0, "TrainConfig: learning rate must be positive");
  }
};

/// Read a corpus file as byte tokens.
inline TokenSeq load_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "corpus: cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  require(!bytes.empty(), "corpus: '" + path + "' is empty");
  TokenSeq out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<unsigned char>(bytes[i]);
  return out;
}

inline TokenSeq bytes_to_tokens(std::string_view s) {
  TokenSeq out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = static_cast<unsigned char>(s[i]);
  return out;
}

/// Equal-length sequences stacked row-wise; targets[r] is the token after inputs[r].
struct Batch {
  TokenSeq inputs;
  TokenSeq targets;
  int seq_len = 0;
};

inline Batch sample_batch(std::span<const Token> corpus, int batch_size, int seq_len, Rng& rng) {
  require(corpus.size() > static_cast<std::size_t>(seq_len) + 1, "corpus shorter than one training window");
  Batch b;
  b.seq_len = seq_len;
  const std::uint64_t span_max = corpus.size() - static_cast<std::size_t>(seq_len) - 1;
  for (int i = 0; i < batch_size; ++i) {
    const std::size_t off = rng.below(span_max + 1);
    b.inputs.insert(b.inputs.end(), corpus.begin() + off, corpus.begin() + off + seq_len);
    b.targets.insert(b.targets.end(), corpus.begin() + off + 1, corpus.begin() + off + seq_len + 1);
  }
  return b;
}

struct GraphOutput {
  Tape::Var logits;
  std::optional<Tape::Var> loss;
};

/// Record the masked forward pass on `tape`. Leaves read `w`; gradients
/// accumulate into `grads` when it is non-null. Only enabled components
/// appear on the tape.
inline GraphOutput build_graph(Tape& tape, const ModelConfig& cfg, const Weights& w, Weights* grads,
                               const ComponentMask& mask, std::span<const Token> inputs, int seq_len,
                               std::span<const Token> targets = {}) {
  validate_mask(cfg, mask);
  require(seq_len > 0 && inputs.size() % static_cast<std::size_t>(seq_len) == 0, "build_graph: ragged batch");
  require(seq_len <= cfg.context_limit, "build_graph: seq_len exceeds context_limit");
  for (Token t : inputs) require(t >= 0 && t < cfg.vocab_size, "build_graph: token out of range");

  auto P = [&](auto get) {
    return tape.leaf(get(w), grads ? &get(*grads) : nullptr);
  };
  const double eps = cfg.norm_eps;

  Tape::Var h = tape.embed(P([](auto& W) -> auto& { return W.embedding; }), inputs);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerPlan plan = plan_layer(cfg, mask, l);
    if (!plan.active) continue;
    const std::size_t li = static_cast<std::size_t>(l);
    std::optional<Tape::Var> rec_out, attn_out;
    if (plan.recurrence) {
      auto R = [li](auto& W) -> auto& { return *W.layers[li].rec; };
      const auto u = tape.rms_norm(h, P([&](auto& W) -> auto& { return R(W).norm; }), eps);
      const auto x = tape.matmul(u, P([&](auto& W) -> auto& { return R(W).w_x; }));
      const auto z = tape.matmul(u, P([&](auto& W) -> auto& { return R(W).w_z; }));
      const auto B = tape.matmul(u, P([&](auto& W) -> auto& { return R(W).w_b; }));
      const auto C = tape.matmul(u, P([&](auto& W) -> auto& { return R(W).w_c; }));
      const auto y = tape.recurrence_scan(x, B, C, P([&](auto& W) -> auto& { return R(W).decay_logit; }),
                                          P([&](auto& W) -> auto& { return R(W).skip; }), seq_len);
      const auto g = tape.mul(y, tape.silu(z));
      rec_out = tape.matmul(g, P([&](auto& W) -> auto& { return R(W).w_o; }));
    }
    if (plan.attention) {
      auto A = [li](auto& W) -> auto& { return *W.layers[li].attn; };
      const auto u = tape.rms_norm(h, P([&](auto& W) -> auto& { return A(W).norm; }), eps);
      const auto q = tape.rope(tape.matmul(u, P([&](auto& W) -> auto& { return A(W).wq; })), cfg.n_heads,
                               cfg.head_dim(), seq_len, cfg.rope_base);
      const auto k = tape.rope(tape.matmul(u, P([&](auto& W) -> auto& { return A(W).wk; })), cfg.n_heads,
                               cfg.head_dim(), seq_len, cfg.rope_base);
      const auto v = tape.matmul(u, P([&](auto& W) -> auto& { return A(W).wv; }));
      const auto o = tape.causal_attention(q, k, v, cfg.n_heads, seq_len);
      attn_out = tape.matmul(o, P([&](auto& W) -> auto& { return A(W).wo; }));
    }
    if (rec_out && attn_out) {
      h = tape.add(h, tape.add(*rec_out, *attn_out));
    } else if (rec_out) {
      h = tape.add(h, *rec_out);
    } else if (attn_out) {
      h = tape.add(h, *attn_out);
    }
    auto F = [li](auto& W) -> auto& { return W.layers[li].ffn; };
    const auto uf = tape.rms_norm(h, P([&](auto& W) -> auto& { return F(W).norm; }), eps);
    const auto a = tape.silu(tape.matmul(uf, P([&](auto& W) -> auto& { return F(W).w1; })));
    h = tape.add(h, tape.matmul(a, P([&](auto& W) -> auto& { return F(W).w2; })));
  }
  const auto uo = tape.rms_norm(h, P([](auto& W) -> auto& { return W.final_norm; }), eps);
  GraphOutput out;
  out.logits = tape.matmul(uo, P([](auto& W) -> auto& { return W.head; }));
  if (!targets.empty()) out.loss = tape.cross_entropy(out.logits, targets);
  return out;
}

/// Mean cross-entropy of a batch under the masked model (no gradients).
inline double batch_loss(const ModelConfig& cfg, const Weights& w, const ComponentMask& mask, const Batch& b) {
  Tape tape;
  const auto g = build_graph(tape, cfg, w, nullptr, mask, b.inputs, b.seq_len, b.targets);
  return tape.value(*g.loss)(0, 0);
}

/// Mean cross-entropy and its gradient.
inline double loss_and_grad(const ModelConfig& cfg, const Weights& w, const ComponentMask& mask, const Batch& b,
                            Weights& grads) {
  Tape tape;
  const auto g = build_graph(tape, cfg, w, &grads, mask, b.inputs, b.seq_len, b.targets);
  tape.backward(*g.loss);
  return tape.value(*g.loss)(0, 0);
}

/// Adam with linear warmup and global-norm clipping. `loss_log` receives the
/// loss of every step. Fully determined by (cfg, tcfg, corpus).
inline Weights train(const ModelConfig& cfg, const TrainConfig& tcfg, std::span<const Token> corpus,
                     std::vector<double>* loss_log = nullptr) {
  cfg.validate();
  tcfg.validate(cfg);
  require(!corpus.empty(), "train: empty corpus");
  for (Token t : corpus) require(t >= 0 && t < cfg.vocab_size, "train: corpus token outside vocabulary");
  Rng root(tcfg.seed);
  Weights w = init_weights(cfg, root.split(0).next_u64());
  if (tcfg.steps == 0) return w;

  Rng data_rng = root.split(1);
  Weights m = zeros_like(w), v = zeros_like(w);
  const ComponentMask full = ComponentMask::all_enabled(cfg.n_layers);
  std::ofstream log;
  if (!tcfg.log_path.empty()) {
    const std::filesystem::path lp(tcfg.log_path);
    if (lp.has_parent_path()) std::filesystem::create_directories(lp.parent_path());
    log.open(lp, std::ios::trunc);
    log << "step,loss\n";
  }

  for (int step = 1; step <= tcfg.steps; ++step) {
    const Batch b = sample_batch(corpus, tcfg.batch_size, tcfg.seq_len, data_rng);
    Weights g = zeros_like(w);
    const double loss = loss_and_grad(cfg, w, full, b, g);
    if (!std::isfinite(loss)) throw Error("train: loss diverged (non-finite) at step " + std::to_string(step));
    if (loss_log) loss_log->push_back(loss);
    if (log.is_open()) log << step << "," << loss << "\n";

    double norm2 = 0.0;
    for_each_param(g, [&](const std::string&, const Mat& gm) { norm2 += gm.squaredNorm(); });
    const double norm = std::sqrt(norm2);
    const double clip = (tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip) ? tcfg.grad_clip / norm : 1.0;
    const double lr = tcfg.learning_rate * std::min(1.0, static_cast<double>(step) / std::max(1, tcfg.warmup_steps));
    const double bc1 = 1.0 - std::pow(tcfg.beta1, step);
    const double bc2 = 1.0 - std::pow(tcfg.beta2, step);

    std::vector<Mat*> pw, pg, pm, pv;
    for_each_param(w, [&](const std::string&, Mat& x) { pw.push_back(&x); });
    for_each_param(g, [&](const std::string&, Mat& x) { pg.push_back(&x); });
    for_each_param(m, [&](const std::string&, Mat& x) { pm.push_back(&x); });
    for_each_param(v, [&](const std::string&, Mat& x) { pv.push_back(&x); });
    for (std::size_t i = 0; i < pw.size(); ++i) {
      const Mat gi = *pg[i] * clip;
      *pm[i] = tcfg.beta1 * *pm[i] + (1.0 - tcfg.beta1) * gi;
      *pv[i] = tcfg.beta2 * *pv[i] + (1.0 - tcfg.beta2) * gi.cwiseProduct(gi);
      for (Eigen::Index j = 0; j < pw[i]->size(); ++j) {
        const double mh = pm[i]->data()[j] / bc1;
        const double vh = pv[i]->data()[j] / bc2;
        pw[i]->data()[j] -= lr * mh / (std::sqrt(vh) + tcfg.adam_eps);
      }
    }
    if (!weights_finite(w)) throw Error("train: parameters diverged (non-finite) at step " + std::to_string(step));
  }
  return w;
}

inline Weights train(const ModelConfig& cfg, const TrainConfig& tcfg, std::vector<double>* loss_log = nullptr) {
  const TokenSeq corpus = load_corpus(tcfg.corpus_path);
  return train(cfg, tcfg, corpus, loss_log);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  int checked = 0;
};

/// Compare analytic gradients to central finite differences (step `h`) on
/// `per_block` sampled entries of every parameter block reachable under the
/// mask. Relative error is |a - n| / max(|a|, |n|, floor); `floor` keeps
/// entries whose true gradient is ~0 from dividing roundoff by roundoff.
inline GradCheckResult grad_check(const ModelConfig& cfg, const Weights& w, const Batch& batch,
                                  const ComponentMask* mask = nullptr, int per_block = 4, double h = 1e-5,
                                  std::uint64_t seed = 7, double floor = 1e-6) {
  const ComponentMask m = mask ? *mask : ComponentMask::all_enabled(cfg.n_layers);
  Weights analytic = zeros_like(w);
  loss_and_grad(cfg, w, m, batch, analytic);

  Weights probe = w;
  std::vector<std::pair<std::string, Mat*>> blocks;
  for_each_param(probe, [&](const std::string& n, Mat& x) { blocks.emplace_back(n, &x); });
  std::vector<const Mat*> ga;
  for_each_param(analytic, [&](const std::string&, const Mat& x) { ga.push_back(&x); });

  Rng rng(seed);
  GradCheckResult res;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    Mat& p = *blocks[b].second;
    for (int s = 0; s < per_block; ++s) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(p.size())));
      const double orig = p.data()[idx];
      p.data()[idx] = orig + h;
      const double lp = batch_loss(cfg, probe, m, batch);
      p.data()[idx] = orig - h;
      const double lm = batch_loss(cfg, probe, m, batch);
      p.data()[idx] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = ga[b]->data()[idx];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = blocks[b].first + "[" + std::to_string(idx) + "]";
      }
    }
  }
  return res;
}

}  // namespace hyspec
