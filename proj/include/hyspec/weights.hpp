#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hyspec/config.hpp"
#include "hyspec/numerics.hpp"

namespace hyspec {

/// Row-major so that a weight row is contiguous for the inference kernels.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AttentionBlock {
  Mat norm;  // 1 x d
  Mat wq, wk, wv, wo;  // d x d
};

/// Diagonal gated linear recurrence. Used for the SSM branch of parallel hybrids
/// and for the linear-attention layers of sequential hybrids.
struct RecurrenceBlock {
  Mat norm;         // 1 x d
  Mat w_x;          // d x d     channel input
  Mat w_z;          // d x d     output gate
  Mat w_b;          // d x n     state write vector
  Mat w_c;          // d x n     state read vector
  Mat decay_logit;  // 1 x d     decay = sigmoid(decay_logit)
  Mat skip;         // 1 x d     skip term D
  Mat w_o;          // d x d
};

struct FfnBlock {
  Mat norm;  // 1 x d
  Mat w1;    // d x f
  Mat w2;    // f x d
};

struct LayerWeights {
  std::optional<AttentionBlock> attn;
  std::optional<RecurrenceBlock> rec;
  FfnBlock ffn;
};

struct Weights {
  Mat embedding;  // V x d
  std::vector<LayerWeights> layers;
  Mat final_norm;  // 1 x d
  Mat head;        // d x V
};

/// Visit every parameter block in a fixed order with its checkpoint name.
template <class W, class F>
void for_each_param(W& w, F&& fn) {
  fn(std::string("embedding"), w.embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    if (L.attn) {
      auto& a = *L.attn;
      fn(p + "attn.norm", a.norm);
      fn(p + "attn.wq", a.wq);
      fn(p + "attn.wk", a.wk);
      fn(p + "attn.wv", a.wv);
      fn(p + "attn.wo", a.wo);
    }
    if (L.rec) {
      auto& r = *L.rec;
      fn(p + "rec.norm", r.norm);
      fn(p + "rec.w_x", r.w_x);
      fn(p + "rec.w_z", r.w_z);
      fn(p + "rec.w_b", r.w_b);
      fn(p + "rec.w_c", r.w_c);
      fn(p + "rec.decay_logit", r.decay_logit);
      fn(p + "rec.skip", r.skip);
      fn(p + "rec.w_o", r.w_o);
    }
    fn(p + "ffn.norm", L.ffn.norm);
    fn(p + "ffn.w1", L.ffn.w1);
    fn(p + "ffn.w2", L.ffn.w2);
  }
  fn(std::string("final_norm"), w.final_norm);
  fn(std::string("head"), w.head);
}

namespace detail {
inline Mat gaussian(int rows, int cols, double stddev, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}
inline Mat ones_row(int d) { return Mat::Ones(1, d); }
}  // namespace detail

/// Allocate correctly shaped blocks filled with zeros (norm gains too).
inline Weights zero_weights(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model, n = cfg.d_state, f = cfg.ffn_width(), V = cfg.vocab_size;
  Weights w;
  w.embedding = Mat::Zero(V, d);
  w.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& L = w.layers[l];
    if (cfg.has_attention(l)) {
      L.attn = AttentionBlock{Mat::Zero(1, d), Mat::Zero(d, d), Mat::Zero(d, d), Mat::Zero(d, d),
                              Mat::Zero(d, d)};
    }
    if (cfg.has_recurrence(l)) {
      L.rec = RecurrenceBlock{Mat::Zero(1, d), Mat::Zero(d, d), Mat::Zero(d, d), Mat::Zero(d, n),
                              Mat::Zero(d, n), Mat::Zero(1, d), Mat::Zero(1, d), Mat::Zero(d, d)};
    }
    L.ffn = FfnBlock{Mat::Zero(1, d), Mat::Zero(d, f), Mat::Zero(f, d)};
  }
  w.final_norm = Mat::Zero(1, d);
  w.head = Mat::Zero(d, V);
  return w;
}

/// Seeded initialization. Output projections are scaled by 1/sqrt(2L);
/// recurrence decays are spread over (0.5, 0.97) across channels.
inline Weights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  Weights w = zero_weights(cfg);
  Rng rng(seed);
  const int d = cfg.d_model, n = cfg.d_state, f = cfg.ffn_width(), V = cfg.vocab_size;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  using detail::gaussian;
  w.embedding = gaussian(V, d, 1.0, rng);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& L = w.layers[l];
    if (L.attn) {
      auto& a = *L.attn;
      a.norm = detail::ones_row(d);
      a.wq = gaussian(d, d, in_std, rng);
      a.wk = gaussian(d, d, in_std, rng);
      a.wv = gaussian(d, d, in_std, rng);
      a.wo = gaussian(d, d, in_std * out_scale, rng);
    }
    if (L.rec) {
      auto& r = *L.rec;
      r.norm = detail::ones_row(d);
      r.w_x = gaussian(d, d, in_std, rng);
      r.w_z = gaussian(d, d, in_std, rng);
      r.w_b = gaussian(d, n, in_std, rng);
      r.w_c = gaussian(d, n, in_std, rng);
      for (int c = 0; c < d; ++c) {
        const double decay = 0.5 + 0.47 * (d == 1 ? 0.0 : static_cast<double>(c) / (d - 1));
        r.decay_logit(0, c) = std::log(decay / (1.0 - decay));
      }
      r.skip = detail::ones_row(d);
      r.w_o = gaussian(d, d, in_std * out_scale / std::sqrt(static_cast<double>(n)), rng);
    }
    L.ffn.norm = detail::ones_row(d);
    L.ffn.w1 = gaussian(d, f, in_std, rng);
    L.ffn.w2 = gaussian(f, d, out_scale / std::sqrt(static_cast<double>(f)), rng);
  }
  w.final_norm = detail::ones_row(d);
  w.head = gaussian(d, V, in_std, rng);
  return w;
}

inline Weights zeros_like(const Weights& w) {
  Weights z = w;
  for_each_param(z, [](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

inline std::size_t parameter_count(const Weights& w) {
  std::size_t total = 0;
  for_each_param(w, [&](const std::string&, const Mat& m) { total += static_cast<std::size_t>(m.size()); });
  return total;
}

inline bool weights_finite(const Weights& w) {
  bool ok = true;
  for_each_param(w, [&](const std::string&, const Mat& m) { ok = ok && m.allFinite(); });
  return ok;
}

inline bool weights_equal(const Weights& a, const Weights& b) {
  std::vector<const Mat*> ma, mb;
  for_each_param(a, [&](const std::string&, const Mat& m) { ma.push_back(&m); });
  for_each_param(b, [&](const std::string&, const Mat& m) { mb.push_back(&m); });
  if (ma.size() != mb.size()) return false;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    if (ma[i]->rows() != mb[i]->rows() || ma[i]->cols() != mb[i]->cols()) return false;
    if (std::memcmp(ma[i]->data(), mb[i]->data(), sizeof(double) * ma[i]->size()) != 0) return false;
  }
  return true;
}

/// Check every block against the config's expected shapes.
inline void check_shapes(const ModelConfig& cfg, const Weights& w) {
  const Weights ref = zero_weights(cfg);
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> want, got;
  for_each_param(ref, [&](const std::string& n, const Mat& m) { want.push_back({n, {m.rows(), m.cols()}}); });
  for_each_param(w, [&](const std::string& n, const Mat& m) { got.push_back({n, {m.rows(), m.cols()}}); });
  require(want == got, "Weights: block layout does not match ModelConfig");
}

}  // namespace hyspec
