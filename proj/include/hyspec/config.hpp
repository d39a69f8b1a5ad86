#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hyspec/numerics.hpp"

namespace hyspec {

enum class Arch { parallel_hybrid, sequential_hybrid, transformer };
enum class LayerKind { linear, attention };

inline std::string to_string(Arch a) {
  switch (a) {
    case Arch::parallel_hybrid: return "parallel_hybrid";
    case Arch::sequential_hybrid: return "sequential_hybrid";
    case Arch::transformer: return "transformer";
  }
  return "?";
}

inline Arch arch_from_string(const std::string& s) {
  if (s == "parallel_hybrid" || s == "parallel") return Arch::parallel_hybrid;
  if (s == "sequential_hybrid" || s == "sequential") return Arch::sequential_hybrid;
  if (s == "transformer") return Arch::transformer;
  throw Error("unknown architecture '" + s + "'");
}

inline std::string to_string(LayerKind k) { return k == LayerKind::linear ? "linear" : "attention"; }

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "linear") return LayerKind::linear;
  if (s == "attention") return LayerKind::attention;
  throw Error("unknown layer kind '" + s + "'");
}

struct ModelConfig {
  Arch arch = Arch::parallel_hybrid;
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int d_state = 32;
  int vocab_size = 256;
  int context_limit = 256;
  // Feed-forward hidden width; 0 means 4 * d_model.
  int d_ff = 0;
  // Only for sequential_hybrid.
  std::vector<LayerKind> layer_pattern;
  double norm_eps = 1e-6;
  double rope_base = 10000.0;

  [[nodiscard]] int ffn_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  [[nodiscard]] int head_dim() const { return d_model / n_heads; }

  /// Which sub-blocks layer `l` carries.
  [[nodiscard]] bool has_attention(int l) const {
    if (arch == Arch::sequential_hybrid) return layer_pattern.at(l) == LayerKind::attention;
    return true;
  }
  [[nodiscard]] bool has_recurrence(int l) const {
    if (arch == Arch::sequential_hybrid) return layer_pattern.at(l) == LayerKind::linear;
    return arch == Arch::parallel_hybrid;
  }

  [[nodiscard]] std::vector<int> attention_layers() const {
    std::vector<int> out;
    for (int l = 0; l < n_layers; ++l)
      if (has_attention(l)) out.push_back(l);
    return out;
  }

  void validate() const {
    require(n_layers > 0, "ModelConfig: n_layers must be positive");
    require(d_model > 0 && n_heads > 0 && d_state > 0, "ModelConfig: dimensions must be positive");
    require(vocab_size > 0 && context_limit > 0, "ModelConfig: vocab/context must be positive");
    require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
    require(head_dim() % 2 == 0, "ModelConfig: head dimension must be even (rotary embedding)");
    require(d_ff >= 0, "ModelConfig: d_ff must be >= 0");
    if (arch == Arch::sequential_hybrid) {
      require(static_cast<int>(layer_pattern.size()) == n_layers,
              "ModelConfig: layer_pattern length must equal n_layers");
      bool lin = false, att = false;
      for (auto k : layer_pattern) (k == LayerKind::linear ? lin : att) = true;
      require(lin && att, "ModelConfig: layer_pattern needs at least one linear and one attention layer");
    } else {
      require(layer_pattern.empty(), "ModelConfig: layer_pattern only valid for sequential_hybrid");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// `ratio` linear layers followed by one attention layer, repeated.
inline std::vector<LayerKind> interleaved_pattern(int n_layers, int ratio = 3) {
  std::vector<LayerKind> p(n_layers);
  for (int l = 0; l < n_layers; ++l)
    p[l] = ((l + 1) % (ratio + 1) == 0) ? LayerKind::attention : LayerKind::linear;
  if (n_layers > 1 && std::find(p.begin(), p.end(), LayerKind::attention) == p.end())
    p.back() = LayerKind::attention;
  return p;
}

inline ModelConfig default_config(Arch arch) {
  ModelConfig c;
  c.arch = arch;
  if (arch == Arch::sequential_hybrid) c.layer_pattern = interleaved_pattern(c.n_layers);
  return c;
}

}  // namespace hyspec
