#pragma once

// Attention-removal perplexity diagnostic and its relation to measured
// acceptance.

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hyspec/engine.hpp"
#include "hyspec/metrics.hpp"

namespace hyspec {

enum class Viability { viable, uncertain, non_viable };

inline std::string to_string(Viability v) {
  switch (v) {
    case Viability::viable: return "viable";
    case Viability::uncertain: return "uncertain";
    case Viability::non_viable: return "non_viable";
  }
  return "?";
}

struct ViabilityThresholds {
  double viable_below = 5.0;
  double non_viable_above = 20.0;
};

inline Viability classify_viability(double ppl_ratio, const ViabilityThresholds& t = {}) {
  require(std::isfinite(ppl_ratio) && ppl_ratio > 0.0, "classify_viability: ratio must be positive");
  require(t.viable_below <= t.non_viable_above, "classify_viability: thresholds out of order");
  if (ppl_ratio < t.viable_below) return Viability::viable;
  if (ppl_ratio > t.non_viable_above) return Viability::non_viable;
  return Viability::uncertain;
}

struct AblationReport {
  double ppl_base = 0.0;
  double ppl_no_attn = 0.0;
  double ppl_ratio = 0.0;
  Viability verdict = Viability::uncertain;
  std::optional<AcceptanceStats> measured_alpha;
};

inline AblationReport make_ablation_report(double ppl_base, double ppl_no_attn, const ViabilityThresholds& t = {}) {
  require(ppl_base > 0.0 && ppl_no_attn > 0.0, "ablation: perplexities must be positive");
  AblationReport r;
  r.ppl_base = ppl_base;
  r.ppl_no_attn = ppl_no_attn;
  r.ppl_ratio = ppl_no_attn / ppl_base;
  r.verdict = classify_viability(r.ppl_ratio, t);
  return r;
}

/// Perplexity with everything on versus with the component-only draft mask.
inline AblationReport ablate_and_score(const Model& model, std::span<const Token> corpus, int stride = 0,
                                       const ViabilityThresholds& t = {}) {
  const ComponentMask no_attn = build_mask(model.cfg, DraftStrategy::component_only());
  const ComponentMask full = ComponentMask::all_enabled(model.cfg.n_layers);
  return make_ablation_report(perplexity(model, full, corpus, stride), perplexity(model, no_attn, corpus, stride), t);
}

struct CorrelationCell {
  std::string label;
  AblationReport ablation;
  AcceptanceStats acceptance;
};

struct CorrelationReport {
  bool inverse_ordering = true;  // every comparable pair: higher ratio, strictly lower alpha
  bool degenerate = false;       // no pair has distinct ratios
  int comparable_pairs = 0;
  int inverse_pairs = 0;         // higher ratio paired with lower alpha
  double kendall_tau = 0.0;      // over comparable pairs; -1 is perfectly inverse
  std::string table;
};

inline CorrelationReport correlation_report(const std::vector<CorrelationCell>& cells) {
  require(cells.size() >= 2, "correlation_report: need at least 2 cells");
  CorrelationReport r;
  int concordant = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = i + 1; j < cells.size(); ++j) {
      const double dr = cells[i].ablation.ppl_ratio - cells[j].ablation.ppl_ratio;
      const double da = cells[i].acceptance.all_token_alpha - cells[j].acceptance.all_token_alpha;
      if (dr == 0.0) continue;
      ++r.comparable_pairs;
      if (dr * da < 0.0) {
        ++r.inverse_pairs;
      } else {
        r.inverse_ordering = false;
        if (dr * da > 0.0) ++concordant;
      }
    }
  }
  r.degenerate = r.comparable_pairs == 0;
  if (!r.degenerate) r.kendall_tau = static_cast<double>(concordant - r.inverse_pairs) / r.comparable_pairs;

  std::ostringstream os;
  os << std::left << std::setw(24) << "cell" << std::right << std::setw(12) << "ppl_base" << std::setw(14)
     << "ppl_no_attn" << std::setw(12) << "ratio" << std::setw(12) << "verdict" << std::setw(10) << "alpha"
     << "\n";
  os << std::fixed;
  for (const auto& c : cells) {
    os << std::left << std::setw(24) << c.label << std::right << std::setprecision(3) << std::setw(12)
       << c.ablation.ppl_base << std::setw(14) << c.ablation.ppl_no_attn << std::setprecision(2) << std::setw(12)
       << c.ablation.ppl_ratio << std::setw(12) << to_string(c.ablation.verdict) << std::setprecision(3)
       << std::setw(10) << c.acceptance.all_token_alpha << "\n";
  }
  os << "ordering: " << (r.degenerate ? "degenerate (all ratios equal)" : r.inverse_ordering ? "inverse" : "violated")
     << "\n";
  r.table = os.str();
  return r;
}

}  // namespace hyspec
