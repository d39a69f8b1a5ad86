#pragma once

// Sweeps over (model, strategy, k, temperature) cells with resumable per-cell
// results and CSV/JSON reports.
//
// Output directory layout:
//   cells/<model>__<strategy>__k<k>__T<t>.json   one finished cell each
//   report.csv    one row per cell, deterministic for a given spec
//   timing.csv    wall-clock per generated token (machine dependent)
//   report.json   spec plus every cell, including per-prompt round data

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hyspec/ablation.hpp"
#include "hyspec/checkpoint.hpp"
#include "hyspec/engine.hpp"
#include "hyspec/metrics.hpp"
#include "hyspec/theory.hpp"
#include "hyspec/trainer.hpp"

namespace hyspec {

inline constexpr const char* kReportSchema = "# hyspec-report v1";
inline constexpr const char* kTimingSchema = "# hyspec-timing v1 (wall clock on this machine; not comparable across hardware)";
inline constexpr const char* kPlotSchema = "# hyspec-plot v1";
inline constexpr int kCellSchemaVersion = 1;

struct ModelEntry {
  std::string name;
  std::string checkpoint;
};

struct ExperimentSpec {
  std::vector<ModelEntry> models;
  std::vector<DraftStrategy> strategies{DraftStrategy::component_only(), DraftStrategy::layer_skip(0.33),
                                        DraftStrategy::early_exit(0.5)};
  std::vector<int> ks{2, 4, 8};
  std::vector<double> temperatures{0.0, 0.6};
  std::string prompt_corpus;
  int prompt_count = 200;
  int prompt_length = 64;
  int divergence_prompts = 100;
  int max_new_tokens = 64;
  std::uint64_t seed = 1;
  int bootstrap_resamples = 10000;
  bool measure_timing = true;
  std::string output_dir;

  void validate() const {
    require(!models.empty(), "ExperimentSpec: no models");
    require(!strategies.empty() && !ks.empty() && !temperatures.empty(), "ExperimentSpec: empty sweep");
    require(prompt_count > 0 && prompt_length > 0 && max_new_tokens > 0, "ExperimentSpec: counts must be positive");
    require(divergence_prompts > 0, "ExperimentSpec: divergence_prompts must be positive");
    require(!prompt_corpus.empty(), "ExperimentSpec: prompt corpus missing");
    require(!output_dir.empty(), "ExperimentSpec: output directory missing");
    std::set<std::string> names;
    for (const auto& m : models) {
      require(!m.name.empty() && m.name.find("__") == std::string::npos, "ExperimentSpec: bad model name '" + m.name + "'");
      require(names.insert(m.name).second, "ExperimentSpec: duplicate model name '" + m.name + "'");
    }
    for (int k : ks) require(k >= 1, "ExperimentSpec: k must be >= 1");
    for (double t : temperatures) require(t >= 0.0, "ExperimentSpec: temperature must be >= 0");
    require(bootstrap_resamples >= 1, "ExperimentSpec: bootstrap_resamples must be >= 1");
  }
};

inline nlohmann::json spec_to_json(const ExperimentSpec& s) {
  nlohmann::json j;
  j["models"] = nlohmann::json::array();
  for (const auto& m : s.models) j["models"].push_back({{"name", m.name}, {"checkpoint", m.checkpoint}});
  std::vector<std::string> st;
  for (const auto& x : s.strategies) st.push_back(x.name());
  j["strategies"] = st;
  j["ks"] = s.ks;
  j["temperatures"] = s.temperatures;
  j["prompt_corpus"] = s.prompt_corpus;
  j["prompt_count"] = s.prompt_count;
  j["prompt_length"] = s.prompt_length;
  j["divergence_prompts"] = s.divergence_prompts;
  j["max_new_tokens"] = s.max_new_tokens;
  j["seed"] = s.seed;
  j["bootstrap_resamples"] = s.bootstrap_resamples;
  j["measure_timing"] = s.measure_timing;
  j["output_dir"] = s.output_dir;
  return j;
}

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  ExperimentSpec s;
  for (const auto& m : j.at("models")) s.models.push_back({m.at("name"), m.at("checkpoint")});
  if (j.contains("strategies")) {
    s.strategies.clear();
    for (const auto& x : j.at("strategies")) s.strategies.push_back(DraftStrategy::parse(x.get<std::string>()));
  }
  if (j.contains("ks")) s.ks = j.at("ks").get<std::vector<int>>();
  if (j.contains("temperatures")) s.temperatures = j.at("temperatures").get<std::vector<double>>();
  s.prompt_corpus = j.at("prompt_corpus");
  s.prompt_count = j.value("prompt_count", s.prompt_count);
  s.prompt_length = j.value("prompt_length", s.prompt_length);
  s.divergence_prompts = j.value("divergence_prompts", s.divergence_prompts);
  s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
  s.seed = j.value("seed", s.seed);
  s.bootstrap_resamples = j.value("bootstrap_resamples", s.bootstrap_resamples);
  s.measure_timing = j.value("measure_timing", s.measure_timing);
  s.output_dir = j.value("output_dir", std::string());
  return s;
}

/// `count` windows of `length` tokens at seeded offsets.
inline std::vector<TokenSeq> sample_prompts(std::span<const Token> corpus, int count, int length, std::uint64_t seed) {
  require(count > 0 && length > 0, "sample_prompts: count and length must be positive");
  require(corpus.size() > static_cast<std::size_t>(length), "sample_prompts: corpus shorter than prompt length");
  Rng r(seed);
  std::vector<TokenSeq> out;
  const std::uint64_t span_n = corpus.size() - static_cast<std::size_t>(length) + 1;
  for (int i = 0; i < count; ++i) {
    const auto off = static_cast<std::size_t>(r.below(span_n));
    out.emplace_back(corpus.begin() + static_cast<std::ptrdiff_t>(off),
                     corpus.begin() + static_cast<std::ptrdiff_t>(off) + length);
  }
  return out;
}

struct CellKey {
  std::string model;
  std::string strategy;
  int k = 0;
  double temperature = 0.0;

  [[nodiscard]] std::string id() const {
    std::ostringstream os;
    os << model << "__" << strategy << "__k" << k << "__T" << temperature;
    std::string s = os.str();
    for (char& c : s)
      if (c == ':') c = '-';
    return s;
  }
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

struct CellResult {
  CellKey key;
  std::string arch;
  std::string status = "ok";  // "ok" or "error"
  std::string error;
  AcceptanceStats acceptance;
  DivergenceStats divergence;
  std::optional<double> match_rate;  // greedy cells only
  double cost_ratio = 0.0;
  double theory_speedup = 0.0;
  std::int64_t draft_steps = 0;
  std::int64_t verify_passes = 0;
  std::int64_t generated_tokens = 0;
  double spec_seconds = 0.0;
  double ar_seconds = 0.0;
  std::vector<std::vector<int>> accepted_per_round;  // per prompt
  std::uint64_t fingerprint = 0;
};

inline nlohmann::json cell_to_json(const CellResult& c) {
  nlohmann::json j;
  j["schema"] = kCellSchemaVersion;
  j["fingerprint"] = c.fingerprint;
  j["model"] = c.key.model;
  j["strategy"] = c.key.strategy;
  j["k"] = c.key.k;
  j["temperature"] = c.key.temperature;
  j["arch"] = c.arch;
  j["status"] = c.status;
  j["error"] = c.error;
  const auto& a = c.acceptance;
  j["acceptance"] = {{"k", a.k},
                     {"all_token_alpha", a.all_token_alpha},
                     {"per_token_alpha", a.per_token_alpha},
                     {"mean_accepted_per_round", a.mean_accepted_per_round},
                     {"n_rounds", a.n_rounds},
                     {"ci_low", a.ci_low},
                     {"ci_high", a.ci_high}};
  j["divergence"] = {{"tv_mean", c.divergence.tv_mean},
                     {"top1_agreement", c.divergence.top1_agreement},
                     {"n_positions", c.divergence.n_positions}};
  j["match_rate"] = c.match_rate ? nlohmann::json(*c.match_rate) : nlohmann::json(nullptr);
  j["cost_ratio"] = c.cost_ratio;
  j["theory_speedup"] = c.theory_speedup;
  j["draft_steps"] = c.draft_steps;
  j["verify_passes"] = c.verify_passes;
  j["generated_tokens"] = c.generated_tokens;
  j["spec_seconds"] = c.spec_seconds;
  j["ar_seconds"] = c.ar_seconds;
  j["accepted_per_round"] = c.accepted_per_round;
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  CellResult c;
  require(j.at("schema").get<int>() == kCellSchemaVersion, "cell file: unsupported schema");
  c.fingerprint = j.at("fingerprint");
  c.key = {j.at("model"), j.at("strategy"), j.at("k"), j.at("temperature")};
  c.arch = j.at("arch");
  c.status = j.at("status");
  c.error = j.at("error");
  const auto& a = j.at("acceptance");
  c.acceptance = {a.at("k"), a.at("all_token_alpha"), a.at("per_token_alpha"), a.at("mean_accepted_per_round"),
                  a.at("n_rounds"), a.at("ci_low"), a.at("ci_high")};
  const auto& d = j.at("divergence");
  c.divergence = {d.at("tv_mean"), d.at("top1_agreement"), d.at("n_positions")};
  if (!j.at("match_rate").is_null()) c.match_rate = j.at("match_rate").get<double>();
  c.cost_ratio = j.at("cost_ratio");
  c.theory_speedup = j.at("theory_speedup");
  c.draft_steps = j.at("draft_steps");
  c.verify_passes = j.at("verify_passes");
  c.generated_tokens = j.at("generated_tokens");
  c.spec_seconds = j.at("spec_seconds");
  c.ar_seconds = j.at("ar_seconds");
  c.accepted_per_round = j.at("accepted_per_round").get<std::vector<std::vector<int>>>();
  return c;
}

struct ExperimentReport {
  ExperimentSpec spec;
  std::vector<CellResult> cells;  // spec order: model, strategy, k, temperature
  int computed = 0;               // cells run in this invocation
  int reused = 0;                 // cells loaded from an earlier run
};

namespace detail {

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), "cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& body) {
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), "cannot write " + tmp);
    out << body;
  }
  std::filesystem::rename(tmp, p);
}

/// Run fn(i) for i in [0, n) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Worker count from HYSPEC_THREADS (default 1).
inline int thread_count_from_env() {
  const char* v = std::getenv("HYSPEC_THREADS");
  if (!v || !*v) return 1;
  const int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

/// Per-token acceptance to expected tokens, with the alpha = 1 limit.
inline double expected_tokens_or_limit(double alpha, int k) {
  return alpha >= 1.0 ? k + 1.0 : expected_tokens(alpha, k);
}

inline std::string report_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << kReportSchema << "\n";
  os << "model,arch,strategy,k,temperature,status,n_rounds,alpha,ci_low,ci_high,per_token_alpha,mean_accepted,"
        "tv_mean,top1_agreement,n_positions,match_rate,cost_ratio,theory_speedup,draft_steps,verify_passes,"
        "generated_tokens\n";
  for (const auto& c : r.cells) {
    os << c.key.model << "," << c.arch << "," << c.key.strategy << "," << c.key.k << "," << detail::fmt(c.key.temperature, 2)
       << "," << c.status;
    if (c.status != "ok") {
      os << std::string(15, ',') << "\n";
      continue;
    }
    const auto& a = c.acceptance;
    os << "," << a.n_rounds << "," << detail::fmt(a.all_token_alpha) << "," << detail::fmt(a.ci_low) << ","
       << detail::fmt(a.ci_high) << "," << detail::fmt(a.per_token_alpha) << "," << detail::fmt(a.mean_accepted_per_round)
       << "," << detail::fmt(c.divergence.tv_mean) << "," << detail::fmt(c.divergence.top1_agreement) << ","
       << c.divergence.n_positions << "," << (c.match_rate ? detail::fmt(*c.match_rate) : "NA") << ","
       << detail::fmt(c.cost_ratio) << "," << detail::fmt(c.theory_speedup) << "," << c.draft_steps << ","
       << c.verify_passes << "," << c.generated_tokens << "\n";
  }
  return os.str();
}

inline std::string timing_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << kTimingSchema << "\n";
  os << "model,strategy,k,temperature,spec_ms_per_token,ar_ms_per_token,measured_speedup\n";
  for (const auto& c : r.cells) {
    if (c.status != "ok" || c.generated_tokens == 0 || c.spec_seconds <= 0.0) continue;
    const double spec = 1e3 * c.spec_seconds / static_cast<double>(c.generated_tokens);
    const double ar = 1e3 * c.ar_seconds / static_cast<double>(c.generated_tokens);
    os << c.key.model << "," << c.key.strategy << "," << c.key.k << "," << detail::fmt(c.key.temperature, 2) << ","
       << detail::fmt(spec, 4) << "," << detail::fmt(ar, 4) << "," << detail::fmt(ar / spec, 4) << "\n";
  }
  return os.str();
}

inline nlohmann::json report_to_json(const ExperimentReport& r) {
  nlohmann::json j;
  j["schema"] = "hyspec-report v1";
  j["spec"] = spec_to_json(r.spec);
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) j["cells"].push_back(cell_to_json(c));
  return j;
}

inline ExperimentReport load_report(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(detail::read_file(dir / "report.json"));
  ExperimentReport r;
  r.spec = spec_from_json(j.at("spec"));
  for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
  return r;
}

/// Long-format rows (model, strategy, T, k) for every grid point; cells that
/// failed or are missing carry NA in every value column.
inline std::string plot_data_csv(const ExperimentReport& r) {
  std::map<std::string, const CellResult*> by_id;
  for (const auto& c : r.cells) by_id[c.key.id()] = &c;
  std::ostringstream os;
  os << kPlotSchema << "\n";
  os << "model,strategy,T,k,alpha,ci_low,ci_high,mean_accepted\n";
  for (const auto& m : r.spec.models)
    for (const auto& s : r.spec.strategies)
      for (double t : r.spec.temperatures)
        for (int k : r.spec.ks) {
          const CellKey key{m.name, s.name(), k, t};
          os << m.name << "," << s.name() << "," << detail::fmt(t, 2) << "," << k << ",";
          const auto it = by_id.find(key.id());
          if (it == by_id.end() || it->second->status != "ok") {
            os << "NA,NA,NA,NA\n";
            continue;
          }
          const auto& a = it->second->acceptance;
          os << detail::fmt(a.all_token_alpha) << "," << detail::fmt(a.ci_low) << "," << detail::fmt(a.ci_high) << ","
             << detail::fmt(a.mean_accepted_per_round) << "\n";
        }
  return os.str();
}

inline void emit_plot_data(const ExperimentReport& r, const std::filesystem::path& out) {
  detail::write_file(out, plot_data_csv(r));
}

namespace detail {

struct ModelContext {
  std::optional<Model> model;
  std::string load_error;
  std::uint64_t checksum = 0;
};

inline std::uint64_t cell_fingerprint(const ExperimentSpec& s, std::uint64_t checkpoint_sum, const CellKey& key) {
  std::ostringstream os;
  os << checkpoint_sum << "|" << key.id() << "|" << s.prompt_corpus << "|" << s.prompt_count << "|" << s.prompt_length
     << "|" << s.divergence_prompts << "|" << s.max_new_tokens << "|" << s.seed << "|" << s.bootstrap_resamples;
  return fnv1a(os.str());
}

/// Everything one cell needs that is shared by the cells of a model.
struct SharedModelData {
  std::map<std::string, DivergenceStats> divergence;  // by strategy name
  std::map<double, std::vector<TokenSeq>> ar_outputs; // by temperature
  std::map<double, double> ar_seconds;
};

inline std::uint64_t prompt_seed(const CellKey& key, std::uint64_t base, std::size_t i) {
  return Rng(base).split(fnv1a(key.id())).split(i).seed();
}

inline CellResult run_cell(const ExperimentSpec& spec, const Model& model, const std::vector<TokenSeq>& prompts,
                           const SharedModelData& shared, const CellKey& key, const DraftStrategy& strategy) {
  CellResult c;
  c.key = key;
  c.arch = to_string(model.cfg.arch);
  const ComponentMask full = ComponentMask::all_enabled(model.cfg.n_layers);
  const ComponentMask draft = build_mask(model.cfg, strategy);  // throws for invalid pairings
  require(spec.prompt_length + spec.max_new_tokens + key.k + 1 <= model.cfg.context_limit,
          "prompt length + new tokens + k exceeds the model context");
  DecodeSettings ds;
  ds.k = key.k;
  ds.temperature = key.temperature;
  ds.max_new_tokens = spec.max_new_tokens;

  if (spec.measure_timing) {  // warm-up, untimed
    ds.seed = 0;
    speculative_generate(model, full, strategy, prompts.front(), ds);
  }
  std::vector<SpecRoundResult> rounds;
  std::size_t same = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    ds.seed = prompt_seed(key, spec.seed, i);
    auto out = speculative_generate(model, full, strategy, prompts[i], ds);
    std::vector<int> acc;
    for (const auto& r : out.rounds) acc.push_back(r.accepted_count);
    c.accepted_per_round.push_back(std::move(acc));
    c.draft_steps += out.counts.draft_steps;
    c.verify_passes += out.counts.verify_passes;
    c.generated_tokens += static_cast<std::int64_t>(out.tokens.size());
    if (key.temperature == 0.0) same += out.tokens == shared.ar_outputs.at(0.0)[i] ? 1 : 0;
    rounds.insert(rounds.end(), std::make_move_iterator(out.rounds.begin()), std::make_move_iterator(out.rounds.end()));
  }
  c.spec_seconds = spec.measure_timing ? seconds_since(t0) : 0.0;
  c.ar_seconds = spec.measure_timing ? shared.ar_seconds.at(key.temperature) : 0.0;

  BootstrapOptions boot;
  boot.resamples = spec.bootstrap_resamples;
  boot.seed = Rng(spec.seed).split(fnv1a(key.id())).seed();
  c.acceptance = all_token_alpha(rounds, key.k, key.temperature, boot);
  c.divergence = shared.divergence.at(key.strategy);
  if (key.temperature == 0.0) c.match_rate = static_cast<double>(same) / static_cast<double>(prompts.size());
  c.cost_ratio = flop_ratio(model.cfg, strategy).cost_ratio;
  c.theory_speedup = expected_tokens_or_limit(c.acceptance.per_token_alpha, key.k) / (1.0 + key.k * c.cost_ratio);
  return c;
}

}  // namespace detail

/// Run every cell of the sweep that has no finished result in
/// output_dir/cells, then rewrite the reports from all cells. Failures are
/// recorded per cell and do not stop the sweep.
inline ExperimentReport run_experiments(const ExperimentSpec& spec, int threads = thread_count_from_env()) {
  namespace fs = std::filesystem;
  spec.validate();
  const fs::path out(spec.output_dir);
  fs::create_directories(out / "cells");
  const TokenSeq corpus = load_corpus(spec.prompt_corpus);
  const auto prompts = sample_prompts(corpus, spec.prompt_count, spec.prompt_length, Rng(spec.seed).split(1).seed());
  const std::vector<TokenSeq> div_prompts(
      prompts.begin(), prompts.begin() + std::min<std::ptrdiff_t>(spec.divergence_prompts, spec.prompt_count));

  ExperimentReport report;
  report.spec = spec;
  for (const auto& entry : spec.models) {
    detail::ModelContext ctx;
    try {
      ctx.checksum = fnv1a(detail::read_file(entry.checkpoint));
      ctx.model.emplace(load_checkpoint(entry.checkpoint));
    } catch (const std::exception& e) {
      ctx.load_error = e.what();
    }

    struct Pending {
      CellKey key;
      DraftStrategy strategy;
      std::size_t slot;
    };
    std::vector<Pending> pending;
    for (const auto& s : spec.strategies)
      for (int k : spec.ks)
        for (double t : spec.temperatures) {
          CellKey key{entry.name, s.name(), k, t};
          const std::uint64_t fp = detail::cell_fingerprint(spec, ctx.checksum, key);
          const fs::path file = out / "cells" / (key.id() + ".json");
          const std::size_t slot = report.cells.size();
          report.cells.emplace_back();
          if (ctx.model && fs::exists(file)) {
            try {
              CellResult c = cell_from_json(nlohmann::json::parse(detail::read_file(file)));
              if (c.fingerprint == fp) {
                report.cells[slot] = std::move(c);
                ++report.reused;
                continue;
              }
            } catch (const std::exception&) {
              // unreadable cell file: recompute
            }
          }
          report.cells[slot].key = key;
          report.cells[slot].fingerprint = fp;
          pending.push_back({key, s, slot});
        }
    if (pending.empty()) continue;
    if (!ctx.model) {
      for (const auto& p : pending) {
        auto& c = report.cells[p.slot];
        c.status = "error";
        c.error = "checkpoint: " + ctx.load_error;
      }
      continue;
    }
    const Model& model = *ctx.model;

    // Shared per-model work: divergence per strategy, autoregressive runs per temperature.
    detail::SharedModelData shared;
    std::vector<std::string> need_div;
    std::set<double> need_t;
    for (const auto& p : pending) {
      if (std::find(need_div.begin(), need_div.end(), p.key.strategy) == need_div.end()) need_div.push_back(p.key.strategy);
      if (p.key.temperature == 0.0 || spec.measure_timing) need_t.insert(p.key.temperature);
    }
    std::vector<std::optional<DivergenceStats>> div(need_div.size());
    detail::parallel_for(need_div.size(), threads, [&](std::size_t i) {
      try {
        div[i] = divergence(model, build_mask(model.cfg, DraftStrategy::parse(need_div[i])), div_prompts);
      } catch (const std::exception&) {
        // invalid pairing; the cell itself reports it
      }
    });
    for (std::size_t i = 0; i < need_div.size(); ++i)
      if (div[i]) shared.divergence[need_div[i]] = *div[i];
    const std::vector<double> temps(need_t.begin(), need_t.end());
    std::vector<std::vector<TokenSeq>> ar(temps.size());
    std::vector<double> ar_sec(temps.size(), 0.0);
    detail::parallel_for(temps.size(), threads, [&](std::size_t ti) {
      DecodeSettings ds;
      ds.temperature = temps[ti];
      ds.max_new_tokens = spec.max_new_tokens;
      if (spec.measure_timing) autoregressive_generate(model, prompts.front(), ds);
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        ds.seed = Rng(spec.seed).split(2).split(i).seed();
        ar[ti].push_back(autoregressive_generate(model, prompts[i], ds));
      }
      ar_sec[ti] = detail::seconds_since(t0);
    });
    for (std::size_t ti = 0; ti < temps.size(); ++ti) {
      shared.ar_outputs[temps[ti]] = std::move(ar[ti]);
      shared.ar_seconds[temps[ti]] = ar_sec[ti];
    }

    std::mutex io;
    detail::parallel_for(pending.size(), threads, [&](std::size_t i) {
      const auto& p = pending[i];
      CellResult c;
      try {
        c = detail::run_cell(spec, model, prompts, shared, p.key, p.strategy);
      } catch (const std::exception& e) {
        c.key = p.key;
        c.arch = to_string(model.cfg.arch);
        c.status = "error";
        c.error = e.what();
      }
      c.fingerprint = report.cells[p.slot].fingerprint;
      detail::write_file(out / "cells" / (p.key.id() + ".json"), cell_to_json(c).dump(1) + "\n");
      std::lock_guard<std::mutex> lock(io);
      report.cells[p.slot] = std::move(c);
      ++report.computed;
    });
  }

  detail::write_file(out / "report.csv", report_csv(report));
  detail::write_file(out / "timing.csv", timing_csv(report));
  detail::write_file(out / "report.json", report_to_json(report).dump(1) + "\n");
  return report;
}

}  // namespace hyspec
