// Command-line front end: training, sweeps, diagnostics and reports.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "hyspec/hyspec.hpp"

using namespace hyspec;
using nlohmann::json;

namespace {

void write_or_print(const std::string& path, const std::string& body) {
  if (path.empty()) {
    std::cout << body;
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  require(static_cast<bool>(out), "cannot write " + path);
  out << body;
}

std::vector<DraftStrategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<DraftStrategy> out;
  for (const auto& n : names) out.push_back(DraftStrategy::parse(n));
  return out;
}

std::vector<LayerKind> parse_pattern(const std::string& s) {
  std::vector<LayerKind> p;
  for (char c : s) {
    if (c == 'L' || c == 'l') {
      p.push_back(LayerKind::linear);
    } else if (c == 'A' || c == 'a') {
      p.push_back(LayerKind::attention);
    } else {
      throw Error("layer pattern: use L (linear) and A (attention), got '" + s + "'");
    }
  }
  return p;
}

struct TrainArgs {
  std::string arch = "parallel_hybrid";
  ModelConfig cfg;
  int attn_every = 4;
  std::string pattern;
  TrainConfig tcfg;
  std::string out;
};

int cmd_train(TrainArgs& a) {
  a.cfg.arch = arch_from_string(a.arch);
  if (a.cfg.arch == Arch::sequential_hybrid) {
    a.cfg.layer_pattern = a.pattern.empty() ? interleaved_pattern(a.cfg.n_layers, a.attn_every - 1) : parse_pattern(a.pattern);
  }
  a.cfg.validate();
  if (a.tcfg.log_path.empty()) a.tcfg.log_path = a.out + ".log.csv";
  std::vector<double> losses;
  const Weights w = train(a.cfg, a.tcfg, &losses);
  save_checkpoint(a.out, a.cfg, w);
  std::cout << "trained " << to_string(a.cfg.arch) << " (" << parameter_count(w) << " parameters) for "
            << a.tcfg.steps << " steps";
  if (!losses.empty()) std::cout << ", final loss " << losses.back();
  std::cout << "\ncheckpoint: " << a.out << "\nlog: " << a.tcfg.log_path << "\n";
  return 0;
}

struct SweepArgs {
  std::string spec_file;
  std::vector<std::string> models;  // name=path
  std::vector<std::string> strategies{"component_only", "layer_skip:0.33", "early_exit:0.5"};
  std::vector<int> ks{2, 4, 8};
  std::vector<double> temps{0.0, 0.6};
  ExperimentSpec spec;
  bool no_timing = false;
};

ExperimentSpec sweep_spec(SweepArgs& a) {
  if (!a.spec_file.empty()) {
    std::ifstream in(a.spec_file);
    require(static_cast<bool>(in), "cannot read spec " + a.spec_file);
    ExperimentSpec s = spec_from_json(json::parse(in));
    if (!a.spec.output_dir.empty()) s.output_dir = a.spec.output_dir;
    return s;
  }
  ExperimentSpec s = a.spec;
  for (const auto& m : a.models) {
    const auto eq = m.find('=');
    require(eq != std::string::npos, "--model expects name=checkpoint, got '" + m + "'");
    s.models.push_back({m.substr(0, eq), m.substr(eq + 1)});
  }
  s.strategies = parse_strategies(a.strategies);
  s.ks = a.ks;
  s.temperatures = a.temps;
  s.measure_timing = !a.no_timing;
  return s;
}

int cmd_run(SweepArgs& a) {
  const ExperimentSpec s = sweep_spec(a);
  const auto r = run_experiments(s);
  std::printf("%-12s %-18s %3s %5s %8s %17s %9s %8s %6s\n", "model", "strategy", "k", "T", "alpha", "95% CI",
              "per_tok", "tv", "match");
  int errors = 0;
  for (const auto& c : r.cells) {
    if (c.status != "ok") {
      std::printf("%-12s %-18s %3d %5.2f error: %s\n", c.key.model.c_str(), c.key.strategy.c_str(), c.key.k,
                  c.key.temperature, c.error.c_str());
      ++errors;
      continue;
    }
    const auto& x = c.acceptance;
    std::printf("%-12s %-18s %3d %5.2f %8.4f [%6.4f, %6.4f] %9.4f %8.4f %6s\n", c.key.model.c_str(),
                c.key.strategy.c_str(), c.key.k, c.key.temperature, x.all_token_alpha, x.ci_low, x.ci_high,
                x.per_token_alpha, c.divergence.tv_mean,
                c.match_rate ? std::to_string(*c.match_rate).substr(0, 5).c_str() : "-");
  }
  std::cout << r.computed << " cells computed, " << r.reused << " reused, " << errors << " with errors\n"
            << "reports in " << s.output_dir << "\n";
  return 0;
}

struct PromptArgs {
  std::string corpus;
  int count = 100;
  int length = 64;
  std::uint64_t seed = 1;

  std::vector<TokenSeq> load() const {
    const TokenSeq c = load_corpus(corpus);
    return sample_prompts(c, count, length, Rng(seed).split(1).seed());
  }
};

int cmd_divergence(const std::string& ckpt, const std::string& strategy, const PromptArgs& p, double temperature,
                   int top_k, const std::string& out) {
  const Model model = load_checkpoint(ckpt);
  const auto s = DraftStrategy::parse(strategy);
  const auto d = divergence(model, build_mask(model.cfg, s), p.load(), temperature, top_k);
  json j{{"checkpoint", ckpt},     {"strategy", s.name()},           {"temperature", temperature},
         {"top_k", top_k},         {"tv_mean", d.tv_mean},           {"top1_agreement", d.top1_agreement},
         {"n_positions", d.n_positions}, {"n_prompts", p.count}};
  write_or_print(out, j.dump(2) + "\n");
  return 0;
}

int cmd_ablate(const std::string& ckpt, const std::string& corpus, int stride, int max_tokens,
               const ViabilityThresholds& t, const std::string& out, const std::string& ledger) {
  const Model model = load_checkpoint(ckpt);
  TokenSeq tokens = load_corpus(corpus);
  if (max_tokens > 0 && static_cast<int>(tokens.size()) > max_tokens) tokens.resize(static_cast<std::size_t>(max_tokens));
  const auto r = ablate_and_score(model, tokens, stride, t);
  json j{{"checkpoint", ckpt},        {"arch", to_string(model.cfg.arch)}, {"ppl_base", r.ppl_base},
         {"ppl_no_attn", r.ppl_no_attn}, {"ppl_ratio", r.ppl_ratio},        {"verdict", to_string(r.verdict)},
         {"viable_below", t.viable_below}, {"non_viable_above", t.non_viable_above}, {"tokens", tokens.size()}};
  write_or_print(out, j.dump(2) + "\n");
  if (!ledger.empty()) {
    const bool fresh = !std::filesystem::exists(ledger);
    std::ofstream l(ledger, std::ios::app);
    require(static_cast<bool>(l), "cannot append to " + ledger);
    if (fresh) l << "checkpoint,arch,ppl_base,ppl_no_attn,ppl_ratio,verdict\n";
    l << ckpt << "," << to_string(model.cfg.arch) << "," << r.ppl_base << "," << r.ppl_no_attn << "," << r.ppl_ratio
      << "," << to_string(r.verdict) << "\n";
  }
  return 0;
}

struct TheoryArgs {
  double alpha = 0.68;
  int k = 2;
  double ratio = 0.0;
  std::string checkpoint;
  std::string strategy = "component_only";
  int k_max = 8;
  bool all_token = false;
  double reference = 0.0;
  double context = 0.0;
  double kv_coef = 0.0;
  std::string out;
};

int cmd_theory(const TheoryArgs& a) {
  CostModel cm;
  if (!a.checkpoint.empty()) {
    const Model model = load_checkpoint(a.checkpoint);
    cm = flop_ratio(model.cfg, DraftStrategy::parse(a.strategy));
  } else {
    require(a.ratio > 0.0, "theory: give --ratio or --checkpoint");
    cm.cost_ratio = a.ratio;
    cm.draft_param_fraction = a.ratio;
    cm.notes = "user-supplied ratio";
  }
  const double per_token = a.all_token ? per_token_from_all_token(a.alpha, a.k) : a.alpha;
  json j;
  j["alpha"] = a.alpha;
  j["alpha_kind"] = a.all_token ? "all_token" : "per_token";
  j["k"] = a.k;
  j["cost_ratio"] = cm.cost_ratio;
  j["cost_notes"] = cm.notes;
  j["expected_tokens"] = expected_tokens(per_token, a.k);
  j["speedup"] = speedup(per_token, a.k, cm.cost_ratio);
  j["optimal_k"] = optimal_k(per_token, cm.cost_ratio, a.k_max);
  j["k_max"] = a.k_max;
  if (!a.all_token && a.alpha > 0.0) {
    // the same number read as an all-token rate for this k
    const double alt = per_token_from_all_token(a.alpha, a.k);
    j["speedup_if_all_token"] = speedup(alt, a.k, cm.cost_ratio);
  }
  if (a.reference > 0.0) {
    j["reference_speedup"] = a.reference;
    j["difference_from_reference"] = j["speedup"].get<double>() - a.reference;
  }
  if (a.kv_coef > 0.0) {
    j["context"] = a.context;
    j["kv_coefficient"] = a.kv_coef;
    j["speedup_at_context"] = speedup_at_context(per_token, a.k, cm, a.context, a.kv_coef);
  }
  write_or_print(a.out, j.dump(2) + "\n");
  return 0;
}

int cmd_verify(const std::vector<std::string>& ckpts, const std::vector<std::string>& strategies,
               const std::vector<int>& ks, const PromptArgs& p, int new_tokens) {
  const auto prompts = p.load();
  bool all_ok = true;
  for (const auto& path : ckpts) {
    const Model model = load_checkpoint(path);
    for (const auto& name : strategies) {
      const auto s = DraftStrategy::parse(name);
      if (s.kind == StrategyKind::component_only && model.cfg.arch == Arch::transformer) {
        std::cout << path << " " << s.name() << ": skipped (no alternative component)\n";
        continue;
      }
      for (int k : ks) {
        DecodeSettings ds;
        ds.k = k;
        ds.max_new_tokens = new_tokens;
        const double m = match_rate(model, s, prompts, ds);
        all_ok = all_ok && m == 1.0;
        std::printf("%s %s k=%d: match rate %.4f over %zu prompts\n", path.c_str(), s.name().c_str(), k, m,
                    prompts.size());
      }
    }
  }
  std::cout << (all_ok ? "lossless\n" : "MISMATCH\n");
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-speculative decoding for hybrid recurrent/attention language models"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a byte-level model and write a checkpoint");
  train_cmd->add_option("--arch", ta.arch, "parallel_hybrid | sequential_hybrid | transformer")->capture_default_str();
  train_cmd->add_option("--layers", ta.cfg.n_layers, "Number of layers")->capture_default_str();
  train_cmd->add_option("--d-model", ta.cfg.d_model, "Residual width")->capture_default_str();
  train_cmd->add_option("--heads", ta.cfg.n_heads, "Attention heads")->capture_default_str();
  train_cmd->add_option("--d-state", ta.cfg.d_state, "Recurrent state size per channel")->capture_default_str();
  train_cmd->add_option("--d-ff", ta.cfg.d_ff, "Feed-forward width (0 = 4 x d-model)")->capture_default_str();
  train_cmd->add_option("--context", ta.cfg.context_limit, "Context limit")->capture_default_str();
  train_cmd->add_option("--attn-every", ta.attn_every, "Sequential: one attention layer per this many")->capture_default_str();
  train_cmd->add_option("--pattern", ta.pattern, "Sequential: explicit layer pattern, e.g. LLLALLLA");
  train_cmd->add_option("--corpus", ta.tcfg.corpus_path, "Training text")->required();
  train_cmd->add_option("--steps", ta.tcfg.steps, "Optimizer steps")->capture_default_str();
  train_cmd->add_option("--batch", ta.tcfg.batch_size, "Sequences per batch")->capture_default_str();
  train_cmd->add_option("--seq-len", ta.tcfg.seq_len, "Tokens per sequence")->capture_default_str();
  train_cmd->add_option("--lr", ta.tcfg.learning_rate, "Learning rate")->capture_default_str();
  train_cmd->add_option("--warmup", ta.tcfg.warmup_steps, "Linear warmup steps")->capture_default_str();
  train_cmd->add_option("--clip", ta.tcfg.grad_clip, "Global gradient norm clip (0 = off)")->capture_default_str();
  train_cmd->add_option("--seed", ta.tcfg.seed, "Seed for initialization and batches")->capture_default_str();
  train_cmd->add_option("--log", ta.tcfg.log_path, "Loss CSV (default <out>.log.csv)");
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();

  SweepArgs sa;
  auto* run_cmd = app.add_subcommand("run", "Run a (model, strategy, k, T) sweep");
  run_cmd->add_option("--spec", sa.spec_file, "Experiment spec JSON (overrides the sweep flags)");
  run_cmd->add_option("--model", sa.models, "name=checkpoint, repeatable");
  run_cmd->add_option("--strategies", sa.strategies, "Draft strategies")->capture_default_str();
  run_cmd->add_option("--k", sa.ks, "Draft lengths")->capture_default_str();
  run_cmd->add_option("--temperatures", sa.temps, "Sampling temperatures")->capture_default_str();
  run_cmd->add_option("--corpus", sa.spec.prompt_corpus, "Text the prompts are drawn from");
  run_cmd->add_option("--prompts", sa.spec.prompt_count, "Prompts per cell")->capture_default_str();
  run_cmd->add_option("--prompt-len", sa.spec.prompt_length, "Prompt length in tokens")->capture_default_str();
  run_cmd->add_option("--divergence-prompts", sa.spec.divergence_prompts, "Prompts for TV / top-1")->capture_default_str();
  run_cmd->add_option("--new-tokens", sa.spec.max_new_tokens, "Generated tokens per prompt")->capture_default_str();
  run_cmd->add_option("--seed", sa.spec.seed, "Sweep seed")->capture_default_str();
  run_cmd->add_option("--resamples", sa.spec.bootstrap_resamples, "Bootstrap resamples")->capture_default_str();
  run_cmd->add_flag("--no-timing", sa.no_timing, "Skip wall-clock measurement");
  run_cmd->add_option("--out", sa.spec.output_dir, "Output directory");

  std::string dv_ckpt, dv_strategy = "component_only", dv_out;
  PromptArgs dv_prompts;
  double dv_temp = 1.0;
  int dv_topk = 100;
  auto* div_cmd = app.add_subcommand("divergence", "Draft vs target TV distance and top-1 agreement");
  div_cmd->add_option("--checkpoint", dv_ckpt, "Checkpoint")->required();
  div_cmd->add_option("--strategy", dv_strategy, "Draft strategy")->capture_default_str();
  div_cmd->add_option("--corpus", dv_prompts.corpus, "Text the prompts are drawn from")->required();
  div_cmd->add_option("--prompts", dv_prompts.count, "Prompts")->capture_default_str();
  div_cmd->add_option("--prompt-len", dv_prompts.length, "Prompt length")->capture_default_str();
  div_cmd->add_option("--seed", dv_prompts.seed, "Prompt seed")->capture_default_str();
  div_cmd->add_option("--temperature", dv_temp, "Softmax temperature")->capture_default_str();
  div_cmd->add_option("--top-k", dv_topk, "Top-k restriction")->capture_default_str();
  div_cmd->add_option("--out", dv_out, "JSON output (default stdout)");

  std::string ab_ckpt, ab_corpus, ab_out, ab_ledger;
  int ab_stride = 0, ab_max = 0;
  ViabilityThresholds ab_t;
  auto* ab_cmd = app.add_subcommand("ablate", "Perplexity with and without attention, and the viability verdict");
  ab_cmd->add_option("--checkpoint", ab_ckpt, "Checkpoint")->required();
  ab_cmd->add_option("--corpus", ab_corpus, "Evaluation text")->required();
  ab_cmd->add_option("--stride", ab_stride, "Window stride (0 = context)")->capture_default_str();
  ab_cmd->add_option("--max-tokens", ab_max, "Evaluate at most this many tokens (0 = all)")->capture_default_str();
  ab_cmd->add_option("--viable-below", ab_t.viable_below, "Ratio below which drafting is viable")->capture_default_str();
  ab_cmd->add_option("--non-viable-above", ab_t.non_viable_above, "Ratio above which it is not")->capture_default_str();
  ab_cmd->add_option("--out", ab_out, "JSON output (default stdout)");
  ab_cmd->add_option("--ledger", ab_ledger, "CSV to append a row to");

  TheoryArgs th;
  auto* th_cmd = app.add_subcommand("theory", "Expected tokens, speedup and best draft length");
  th_cmd->add_option("--alpha", th.alpha, "Acceptance rate")->capture_default_str();
  th_cmd->add_option("--k", th.k, "Draft length")->capture_default_str();
  th_cmd->add_option("--ratio", th.ratio, "Draft/target cost ratio");
  th_cmd->add_option("--checkpoint", th.checkpoint, "Derive the ratio from this checkpoint by parameter count");
  th_cmd->add_option("--strategy", th.strategy, "Strategy for --checkpoint")->capture_default_str();
  th_cmd->add_option("--k-max", th.k_max, "Largest k for the optimum search")->capture_default_str();
  th_cmd->add_flag("--all-token", th.all_token, "Treat --alpha as the all-k rate and convert per token");
  th_cmd->add_option("--reference", th.reference, "Externally quoted speedup to report alongside");
  th_cmd->add_option("--context", th.context, "Context length for the KV-cache term");
  th_cmd->add_option("--kv-coef", th.kv_coef, "Per-token KV read cost per context token (0 = off)");
  th_cmd->add_option("--out", th.out, "JSON output (default stdout)");

  std::string pd_report, pd_out;
  auto* pd_cmd = app.add_subcommand("plot-data", "Long-format alpha-vs-k CSV from a sweep");
  pd_cmd->add_option("--report", pd_report, "Sweep output directory")->required();
  pd_cmd->add_option("--out", pd_out, "CSV output (default <report>/plot.csv)");

  std::vector<std::string> vl_ckpts, vl_strats{"identity", "component_only", "layer_skip:0.33", "early_exit:0.5"};
  std::vector<int> vl_ks{2, 4, 8};
  PromptArgs vl_prompts;
  int vl_new = 64;
  auto* vl_cmd = app.add_subcommand("verify-lossless", "Check greedy speculative output equals autoregressive output");
  vl_cmd->add_option("--checkpoint", vl_ckpts, "Checkpoints, repeatable")->required();
  vl_cmd->add_option("--strategies", vl_strats, "Draft strategies")->capture_default_str();
  vl_cmd->add_option("--k", vl_ks, "Draft lengths")->capture_default_str();
  vl_cmd->add_option("--corpus", vl_prompts.corpus, "Text the prompts are drawn from")->required();
  vl_cmd->add_option("--prompts", vl_prompts.count, "Prompts")->capture_default_str();
  vl_cmd->add_option("--prompt-len", vl_prompts.length, "Prompt length")->capture_default_str();
  vl_cmd->add_option("--new-tokens", vl_new, "Generated tokens per prompt")->capture_default_str();
  vl_cmd->add_option("--seed", vl_prompts.seed, "Prompt seed")->capture_default_str();

  std::size_t gc_bytes = 400000;
  std::uint64_t gc_seed = 1;
  std::string gc_out;
  auto* gc_cmd = app.add_subcommand("gen-corpus", "Write the deterministic synthetic text corpus");
  gc_cmd->add_option("--bytes", gc_bytes, "Minimum size")->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  gc_cmd->add_option("--out", gc_out, "Output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*run_cmd) return cmd_run(sa);
    if (*div_cmd) return cmd_divergence(dv_ckpt, dv_strategy, dv_prompts, dv_temp, dv_topk, dv_out);
    if (*ab_cmd) return cmd_ablate(ab_ckpt, ab_corpus, ab_stride, ab_max, ab_t, ab_out, ab_ledger);
    if (*th_cmd) return cmd_theory(th);
    if (*pd_cmd) {
      emit_plot_data(load_report(pd_report), pd_out.empty() ? std::filesystem::path(pd_report) / "plot.csv" : std::filesystem::path(pd_out));
      return 0;
    }
    if (*vl_cmd) return cmd_verify(vl_ckpts, vl_strats, vl_ks, vl_prompts, vl_new);
    if (*gc_cmd) {
      write_or_print(gc_out, synthetic_corpus(gc_bytes, gc_seed));
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
