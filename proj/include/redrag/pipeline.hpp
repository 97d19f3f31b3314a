#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "redrag/chunker.hpp"
#include "redrag/config.hpp"
#include "redrag/corpus.hpp"
#include "redrag/data_factory.hpp"
#include "redrag/harness.hpp"
#include "redrag/importance.hpp"
#include "redrag/kmeans.hpp"
#include "redrag/lexicon.hpp"
#include "redrag/mock_lm.hpp"
#include "redrag/reranker.hpp"
#include "redrag/tightening.hpp"

namespace redrag {

// Input fixture and output artifact locations for one pipeline run. Every
// stage reads and writes through this so the CLI and tests agree on layout.
struct PipelinePaths {
  std::string fixtures = "fixtures";
  std::string out = "out";

  std::string corpus() const { return fixtures + "/corpus.v1"; }
  std::string tasks() const { return fixtures + "/tasks.v1"; }
  std::string lexicon() const { return fixtures + "/lex.v1"; }
  std::string pos() const { return fixtures + "/pos.v1"; }
  std::string vocab() const { return fixtures + "/vocab.v1"; }
  std::string mocklm() const { return fixtures + "/mocklm.v1"; }

  std::string importance() const { return out + "/importance.json"; }
  std::string triplets() const { return out + "/triplets.jsonl"; }
  std::string head() const { return out + "/head.v1"; }
  std::string reranker_trace() const { return out + "/reranker_trace.csv"; }
  std::string staging() const { return out + "/staging.memstore"; }
  std::string estar() const { return out + "/estar.memstore"; }
  std::string trajectory() const { return out + "/trajectory.csv"; }
  std::string episodes_clean() const { return out + "/episodes_clean.jsonl"; }
  std::string episodes_attacked() const { return out + "/episodes_attacked.jsonl"; }
  std::string episodes_random() const { return out + "/episodes_random.jsonl"; }
  std::string metrics() const { return out + "/metrics.json"; }
  std::string report() const { return out + "/report.md"; }

  void ensure_out() const { std::filesystem::create_directories(out); }
};

inline void require_artifact(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path);
}

// All bundled fixture inputs, loaded once per run.
struct FixtureBundle {
  Lexicon lexicon;
  PosLexicon pos;
  SubwordVocab vocab;
  std::vector<CorpusDoc> docs;
  std::vector<Task> tasks;
  MockTable table;
};

inline FixtureBundle load_fixture_bundle(const PipelinePaths& p,
                                         bool need_mock_table = true) {
  for (const auto& f : {p.lexicon(), p.pos(), p.vocab(), p.corpus(), p.tasks()})
    require_artifact(f);
  FixtureBundle b;
  b.lexicon = Lexicon::load(p.lexicon());
  b.pos = PosLexicon::load(p.pos());
  b.vocab = SubwordVocab::load(p.vocab());
  b.docs = load_corpus(p.corpus());
  b.tasks = load_tasks(p.tasks());
  if (need_mock_table) {
    require_artifact(p.mocklm());
    b.table = MockTable::load(p.mocklm());
  }
  return b;
}

// Provenance stamp carried by every artifact this pipeline writes.
inline nlohmann::json provenance(const PipelineConfig& cfg) {
  return {{"config_hash", cfg.config_hash()}, {"tool_version", kToolVersion}};
}

inline std::string provenance_attrs(const PipelineConfig& cfg) {
  return "config=" + cfg.config_hash() + " version=" + std::string(kToolVersion);
}

namespace detail {

// Stage sub-seeds derived from the global seed; the tags keep stages
// statistically independent without new config surface.
inline std::uint64_t stage_seed(const PipelineConfig& cfg, std::uint64_t tag) {
  return mix_seed(cfg.seed, tag);
}
inline constexpr std::uint64_t kSeedEpisodes = 0x65706973ULL; // "epis"
inline constexpr std::uint64_t kSeedClusters = 0x636c7573ULL; // "clus"
inline constexpr std::uint64_t kSeedBaseline = 0x72616e64ULL; // "rand"
inline constexpr std::uint64_t kSeedDefense = 0x7261646cULL;  // "radl"

} // namespace detail

// Trigger extraction on the first task prompt: POS-pattern chunking, group
// and token occlusion probes against the gateway, Top-K selection.
inline ImportanceReport stage_extract(const FixtureBundle& fx,
                                      const Gateway& gw,
                                      const PipelineConfig& cfg) {
  cfg.validate();
  if (fx.tasks.empty()) throw DomainError("stage_extract: no tasks");
  const std::string& prompt = fx.tasks.front().prompt;
  TokenAlignment alignment = tokenize_with_offsets(prompt, fx.vocab);
  PosPatternChunker chunker(fx.pos);
  auto groups = build_groups(alignment, chunker.chunk(prompt));
  return select_triggers(alignment, groups, gw, cfg.trigger_config());
}

inline void save_importance(const ImportanceReport& report,
                            const PipelinePaths& paths,
                            const PipelineConfig& cfg) {
  paths.ensure_out();
  nlohmann::json j = report.to_json();
  const nlohmann::json stamp = provenance(cfg);
  for (const auto& [k, v] : stamp.items()) j[k] = v;
  std::ofstream f(paths.importance(), std::ios::binary);
  if (!f) throw ConfigError("cannot write importance report: " + paths.importance());
  f << j.dump(2) << "\n";
}

inline ImportanceReport load_importance(const PipelinePaths& paths) {
  require_artifact(paths.importance());
  return ImportanceReport::load(paths.importance());
}

// Triplet factory over the task contexts against the benign corpus store.
inline std::vector<Triplet> stage_synthesize(const FixtureBundle& fx,
                                             const std::vector<std::string>& triggers,
                                             const Embedder& embedder,
                                             const PipelineConfig& cfg,
                                             std::vector<std::string>* log = nullptr) {
  cfg.validate();
  MemoryStore store = build_benign_store(fx.docs, embedder);
  std::vector<std::string> contexts;
  for (const auto& t : fx.tasks) contexts.push_back(t.prompt);
  return synthesize(contexts, triggers, store, fx.lexicon,
                    cfg.factory_config(), log);
}

inline TrainResult stage_train(const std::vector<Triplet>& triplets,
                               const Embedder& embedder,
                               const PipelineConfig& cfg) {
  cfg.validate();
  return train_reranker(triplets, embedder, cfg.train_config());
}

inline void save_reranker_trace(const TrainResult& trained,
                                const PipelinePaths& paths,
                                const PipelineConfig& cfg) {
  std::ofstream f(paths.reranker_trace(), std::ios::binary);
  if (!f) throw ConfigError("cannot write reranker trace: " + paths.reranker_trace());
  f << "# " << provenance_attrs(cfg) << "\n";
  f << "epoch,mean_pairwise_loss\n";
  for (std::size_t i = 0; i < trained.loss_trace.size(); ++i)
    f << i << "," << format_double(trained.loss_trace[i]) << "\n";
}

struct TightenOutput {
  MemoryStore staging;      // benign corpus + staged poison candidates
  std::vector<Vec> centers; // k-means over the benign keys
  TighteningResult result;
};

// Staging store: the benign corpus plus, per task context, the synonym-swapped
// poison-key rewrites and the raw trigger-bearing context they imitate. Under
// a semantic encoder the two coincide; under the hash embedder only the raw
// context carries the trigger features, so staging both keeps the optimized
// rows aligned with what runtime queries actually look like.
inline MemoryStore build_staging_store(const FixtureBundle& fx,
                                       const std::vector<std::string>& triggers,
                                       const Embedder& embedder,
                                       const PipelineConfig& cfg) {
  MemoryStore store = build_benign_store(fx.docs, embedder);
  std::size_t n = 0;
  auto stage = [&](const std::string& text) {
    MemoryEntry e;
    e.id = "stage-" + std::to_string(n++);
    e.label = EntryLabel::poison;
    e.key = embedder.embed(text);
    e.value = text;
    store.insert(std::move(e));
  };
  for (const auto& task : fx.tasks) {
    for (std::size_t v = 0; v < cfg.staging_variants; ++v)
      stage(poison_key(task.prompt, triggers, fx.lexicon, v).text);
    stage(task.prompt);
  }
  return store;
}

inline TightenOutput stage_tighten(const FixtureBundle& fx,
                                   const std::vector<std::string>& triggers,
                                   const Embedder& embedder,
                                   const PipelineConfig& cfg) {
  cfg.validate();
  if (triggers.empty()) throw DomainError("stage_tighten: no triggers");
  TightenOutput out{build_staging_store(fx, triggers, embedder, cfg), {}, {}};
  std::vector<Vec> benign_keys;
  for (const auto& e : out.staging.entries_with_label(EntryLabel::benign))
    benign_keys.push_back(e.key);
  out.centers = kmeans(benign_keys, cfg.n_clusters,
                       detail::stage_seed(cfg, detail::kSeedClusters))
                    .centers;
  TriggerMatrix e0;
  for (const auto& t : triggers) e0.push_back(embedder.embed(t));
  out.result = optimize(e0, out.staging, out.centers, cfg.tightening_config());
  return out;
}

// E* rows persisted as a poison-labeled vector store; the value column keeps
// the trigger token each row started from.
inline void save_estar(const TighteningResult& result,
                       const std::vector<std::string>& triggers,
                       const PipelinePaths& paths, const PipelineConfig& cfg) {
  if (result.e_star.empty()) throw DomainError("save_estar: empty matrix");
  MemoryStore store(result.e_star.front().size());
  for (std::size_t i = 0; i < result.e_star.size(); ++i) {
    MemoryEntry e;
    e.id = "trigger-" + std::to_string(i);
    e.label = EntryLabel::poison;
    e.key = result.e_star[i];
    e.value = i < triggers.size() ? triggers[i] : "";
    store.insert(std::move(e));
  }
  store.save(paths.estar(), provenance_attrs(cfg));
}

inline TriggerMatrix load_estar(const PipelinePaths& paths) {
  require_artifact(paths.estar());
  MemoryStore store = MemoryStore::load(paths.estar());
  TriggerMatrix rows;
  for (const auto& e : store.snapshot()) rows.push_back(e.key);
  if (rows.empty()) throw ConfigError("estar store is empty: " + paths.estar());
  return rows;
}

struct AttackOutput {
  std::vector<Episode> clean;
  std::vector<Episode> attacked;
  std::vector<Episode> random_baseline;
};

inline std::vector<Episode> run_episode_batch(const FixtureBundle& fx,
                                              const MemoryStore& store,
                                              const Embedder& embedder,
                                              const Gateway& gw,
                                              const PipelineConfig& cfg,
                                              const ScoringHead* head = nullptr) {
  if (fx.tasks.empty()) throw DomainError("run_episode_batch: no tasks");
  DeterministicTiming timing;
  HarnessConfig hc = cfg.harness_config();
  std::uint64_t base = detail::stage_seed(cfg, detail::kSeedEpisodes);
  std::vector<Episode> out;
  out.reserve(cfg.n_episodes);
  for (std::size_t i = 0; i < cfg.n_episodes; ++i) {
    HarnessConfig ep_cfg = hc;
    ep_cfg.gateway.seed = mix_seed(base, i);
    out.push_back(run_episode(fx.tasks[i % fx.tasks.size()], store, embedder,
                              gw, ep_cfg, timing, head));
  }
  return out;
}

// Attack run plus its two controls: the untouched store and a store poisoned
// with random unit keys carrying the same payload values.
inline AttackOutput stage_attack(const FixtureBundle& fx,
                                 const TriggerMatrix& e_star,
                                 const std::vector<std::string>& triggers,
                                 const Embedder& embedder, const Gateway& gw,
                                 const PipelineConfig& cfg,
                                 const ScoringHead* head = nullptr) {
  cfg.validate();
  if (e_star.empty()) throw DomainError("stage_attack: empty trigger matrix");
  MemoryStore clean_store = build_benign_store(fx.docs, embedder);
  std::vector<std::string> values;
  for (std::size_t i = 0; i < e_star.size(); ++i)
    values.push_back(poison_value(triggers, fx.lexicon, i).text);
  MemoryStore attacked_store = inject_poison(clean_store, e_star, values);
  Rng rng(detail::stage_seed(cfg, detail::kSeedBaseline));
  TriggerMatrix random_rows =
      random_unit_rows(e_star.size(), e_star.front().size(), rng);
  MemoryStore random_store = inject_poison(clean_store, random_rows, values);

  AttackOutput out;
  out.clean = run_episode_batch(fx, clean_store, embedder, gw, cfg, head);
  out.attacked = run_episode_batch(fx, attacked_store, embedder, gw, cfg, head);
  out.random_baseline =
      run_episode_batch(fx, random_store, embedder, gw, cfg, head);
  return out;
}

struct DefenseSummary {
  std::size_t ppl_pairs = 0;
  std::size_t ppl_decisions_differ = 0; // attacked vs clean on the same prompt
  std::size_t ppl_clean_rejections = 0;
  std::size_t ppl_attacked_rejections = 0;
  std::size_t ra_pairs = 0;
  std::size_t ra_clean_flagged = 0;
  std::size_t ra_attacked_flagged = 0;
};

// ppl_filter sees only the user prompt, so its decisions must agree between
// the clean and attacked runs; ra_llm sees the assembled input and may not.
inline DefenseSummary evaluate_defenses(const std::vector<Episode>& clean,
                                        const std::vector<Episode>& attacked,
                                        const Gateway& gw,
                                        const PipelineConfig& cfg) {
  if (clean.size() != attacked.size())
    throw ContractError("evaluate_defenses: episode logs differ in length");
  DefenseSummary d;
  GatewayConfig gcfg = cfg.gateway_config();
  for (std::size_t i = 0; i < clean.size(); ++i) {
    PplDecision a = ppl_filter(gw, clean[i].prompt, cfg.ppl_threshold, gcfg);
    PplDecision b = ppl_filter(gw, attacked[i].prompt, cfg.ppl_threshold, gcfg);
    ++d.ppl_pairs;
    if (a.rejected != b.rejected) ++d.ppl_decisions_differ;
    if (a.rejected) ++d.ppl_clean_rejections;
    if (b.rejected) ++d.ppl_attacked_rejections;
  }
  if (cfg.judge_rubric.empty()) return d; // ra_llm needs a rejection rubric
  RaLlmConfig rcfg;
  rcfg.n_variants = cfg.ra_variants;
  rcfg.drop_ratio = cfg.ra_drop_ratio;
  rcfg.flag_threshold = cfg.ra_flag_threshold;
  rcfg.rejection_rubric = cfg.judge_rubric;
  rcfg.gateway = gcfg;
  std::uint64_t base = detail::stage_seed(cfg, detail::kSeedDefense);
  std::size_t n = std::min(cfg.ra_episodes, clean.size());
  for (std::size_t i = 0; i < n; ++i) {
    rcfg.seed = mix_seed(base, i);
    ++d.ra_pairs;
    if (ra_llm_defense(gw, clean[i].assembled_input, rcfg).flagged)
      ++d.ra_clean_flagged;
    if (ra_llm_defense(gw, attacked[i].assembled_input, rcfg).flagged)
      ++d.ra_attacked_flagged;
  }
  return d;
}

struct EvaluationOutput {
  MetricsReport clean;
  MetricsReport attacked;
  MetricsReport random_baseline;
  DefenseSummary defenses;
};

inline EvaluationOutput stage_evaluate(const std::vector<Episode>& clean,
                                       const std::vector<Episode>& attacked,
                                       const std::vector<Episode>& random_baseline,
                                       const Gateway& gw,
                                       const PipelineConfig& cfg) {
  cfg.validate();
  EvaluationOutput out;
  out.clean = compute_metrics(clean);
  out.attacked = compute_metrics(attacked);
  out.random_baseline = compute_metrics(random_baseline);
  out.defenses = evaluate_defenses(clean, attacked, gw, cfg);
  return out;
}

inline nlohmann::json evaluation_to_json(const EvaluationOutput& ev,
                                         const PipelineConfig& cfg) {
  const DefenseSummary& d = ev.defenses;
  nlohmann::json j = {
      {"format", "metrics.v1"},
      {"clean", metrics_to_json(ev.clean)},
      {"attacked", metrics_to_json(ev.attacked)},
      {"random_baseline", metrics_to_json(ev.random_baseline)},
      {"defenses",
       {{"ppl_filter",
         {{"threshold", cfg.ppl_threshold},
          {"pairs", d.ppl_pairs},
          {"decisions_differ", d.ppl_decisions_differ},
          {"clean_rejections", d.ppl_clean_rejections},
          {"attacked_rejections", d.ppl_attacked_rejections}}},
        {"ra_llm",
         {{"pairs", d.ra_pairs},
          {"clean_flagged", d.ra_clean_flagged},
          {"attacked_flagged", d.ra_attacked_flagged}}}}}};
  const nlohmann::json stamp = provenance(cfg);
  for (const auto& [k, v] : stamp.items()) j[k] = v;
  return j;
}

inline void save_metrics(const EvaluationOutput& ev, const PipelinePaths& paths,
                         const PipelineConfig& cfg) {
  paths.ensure_out();
  std::ofstream f(paths.metrics(), std::ios::binary);
  if (!f) throw ConfigError("cannot write metrics: " + paths.metrics());
  f << evaluation_to_json(ev, cfg).dump(2) << "\n";
}

inline EvaluationOutput load_evaluation(const PipelinePaths& paths) {
  require_artifact(paths.metrics());
  std::ifstream f(paths.metrics(), std::ios::binary);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded())
    throw ConfigError("metrics file is not valid JSON: " + paths.metrics());
  EvaluationOutput ev;
  ev.clean = metrics_from_json(j.at("clean"));
  ev.attacked = metrics_from_json(j.at("attacked"));
  ev.random_baseline = metrics_from_json(j.at("random_baseline"));
  const auto& d = j.at("defenses");
  const auto& p = d.at("ppl_filter");
  ev.defenses.ppl_pairs = p.at("pairs").get<std::size_t>();
  ev.defenses.ppl_decisions_differ = p.at("decisions_differ").get<std::size_t>();
  ev.defenses.ppl_clean_rejections = p.at("clean_rejections").get<std::size_t>();
  ev.defenses.ppl_attacked_rejections = p.at("attacked_rejections").get<std::size_t>();
  const auto& ra = d.at("ra_llm");
  ev.defenses.ra_pairs = ra.at("pairs").get<std::size_t>();
  ev.defenses.ra_clean_flagged = ra.at("clean_flagged").get<std::size_t>();
  ev.defenses.ra_attacked_flagged = ra.at("attacked_flagged").get<std::size_t>();
  return ev;
}

inline std::string render_report(const EvaluationOutput& ev,
                                 const std::vector<std::string>& triggers,
                                 const PipelineConfig& cfg) {
  std::string md;
  md += "# Poisoning run report\n\n";
  md += "- config hash: `" + cfg.config_hash() + "`\n";
  md += "- tool version: " + std::string(kToolVersion) + "\n";
  md += "- seed: " + std::to_string(cfg.seed) + "\n";
  md += "- episodes per run: " + std::to_string(cfg.n_episodes) + "\n";
  md += "- triggers:";
  for (const auto& t : triggers) md += " `" + t + "`";
  md += "\n\n";
  md += "## Clean store\n\n" + metrics_markdown(ev.clean) + "\n";
  md += "## Attacked store (tightened keys)\n\n" + metrics_markdown(ev.attacked) + "\n";
  md += "## Random-key baseline\n\n" + metrics_markdown(ev.random_baseline) + "\n";
  md += "## Attack summary\n\n";
  double atk = ev.attacked.asr_r.value_or(0.0);
  double rnd = ev.random_baseline.asr_r.value_or(0.0);
  md += "- tightened-key ASR-R " + format_double(atk) + "% vs random-key " +
        format_double(rnd) + "%" +
        (atk > rnd ? " (tightening wins)" : " (no gain)") + "\n\n";
  const DefenseSummary& d = ev.defenses;
  md += "## Defenses\n\n";
  md += "| defense | clean | attacked | note |\n";
  md += "|---------|-------|----------|------|\n";
  md += "| ppl_filter rejections | " + std::to_string(d.ppl_clean_rejections) +
        "/" + std::to_string(d.ppl_pairs) + " | " +
        std::to_string(d.ppl_attacked_rejections) + "/" +
        std::to_string(d.ppl_pairs) + " | " +
        std::to_string(d.ppl_decisions_differ) +
        " decision(s) differ (prompts are identical) |\n";
  md += "| ra_llm flags | " + std::to_string(d.ra_clean_flagged) + "/" +
        std::to_string(d.ra_pairs) + " | " +
        std::to_string(d.ra_attacked_flagged) + "/" +
        std::to_string(d.ra_pairs) + " | assembled inputs differ |\n";
  return md;
}

inline void save_report(const std::string& markdown, const PipelinePaths& paths) {
  paths.ensure_out();
  std::ofstream f(paths.report(), std::ios::binary);
  if (!f) throw ConfigError("cannot write report: " + paths.report());
  f << markdown;
}

} // namespace redrag
