// Pipeline driver: each subcommand runs one stage, reading the previous
// stage's artifacts and writing its own. Re-running a stage with the same
// inputs and seed reproduces its outputs byte for byte.

#include <cstdio>
#include <memory>
#include <string>

#include <CLI11.hpp>

#include "redrag/mock_lm.hpp"
#include "redrag/pipeline.hpp"
#include "redrag/remote_gateway.hpp"

namespace {

using namespace redrag;

std::unique_ptr<Gateway> make_gateway(const PipelineConfig& cfg,
                                      const FixtureBundle& fx) {
  if (cfg.backend == BackendKind::mock)
    return std::make_unique<MockGateway>(fx.table, HashEmbedder(cfg.embed_dim));
  return std::make_unique<RemoteGateway>(cfg.gateway_config());
}

struct Ctx {
  PipelinePaths paths;
  PipelineConfig cfg;
  FixtureBundle fx;
  std::unique_ptr<Gateway> gw;
  std::unique_ptr<Embedder> embedder;

  nlohmann::json stamp() const { return provenance(cfg); }
  std::string attrs() const { return provenance_attrs(cfg); }
};

Ctx make_ctx(const PipelinePaths& paths, const PipelineConfig& cfg) {
  Ctx ctx{paths, cfg, load_fixture_bundle(paths, cfg.backend == BackendKind::mock),
          nullptr, nullptr};
  ctx.gw = make_gateway(ctx.cfg, ctx.fx);
  ctx.embedder = std::make_unique<GatewayEmbedder>(*ctx.gw);
  if (ctx.embedder->dim() != ctx.cfg.embed_dim)
    throw ConfigError("backend embeds at dim " +
                          std::to_string(ctx.embedder->dim()) +
                          " but config says " + std::to_string(ctx.cfg.embed_dim),
                      "pipeline.embed_dim");
  ctx.paths.ensure_out();
  return ctx;
}

void cmd_extract(Ctx& ctx) {
  ImportanceReport rep = stage_extract(ctx.fx, *ctx.gw, ctx.cfg);
  save_importance(rep, ctx.paths, ctx.cfg);
  std::printf("extract: %zu group(s), %zu trigger token(s) -> %s\n",
              rep.selected_groups.size(), rep.trigger_tokens.size(),
              ctx.paths.importance().c_str());
}

void cmd_synthesize(Ctx& ctx) {
  ImportanceReport rep = load_importance(ctx.paths);
  auto triplets =
      stage_synthesize(ctx.fx, rep.trigger_tokens, *ctx.embedder, ctx.cfg);
  save_triplets(triplets, ctx.paths.triplets(), ctx.stamp());
  std::printf("synthesize: %zu triplet(s) -> %s\n", triplets.size(),
              ctx.paths.triplets().c_str());
}

void cmd_train(Ctx& ctx) {
  require_artifact(ctx.paths.triplets());
  auto triplets = load_triplets(ctx.paths.triplets());
  TrainResult trained = stage_train(triplets, *ctx.embedder, ctx.cfg);
  save_head(trained.head, ctx.paths.head(), ctx.attrs());
  save_reranker_trace(trained, ctx.paths, ctx.cfg);
  std::printf("train-reranker: loss %s -> %s over %zu epoch(s) -> %s\n",
              format_double(trained.loss_trace.front()).c_str(),
              format_double(trained.loss_trace.back()).c_str(),
              trained.loss_trace.size() - 1, ctx.paths.head().c_str());
}

void cmd_tighten(Ctx& ctx) {
  ImportanceReport rep = load_importance(ctx.paths);
  TightenOutput out = stage_tighten(ctx.fx, rep.trigger_tokens, *ctx.embedder, ctx.cfg);
  out.staging.save(ctx.paths.staging(), ctx.attrs());
  save_estar(out.result, rep.trigger_tokens, ctx.paths, ctx.cfg);
  save_trajectory(out.result, ctx.paths.trajectory(), ctx.attrs());
  std::printf("tighten: %zu iteration(s), %zu key row(s) -> %s\n",
              out.result.iterations_run, out.result.e_star.size(),
              ctx.paths.estar().c_str());
}

void cmd_attack(Ctx& ctx) {
  ImportanceReport rep = load_importance(ctx.paths);
  TriggerMatrix e_star = load_estar(ctx.paths);
  require_artifact(ctx.paths.head());
  ScoringHead head = load_head(ctx.paths.head());
  AttackOutput out = stage_attack(ctx.fx, e_star, rep.trigger_tokens,
                                  *ctx.embedder, *ctx.gw, ctx.cfg, &head);
  save_episodes(out.clean, ctx.paths.episodes_clean(), ctx.stamp());
  save_episodes(out.attacked, ctx.paths.episodes_attacked(), ctx.stamp());
  save_episodes(out.random_baseline, ctx.paths.episodes_random(), ctx.stamp());
  std::printf("attack: 3x%zu episode(s) -> %s\n", out.clean.size(),
              ctx.paths.out.c_str());
}

void cmd_evaluate(Ctx& ctx) {
  for (const auto& p : {ctx.paths.episodes_clean(), ctx.paths.episodes_attacked(),
                        ctx.paths.episodes_random()})
    require_artifact(p);
  auto clean = load_episodes(ctx.paths.episodes_clean());
  auto attacked = load_episodes(ctx.paths.episodes_attacked());
  auto random_baseline = load_episodes(ctx.paths.episodes_random());
  EvaluationOutput ev =
      stage_evaluate(clean, attacked, random_baseline, *ctx.gw, ctx.cfg);
  save_metrics(ev, ctx.paths, ctx.cfg);
  std::printf("evaluate: attacked ASR-R %s%% vs random %s%% -> %s\n",
              ev.attacked.asr_r ? format_double(*ev.attacked.asr_r).c_str() : "n/a",
              ev.random_baseline.asr_r
                  ? format_double(*ev.random_baseline.asr_r).c_str()
                  : "n/a",
              ctx.paths.metrics().c_str());
}

void cmd_report(Ctx& ctx) {
  ImportanceReport rep = load_importance(ctx.paths);
  EvaluationOutput ev = load_evaluation(ctx.paths);
  save_report(render_report(ev, rep.trigger_tokens, ctx.cfg), ctx.paths);
  std::printf("report -> %s\n", ctx.paths.report().c_str());
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"retrieval-poisoning pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string fixtures_dir = "fixtures";
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;

  app.add_option("--config", config_path, "config file (key = value, sectioned)");
  app.add_option("--fixtures", fixtures_dir, "input fixture directory");
  app.add_option("--out-dir", out_dir, "artifact output directory");
  app.add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });

  struct Sub {
    const char* name;
    const char* help;
    void (*run)(Ctx&);
  };
  const Sub subs[] = {
      {"extract", "select trigger tokens from the first task prompt", cmd_extract},
      {"synthesize", "build the contrastive triplet set", cmd_synthesize},
      {"train-reranker", "fit the answer-scoring head", cmd_train},
      {"tighten", "optimize poison key vectors", cmd_tighten},
      {"attack", "run clean / attacked / random-key episode batches", cmd_attack},
      {"evaluate", "compute metrics and defense outcomes", cmd_evaluate},
      {"report", "render the markdown report", cmd_report},
  };
  void (*chosen)(Ctx&) = nullptr;
  for (const auto& s : subs)
    app.add_subcommand(s.name, s.help)->callback([&chosen, &s] { chosen = s.run; });

  CLI11_PARSE(app, argc, argv);

  try {
    PipelineConfig cfg;
    if (!config_path.empty()) cfg = PipelineConfig::load(config_path);
    if (seed_set) cfg.seed = seed;
    cfg.validate();
    PipelinePaths paths;
    paths.fixtures = fixtures_dir;
    paths.out = out_dir;
    Ctx ctx = make_ctx(paths, cfg);
    chosen(ctx);
    return 0;
  } catch (const redrag::MissingArtifactError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const redrag::ConfigError& e) {
    if (e.key().empty())
      std::fprintf(stderr, "config error: %s\n", e.what());
    else
      std::fprintf(stderr, "config error [%s]: %s\n", e.key().c_str(), e.what());
    return 3;
  } catch (const redrag::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
