#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "redrag/alignment.hpp"
#include "redrag/errors.hpp"
#include "redrag/gateway.hpp"
#include "redrag/text.hpp"

namespace redrag {

// Placeholder written over a masked span. Replacement (not deletion) keeps the
// unmasked remainder byte-identical and the decode steps aligned.
inline constexpr const char* kMaskToken = "MASK";

inline std::string mask_span(const std::string& text, std::size_t begin,
                             std::size_t end) {
  if (end > text.size() || begin > text.size())
    throw DomainError("mask_span: span [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") out of bounds");
  if (begin >= end) return text; // empty span: no-op, caller skips the probe
  return text.substr(0, begin) + kMaskToken + text.substr(end);
}

inline std::string mask_span(const TokenAlignment& alignment,
                             const PhraseGroup& group) {
  return mask_span(alignment.text, group.begin, group.end);
}

inline double sequence_logprob(const GenerationTrace& trace) {
  return trace.total_logprob;
}

// Log-probability drop caused by the mask. In forced mode both traces score
// the same target sequence, so their lengths must agree.
inline double delta_logprob(const GenerationTrace& base,
                            const GenerationTrace& masked,
                            bool forced_mode = false) {
  if (forced_mode && base.emitted_tokens.size() != masked.emitted_tokens.size())
    throw ContractError("delta_logprob: forced traces disagree on target length (" +
                        std::to_string(base.emitted_tokens.size()) + " vs " +
                        std::to_string(masked.emitted_tokens.size()) + ")");
  return base.total_logprob - masked.total_logprob;
}

// KL over the truncated candidate set of P; tokens absent from Q contribute
// with probability 0, and epsilon keeps the logarithm finite.
inline double stepwise_kl(const StepDistribution& p, const StepDistribution& q,
                          double epsilon) {
  if (p.candidates.empty())
    throw DomainError("stepwise_kl: empty base distribution");
  if (epsilon <= 0.0) throw DomainError("stepwise_kl: epsilon must be > 0");
  double kl = 0.0;
  for (const auto& c : p.candidates) {
    double pv = std::exp(c.logprob);
    const TokenLogProb* qc = q.find(c.token);
    double qv = qc ? std::exp(qc->logprob) : 0.0;
    kl += pv * std::log(pv / (qv + epsilon));
  }
  return kl;
}

// Average step-wise KL over the steps the two traces share.
inline double mean_kl(const GenerationTrace& base, const GenerationTrace& masked,
                      double epsilon) {
  std::size_t t = std::min(base.steps.size(), masked.steps.size());
  if (t == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < t; ++i)
    sum += stepwise_kl(base.steps[i], masked.steps[i], epsilon);
  return sum / static_cast<double>(t);
}

struct ProbeResult {
  std::string target;
  double delta_logprob = 0.0;
  double mean_kl = 0.0;
  std::size_t aligned_steps = 0;
};

// Min-max over the batch; a degenerate batch (all equal, including a single
// probe) maps every value to 1 so the combined score stays defined.
inline std::vector<double> minmax_normalize(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  double lo = xs[0], hi = xs[0];
  for (double x : xs) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  std::vector<double> out(xs.size(), 1.0);
  if (hi > lo)
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = (xs[i] - lo) / (hi - lo);
  return out;
}

// I = alpha * N(delta-logprob) + beta * N(mean KL), normalized per batch.
inline std::vector<double> group_importance(const std::vector<ProbeResult>& probes,
                                            double alpha, double beta) {
  if (probes.empty()) throw DomainError("group_importance: no probes");
  if (alpha < 0 || beta < 0)
    throw DomainError("group_importance: weights must be >= 0");
  std::vector<double> deltas, kls;
  deltas.reserve(probes.size());
  kls.reserve(probes.size());
  for (const auto& p : probes) {
    deltas.push_back(p.delta_logprob);
    kls.push_back(p.mean_kl);
  }
  std::vector<double> nd = minmax_normalize(deltas);
  std::vector<double> nk = minmax_normalize(kls);
  std::vector<double> out(probes.size());
  for (std::size_t i = 0; i < probes.size(); ++i)
    out[i] = alpha * nd[i] + beta * nk[i];
  return out;
}

struct TriggerConfig {
  std::size_t top_k_groups = 2;
  std::size_t top_k_trigger = 4; // tokens kept per selected group
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-12;
  GatewayConfig gateway;

  void validate() const {
    if (top_k_groups < 1)
      throw ConfigError("top_k_groups must be >= 1", "top_k_groups");
    if (top_k_trigger < 1)
      throw ConfigError("top_k_trigger must be >= 1", "top_k_trigger");
    if (alpha < 0) throw ConfigError("alpha must be >= 0", "alpha");
    if (beta < 0) throw ConfigError("beta must be >= 0", "beta");
    if (epsilon <= 0) throw ConfigError("epsilon must be > 0", "epsilon");
    gateway.validate();
  }
};

struct GroupScore {
  std::size_t group_index = 0;
  std::string phrase;
  PhraseKind kind = PhraseKind::fallback;
  std::size_t begin = 0;
  std::size_t end = 0;
  double delta_logprob = 0.0;
  double mean_kl = 0.0;
  std::size_t aligned_steps = 0;
  double score = 0.0;
  bool selected = false;
};

struct TokenScore {
  std::size_t group_index = 0;
  std::size_t subword_index = 0;
  std::string token;
  std::size_t begin = 0;
  std::size_t end = 0;
  double delta_logprob = 0.0;
  double mean_kl = 0.0;
  double score = 0.0;
  bool selected = false;
};

struct ImportanceReport {
  std::string text;
  double alpha = 0.5;
  double beta = 0.5;
  double epsilon = 1e-12;
  bool forced_decode = true;
  std::string tokenizer_id;
  std::vector<std::string> baseline_tokens;
  std::vector<GroupScore> groups;
  std::vector<TokenScore> tokens;
  std::vector<std::size_t> selected_groups; // by group_index, best first
  std::vector<std::string> trigger_tokens;  // document order, deduplicated
  std::vector<std::string> skipped_probes;  // target + reason, for diagnosis

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format"] = "importance.v1";
    j["text"] = text;
    j["alpha"] = alpha;
    j["beta"] = beta;
    j["epsilon"] = epsilon;
    j["forced_decode"] = forced_decode;
    j["tokenizer_id"] = tokenizer_id;
    j["baseline_tokens"] = baseline_tokens;
    j["groups"] = nlohmann::json::array();
    for (const auto& g : groups)
      j["groups"].push_back({{"group_index", g.group_index},
                             {"phrase", g.phrase},
                             {"kind", phrase_kind_name(g.kind)},
                             {"begin", g.begin},
                             {"end", g.end},
                             {"delta_logprob", g.delta_logprob},
                             {"mean_kl", g.mean_kl},
                             {"aligned_steps", g.aligned_steps},
                             {"score", g.score},
                             {"selected", g.selected}});
    j["tokens"] = nlohmann::json::array();
    for (const auto& t : tokens)
      j["tokens"].push_back({{"group_index", t.group_index},
                             {"subword_index", t.subword_index},
                             {"token", t.token},
                             {"begin", t.begin},
                             {"end", t.end},
                             {"delta_logprob", t.delta_logprob},
                             {"mean_kl", t.mean_kl},
                             {"score", t.score},
                             {"selected", t.selected}});
    j["selected_groups"] = selected_groups;
    j["trigger_tokens"] = trigger_tokens;
    j["skipped_probes"] = skipped_probes;
    return j;
  }

  static ImportanceReport from_json(const nlohmann::json& j) {
    if (!j.contains("format") || j.at("format") != "importance.v1")
      throw ConfigError("importance report: unsupported format");
    ImportanceReport r;
    r.text = j.at("text").get<std::string>();
    r.alpha = j.at("alpha").get<double>();
    r.beta = j.at("beta").get<double>();
    r.epsilon = j.at("epsilon").get<double>();
    r.forced_decode = j.at("forced_decode").get<bool>();
    r.tokenizer_id = j.at("tokenizer_id").get<std::string>();
    r.baseline_tokens = j.at("baseline_tokens").get<std::vector<std::string>>();
    for (const auto& g : j.at("groups")) {
      GroupScore s;
      s.group_index = g.at("group_index").get<std::size_t>();
      s.phrase = g.at("phrase").get<std::string>();
      s.kind = parse_phrase_kind(g.at("kind").get<std::string>());
      s.begin = g.at("begin").get<std::size_t>();
      s.end = g.at("end").get<std::size_t>();
      s.delta_logprob = g.at("delta_logprob").get<double>();
      s.mean_kl = g.at("mean_kl").get<double>();
      s.aligned_steps = g.at("aligned_steps").get<std::size_t>();
      s.score = g.at("score").get<double>();
      s.selected = g.at("selected").get<bool>();
      r.groups.push_back(std::move(s));
    }
    for (const auto& t : j.at("tokens")) {
      TokenScore s;
      s.group_index = t.at("group_index").get<std::size_t>();
      s.subword_index = t.at("subword_index").get<std::size_t>();
      s.token = t.at("token").get<std::string>();
      s.begin = t.at("begin").get<std::size_t>();
      s.end = t.at("end").get<std::size_t>();
      s.delta_logprob = t.at("delta_logprob").get<double>();
      s.mean_kl = t.at("mean_kl").get<double>();
      s.score = t.at("score").get<double>();
      s.selected = t.at("selected").get<bool>();
      r.tokens.push_back(std::move(s));
    }
    r.selected_groups = j.at("selected_groups").get<std::vector<std::size_t>>();
    r.trigger_tokens = j.at("trigger_tokens").get<std::vector<std::string>>();
    r.skipped_probes = j.at("skipped_probes").get<std::vector<std::string>>();
    return r;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write importance report: " + path);
    f << to_json().dump(2) << "\n";
  }

  static ImportanceReport load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read importance report: " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
  }
};

// Every probe the gateway could serve failed, leaving no usable triggers.
// Carries whatever was measured before the failure for diagnosis.
class ProbeFailure : public Error {
public:
  ProbeFailure(const std::string& what, ImportanceReport partial)
      : Error(what), partial_(std::move(partial)) {}
  const ImportanceReport& partial() const { return partial_; }

private:
  ImportanceReport partial_;
};

namespace detail {

struct RawProbe {
  bool ok = false;
  double delta = 0.0;
  double kl = 0.0;
  std::size_t aligned = 0;
};

inline RawProbe run_probe(const Gateway& gw, const GenerationTrace& base,
                          const std::string& masked_text, bool forced,
                          const TriggerConfig& cfg,
                          std::vector<std::string>& skipped,
                          const std::string& target_name) {
  RawProbe out;
  try {
    GenerationTrace masked =
        forced ? gw.score_forced(masked_text, base.emitted_tokens, cfg.gateway)
               : gw.generate_with_topk(masked_text, cfg.gateway);
    out.delta = delta_logprob(base, masked, forced);
    out.kl = mean_kl(base, masked, cfg.epsilon);
    out.aligned = std::min(base.steps.size(), masked.steps.size());
    out.ok = true;
  } catch (const Error& e) {
    skipped.push_back(target_name + ": " + e.what());
  }
  return out;
}

} // namespace detail

// Two-stage occlusion attribution: score phrase groups, keep the top
// `top_k_groups`, then score tokens inside each kept group and keep the top
// `top_k_trigger` per group. Ties break toward earlier position, then
// lexicographically smaller text.
inline ImportanceReport select_triggers(const TokenAlignment& alignment,
                                        const std::vector<PhraseGroup>& groups,
                                        const Gateway& gw,
                                        const TriggerConfig& cfg) {
  cfg.validate();
  if (groups.empty()) throw DomainError("select_triggers: no candidate groups");

  ImportanceReport report;
  report.text = alignment.text;
  report.alpha = cfg.alpha;
  report.beta = cfg.beta;
  report.epsilon = cfg.epsilon;
  report.tokenizer_id = gw.tokenizer_id();
  report.forced_decode = gw.supports_forced_decode();

  GenerationTrace base = gw.generate_with_topk(alignment.text, cfg.gateway);
  report.baseline_tokens = base.emitted_tokens;

  // Stage 1: group probes.
  std::vector<std::size_t> probed;
  std::vector<ProbeResult> probes;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const PhraseGroup& g = groups[gi];
    std::string masked = mask_span(alignment, g);
    if (masked == alignment.text) {
      report.skipped_probes.push_back("group " + std::to_string(gi) +
                                      ": empty span, mask is a no-op");
      continue;
    }
    detail::RawProbe p =
        detail::run_probe(gw, base, masked, report.forced_decode, cfg,
                          report.skipped_probes, "group " + std::to_string(gi));
    if (!p.ok) continue;
    probed.push_back(gi);
    probes.push_back({g.phrase_text, p.delta, p.kl, p.aligned});
  }
  if (probes.empty())
    throw ProbeFailure("select_triggers: every group probe failed", report);

  std::vector<double> scores = group_importance(probes, cfg.alpha, cfg.beta);
  for (std::size_t i = 0; i < probed.size(); ++i) {
    const PhraseGroup& g = groups[probed[i]];
    report.groups.push_back({probed[i], g.phrase_text, g.kind, g.begin, g.end,
                             probes[i].delta_logprob, probes[i].mean_kl,
                             probes[i].aligned_steps, scores[i], false});
  }
  std::vector<std::size_t> order(report.groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const GroupScore& ga = report.groups[a];
    const GroupScore& gb = report.groups[b];
    if (ga.score != gb.score) return ga.score > gb.score;
    if (ga.begin != gb.begin) return ga.begin < gb.begin;
    return ga.phrase < gb.phrase;
  });
  std::size_t keep = std::min(cfg.top_k_groups, order.size());
  for (std::size_t i = 0; i < keep; ++i) {
    report.groups[order[i]].selected = true;
    report.selected_groups.push_back(report.groups[order[i]].group_index);
  }

  // Stage 2: token probes inside each selected group.
  for (std::size_t gi : report.selected_groups) {
    const PhraseGroup& g = groups[gi];
    std::vector<TokenScore> batch;
    std::vector<ProbeResult> token_probes;
    for (std::size_t sw : g.subword_indices) {
      auto [b, e] = alignment.offsets[sw];
      std::string masked = mask_span(alignment.text, b, e);
      detail::RawProbe p = detail::run_probe(
          gw, base, masked, report.forced_decode, cfg, report.skipped_probes,
          "token " + std::to_string(sw) + " '" + alignment.subwords[sw] + "'");
      if (!p.ok) continue;
      TokenScore t;
      t.group_index = gi;
      t.subword_index = sw;
      t.token = alignment.subwords[sw];
      t.begin = b;
      t.end = e;
      t.delta_logprob = p.delta;
      t.mean_kl = p.kl;
      batch.push_back(std::move(t));
      token_probes.push_back({alignment.subwords[sw], p.delta, p.kl, p.aligned});
    }
    if (batch.empty()) continue;
    std::vector<double> tscores =
        group_importance(token_probes, cfg.alpha, cfg.beta);
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i].score = tscores[i];
    std::vector<std::size_t> torder(batch.size());
    for (std::size_t i = 0; i < torder.size(); ++i) torder[i] = i;
    std::sort(torder.begin(), torder.end(), [&](std::size_t a, std::size_t b) {
      if (batch[a].score != batch[b].score) return batch[a].score > batch[b].score;
      if (batch[a].begin != batch[b].begin) return batch[a].begin < batch[b].begin;
      return batch[a].token < batch[b].token;
    });
    std::size_t tkeep = std::min(cfg.top_k_trigger, torder.size());
    for (std::size_t i = 0; i < tkeep; ++i) batch[torder[i]].selected = true;
    for (auto& t : batch) report.tokens.push_back(std::move(t));
  }

  // Trigger list: selected tokens in document order, first occurrence per text.
  std::vector<const TokenScore*> picked;
  for (const auto& t : report.tokens)
    if (t.selected) picked.push_back(&t);
  std::sort(picked.begin(), picked.end(),
            [](const TokenScore* a, const TokenScore* b) {
              if (a->begin != b->begin) return a->begin < b->begin;
              return a->token < b->token;
            });
  for (const TokenScore* t : picked)
    if (std::find(report.trigger_tokens.begin(), report.trigger_tokens.end(),
                  t->token) == report.trigger_tokens.end())
      report.trigger_tokens.push_back(t->token);

  if (report.trigger_tokens.empty())
    throw ProbeFailure("select_triggers: no trigger tokens survived probing",
                       report);
  return report;
}

} // namespace redrag
