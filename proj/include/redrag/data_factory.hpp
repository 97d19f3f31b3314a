#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "redrag/errors.hpp"
#include "redrag/lexicon.hpp"
#include "redrag/memory_store.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"

namespace redrag {

struct Substitution {
  std::size_t word_index = 0;
  std::string original;
  std::string replacement;
  std::string rule; // "synonym" | "safe-fallback"
};

struct PoisonKeyResult {
  std::string text;
  bool any_substitution = false;
  std::vector<Substitution> substitutions;
  std::vector<std::string> warnings;
};

namespace detail {

// variant rotates the deterministic choice within each term list.
inline const std::string& pick(const std::vector<std::string>& terms,
                               std::size_t variant) {
  return terms[variant % terms.size()];
}

} // namespace detail

// Rewrite trigger occurrences in the context with synonyms (safe-list terms
// when the lemma has no synonym), keeping everything else byte-identical.
// `variant` rotates which alternative is chosen, yielding distinct surface
// forms for the same rule.
inline PoisonKeyResult poison_key(const std::string& context,
                                  const std::vector<std::string>& triggers,
                                  const Lexicon& lexicon,
                                  std::size_t variant = 0) {
  if (triggers.empty()) throw DomainError("poison_key: no triggers");
  std::set<std::string> trigger_lemmas;
  for (const auto& t : triggers) trigger_lemmas.insert(normalize_token(t));

  PoisonKeyResult out;
  const auto words = split_ws_spans(context);
  std::string rebuilt;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < words.size(); ++i) {
    rebuilt += context.substr(cursor, words[i].begin - cursor);
    cursor = words[i].end;
    std::string lemma = normalize_token(words[i].word);
    if (!trigger_lemmas.count(lemma)) {
      rebuilt += words[i].word;
      continue;
    }
    const std::vector<std::string>& syns = lexicon.synonyms(lemma);
    if (!syns.empty()) {
      const std::string& repl = detail::pick(syns, variant);
      rebuilt += repl;
      out.substitutions.push_back({i, words[i].word, repl, "synonym"});
      out.any_substitution = true;
    } else if (!lexicon.safe_terms().empty()) {
      const std::string& repl = detail::pick(lexicon.safe_terms(), variant);
      rebuilt += repl;
      out.substitutions.push_back({i, words[i].word, repl, "safe-fallback"});
      out.any_substitution = true;
    } else {
      rebuilt += words[i].word;
      out.warnings.push_back("no synonym or safe term for lemma '" + lemma +
                             "', token left unchanged");
    }
  }
  rebuilt += context.substr(cursor);
  out.text = rebuilt;
  if (!out.any_substitution && out.warnings.empty())
    out.warnings.push_back("no trigger token present in context");
  return out;
}

struct PoisonValueResult {
  std::string text;
  std::vector<std::string> rules; // per trigger: "antonym" | "danger-fallback"
};

// Malicious payload text: one clause per trigger, each clause listing the
// lemma's antonyms (danger-list terms when it has none) in lexicon order,
// rotated by `variant`.
inline PoisonValueResult poison_value(const std::vector<std::string>& triggers,
                                      const Lexicon& lexicon,
                                      std::size_t variant = 0) {
  if (triggers.empty()) throw DomainError("poison_value: no triggers");
  PoisonValueResult out;
  std::vector<std::string> clauses;
  for (const auto& trigger : triggers) {
    std::string lemma = normalize_token(trigger);
    const std::vector<std::string>* terms = &lexicon.antonyms(lemma);
    std::string rule = "antonym";
    if (terms->empty()) {
      terms = &lexicon.danger_terms();
      rule = "danger-fallback";
    }
    if (terms->empty())
      throw LexiconCoverageError(
          "poison_value: lemma '" + lemma +
          "' has no antonyms and the danger list is empty");
    std::vector<std::string> rotated;
    rotated.reserve(terms->size());
    for (std::size_t i = 0; i < terms->size(); ++i)
      rotated.push_back((*terms)[(i + variant) % terms->size()]);
    clauses.push_back(join(rotated));
    out.rules.push_back(rule);
  }
  out.text = join(clauses);
  return out;
}

struct TripletProvenance {
  std::string trigger;
  std::string rule;
};

struct Triplet {
  std::string con;
  std::string pos;
  std::string neg;
  std::string neg_id;           // benign store entry the negative came from
  std::size_t context_index = 0;
  std::size_t variant = 0;
  std::vector<TripletProvenance> provenance;
};

struct FactoryConfig {
  std::size_t num_contexts = 30;
  std::size_t positives_per_context = 4;
  std::size_t negatives_per_context = 12;
  bool cross_product = true; // false: zip positives and negatives 1:1
  std::uint64_t seed = 0;

  void validate() const {
    if (num_contexts < 1)
      throw ConfigError("num_contexts must be >= 1", "num_contexts");
    if (positives_per_context < 1)
      throw ConfigError("positives_per_context must be >= 1",
                        "positives_per_context");
    if (negatives_per_context < 1)
      throw ConfigError("negatives_per_context must be >= 1",
                        "negatives_per_context");
  }
};

// Build (context, poisoned-answer, benign-answer) training triplets.
// Contexts are sampled from the task pool with replacement; negatives are
// drawn per context without replacement from benign store values.
inline std::vector<Triplet> synthesize(const std::vector<std::string>& task_contexts,
                                       const std::vector<std::string>& triggers,
                                       const MemoryStore& store,
                                       const Lexicon& lexicon,
                                       const FactoryConfig& cfg,
                                       std::vector<std::string>* log = nullptr) {
  cfg.validate();
  if (task_contexts.empty()) throw DomainError("synthesize: no task contexts");
  if (triggers.empty()) throw DomainError("synthesize: no triggers");
  const std::vector<MemoryEntry> benign =
      store.entries_with_label(EntryLabel::benign);
  if (benign.size() < cfg.negatives_per_context)
    throw DomainError("synthesize: need " +
                      std::to_string(cfg.negatives_per_context) +
                      " benign entries for negatives, store has " +
                      std::to_string(benign.size()));

  Rng rng(cfg.seed);
  std::vector<Triplet> out;
  std::string last_error;
  for (std::size_t c = 0; c < cfg.num_contexts; ++c) {
    const std::string& con = task_contexts[rng.next_below(task_contexts.size())];
    std::vector<std::pair<std::string, std::vector<TripletProvenance>>> positives;
    try {
      for (std::size_t v = 0; v < cfg.positives_per_context; ++v) {
        PoisonValueResult pv = poison_value(triggers, lexicon, v);
        std::vector<TripletProvenance> prov;
        for (std::size_t t = 0; t < triggers.size(); ++t)
          prov.push_back({triggers[t], pv.rules[t]});
        positives.push_back({pv.text, std::move(prov)});
      }
    } catch (const LexiconCoverageError& e) {
      last_error = e.what();
      if (log)
        log->push_back("context " + std::to_string(c) + " skipped: " + e.what());
      continue;
    }
    std::vector<std::size_t> neg_idx =
        rng.sample_indices(benign.size(), cfg.negatives_per_context);
    if (cfg.cross_product) {
      for (std::size_t v = 0; v < positives.size(); ++v)
        for (std::size_t n = 0; n < neg_idx.size(); ++n)
          out.push_back({con, positives[v].first, benign[neg_idx[n]].value,
                         benign[neg_idx[n]].id, c, v, positives[v].second});
    } else {
      std::size_t pairs = std::min(positives.size(), neg_idx.size());
      for (std::size_t i = 0; i < pairs; ++i)
        out.push_back({con, positives[i].first, benign[neg_idx[i]].value,
                       benign[neg_idx[i]].id, c, i, positives[i].second});
    }
  }
  if (out.empty())
    throw LexiconCoverageError("synthesize: every context was skipped (" +
                               last_error + ")");
  return out;
}

inline nlohmann::json triplet_to_json(const Triplet& t) {
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& p : t.provenance)
    prov.push_back({{"trigger", p.trigger}, {"rule", p.rule}});
  return {{"con", t.con},        {"pos", t.pos},
          {"neg", t.neg},        {"neg_id", t.neg_id},
          {"context_index", t.context_index}, {"variant", t.variant},
          {"provenance", prov}};
}

inline Triplet triplet_from_json(const nlohmann::json& j) {
  Triplet t;
  t.con = j.at("con").get<std::string>();
  t.pos = j.at("pos").get<std::string>();
  t.neg = j.at("neg").get<std::string>();
  t.neg_id = j.at("neg_id").get<std::string>();
  t.context_index = j.at("context_index").get<std::size_t>();
  t.variant = j.at("variant").get<std::size_t>();
  for (const auto& p : j.at("provenance"))
    t.provenance.push_back({p.at("trigger").get<std::string>(),
                            p.at("rule").get<std::string>()});
  return t;
}

// JSON-lines with a leading header object: {"format":"triplets.v1",...}.
// `extra` keys are merged into the header (provenance stamps and the like).
inline void save_triplets(const std::vector<Triplet>& triplets,
                          const std::string& path,
                          const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write triplets: " + path);
  nlohmann::json header = {{"format", "triplets.v1"},
                           {"count", triplets.size()}};
  for (const auto& [k, v] : extra.items()) header[k] = v;
  f << header.dump() << "\n";
  for (const auto& t : triplets) f << triplet_to_json(t).dump() << "\n";
}

inline std::vector<Triplet> load_triplets(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read triplets: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw ConfigError("triplets: empty file: " + path);
  nlohmann::json header = nlohmann::json::parse(line);
  if (!header.contains("format") || header.at("format") != "triplets.v1")
    throw ConfigError("triplets: unsupported format in " + path);
  std::vector<Triplet> out;
  while (std::getline(f, line)) {
    if (trim(line).empty()) continue;
    out.push_back(triplet_from_json(nlohmann::json::parse(line)));
  }
  if (header.contains("count") &&
      header.at("count").get<std::size_t>() != out.size())
    throw ConfigError("triplets: header count mismatch in " + path);
  return out;
}

} // namespace redrag
