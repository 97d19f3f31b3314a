#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "redrag/errors.hpp"
#include "redrag/text.hpp"

namespace redrag {

// Rule-based lemmatizer: lowercase, then strip inflectional/derivational
// suffixes until no rule applies, so the result is a fixpoint (idempotent).
inline std::string normalize_token(const std::string& token) {
  std::string w = to_lower(trim(token));
  auto ends = [&](std::string_view suffix) {
    return w.size() >= suffix.size() &&
           std::string_view(w).substr(w.size() - suffix.size()) == suffix;
  };
  auto undouble = [&]() {
    std::size_t n = w.size();
    if (n >= 3 && w[n - 1] == w[n - 2] && w[n - 1] != 'l' && w[n - 1] != 's')
      w.pop_back();
  };
  bool changed = true;
  while (changed) {
    changed = false;
    if (ends("ies") && w.size() >= 5) {
      w.erase(w.size() - 3);
      w += 'y';
      changed = true;
    } else if (ends("sses")) {
      w.erase(w.size() - 2);
      changed = true;
    } else if (ends("es") && w.size() >= 5 &&
               (ends("xes") || ends("zes") || ends("ches") || ends("shes") ||
                ends("oes"))) {
      w.erase(w.size() - 2);
      changed = true;
    } else if (ends("s") && !ends("ss") && !ends("us") && !ends("is") &&
               w.size() >= 4) {
      w.pop_back();
      changed = true;
    } else if (ends("ing") && w.size() >= 6) {
      w.erase(w.size() - 3);
      undouble();
      changed = true;
    } else if (ends("ed") && w.size() >= 5) {
      w.erase(w.size() - 2);
      undouble();
      changed = true;
    } else if (ends("ly") && w.size() >= 5) {
      w.erase(w.size() - 2);
      changed = true;
    }
  }
  return w;
}

// Lemma-keyed synonym/antonym maps plus safe/dangerous fallback term lists.
// File format lex.v1 (tab- or space-separated):
//
//   lex.v1 source=bundled-mini
//   sudden  synonym  abrupt
//   sudden  antonym  gradual
//   *       safe     roadway
//   *       danger   swerve
class Lexicon {
public:
  Lexicon() = default;

  const std::vector<std::string>& synonyms(const std::string& lemma) const {
    return find(synonyms_, lemma);
  }
  const std::vector<std::string>& antonyms(const std::string& lemma) const {
    return find(antonyms_, lemma);
  }
  const std::vector<std::string>& safe_terms() const { return safe_; }
  const std::vector<std::string>& danger_terms() const { return danger_; }
  const std::string& source_tag() const { return source_; }

  void add_synonym(const std::string& lemma, const std::string& target) {
    synonyms_[lemma].push_back(target);
  }
  void add_antonym(const std::string& lemma, const std::string& target) {
    antonyms_[lemma].push_back(target);
  }
  void add_safe(const std::string& term) { safe_.push_back(term); }
  void add_danger(const std::string& term) { danger_.push_back(term); }

  static Lexicon parse(const std::string& content) {
    Lexicon lex;
    bool saw_header = false;
    std::size_t start = 0;
    while (start <= content.size()) {
      std::size_t end = content.find('\n', start);
      if (end == std::string::npos) end = content.size();
      std::string line =
          trim(std::string_view(content).substr(start, end - start));
      bool last = end == content.size();
      start = end + 1;
      if (!line.empty() && line[0] != '#') {
        auto fields = split_ws(line);
        if (!saw_header) {
          if (fields[0] != "lex.v1")
            throw ConfigError("lexicon: unsupported header: " + line);
          for (const auto& f : fields)
            if (starts_with(f, "source=")) lex.source_ = f.substr(7);
          saw_header = true;
        } else {
          if (fields.size() != 3)
            throw ConfigError("lexicon: malformed row: " + line);
          const std::string& lemma = fields[0];
          const std::string& relation = fields[1];
          const std::string& target = fields[2];
          if (lemma == "*") {
            if (relation == "safe")
              lex.add_safe(target);
            else if (relation == "danger")
              lex.add_danger(target);
            else
              throw ConfigError("lexicon: '*' rows take relation safe|danger, got '" +
                                relation + "'");
          } else if (relation == "synonym") {
            lex.add_synonym(lemma, target);
          } else if (relation == "antonym") {
            lex.add_antonym(lemma, target);
          } else {
            throw ConfigError("lexicon: unknown relation '" + relation + "'");
          }
        }
      }
      if (last) break;
    }
    if (!saw_header) throw ConfigError("lexicon: missing header line");
    return lex;
  }

  static Lexicon load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read lexicon: " + path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  static const std::vector<std::string>& find(
      const std::map<std::string, std::vector<std::string>>& m,
      const std::string& lemma) {
    static const std::vector<std::string> kEmpty;
    auto it = m.find(lemma);
    return it == m.end() ? kEmpty : it->second;
  }

  std::map<std::string, std::vector<std::string>> synonyms_;
  std::map<std::string, std::vector<std::string>> antonyms_;
  std::vector<std::string> safe_;
  std::vector<std::string> danger_;
  std::string source_;
};

} // namespace redrag
