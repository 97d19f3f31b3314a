#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "redrag/alignment.hpp"
#include "redrag/errors.hpp"
#include "redrag/text.hpp"

namespace redrag {

enum class PosTag { det, adj, noun, verb, adv, other };

inline PosTag parse_pos_tag(std::string_view s) {
  if (s == "DET") return PosTag::det;
  if (s == "ADJ") return PosTag::adj;
  if (s == "NOUN") return PosTag::noun;
  if (s == "VERB") return PosTag::verb;
  if (s == "ADV") return PosTag::adv;
  if (s == "OTHER") return PosTag::other;
  throw ConfigError("unknown POS tag: '" + std::string(s) + "'");
}

// Word -> part-of-speech lookup loaded from pos.v1:
//
//   pos.v1
//   the DET
//   car NOUN
class PosLexicon {
public:
  PosLexicon() = default;

  PosTag tag(const std::string& word) const {
    auto it = tags_.find(to_lower(word));
    return it == tags_.end() ? PosTag::other : it->second;
  }

  std::size_t size() const { return tags_.size(); }

  void set(const std::string& word, PosTag tag) { tags_[to_lower(word)] = tag; }

  static PosLexicon parse(const std::string& content) {
    PosLexicon lex;
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
        if (!saw_header) {
          if (split_ws(line)[0] != "pos.v1")
            throw ConfigError("pos lexicon: unsupported header: " + line);
          saw_header = true;
        } else {
          auto fields = split_ws(line);
          if (fields.size() != 2)
            throw ConfigError("pos lexicon: malformed row: " + line);
          lex.set(fields[0], parse_pos_tag(fields[1]));
        }
      }
      if (last) break;
    }
    if (!saw_header) throw ConfigError("pos lexicon: missing header line");
    return lex;
  }

  static PosLexicon load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read pos lexicon: " + path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  std::unordered_map<std::string, PosTag> tags_;
};

// Produces candidate phrase spans for attribution probes.
class Chunker {
public:
  virtual ~Chunker() = default;
  virtual std::vector<PhraseSpan> chunk(const std::string& text) const = 0;
};

// Rule-based chunker over POS tags:
//   NP = DET? ADJ* NOUN+
//   VP = VERB+ ADV*
// One left-to-right scan; at each position the longer of the two matches wins
// (ties go to NP), so emitted spans never overlap. If no pattern matches
// anywhere, every word becomes its own fallback span so downstream stages
// always have candidates.
class PosPatternChunker final : public Chunker {
public:
  explicit PosPatternChunker(PosLexicon lexicon) : lexicon_(std::move(lexicon)) {}

  std::vector<PhraseSpan> chunk(const std::string& text) const override {
    const std::vector<WordSpan> words = split_ws_spans(text);
    std::vector<PosTag> tags;
    tags.reserve(words.size());
    for (const auto& w : words) tags.push_back(lexicon_.tag(w.word));

    std::vector<PhraseSpan> spans;
    std::size_t i = 0;
    while (i < words.size()) {
      std::size_t np = match_np(tags, i);
      std::size_t vp = match_vp(tags, i);
      if (np == 0 && vp == 0) {
        ++i;
        continue;
      }
      std::size_t len = np >= vp ? np : vp;
      PhraseKind kind = np >= vp ? PhraseKind::np : PhraseKind::vp;
      spans.push_back({words[i].begin, words[i + len - 1].end, kind});
      i += len;
    }
    if (spans.empty())
      for (const auto& w : words)
        spans.push_back({w.begin, w.end, PhraseKind::fallback});
    return spans;
  }

private:
  // Length of the NP match starting at i, 0 if none.
  static std::size_t match_np(const std::vector<PosTag>& tags, std::size_t i) {
    std::size_t j = i;
    if (j < tags.size() && tags[j] == PosTag::det) ++j;
    while (j < tags.size() && tags[j] == PosTag::adj) ++j;
    std::size_t nouns = 0;
    while (j < tags.size() && tags[j] == PosTag::noun) {
      ++j;
      ++nouns;
    }
    return nouns == 0 ? 0 : j - i;
  }

  // Length of the VP match starting at i, 0 if none.
  static std::size_t match_vp(const std::vector<PosTag>& tags, std::size_t i) {
    std::size_t j = i;
    std::size_t verbs = 0;
    while (j < tags.size() && tags[j] == PosTag::verb) {
      ++j;
      ++verbs;
    }
    if (verbs == 0) return 0;
    while (j < tags.size() && tags[j] == PosTag::adv) ++j;
    return j - i;
  }

  PosLexicon lexicon_;
};

} // namespace redrag
