#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "redrag/errors.hpp"
#include "redrag/text.hpp"

namespace redrag {

// Subword inventory with a continuation marker, loaded from a vocab.v1 file:
//
//   vocab.v1 continuation=##
//   sudden
//   ##ly
class SubwordVocab {
public:
  SubwordVocab() = default;
  SubwordVocab(std::unordered_set<std::string> items, std::string continuation)
      : items_(std::move(items)), continuation_(std::move(continuation)) {
    if (continuation_.empty())
      throw ConfigError("vocab: continuation marker must be non-empty");
  }

  const std::string& continuation() const { return continuation_; }
  std::size_t size() const { return items_.size(); }
  bool contains(const std::string& piece) const { return items_.count(piece) > 0; }

  static SubwordVocab parse(const std::string& content) {
    std::unordered_set<std::string> items;
    std::string continuation;
    bool saw_header = false;
    std::size_t start = 0;
    while (start <= content.size()) {
      std::size_t end = content.find('\n', start);
      if (end == std::string::npos) end = content.size();
      std::string line =
          trim(std::string_view(content).substr(start, end - start));
      bool last = end == content.size();
      start = end + 1;
      if (!saw_header) {
        if (line.empty()) {
          if (last) break;
          continue;
        }
        auto fields = split_ws(line);
        if (fields.empty() || fields[0] != "vocab.v1")
          throw ConfigError("vocab: unsupported header: " + line);
        for (const auto& f : fields)
          if (starts_with(f, "continuation=")) continuation = f.substr(13);
        if (continuation.empty())
          throw ConfigError("vocab: header missing continuation marker");
        saw_header = true;
      } else if (!line.empty()) {
        items.insert(line);
      }
      if (last) break;
    }
    if (!saw_header) throw ConfigError("vocab: missing header line");
    return SubwordVocab(std::move(items), std::move(continuation));
  }

  static SubwordVocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read vocab file: " + path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  std::unordered_set<std::string> items_;
  std::string continuation_;
};

// Character-level alignment between a text and its subword sequence.
// offsets[j] = [start, end) byte span of subword j; spans are disjoint and
// increasing; whitespace is covered by no span.
struct TokenAlignment {
  std::string text;
  std::vector<std::string> subwords;
  std::vector<std::pair<std::size_t, std::size_t>> offsets;

  // phi: char index -> subword index; absent for uncovered characters.
  std::optional<std::size_t> phi(std::size_t i) const {
    if (i >= text.size())
      throw DomainError("phi: index " + std::to_string(i) +
                        " out of range for text of length " +
                        std::to_string(text.size()));
    for (std::size_t j = 0; j < offsets.size(); ++j) {
      if (i < offsets[j].first) return std::nullopt;
      if (i < offsets[j].second) return j;
    }
    return std::nullopt;
  }
};

inline std::optional<std::size_t> char_to_subword(const TokenAlignment& a,
                                                  std::size_t i) {
  return a.phi(i);
}

// Greedy longest-match subword tokenization (WordPiece style), lowercased for
// vocabulary lookup. A word with no match at some position is emitted as a
// single out-of-vocabulary piece so every word character stays covered.
inline TokenAlignment tokenize_with_offsets(const std::string& text,
                                            const SubwordVocab& vocab) {
  TokenAlignment out;
  out.text = text;
  for (const WordSpan& w : split_ws_spans(text)) {
    std::string lowered = to_lower(w.word);
    std::size_t pos = 0;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> pieces;
    bool failed = false;
    while (pos < lowered.size()) {
      std::size_t len = lowered.size() - pos;
      bool found = false;
      for (; len >= 1; --len) {
        std::string piece = lowered.substr(pos, len);
        std::string lookup = pos == 0 ? piece : vocab.continuation() + piece;
        if (vocab.contains(lookup)) {
          pieces.push_back({lookup, {w.begin + pos, w.begin + pos + len}});
          pos += len;
          found = true;
          break;
        }
      }
      if (!found) {
        failed = true;
        break;
      }
    }
    if (failed) {
      out.subwords.push_back(lowered);
      out.offsets.push_back({w.begin, w.end});
    } else {
      for (auto& [piece, span] : pieces) {
        out.subwords.push_back(std::move(piece));
        out.offsets.push_back(span);
      }
    }
  }
  return out;
}

enum class PhraseKind { np, vp, fallback };

inline const char* phrase_kind_name(PhraseKind k) {
  switch (k) {
    case PhraseKind::np: return "NP";
    case PhraseKind::vp: return "VP";
    default: return "fallback";
  }
}

inline PhraseKind parse_phrase_kind(std::string_view s) {
  if (s == "NP") return PhraseKind::np;
  if (s == "VP") return PhraseKind::vp;
  if (s == "fallback") return PhraseKind::fallback;
  throw ConfigError("unknown phrase kind: '" + std::string(s) + "'");
}

// Candidate span produced by a chunker, in byte coordinates of the text.
struct PhraseSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  PhraseKind kind = PhraseKind::fallback;
};

// A phrase projected onto subword indices: g = {phi(i) : begin <= i < end}.
struct PhraseGroup {
  std::string phrase_text;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::vector<std::size_t> subword_indices; // sorted, unique
  PhraseKind kind = PhraseKind::fallback;
};

// Project phrase character spans onto subword index sets. Spans whose index
// set is empty (e.g. covering only whitespace) are dropped.
inline std::vector<PhraseGroup> build_groups(const TokenAlignment& alignment,
                                             const std::vector<PhraseSpan>& phrases) {
  std::vector<PhraseGroup> groups;
  for (const PhraseSpan& p : phrases) {
    if (p.begin > p.end || p.end > alignment.text.size())
      throw DomainError("build_groups: span [" + std::to_string(p.begin) + "," +
                        std::to_string(p.end) + ") out of bounds for text of length " +
                        std::to_string(alignment.text.size()));
    PhraseGroup g;
    g.begin = p.begin;
    g.end = p.end;
    g.kind = p.kind;
    g.phrase_text = alignment.text.substr(p.begin, p.end - p.begin);
    for (std::size_t i = p.begin; i < p.end; ++i) {
      auto j = alignment.phi(i);
      if (j && (g.subword_indices.empty() || g.subword_indices.back() != *j))
        g.subword_indices.push_back(*j);
    }
    if (!g.subword_indices.empty()) groups.push_back(std::move(g));
  }
  return groups;
}

} // namespace redrag
