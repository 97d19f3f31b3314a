#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/memory_store.hpp"
#include "redrag/text.hpp"

namespace redrag {

struct CorpusDoc {
  std::string id;
  std::string text;
};

// corpus.v1: header line, then "id<TAB>text" rows; '#' comments.
inline std::vector<CorpusDoc> parse_corpus(const std::string& content) {
  std::vector<CorpusDoc> docs;
  bool saw_header = false;
  std::size_t start = 0;
  while (start <= content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    std::string line = trim(std::string_view(content).substr(start, end - start));
    bool last = end == content.size();
    start = end + 1;
    if (!line.empty() && line[0] != '#') {
      if (!saw_header) {
        if (split_ws(line)[0] != "corpus.v1")
          throw ConfigError("corpus: unsupported header: " + line);
        saw_header = true;
      } else {
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
          throw ConfigError("corpus: malformed row (need id<TAB>text): " + line);
        docs.push_back({trim(line.substr(0, tab)), trim(line.substr(tab + 1))});
      }
    }
    if (last) break;
  }
  if (!saw_header) throw ConfigError("corpus: missing header line");
  return docs;
}

inline std::vector<CorpusDoc> load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read corpus: " + path);
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  return parse_corpus(content);
}

// Benign memory built by embedding each document's text as its key.
inline MemoryStore build_benign_store(const std::vector<CorpusDoc>& docs,
                                      const Embedder& embedder) {
  MemoryStore store(embedder.dim());
  for (const auto& d : docs) {
    MemoryEntry e;
    e.id = d.id;
    e.label = EntryLabel::benign;
    e.key = embedder.embed(d.text);
    e.value = d.text;
    store.insert(std::move(e));
  }
  return store;
}

struct Task {
  std::string id;
  std::string prompt;
  std::string gold;
};

// tasks.v1: header line, then "id<TAB>prompt<TAB>gold" rows; '#' comments.
inline std::vector<Task> parse_tasks(const std::string& content) {
  std::vector<Task> tasks;
  bool saw_header = false;
  std::size_t start = 0;
  while (start <= content.size()) {
    std::size_t end = content.find('\n', start);
    if (end == std::string::npos) end = content.size();
    std::string line = trim(std::string_view(content).substr(start, end - start));
    bool last = end == content.size();
    start = end + 1;
    if (!line.empty() && line[0] != '#') {
      if (!saw_header) {
        if (split_ws(line)[0] != "tasks.v1")
          throw ConfigError("tasks: unsupported header: " + line);
        saw_header = true;
      } else {
        std::vector<std::string> fields;
        split_on(line, '\t', fields);
        if (fields.size() != 3)
          throw ConfigError("tasks: malformed row (need id<TAB>prompt<TAB>gold): " +
                            line);
        tasks.push_back({trim(fields[0]), trim(fields[1]), trim(fields[2])});
      }
    }
    if (last) break;
  }
  if (!saw_header) throw ConfigError("tasks: missing header line");
  return tasks;
}

inline std::vector<Task> load_tasks(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read tasks: " + path);
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  return parse_tasks(content);
}

} // namespace redrag
