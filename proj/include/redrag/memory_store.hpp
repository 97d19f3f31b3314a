#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/text.hpp"

namespace redrag {

enum class EntryLabel { benign, poison };

inline const char* label_name(EntryLabel l) {
  return l == EntryLabel::benign ? "benign" : "poison";
}

inline EntryLabel parse_label(std::string_view s) {
  if (s == "benign") return EntryLabel::benign;
  if (s == "poison") return EntryLabel::poison;
  throw ConfigError("unknown entry label: '" + std::string(s) + "'");
}

struct MemoryEntry {
  std::string id;
  EntryLabel label = EntryLabel::benign;
  Vec key; // unit norm
  std::string value;
};

struct RetrievalHit {
  std::string id;
  EntryLabel label;
  double similarity;
  std::string value;
};

// Labeled key/value vector memory with cosine top-k retrieval.
// Reads may run concurrently; insertion takes the write lock so readers always
// see a complete snapshot.
class MemoryStore {
public:
  MemoryStore() = default;
  explicit MemoryStore(std::size_t dim) : dim_(dim) {}

  MemoryStore(const MemoryStore& other) {
    std::shared_lock lock(other.mutex_);
    dim_ = other.dim_;
    entries_ = other.entries_;
    index_ = other.index_;
  }

  std::size_t dim() const {
    std::shared_lock lock(mutex_);
    return dim_;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  void insert(MemoryEntry entry) {
    std::unique_lock lock(mutex_);
    insert_locked(std::move(entry));
  }

  void insert_all(std::vector<MemoryEntry> entries) {
    std::unique_lock lock(mutex_);
    for (auto& e : entries) insert_locked(std::move(e));
  }

  bool contains(const std::string& id) const {
    std::shared_lock lock(mutex_);
    return index_.count(id) > 0;
  }

  MemoryEntry get(const std::string& id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(id);
    if (it == index_.end())
      throw DomainError("store: no entry with id '" + id + "'");
    return entries_[it->second];
  }

  std::vector<MemoryEntry> snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  std::vector<MemoryEntry> entries_with_label(EntryLabel label) const {
    std::shared_lock lock(mutex_);
    std::vector<MemoryEntry> out;
    for (const auto& e : entries_)
      if (e.label == label) out.push_back(e);
    return out;
  }

  std::size_t count_label(EntryLabel label) const {
    std::shared_lock lock(mutex_);
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.label == label) ++n;
    return n;
  }

  // Cosine top-k. Ranked by similarity descending, ties by id ascending.
  std::vector<RetrievalHit> topk(const Vec& query, std::size_t k) const {
    std::shared_lock lock(mutex_);
    if (entries_.empty()) throw DomainError("topk: store is empty");
    if (k == 0) throw DomainError("topk: k must be >= 1");
    if (query.size() != dim_)
      throw DimensionError("topk: query dim " + std::to_string(query.size()) +
                           " vs store dim " + std::to_string(dim_));
    std::vector<RetrievalHit> hits;
    hits.reserve(entries_.size());
    for (const auto& e : entries_)
      hits.push_back({e.id, e.label, cosine(query, e.key), e.value});
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
      if (a.similarity != b.similarity) return a.similarity > b.similarity;
      return a.id < b.id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

  // Serialization: memstore.v1, one row per entry, "|"-separated, value last
  // (may itself contain "|"). Floats are shortest round-trip decimal.
  std::string serialize(const std::string& extra_header_attrs = "") const {
    std::shared_lock lock(mutex_);
    std::string out = "memstore.v1 dim=" + std::to_string(dim_) +
                      " count=" + std::to_string(entries_.size());
    if (!extra_header_attrs.empty()) out += " " + extra_header_attrs;
    out += "\n";
    for (const auto& e : entries_) {
      out += e.id;
      out += " | ";
      out += label_name(e.label);
      out += " | ";
      for (std::size_t i = 0; i < e.key.size(); ++i) {
        if (i) out += ' ';
        out += format_double(e.key[i]);
      }
      out += " | ";
      out += e.value;
      out += "\n";
    }
    return out;
  }

  void save(const std::string& path,
            const std::string& extra_header_attrs = "") const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write store file: " + path);
    f << serialize(extra_header_attrs);
  }

  static MemoryStore parse(const std::string& content) {
    std::size_t pos = content.find('\n');
    if (pos == std::string::npos)
      throw ConfigError("memstore: missing header line");
    std::string header = content.substr(0, pos);
    auto fields = split_ws(header);
    if (fields.empty() || fields[0] != "memstore.v1")
      throw ConfigError("memstore: unsupported version header: " + header);
    std::size_t dim = 0;
    long declared_count = -1;
    for (const auto& f : fields) {
      if (starts_with(f, "dim=")) dim = static_cast<std::size_t>(parse_long(f.substr(4)));
      if (starts_with(f, "count=")) declared_count = parse_long(f.substr(6));
    }
    if (dim == 0) throw ConfigError("memstore: header missing dim");
    MemoryStore store(dim);
    std::size_t line_start = pos + 1;
    while (line_start < content.size()) {
      std::size_t line_end = content.find('\n', line_start);
      if (line_end == std::string::npos) line_end = content.size();
      std::string_view line(content.data() + line_start, line_end - line_start);
      line_start = line_end + 1;
      if (trim(line).empty()) continue;
      store.insert(parse_row(line, dim));
    }
    if (declared_count >= 0 &&
        store.size() != static_cast<std::size_t>(declared_count))
      throw ConfigError("memstore: header count=" +
                        std::to_string(declared_count) + " but file has " +
                        std::to_string(store.size()) + " rows");
    return store;
  }

  static MemoryStore load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read store file: " + path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  void insert_locked(MemoryEntry entry) {
    if (dim_ == 0) dim_ = entry.key.size();
    if (entry.key.size() != dim_)
      throw DimensionError("insert: key dim " + std::to_string(entry.key.size()) +
                           " vs store dim " + std::to_string(dim_));
    if (index_.count(entry.id))
      throw InjectionError("duplicate entry id: " + entry.id);
    double n = norm2(entry.key);
    if (n == 0.0) throw DomainError("insert: zero key vector for " + entry.id);
    if (std::abs(n - 1.0) > 1e-6)
      for (double& x : entry.key) x /= n;
    index_.emplace(entry.id, entries_.size());
    entries_.push_back(std::move(entry));
  }

  static MemoryEntry parse_row(std::string_view line, std::size_t dim) {
    // id | label | floats | value (value may contain '|')
    std::size_t p1 = line.find('|');
    std::size_t p2 = p1 == std::string_view::npos ? p1 : line.find('|', p1 + 1);
    std::size_t p3 = p2 == std::string_view::npos ? p2 : line.find('|', p2 + 1);
    if (p3 == std::string_view::npos)
      throw ConfigError("memstore: malformed row: " + std::string(line));
    MemoryEntry e;
    e.id = trim(line.substr(0, p1));
    e.label = parse_label(trim(line.substr(p1 + 1, p2 - p1 - 1)));
    auto floats = split_ws(line.substr(p2 + 1, p3 - p2 - 1));
    if (floats.size() != dim)
      throw DimensionError("memstore: row '" + e.id + "' has " +
                           std::to_string(floats.size()) + " floats, expected " +
                           std::to_string(dim));
    e.key.reserve(dim);
    for (const auto& f : floats) e.key.push_back(parse_double(f));
    std::string_view value = line.substr(p3 + 1);
    if (!value.empty() && value.front() == ' ') value.remove_prefix(1);
    e.value = std::string(value);
    return e;
  }

  mutable std::shared_mutex mutex_;
  std::size_t dim_ = 0;
  std::vector<MemoryEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

} // namespace redrag
