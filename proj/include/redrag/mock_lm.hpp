#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/gateway.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"

namespace redrag {

struct TokenProb {
  std::string token;
  double prob = 0.0;
};

// One conditional distribution, normalized, sorted prob desc then token asc.
struct MockRow {
  std::vector<TokenProb> dist;

  const TokenProb* find(const std::string& token) const {
    for (const auto& t : dist)
      if (t.token == token) return &t;
    return nullptr;
  }
};

// Explicit conditional table keyed by the last `context_window` whitespace
// tokens, with an optional fallback row ("*" in the fixture). Fixture format
// mocklm.v1:
//
//   mocklm.v1 L=1 eos=<eos>
//   stopped | halted:0.7,parked:0.2,crashed:0.1
//   * | hmm:1.0
class MockTable {
public:
  MockTable() = default;
  explicit MockTable(std::size_t context_window, std::string eos = "<eos>")
      : context_window_(context_window), eos_(std::move(eos)) {}

  std::size_t context_window() const { return context_window_; }
  const std::string& eos_token() const { return eos_; }

  void set_row(const std::string& context, std::vector<TokenProb> dist) {
    rows_[context] = normalize(std::move(dist), context);
  }

  void set_fallback(std::vector<TokenProb> dist) {
    fallback_ = normalize(std::move(dist), "*");
  }

  bool has_fallback() const { return fallback_.has_value(); }

  // Conditional for a token context; falls back, then fails.
  const MockRow& conditional(const std::vector<std::string>& context) const {
    std::size_t n = std::min(context.size(), context_window_);
    std::vector<std::string> tail(context.end() - static_cast<std::ptrdiff_t>(n),
                                  context.end());
    auto it = rows_.find(join(tail));
    if (it != rows_.end()) return it->second;
    if (fallback_) return *fallback_;
    throw ConfigError("mock table: no row for context '" + join(tail) +
                      "' and no fallback row");
  }

  static MockTable parse(const std::string& content) {
    MockTable table;
    bool saw_header = false;
    std::size_t start = 0;
    while (start <= content.size()) {
      std::size_t end = content.find('\n', start);
      if (end == std::string::npos) end = content.size();
      std::string line = trim(std::string_view(content).substr(start, end - start));
      start = end + 1;
      if (line.empty() || line[0] == '#') {
        if (end == content.size()) break;
        continue;
      }
      if (!saw_header) {
        auto fields = split_ws(line);
        if (fields.empty() || fields[0] != "mocklm.v1")
          throw ConfigError("mocklm: unsupported header: " + line);
        for (const auto& f : fields) {
          if (starts_with(f, "L=")) table.context_window_ = static_cast<std::size_t>(parse_long(f.substr(2)));
          if (starts_with(f, "eos=")) table.eos_ = f.substr(4);
        }
        if (table.context_window_ < 1)
          throw ConfigError("mocklm: context window must be >= 1");
        saw_header = true;
        if (end == content.size()) break;
        continue;
      }
      std::size_t bar = line.find('|');
      if (bar == std::string::npos)
        throw ConfigError("mocklm: malformed row: " + line);
      std::string context = trim(line.substr(0, bar));
      std::string rest = trim(line.substr(bar + 1));
      std::vector<TokenProb> dist;
      std::vector<std::string> parts;
      split_on(rest, ',', parts);
      for (const auto& p : parts) {
        std::string item = trim(p);
        if (item.empty()) continue;
        std::size_t colon = item.rfind(':');
        if (colon == std::string::npos)
          throw ConfigError("mocklm: malformed token:prob pair: " + item);
        dist.push_back({trim(item.substr(0, colon)), parse_double(trim(item.substr(colon + 1)))});
      }
      if (context == "*")
        table.set_fallback(std::move(dist));
      else
        table.set_row(context, std::move(dist));
      if (end == content.size()) break;
    }
    if (!saw_header) throw ConfigError("mocklm: missing header line");
    return table;
  }

  static MockTable load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot read mock table: " + path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  static MockRow normalize(std::vector<TokenProb> dist, const std::string& ctx) {
    if (dist.empty())
      throw ConfigError("mocklm: empty distribution for context '" + ctx + "'");
    double sum = 0;
    for (const auto& t : dist) {
      if (t.prob <= 0)
        throw ConfigError("mocklm: non-positive probability for '" + t.token +
                          "' in context '" + ctx + "'");
      sum += t.prob;
    }
    for (auto& t : dist) t.prob /= sum;
    std::sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) {
      if (a.prob != b.prob) return a.prob > b.prob;
      return a.token < b.token;
    });
    for (std::size_t i = 1; i < dist.size(); ++i)
      if (dist[i].token == dist[i - 1].token)
        throw ConfigError("mocklm: duplicate token '" + dist[i].token +
                          "' in context '" + ctx + "'");
    return MockRow{std::move(dist)};
  }

  std::size_t context_window_ = 1;
  std::string eos_ = "<eos>";
  std::unordered_map<std::string, MockRow> rows_;
  std::optional<MockRow> fallback_;
};

// Deterministic table-driven backend: a pure function of
// (table, prompt, seed, cfg). Safe for concurrent reads.
class MockGateway final : public Gateway {
public:
  explicit MockGateway(MockTable table, HashEmbedder embedder = HashEmbedder())
      : table_(std::move(table)), embedder_(std::move(embedder)) {}

  const MockTable& table() const { return table_; }

  GenerationTrace generate_with_topk(const std::string& prompt,
                                     const GatewayConfig& cfg) const override {
    cfg.validate();
    std::vector<std::string> context = split_ws(prompt);
    if (context.empty()) throw DomainError("generate: empty prompt");
    Rng rng(mix_seed(cfg.seed, fnv1a64(prompt)));
    return run_generation(std::move(context), cfg, rng);
  }

  GenerationTrace score_forced(const std::string& prompt,
                               const std::vector<std::string>& target,
                               const GatewayConfig& cfg) const override {
    cfg.validate();
    GenerationTrace trace;
    std::vector<std::string> context = split_ws(prompt);
    for (std::size_t t = 0; t < target.size(); ++t) {
      const MockRow& row = table_.conditional(context);
      StepDistribution step = top_k_step(row, t, cfg.k_top);
      const TokenProb* found = row.find(target[t]);
      double logprob = found ? std::log(found->prob) : kForcedFloorLogProb;
      if (!found) force_into_step(step, target[t], logprob, cfg.k_top);
      trace.steps.push_back(std::move(step));
      trace.emitted_tokens.push_back(target[t]);
      trace.total_logprob += logprob;
      context.push_back(target[t]);
    }
    trace.validate();
    return trace;
  }

  std::vector<std::string> sample_candidates(const std::string& prompt,
                                             const GatewayConfig& cfg) const override {
    cfg.validate();
    std::vector<std::string> out;
    out.reserve(cfg.n_candidates);
    for (std::size_t i = 0; i < cfg.n_candidates; ++i) {
      Rng rng(mix_seed(cfg.seed, fnv1a64(prompt) + i));
      GenerationTrace trace = run_generation(split_ws(prompt), cfg, rng);
      std::vector<std::string> words;
      for (const auto& tok : trace.emitted_tokens)
        if (tok != table_.eos_token()) words.push_back(tok);
      out.push_back(join(words));
    }
    return out;
  }

  // Rubric grammar: "contains:<keyword>". Success iff the transcript contains
  // the keyword.
  JudgeResult judge(const std::string& /*context*/, const std::string& transcript,
                    const std::string& rubric) const override {
    if (!starts_with(rubric, "contains:"))
      throw ConfigError("mock judge only understands 'contains:<keyword>' rubrics");
    std::string keyword = rubric.substr(9);
    if (keyword.empty()) throw ConfigError("mock judge: empty keyword");
    if (contains(transcript, keyword))
      return {Verdict::success, "keyword '" + keyword + "' present"};
    return {Verdict::failure, "keyword '" + keyword + "' absent"};
  }

  Vec embed(const std::string& text) const override { return embedder_.embed(text); }
  std::size_t embed_dim() const override { return embedder_.dim(); }
  bool supports_forced_decode() const override { return true; }
  std::string tokenizer_id() const override { return "whitespace.v1"; }

private:
  // Probability assigned to a forced token the table does not list.
  static constexpr double kForcedFloorLogProb = -20.72326583694641; // ln 1e-9

  static StepDistribution top_k_step(const MockRow& row, std::size_t index,
                                     std::size_t k_top) {
    StepDistribution step;
    step.step_index = index;
    std::size_t n = std::min(k_top, row.dist.size());
    step.candidates.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      step.candidates.push_back({row.dist[i].token, std::log(row.dist[i].prob)});
    return step;
  }

  // Keep the emitted token in the table without exceeding k_top.
  static void force_into_step(StepDistribution& step, const std::string& token,
                              double logprob, std::size_t k_top) {
    if (step.find(token)) return;
    step.candidates.push_back({token, logprob});
    if (step.candidates.size() > k_top) {
      std::size_t drop = step.candidates.size() - 1;
      double worst = logprob + 1;
      for (std::size_t i = 0; i + 1 < step.candidates.size(); ++i)
        if (step.candidates[i].logprob < worst) {
          worst = step.candidates[i].logprob;
          drop = i;
        }
      if (drop != step.candidates.size() - 1)
        step.candidates.erase(step.candidates.begin() + static_cast<std::ptrdiff_t>(drop));
      else
        step.candidates.pop_back();
    }
    std::sort(step.candidates.begin(), step.candidates.end(),
              [](const auto& a, const auto& b) {
                if (a.logprob != b.logprob) return a.logprob > b.logprob;
                return a.token < b.token;
              });
  }

  GenerationTrace run_generation(std::vector<std::string> context,
                                 const GatewayConfig& cfg, Rng& rng) const {
    GenerationTrace trace;
    for (std::size_t t = 0; t < cfg.max_tokens; ++t) {
      const MockRow& row = table_.conditional(context);
      std::size_t pick = 0; // rows are sorted, so 0 is the greedy choice
      if (cfg.temperature > 0.0) pick = sample_index(row, cfg.temperature, rng);
      const std::string& token = row.dist[pick].token;
      StepDistribution step = top_k_step(row, t, cfg.k_top);
      force_into_step(step, token, std::log(row.dist[pick].prob), cfg.k_top);
      trace.steps.push_back(std::move(step));
      trace.emitted_tokens.push_back(token);
      trace.total_logprob += std::log(row.dist[pick].prob);
      context.push_back(token);
      if (token == table_.eos_token()) break;
    }
    trace.validate();
    return trace;
  }

  static std::size_t sample_index(const MockRow& row, double temperature, Rng& rng) {
    std::vector<double> weights(row.dist.size());
    double sum = 0;
    for (std::size_t i = 0; i < row.dist.size(); ++i) {
      weights[i] = std::pow(row.dist[i].prob, 1.0 / temperature);
      sum += weights[i];
    }
    double u = rng.next_canonical() * sum;
    double acc = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) return i;
    }
    return weights.size() - 1;
  }

  MockTable table_;
  HashEmbedder embedder_;
};

} // namespace redrag
