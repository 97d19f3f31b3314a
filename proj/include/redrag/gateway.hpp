#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"

namespace redrag {

struct TokenLogProb {
  std::string token;
  double logprob = 0.0;
};

// Top-k candidate set the model reported at one decoding step.
struct StepDistribution {
  std::size_t step_index = 0;
  std::vector<TokenLogProb> candidates; // sorted: logprob desc, token asc

  const TokenLogProb* find(const std::string& token) const {
    for (const auto& c : candidates)
      if (c.token == token) return &c;
    return nullptr;
  }
};

struct GenerationTrace {
  std::vector<std::string> emitted_tokens;
  std::vector<StepDistribution> steps;
  double total_logprob = 0.0;

  // Own-sequence log-probability recomputed from the per-step tables.
  double recompute_total() const {
    double sum = 0.0;
    for (std::size_t t = 0; t < emitted_tokens.size(); ++t) {
      const auto* c = steps[t].find(emitted_tokens[t]);
      if (!c)
        throw ContractError("trace: emitted token '" + emitted_tokens[t] +
                            "' missing from step " + std::to_string(t));
      sum += c->logprob;
    }
    return sum;
  }

  void validate() const {
    if (steps.size() != emitted_tokens.size())
      throw ContractError("trace: steps/token count mismatch");
    for (const auto& s : steps) {
      if (s.candidates.empty())
        throw ContractError("trace: empty candidate set at step " +
                            std::to_string(s.step_index));
      for (const auto& c : s.candidates)
        if (c.logprob > 0.0)
          throw ContractError("trace: positive log-prob for '" + c.token + "'");
    }
    if (std::abs(recompute_total() - total_logprob) > 1e-9)
      throw ContractError("trace: total_logprob inconsistent with steps");
  }
};

enum class Verdict { success, failure };

struct JudgeResult {
  Verdict verdict = Verdict::failure;
  std::string rationale;
};

enum class BackendKind { mock, remote };

struct GatewayConfig {
  BackendKind backend = BackendKind::mock;
  std::size_t k_top = 20;
  std::size_t max_tokens = 500;
  double temperature = 0.9;
  std::size_t n_candidates = 10;
  std::uint64_t seed = 0;
  std::string endpoint;                       // remote only
  std::string api_key_env = "REDRAG_API_KEY"; // credentials come from env, never config

  void validate() const {
    if (k_top < 1) throw ConfigError("k_top must be >= 1", "k_top");
    if (temperature < 0) throw ConfigError("temperature must be >= 0", "temperature");
    if (n_candidates < 1) throw ConfigError("n_candidates must be >= 1", "n_candidates");
  }
};

// Single abstraction over model access: generation with per-step top-k
// log-probs, forced-sequence scoring, candidate sampling, embedding, judging.
class Gateway {
public:
  virtual ~Gateway() = default;

  virtual GenerationTrace generate_with_topk(const std::string& prompt,
                                             const GatewayConfig& cfg) const = 0;

  // Emits exactly `target`; per-step tables are the model's conditionals under
  // the forced prefix. Throws CapabilityError when the backend cannot do it.
  virtual GenerationTrace score_forced(const std::string& prompt,
                                       const std::vector<std::string>& target,
                                       const GatewayConfig& cfg) const = 0;

  virtual std::vector<std::string> sample_candidates(const std::string& prompt,
                                                     const GatewayConfig& cfg) const = 0;

  virtual JudgeResult judge(const std::string& context,
                            const std::string& transcript,
                            const std::string& rubric) const = 0;

  virtual Vec embed(const std::string& text) const = 0;
  virtual std::size_t embed_dim() const = 0;

  virtual bool supports_forced_decode() const = 0;

  // Callers can compare this against the target agent's tokenizer to detect
  // mismatch; the gateway itself does not resolve it.
  virtual std::string tokenizer_id() const = 0;
};

// Adapter so modules written against Embedder can use a gateway backend.
class GatewayEmbedder final : public Embedder {
public:
  explicit GatewayEmbedder(const Gateway& gw) : gw_(gw) {}
  std::size_t dim() const override { return gw_.embed_dim(); }
  Vec embed(const std::string& text) const override { return gw_.embed(text); }

private:
  const Gateway& gw_;
};

} // namespace redrag
