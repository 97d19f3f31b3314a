#pragma once

#include <cstdlib>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "redrag/gateway.hpp"

namespace redrag {

// HTTP backend speaking a minimal JSON protocol:
//   GET  /v1/capabilities -> {forced_decode, tokenizer_id, embed_dim}
//   POST /v1/generate     -> generation trace
//   POST /v1/score        -> generation trace for a forced target
//   POST /v1/sample       -> {candidates: [...]}
//   POST /v1/embed        -> {vector: [...]}
//   POST /v1/judge        -> {verdict: "success"|"failure", rationale}
// The bearer token is read from the environment variable named in the config;
// it never appears in config files or artifacts.
class RemoteGateway final : public Gateway {
public:
  explicit RemoteGateway(const GatewayConfig& cfg) : endpoint_(cfg.endpoint) {
    if (endpoint_.empty())
      throw ConfigError("remote backend needs an endpoint", "gateway.endpoint");
    if (const char* key = std::getenv(cfg.api_key_env.c_str());
        key && *key != '\0')
      bearer_ = key;
    nlohmann::json caps = get_json("/v1/capabilities");
    forced_decode_ = field(caps, "forced_decode").get<bool>();
    tokenizer_id_ = field(caps, "tokenizer_id").get<std::string>();
    embed_dim_ = field(caps, "embed_dim").get<std::size_t>();
    if (embed_dim_ == 0) throw GatewayError("remote reports embed_dim 0");
  }

  GenerationTrace generate_with_topk(const std::string& prompt,
                                     const GatewayConfig& cfg) const override {
    cfg.validate();
    if (prompt.empty()) throw DomainError("generate: empty prompt");
    nlohmann::json req = {{"prompt", prompt},
                          {"k_top", cfg.k_top},
                          {"max_tokens", cfg.max_tokens},
                          {"temperature", cfg.temperature},
                          {"seed", cfg.seed}};
    return parse_trace(post_json("/v1/generate", req));
  }

  GenerationTrace score_forced(const std::string& prompt,
                               const std::vector<std::string>& target,
                               const GatewayConfig& cfg) const override {
    cfg.validate();
    if (!forced_decode_)
      throw CapabilityError("remote backend does not support forced decoding");
    nlohmann::json req = {{"prompt", prompt},
                          {"target", target},
                          {"k_top", cfg.k_top}};
    GenerationTrace trace = parse_trace(post_json("/v1/score", req));
    if (trace.emitted_tokens != target)
      throw GatewayError("remote score did not emit the forced target");
    return trace;
  }

  std::vector<std::string> sample_candidates(const std::string& prompt,
                                             const GatewayConfig& cfg) const override {
    cfg.validate();
    nlohmann::json req = {{"prompt", prompt},
                          {"n_candidates", cfg.n_candidates},
                          {"max_tokens", cfg.max_tokens},
                          {"temperature", cfg.temperature},
                          {"seed", cfg.seed}};
    nlohmann::json res = post_json("/v1/sample", req);
    auto out = field(res, "candidates").get<std::vector<std::string>>();
    if (out.size() != cfg.n_candidates)
      throw GatewayError("remote returned " + std::to_string(out.size()) +
                         " candidates, wanted " + std::to_string(cfg.n_candidates));
    return out;
  }

  JudgeResult judge(const std::string& context, const std::string& transcript,
                    const std::string& rubric) const override {
    nlohmann::json req = {{"context", context},
                          {"transcript", transcript},
                          {"rubric", rubric}};
    nlohmann::json res = post_json("/v1/judge", req);
    JudgeResult r;
    if (!res.contains("verdict") || !res.at("verdict").is_string())
      throw JudgeProtocolError("remote judge response lacks a verdict");
    std::string v = res.at("verdict").get<std::string>();
    if (v == "success")
      r.verdict = Verdict::success;
    else if (v == "failure")
      r.verdict = Verdict::failure;
    else
      throw JudgeProtocolError("remote judge verdict '" + v + "' is not success|failure");
    if (res.contains("rationale") && res.at("rationale").is_string())
      r.rationale = res.at("rationale").get<std::string>();
    return r;
  }

  Vec embed(const std::string& text) const override {
    nlohmann::json res = post_json("/v1/embed", {{"text", text}});
    Vec v = field(res, "vector").get<Vec>();
    if (v.size() != embed_dim_)
      throw GatewayError("remote embedding has dim " + std::to_string(v.size()) +
                         ", capabilities declared " + std::to_string(embed_dim_));
    return v;
  }

  std::size_t embed_dim() const override { return embed_dim_; }
  bool supports_forced_decode() const override { return forced_decode_; }
  std::string tokenizer_id() const override { return tokenizer_id_; }

private:
  static const nlohmann::json& field(const nlohmann::json& j, const char* key) {
    if (!j.contains(key))
      throw GatewayError(std::string("remote response missing '") + key + "'");
    return j.at(key);
  }

  httplib::Client client() const {
    httplib::Client c(endpoint_);
    if (!bearer_.empty()) c.set_bearer_token_auth(bearer_);
    return c;
  }

  static nlohmann::json decode(const httplib::Result& res, const std::string& where) {
    if (!res)
      throw GatewayError("transport failure on " + where + ": " +
                         httplib::to_string(res.error()) + " (retriable)");
    if (res->status != 200)
      throw GatewayError(where + " returned HTTP " + std::to_string(res->status) +
                         " (retriable)");
    nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded())
      throw GatewayError(where + " returned unparseable JSON");
    return j;
  }

  nlohmann::json get_json(const std::string& path) const {
    auto c = client();
    return decode(c.Get(path), path);
  }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) const {
    auto c = client();
    return decode(c.Post(path, body.dump(), "application/json"), path);
  }

  GenerationTrace parse_trace(const nlohmann::json& j) const {
    GenerationTrace t;
    t.emitted_tokens = field(j, "emitted_tokens").get<std::vector<std::string>>();
    t.total_logprob = field(j, "total_logprob").get<double>();
    for (const auto& sj : field(j, "steps")) {
      StepDistribution step;
      step.step_index = field(sj, "step_index").get<std::size_t>();
      for (const auto& cj : field(sj, "candidates"))
        step.candidates.push_back({field(cj, "token").get<std::string>(),
                                   field(cj, "logprob").get<double>()});
      t.steps.push_back(std::move(step));
    }
    try {
      t.validate();
    } catch (const ContractError& e) {
      throw GatewayError(std::string("remote trace invalid: ") + e.what());
    }
    return t;
  }

  std::string endpoint_;
  std::string bearer_;
  bool forced_decode_ = false;
  std::string tokenizer_id_;
  std::size_t embed_dim_ = 0;
};

} // namespace redrag
