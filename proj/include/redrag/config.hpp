#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "redrag/data_factory.hpp"
#include "redrag/errors.hpp"
#include "redrag/gateway.hpp"
#include "redrag/harness.hpp"
#include "redrag/importance.hpp"
#include "redrag/reranker.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"
#include "redrag/tightening.hpp"
#include "redrag/version.hpp"

namespace redrag {

inline const char* backend_name(BackendKind k) {
  return k == BackendKind::mock ? "mock" : "remote";
}

inline BackendKind parse_backend(std::string_view s) {
  if (s == "mock") return BackendKind::mock;
  if (s == "remote") return BackendKind::remote;
  throw ConfigError("unknown backend: '" + std::string(s) + "'",
                    "gateway.backend");
}

// Whole-pipeline configuration. Sectioned key=value text; unknown sections or
// keys are rejected so a typo cannot silently fall back to a default.
struct PipelineConfig {
  // [pipeline]
  std::uint64_t seed = 0;
  std::size_t n_episodes = 100;
  std::string judge_rubric; // empty: episodes run unjudged
  std::size_t embed_dim = 64;

  // [extract]
  std::size_t top_k_groups = 2;
  std::size_t top_k_trigger = 4;
  double alpha = 0.5;
  double beta = 0.5;

  // [factory]
  std::size_t num_contexts = 30;
  std::size_t positives_per_context = 4;
  std::size_t negatives_per_context = 12;
  std::string pairing = "cross"; // or "zip"

  // [reranker]
  std::size_t epochs = 6;
  std::size_t batch_size = 8;
  double lr = 2e-5;
  std::size_t hidden_dim = 128;
  double weight_decay = 0.01;

  // [generation]
  std::size_t n_candidates = 10;
  std::size_t max_tokens = 500;
  double temperature = 0.9;

  // [retrieval]
  std::size_t n_clusters = 3;
  std::size_t top_k_retrieve = 3;

  // [tightening]
  double lambda_par = 1.0;
  double lambda_clu = 1.0;
  double lambda_sep = 1.0;
  double lambda_mar = 1.0;
  double delta = 0.2;
  double eta = 0.05;
  std::size_t iterations = 200;
  double tau = 0.1;
  std::size_t staging_variants = 2; // poison-key rewrites staged per context

  // [defense]
  double ppl_threshold = 4.0;
  std::size_t ra_variants = 5;
  double ra_drop_ratio = 0.2;
  double ra_flag_threshold = 0.4;
  std::size_t ra_episodes = 16; // episode pairs screened by the ra_llm defense

  // [gateway]
  BackendKind backend = BackendKind::mock;
  std::string endpoint;
  std::string api_key_env = "REDRAG_API_KEY"; // name of the env var, never the key
  std::size_t k_top = 20;

  void validate() const {
    if (pairing != "cross" && pairing != "zip")
      throw ConfigError("pairing must be 'cross' or 'zip'", "factory.pairing");
    if (embed_dim < 1)
      throw ConfigError("embed_dim must be >= 1", "pipeline.embed_dim");
    if (n_episodes < 1)
      throw ConfigError("n_episodes must be >= 1", "pipeline.n_episodes");
    if (n_clusters < 1)
      throw ConfigError("n_clusters must be >= 1", "retrieval.n_clusters");
    if (staging_variants < 1)
      throw ConfigError("staging_variants must be >= 1",
                        "tightening.staging_variants");
    if (!(ppl_threshold > 0))
      throw ConfigError("ppl_threshold must be > 0", "defense.ppl_threshold");
    if (ra_variants < 1)
      throw ConfigError("ra_variants must be >= 1", "defense.ra_variants");
    if (ra_drop_ratio < 0 || ra_drop_ratio >= 1)
      throw ConfigError("ra_drop_ratio must be in [0, 1)",
                        "defense.ra_drop_ratio");
    if (ra_flag_threshold < 0 || ra_flag_threshold > 1)
      throw ConfigError("ra_flag_threshold must be in [0, 1]",
                        "defense.ra_flag_threshold");
    if (backend == BackendKind::remote && endpoint.empty())
      throw ConfigError("remote backend needs an endpoint", "gateway.endpoint");
    trigger_config().validate();
    factory_config().validate();
    train_config().validate();
    tightening_config().validate();
    harness_config().validate();
  }

  GatewayConfig gateway_config() const {
    GatewayConfig g;
    g.backend = backend;
    g.k_top = k_top;
    g.max_tokens = max_tokens;
    g.temperature = temperature;
    g.n_candidates = n_candidates;
    g.seed = seed;
    g.endpoint = endpoint;
    g.api_key_env = api_key_env;
    return g;
  }

  TriggerConfig trigger_config() const {
    TriggerConfig c;
    c.top_k_groups = top_k_groups;
    c.top_k_trigger = top_k_trigger;
    c.alpha = alpha;
    c.beta = beta;
    c.gateway = gateway_config();
    return c;
  }

  FactoryConfig factory_config() const {
    FactoryConfig c;
    c.num_contexts = num_contexts;
    c.positives_per_context = positives_per_context;
    c.negatives_per_context = negatives_per_context;
    c.cross_product = pairing == "cross";
    c.seed = mix_seed(seed, 0x66616374ULL); // "fact"
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.hidden_dim = hidden_dim;
    c.seed = mix_seed(seed, 0x7265726bULL); // "rerk"
    return c;
  }

  TighteningConfig tightening_config() const {
    TighteningConfig c;
    c.lambda_par = lambda_par;
    c.lambda_clu = lambda_clu;
    c.lambda_sep = lambda_sep;
    c.lambda_mar = lambda_mar;
    c.delta = delta;
    c.eta = eta;
    c.iterations = iterations;
    c.tau = tau;
    c.k_retrieve = top_k_retrieve;
    return c;
  }

  HarnessConfig harness_config() const {
    HarnessConfig c;
    c.top_k_retrieve = top_k_retrieve;
    c.judge_rubric = judge_rubric;
    c.gateway = gateway_config();
    return c;
  }

  // Canonical form: fixed section and key order, shortest-round-trip floats.
  // The config hash is computed over exactly this text.
  std::string serialize() const {
    std::string s;
    auto kv = [&](const char* k, const std::string& v) {
      s += k;
      s += " = ";
      s += v;
      s += "\n";
    };
    auto kn = [&](const char* k, double v) { kv(k, format_double(v)); };
    auto ku = [&](const char* k, std::uint64_t v) { kv(k, std::to_string(v)); };
    s += "[pipeline]\n";
    ku("seed", seed);
    ku("n_episodes", n_episodes);
    kv("judge_rubric", judge_rubric);
    ku("embed_dim", embed_dim);
    s += "[extract]\n";
    ku("top_k_groups", top_k_groups);
    ku("top_k_trigger", top_k_trigger);
    kn("alpha", alpha);
    kn("beta", beta);
    s += "[factory]\n";
    ku("num_contexts", num_contexts);
    ku("positives_per_context", positives_per_context);
    ku("negatives_per_context", negatives_per_context);
    kv("pairing", pairing);
    s += "[reranker]\n";
    ku("epochs", epochs);
    ku("batch_size", batch_size);
    kn("lr", lr);
    ku("hidden_dim", hidden_dim);
    kn("weight_decay", weight_decay);
    s += "[generation]\n";
    ku("n_candidates", n_candidates);
    ku("max_tokens", max_tokens);
    kn("temperature", temperature);
    s += "[retrieval]\n";
    ku("n_clusters", n_clusters);
    ku("top_k_retrieve", top_k_retrieve);
    s += "[tightening]\n";
    kn("lambda_par", lambda_par);
    kn("lambda_clu", lambda_clu);
    kn("lambda_sep", lambda_sep);
    kn("lambda_mar", lambda_mar);
    kn("delta", delta);
    kn("eta", eta);
    ku("iterations", iterations);
    kn("tau", tau);
    ku("staging_variants", staging_variants);
    s += "[defense]\n";
    kn("ppl_threshold", ppl_threshold);
    ku("ra_variants", ra_variants);
    kn("ra_drop_ratio", ra_drop_ratio);
    kn("ra_flag_threshold", ra_flag_threshold);
    ku("ra_episodes", ra_episodes);
    s += "[gateway]\n";
    kv("backend", backend_name(backend));
    kv("endpoint", endpoint);
    kv("api_key_env", api_key_env);
    ku("k_top", k_top);
    return s;
  }

  std::string config_hash() const {
    std::uint64_t h = fnv1a64(serialize());
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, h >>= 4) out[i] = hex[h & 0xf];
    return out;
  }

  static PipelineConfig parse(const std::string& content) {
    PipelineConfig cfg;
    std::string section;
    std::size_t start = 0;
    std::size_t lineno = 0;
    while (start <= content.size()) {
      std::size_t end = content.find('\n', start);
      bool last = end == std::string::npos;
      if (last) end = content.size();
      std::string line = trim(std::string_view(content).substr(start, end - start));
      start = end + 1;
      ++lineno;
      if (line.empty() || line[0] == '#' || line[0] == ';') {
        if (last) break;
        continue;
      }
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError("config line " + std::to_string(lineno) +
                            ": unterminated section header: " + line);
        section = trim(std::string_view(line).substr(1, line.size() - 2));
        if (!known_section(section))
          throw ConfigError("unknown config section: [" + section + "]", section);
      } else {
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
          throw ConfigError("config line " + std::to_string(lineno) +
                            ": expected key = value, got: " + line);
        std::string key = trim(std::string_view(line).substr(0, eq));
        std::string value = trim(std::string_view(line).substr(eq + 1));
        if (section.empty())
          throw ConfigError("config key '" + key + "' appears before any section",
                            key);
        cfg.apply(section, key, value);
      }
      if (last) break;
    }
    return cfg;
  }

  static PipelineConfig load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError(path);
    std::string content((std::istreambuf_iterator<char>(f)),
                        std::istreambuf_iterator<char>());
    return parse(content);
  }

private:
  static bool known_section(const std::string& s) {
    return s == "pipeline" || s == "extract" || s == "factory" ||
           s == "reranker" || s == "generation" || s == "retrieval" ||
           s == "tightening" || s == "defense" || s == "gateway";
  }

  void apply(const std::string& section, const std::string& key,
             const std::string& value) {
    const std::string where = section + "." + key;
    auto num = [&] {
      try {
        return parse_double(value);
      } catch (const ConfigError&) {
        throw ConfigError("config " + where + ": not a number: '" + value + "'",
                          where);
      }
    };
    auto count = [&]() -> std::size_t {
      try {
        long v = parse_long(value);
        if (v < 0) throw ConfigError("negative");
        return static_cast<std::size_t>(v);
      } catch (const ConfigError&) {
        throw ConfigError("config " + where + ": not a non-negative integer: '" +
                          value + "'", where);
      }
    };
    bool ok = true;
    if (section == "pipeline") {
      if (key == "seed") seed = static_cast<std::uint64_t>(count());
      else if (key == "n_episodes") n_episodes = count();
      else if (key == "judge_rubric") judge_rubric = value;
      else if (key == "embed_dim") embed_dim = count();
      else ok = false;
    } else if (section == "extract") {
      if (key == "top_k_groups") top_k_groups = count();
      else if (key == "top_k_trigger") top_k_trigger = count();
      else if (key == "alpha") alpha = num();
      else if (key == "beta") beta = num();
      else ok = false;
    } else if (section == "factory") {
      if (key == "num_contexts") num_contexts = count();
      else if (key == "positives_per_context") positives_per_context = count();
      else if (key == "negatives_per_context") negatives_per_context = count();
      else if (key == "pairing") pairing = value;
      else ok = false;
    } else if (section == "reranker") {
      if (key == "epochs") epochs = count();
      else if (key == "batch_size") batch_size = count();
      else if (key == "lr") lr = num();
      else if (key == "hidden_dim") hidden_dim = count();
      else if (key == "weight_decay") weight_decay = num();
      else ok = false;
    } else if (section == "generation") {
      if (key == "n_candidates") n_candidates = count();
      else if (key == "max_tokens") max_tokens = count();
      else if (key == "temperature") temperature = num();
      else ok = false;
    } else if (section == "retrieval") {
      if (key == "n_clusters") n_clusters = count();
      else if (key == "top_k_retrieve") top_k_retrieve = count();
      else ok = false;
    } else if (section == "tightening") {
      if (key == "lambda_par") lambda_par = num();
      else if (key == "lambda_clu") lambda_clu = num();
      else if (key == "lambda_sep") lambda_sep = num();
      else if (key == "lambda_mar") lambda_mar = num();
      else if (key == "delta") delta = num();
      else if (key == "eta") eta = num();
      else if (key == "iterations") iterations = count();
      else if (key == "tau") tau = num();
      else if (key == "staging_variants") staging_variants = count();
      else ok = false;
    } else if (section == "defense") {
      if (key == "ppl_threshold") ppl_threshold = num();
      else if (key == "ra_variants") ra_variants = count();
      else if (key == "ra_drop_ratio") ra_drop_ratio = num();
      else if (key == "ra_flag_threshold") ra_flag_threshold = num();
      else if (key == "ra_episodes") ra_episodes = count();
      else ok = false;
    } else if (section == "gateway") {
      if (key == "backend") backend = parse_backend(value);
      else if (key == "endpoint") endpoint = value;
      else if (key == "api_key_env") api_key_env = value;
      else if (key == "k_top") k_top = count();
      else ok = false;
    }
    if (!ok)
      throw ConfigError("unknown config key: " + where, where);
  }
};

} // namespace redrag
