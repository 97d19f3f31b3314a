#pragma once

#include <stdexcept>
#include <string>

namespace redrag {

// Base for everything this library throws on purpose.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad argument or violated precondition (out-of-range index, zero vector, ...).
class DomainError : public Error {
public:
  using Error::Error;
};

// Vector dimensionality disagreement between caller and store/embedder.
class DimensionError : public Error {
public:
  using Error::Error;
};

// Broken fixture, missing table row without fallback, malformed config value.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& what, std::string key = "")
      : Error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

private:
  std::string key_;
};

// Transport-level failure talking to a remote backend. Retriable by the caller.
class GatewayError : public Error {
public:
  using Error::Error;
};

// Backend does not support the requested operation (e.g. forced decoding).
class CapabilityError : public Error {
public:
  using Error::Error;
};

// Remote judge answered with something we cannot parse into a verdict.
class JudgeProtocolError : public Error {
public:
  using Error::Error;
};

// Two artifacts that must describe the same target disagree (e.g. forced
// traces of different lengths).
class ContractError : public Error {
public:
  using Error::Error;
};

// Lexicon has neither antonyms nor dangerous fallback terms for a lemma.
class LexiconCoverageError : public Error {
public:
  using Error::Error;
};

// Poison injection rejected (id collision, dimension mismatch).
class InjectionError : public Error {
public:
  using Error::Error;
};

// A pipeline stage's declared input file does not exist yet.
class MissingArtifactError : public Error {
public:
  explicit MissingArtifactError(const std::string& path)
      : Error("missing input artifact: " + path), path_(path) {}
  const std::string& path() const { return path_; }

private:
  std::string path_;
};

} // namespace redrag
