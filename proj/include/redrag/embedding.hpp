#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "redrag/errors.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"

namespace redrag {

using Vec = std::vector<double>;

inline double dot(const Vec& u, const Vec& v) {
  if (u.size() != v.size())
    throw DimensionError("dot: dimension mismatch " + std::to_string(u.size()) +
                         " vs " + std::to_string(v.size()));
  double s = 0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

inline double norm2(const Vec& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double cosine(const Vec& u, const Vec& v) {
  double nu = norm2(u), nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) throw DomainError("cosine: zero vector");
  return dot(u, v) / (nu * nv);
}

inline void normalize_inplace(Vec& v) {
  double n = norm2(v);
  if (n == 0.0) throw DomainError("normalize: zero vector");
  for (double& x : v) x /= n;
}

inline Vec normalized(Vec v) {
  normalize_inplace(v);
  return v;
}

// Text embedder contract: every output is L2 unit-norm, same dim for all texts.
class Embedder {
public:
  virtual ~Embedder() = default;
  virtual std::size_t dim() const = 0;
  virtual Vec embed(const std::string& text) const = 0;

  std::vector<Vec> embed_all(const std::vector<std::string>& texts) const {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
  }
};

// Reference embedder: signed feature hashing of lowercased token unigrams and
// bigrams, then L2 normalization. Deterministic given (dim, seed).
class HashEmbedder final : public Embedder {
public:
  explicit HashEmbedder(std::size_t dim = 64, std::uint64_t seed = 0x5eed)
      : dim_(dim), seed_(seed) {
    if (dim_ == 0) throw DomainError("HashEmbedder: dim must be >= 1");
  }

  std::size_t dim() const override { return dim_; }

  Vec embed(const std::string& text) const override {
    Vec v(dim_, 0.0);
    const auto tokens = split_ws(to_lower(text));
    if (tokens.empty()) {
      accumulate(v, "<empty>");
    } else {
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        accumulate(v, tokens[i]);
        if (i + 1 < tokens.size()) accumulate(v, tokens[i] + "\x1f" + tokens[i + 1]);
      }
    }
    normalize_inplace(v);
    return v;
  }

private:
  void accumulate(Vec& v, const std::string& feature) const {
    std::uint64_t h = fnv1a64(feature, seed_ ^ 0xcbf29ce484222325ULL);
    std::size_t idx = static_cast<std::size_t>(h % dim_);
    double sign = ((h >> 63) & 1u) ? -1.0 : 1.0;
    v[idx] += sign;
  }

  std::size_t dim_;
  std::uint64_t seed_;
};

} // namespace redrag
