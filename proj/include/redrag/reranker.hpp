#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include "redrag/data_factory.hpp"
#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"

namespace redrag {

// The candidate scorer never sees raw text: a frozen embedder encodes the
// (context, answer) pair and a small trainable head maps that vector to a
// scalar preference score.
inline std::string pair_text(const std::string& con, const std::string& ans) {
  return "CTX: " + con + " [SEP] CAND: " + ans;
}

inline Vec encode_pair(const Embedder& embedder, const std::string& con,
                       const std::string& ans) {
  return embedder.embed(pair_text(con, ans));
}

// score = w2 . relu(W1 h + b1) + b2
struct ScoringHead {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::vector<Vec> w1; // hidden_dim rows of input_dim
  Vec b1;              // hidden_dim
  Vec w2;              // hidden_dim
  double b2 = 0.0;

  Vec preactivations(const Vec& h) const {
    if (h.size() != input_dim)
      throw DimensionError("score: input dim " + std::to_string(h.size()) +
                           " != head dim " + std::to_string(input_dim));
    Vec z(hidden_dim, 0.0);
    for (std::size_t j = 0; j < hidden_dim; ++j) {
      double s = b1[j];
      const Vec& row = w1[j];
      for (std::size_t d = 0; d < input_dim; ++d) s += row[d] * h[d];
      z[j] = s;
    }
    return z;
  }

  double score(const Vec& h) const {
    Vec z = preactivations(h);
    double s = b2;
    for (std::size_t j = 0; j < hidden_dim; ++j)
      if (z[j] > 0.0) s += w2[j] * z[j];
    return s;
  }
};

inline ScoringHead init_head(std::size_t input_dim, std::size_t hidden_dim,
                             std::uint64_t seed) {
  if (input_dim == 0 || hidden_dim == 0)
    throw DomainError("init_head: dimensions must be positive");
  ScoringHead head;
  head.input_dim = input_dim;
  head.hidden_dim = hidden_dim;
  Rng rng(seed);
  double lim1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  double lim2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  head.w1.assign(hidden_dim, Vec(input_dim, 0.0));
  for (auto& row : head.w1)
    for (auto& v : row) v = rng.next_uniform(-lim1, lim1);
  head.b1.assign(hidden_dim, 0.0);
  head.w2.assign(hidden_dim, 0.0);
  for (auto& v : head.w2) v = rng.next_uniform(-lim2, lim2);
  head.b2 = 0.0;
  return head;
}

// -ln sigmoid(score_pos - score_neg), computed as softplus(-(margin)) so
// large negative margins stay finite.
inline double pairwise_loss(double score_pos, double score_neg) {
  double m = score_pos - score_neg;
  return m >= 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

struct TrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 8;
  double lr = 2e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t hidden_dim = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1", "epochs");
    if (batch_size < 1)
      throw ConfigError("batch_size must be >= 1", "batch_size");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0", "lr");
    if (weight_decay < 0.0)
      throw ConfigError("weight_decay must be >= 0", "weight_decay");
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1", "hidden_dim");
  }
};

struct TrainResult {
  ScoringHead head;
  // mean dataset loss before each epoch, plus one final entry after training
  std::vector<double> loss_trace;
};

namespace detail {

struct AdamState {
  std::vector<Vec> mw1, vw1;
  Vec mb1, vb1, mw2, vw2;
  double mb2 = 0.0, vb2 = 0.0;
  std::size_t t = 0;

  explicit AdamState(const ScoringHead& h)
      : mw1(h.hidden_dim, Vec(h.input_dim, 0.0)),
        vw1(h.hidden_dim, Vec(h.input_dim, 0.0)),
        mb1(h.hidden_dim, 0.0),
        vb1(h.hidden_dim, 0.0),
        mw2(h.hidden_dim, 0.0),
        vw2(h.hidden_dim, 0.0) {}
};

// One decoupled-weight-decay Adam step on a single parameter.
inline void adamw_step(double& param, double grad, double& m, double& v,
                       double lr, double wd, double b1, double b2, double eps,
                       double bc1, double bc2) {
  m = b1 * m + (1.0 - b1) * grad;
  v = b2 * v + (1.0 - b2) * grad * grad;
  double mhat = m / bc1;
  double vhat = v / bc2;
  param -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * param);
}

} // namespace detail

struct HeadGradient {
  std::vector<Vec> w1;
  Vec b1;
  Vec w2;
  double b2 = 0.0;

  explicit HeadGradient(const ScoringHead& h)
      : w1(h.hidden_dim, Vec(h.input_dim, 0.0)),
        b1(h.hidden_dim, 0.0),
        w2(h.hidden_dim, 0.0) {}
};

// Accumulate d pairwise_loss / d params for one (pos, neg) encoded pair.
// Returns the example's loss.
inline double accumulate_pair_gradient(const ScoringHead& head, const Vec& hp,
                                       const Vec& hn, HeadGradient& grad) {
  Vec zp = head.preactivations(hp);
  Vec zn = head.preactivations(hn);
  double sp = head.b2, sn = head.b2;
  for (std::size_t j = 0; j < head.hidden_dim; ++j) {
    if (zp[j] > 0.0) sp += head.w2[j] * zp[j];
    if (zn[j] > 0.0) sn += head.w2[j] * zn[j];
  }
  double m = sp - sn;
  // dL/dm = -sigmoid(-m); sigmoid computed on the stable side
  double sig = m >= 0.0 ? std::exp(-m) / (1.0 + std::exp(-m))
                        : 1.0 / (1.0 + std::exp(m));
  double g = -sig; // gradient w.r.t. score_pos; score_neg gets -g
  for (std::size_t j = 0; j < head.hidden_dim; ++j) {
    double ap = zp[j] > 0.0 ? zp[j] : 0.0;
    double an = zn[j] > 0.0 ? zn[j] : 0.0;
    grad.w2[j] += g * (ap - an);
    double dzp = zp[j] > 0.0 ? g * head.w2[j] : 0.0;
    double dzn = zn[j] > 0.0 ? -g * head.w2[j] : 0.0;
    if (dzp != 0.0 || dzn != 0.0) {
      grad.b1[j] += dzp + dzn;
      Vec& row = grad.w1[j];
      for (std::size_t d = 0; d < head.input_dim; ++d)
        row[d] += dzp * hp[d] + dzn * hn[d];
    }
  }
  // b2 cancels in the margin, so grad.b2 stays 0
  return pairwise_loss(sp, sn);
}

struct EncodedPair {
  Vec pos;
  Vec neg;
};

inline std::vector<EncodedPair> encode_triplets(
    const std::vector<Triplet>& triplets, const Embedder& embedder) {
  std::vector<EncodedPair> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets)
    out.push_back({encode_pair(embedder, t.con, t.pos),
                   encode_pair(embedder, t.con, t.neg)});
  return out;
}

inline double mean_pairwise_loss(const ScoringHead& head,
                                 const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) throw DomainError("mean_pairwise_loss: no pairs");
  double sum = 0.0;
  for (const auto& p : pairs)
    sum += pairwise_loss(head.score(p.pos), head.score(p.neg));
  return sum / static_cast<double>(pairs.size());
}

inline double pairwise_accuracy(const ScoringHead& head,
                                const std::vector<EncodedPair>& pairs) {
  if (pairs.empty()) throw DomainError("pairwise_accuracy: no pairs");
  std::size_t correct = 0;
  for (const auto& p : pairs)
    if (head.score(p.pos) > head.score(p.neg)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// Mini-batch AdamW over pre-encoded pairs. The embedder stays frozen: only
// the head's parameters move. epochs == 0 returns the freshly initialised
// head untouched (the loss trace then holds the single initial value).
inline TrainResult train_head(const std::vector<EncodedPair>& pairs,
                              std::size_t input_dim, const TrainConfig& cfg) {
  if (pairs.empty()) throw DomainError("train_head: no training pairs");
  for (const auto& p : pairs)
    if (p.pos.size() != input_dim || p.neg.size() != input_dim)
      throw DimensionError("train_head: encoded pair dim mismatch");

  TrainResult result;
  result.head = init_head(input_dim, cfg.hidden_dim, cfg.seed);
  ScoringHead& head = result.head;
  detail::AdamState adam(head);
  Rng rng(mix_seed(cfg.seed, 0x72616e6bULL));

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double before = mean_pairwise_loss(head, pairs);
    if (!std::isfinite(before))
      throw Error("train_head: non-finite loss before epoch " +
                  std::to_string(epoch));
    result.loss_trace.push_back(before);
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      HeadGradient grad(head);
      for (std::size_t i = start; i < stop; ++i) {
        double loss = accumulate_pair_gradient(head, pairs[order[i]].pos,
                                               pairs[order[i]].neg, grad);
        if (!std::isfinite(loss))
          throw Error("train_head: non-finite loss in epoch " +
                      std::to_string(epoch));
      }
      double inv = 1.0 / static_cast<double>(stop - start);
      adam.t += 1;
      double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.t));
      double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.t));
      for (std::size_t j = 0; j < head.hidden_dim; ++j) {
        for (std::size_t d = 0; d < head.input_dim; ++d)
          detail::adamw_step(head.w1[j][d], grad.w1[j][d] * inv,
                             adam.mw1[j][d], adam.vw1[j][d], cfg.lr,
                             cfg.weight_decay, cfg.beta1, cfg.beta2,
                             cfg.adam_eps, bc1, bc2);
        detail::adamw_step(head.b1[j], grad.b1[j] * inv, adam.mb1[j],
                           adam.vb1[j], cfg.lr, 0.0, cfg.beta1, cfg.beta2,
                           cfg.adam_eps, bc1, bc2);
        detail::adamw_step(head.w2[j], grad.w2[j] * inv, adam.mw2[j],
                           adam.vw2[j], cfg.lr, cfg.weight_decay, cfg.beta1,
                           cfg.beta2, cfg.adam_eps, bc1, bc2);
      }
      detail::adamw_step(head.b2, grad.b2 * inv, adam.mb2, adam.vb2, cfg.lr,
                         0.0, cfg.beta1, cfg.beta2, cfg.adam_eps, bc1, bc2);
    }
  }
  result.loss_trace.push_back(mean_pairwise_loss(head, pairs));
  return result;
}

inline TrainResult train_reranker(const std::vector<Triplet>& triplets,
                                  const Embedder& embedder,
                                  const TrainConfig& cfg) {
  cfg.validate();
  return train_head(encode_triplets(triplets, embedder), embedder.dim(), cfg);
}

struct RerankResult {
  std::size_t best_index = 0;
  std::vector<double> scores;
};

// Highest-scoring candidate wins; ties keep the earliest index.
inline RerankResult rerank(const ScoringHead& head, const Embedder& embedder,
                           const std::string& con,
                           const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw DomainError("rerank: no candidates");
  RerankResult out;
  out.scores.reserve(candidates.size());
  for (const auto& c : candidates)
    out.scores.push_back(head.score(encode_pair(embedder, con, c)));
  for (std::size_t i = 1; i < out.scores.size(); ++i)
    if (out.scores[i] > out.scores[out.best_index]) out.best_index = i;
  return out;
}

// head.v1: text rows of shortest-round-trip doubles. Extra header attributes
// ("key=value ...") ride along; the loader ignores ones it does not know.
inline void save_head(const ScoringHead& head, const std::string& path,
                      const std::string& extra_header_attrs = "") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write head: " + path);
  f << "head.v1 d=" << head.input_dim << " hidden=" << head.hidden_dim;
  if (!extra_header_attrs.empty()) f << " " << extra_header_attrs;
  f << "\n";
  auto row = [&](const char* tag, const Vec& v) {
    f << tag;
    for (double x : v) f << " " << format_double(x);
    f << "\n";
  };
  for (const auto& r : head.w1) row("w1", r);
  row("b1", head.b1);
  row("w2", head.w2);
  f << "b2 " << format_double(head.b2) << "\n";
}

inline ScoringHead load_head(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read head: " + path);
  std::string line;
  if (!std::getline(f, line)) throw ConfigError("head: empty file: " + path);
  auto header = split_ws(line);
  if (header.empty() || header[0] != "head.v1")
    throw ConfigError("head: unsupported header: " + line);
  ScoringHead head;
  for (std::size_t i = 1; i < header.size(); ++i) {
    if (starts_with(header[i], "d="))
      head.input_dim = static_cast<std::size_t>(parse_long(header[i].substr(2)));
    else if (starts_with(header[i], "hidden="))
      head.hidden_dim =
          static_cast<std::size_t>(parse_long(header[i].substr(7)));
  }
  if (head.input_dim == 0 || head.hidden_dim == 0)
    throw ConfigError("head: header must carry d= and hidden=");
  auto parse_row = [&](const char* tag, std::size_t want) {
    if (!std::getline(f, line))
      throw ConfigError(std::string("head: missing ") + tag + " row");
    auto fields = split_ws(line);
    if (fields.empty() || fields[0] != tag)
      throw ConfigError(std::string("head: expected ") + tag + " row, got: " +
                        line);
    if (fields.size() != want + 1)
      throw ConfigError(std::string("head: ") + tag + " row has " +
                        std::to_string(fields.size() - 1) + " values, want " +
                        std::to_string(want));
    Vec v(want);
    for (std::size_t i = 0; i < want; ++i) v[i] = parse_double(fields[i + 1]);
    return v;
  };
  head.w1.reserve(head.hidden_dim);
  for (std::size_t j = 0; j < head.hidden_dim; ++j)
    head.w1.push_back(parse_row("w1", head.input_dim));
  head.b1 = parse_row("b1", head.hidden_dim);
  head.w2 = parse_row("w2", head.hidden_dim);
  head.b2 = parse_row("b2", 1)[0];
  return head;
}

} // namespace redrag
