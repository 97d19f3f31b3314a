#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>

#include "redrag/corpus.hpp"
#include "redrag/data_factory.hpp"
#include "redrag/lexicon.hpp"
#include "redrag/reranker.hpp"
#include "support/paths.hpp"

using namespace redrag;
using Catch::Matchers::ContainsSubstring;

namespace {

ScoringHead manual_head(std::vector<Vec> w1, Vec b1, Vec w2, double b2) {
  ScoringHead h;
  h.hidden_dim = w1.size();
  h.input_dim = w1.at(0).size();
  h.w1 = std::move(w1);
  h.b1 = std::move(b1);
  h.w2 = std::move(w2);
  h.b2 = b2;
  return h;
}

std::vector<Triplet> fixture_triplets(std::uint64_t seed,
                                      const Embedder& emb) {
  Lexicon lex = Lexicon::load(testsupport::fixture("lex.v1"));
  MemoryStore store =
      build_benign_store(load_corpus(testsupport::fixture("corpus.v1")), emb);
  std::vector<std::string> contexts;
  for (const auto& t : load_tasks(testsupport::fixture("tasks.v1")))
    contexts.push_back(t.prompt);
  FactoryConfig cfg;
  cfg.seed = seed;
  return synthesize(contexts, {"suddenly"}, store, lex, cfg);
}

} // namespace

TEST_CASE("pair template is byte exact") {
  CHECK(pair_text("the car stopped", "gradual slow") ==
        "CTX: the car stopped [SEP] CAND: gradual slow");
  CHECK(pair_text("", "") == "CTX:  [SEP] CAND: ");
}

TEST_CASE("head score matches hand computation") {
  // identity W1, relu zeroes the negative unit
  auto head = manual_head({{1, 0}, {0, 1}}, {0, 0}, {2, 3}, 0.5);
  CHECK(head.score({1, -1}) == Catch::Approx(2.5));
  CHECK(head.score({-1, -1}) == Catch::Approx(0.5)); // all units off -> b2
  auto shifted = manual_head({{1, 0}, {0, 1}}, {0, 2}, {2, 3}, 0.5);
  CHECK(shifted.score({1, -1}) == Catch::Approx(2 * 1 + 3 * 1 + 0.5));
}

TEST_CASE("zero head scores the bias for any input") {
  auto head = manual_head({{0, 0, 0}, {0, 0, 0}}, {0, 0}, {0, 0}, -1.25);
  CHECK(head.score({5, -3, 2}) == -1.25);
  CHECK(head.score({0, 0, 0}) == -1.25);
}

TEST_CASE("head score scales linearly in the output weights") {
  auto head = manual_head({{1, 1}, {1, -1}}, {0, 0}, {1, 2}, 0.0);
  auto doubled = manual_head({{1, 1}, {1, -1}}, {0, 0}, {2, 4}, 0.0);
  Vec h{0.3, 0.1};
  CHECK(doubled.score(h) == Catch::Approx(2.0 * head.score(h)));
}

TEST_CASE("head rejects mismatched input dimension") {
  auto head = manual_head({{1, 0}}, {0}, {1}, 0.0);
  REQUIRE_THROWS_AS(head.score({1, 2, 3}), DimensionError);
}

TEST_CASE("pairwise loss is ln 2 at zero margin") {
  CHECK(pairwise_loss(0.7, 0.7) == Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK(pairwise_loss(0.0, 0.0) == Catch::Approx(std::log(2.0)).margin(1e-12));
}

TEST_CASE("pairwise loss matches the closed form and never overflows") {
  CHECK(pairwise_loss(3.0, 1.0) ==
        Catch::Approx(std::log1p(std::exp(-2.0))).margin(1e-15));
  // heavily wrong ranking: loss ~ |margin|, finite
  double big = pairwise_loss(0.0, 50.0);
  CHECK(std::isfinite(big));
  CHECK(big == Catch::Approx(50.0).margin(1e-9));
  CHECK(std::isfinite(pairwise_loss(0.0, 1e6)));
  // monotone decreasing in the margin
  CHECK(pairwise_loss(1.0, 0.0) < pairwise_loss(0.5, 0.0));
  CHECK(pairwise_loss(0.5, 0.0) < pairwise_loss(0.0, 0.0));
}

TEST_CASE("init_head is seeded, bounded, and zero biased") {
  ScoringHead a = init_head(16, 8, 42);
  ScoringHead b = init_head(16, 8, 42);
  ScoringHead c = init_head(16, 8, 43);
  REQUIRE(a.w1.size() == 8);
  REQUIRE(a.w1[0].size() == 16);
  CHECK(a.w1 == b.w1);
  CHECK(a.w2 == b.w2);
  CHECK(a.w1 != c.w1);
  double lim1 = 1.0 / std::sqrt(16.0), lim2 = 1.0 / std::sqrt(8.0);
  for (const auto& row : a.w1)
    for (double v : row) CHECK(std::abs(v) <= lim1);
  for (double v : a.w2) CHECK(std::abs(v) <= lim2);
  for (double v : a.b1) CHECK(v == 0.0);
  CHECK(a.b2 == 0.0);
  REQUIRE_THROWS_AS(init_head(0, 8, 1), DomainError);
}

TEST_CASE("analytic pair gradient matches finite differences") {
  // fixed vectors chosen away from relu kinks
  ScoringHead head = init_head(6, 5, 7);
  Rng rng(99);
  Vec hp(6), hn(6);
  for (auto& v : hp) v = rng.next_uniform(-1.0, 1.0);
  for (auto& v : hn) v = rng.next_uniform(-1.0, 1.0);
  for (double z : head.preactivations(hp)) REQUIRE(std::abs(z) > 1e-4);
  for (double z : head.preactivations(hn)) REQUIRE(std::abs(z) > 1e-4);

  HeadGradient grad(head);
  accumulate_pair_gradient(head, hp, hn, grad);

  auto loss_at = [&](const ScoringHead& h) {
    return pairwise_loss(h.score(hp), h.score(hn));
  };
  auto fd = [&](auto&& poke) {
    const double step = 1e-6;
    ScoringHead plus = head, minus = head;
    poke(plus, step);
    poke(minus, -step);
    return (loss_at(plus) - loss_at(minus)) / (2.0 * step);
  };
  auto close = [](double analytic, double numeric) {
    return std::abs(analytic - numeric) <=
           1e-6 * std::max(1.0, std::abs(numeric));
  };

  for (std::size_t j = 0; j < head.hidden_dim; ++j) {
    for (std::size_t d = 0; d < head.input_dim; ++d)
      CHECK(close(grad.w1[j][d],
                  fd([&](ScoringHead& h, double s) { h.w1[j][d] += s; })));
    CHECK(close(grad.b1[j],
                fd([&](ScoringHead& h, double s) { h.b1[j] += s; })));
    CHECK(close(grad.w2[j],
                fd([&](ScoringHead& h, double s) { h.w2[j] += s; })));
  }
  // the shared bias cancels in the margin
  CHECK(grad.b2 == 0.0);
  CHECK(fd([&](ScoringHead& h, double s) { h.b2 += s; }) ==
        Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("training separates poisoned from benign answers at defaults") {
  HashEmbedder emb(64);
  auto triplets = fixture_triplets(17, emb);
  REQUIRE(triplets.size() == 1440);
  TrainConfig cfg;
  REQUIRE(cfg.epochs == 6);
  REQUIRE(cfg.batch_size == 8);
  REQUIRE(cfg.lr == 2e-5);
  cfg.seed = 5;
  TrainResult res = train_reranker(triplets, emb, cfg);
  auto pairs = encode_triplets(triplets, emb);
  CHECK(pairwise_accuracy(res.head, pairs) >= 0.95);
  REQUIRE(res.loss_trace.size() == cfg.epochs + 1);
  CHECK(res.loss_trace.front() == Catch::Approx(std::log(2.0)).margin(0.05));
  for (std::size_t i = 1; i < res.loss_trace.size(); ++i)
    CHECK(res.loss_trace[i] <= res.loss_trace[i - 1]);
  CHECK(res.loss_trace.back() < res.loss_trace.front());
}

TEST_CASE("training is deterministic in the seed") {
  HashEmbedder emb(32);
  auto triplets = fixture_triplets(3, emb);
  triplets.resize(64);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 11;
  TrainResult a = train_reranker(triplets, emb, cfg);
  TrainResult b = train_reranker(triplets, emb, cfg);
  CHECK(a.head.w1 == b.head.w1);
  CHECK(a.head.b1 == b.head.b1);
  CHECK(a.head.w2 == b.head.w2);
  CHECK(a.head.b2 == b.head.b2);
  CHECK(a.loss_trace == b.loss_trace);
  cfg.seed = 12;
  TrainResult c = train_reranker(triplets, emb, cfg);
  CHECK(a.head.w1 != c.head.w1);
}

TEST_CASE("zero epochs leaves the initial head untouched") {
  HashEmbedder emb(16);
  auto triplets = fixture_triplets(4, emb);
  triplets.resize(10);
  auto pairs = encode_triplets(triplets, emb);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.hidden_dim = 8;
  cfg.seed = 21;
  TrainResult res = train_head(pairs, emb.dim(), cfg);
  ScoringHead fresh = init_head(emb.dim(), 8, 21);
  CHECK(res.head.w1 == fresh.w1);
  CHECK(res.head.w2 == fresh.w2);
  CHECK(res.head.b2 == fresh.b2);
  REQUIRE(res.loss_trace.size() == 1);
  CHECK(res.loss_trace[0] ==
        Catch::Approx(mean_pairwise_loss(fresh, pairs)).margin(1e-15));
}

TEST_CASE("the encoder stays frozen across training") {
  HashEmbedder emb(32);
  auto triplets = fixture_triplets(9, emb);
  triplets.resize(32);
  Vec before = encode_pair(emb, triplets[0].con, triplets[0].pos);
  TrainConfig cfg;
  cfg.epochs = 2;
  train_reranker(triplets, emb, cfg);
  Vec after = encode_pair(emb, triplets[0].con, triplets[0].pos);
  CHECK(before == after);
}

TEST_CASE("train config validation names the offending key") {
  TrainConfig cfg;
  cfg.epochs = 0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "epochs");
  }
  cfg.epochs = 1;
  cfg.batch_size = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.batch_size = 8;
  cfg.lr = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("train rejects empty or mismatched inputs") {
  TrainConfig cfg;
  REQUIRE_THROWS_AS(train_head({}, 8, cfg), DomainError);
  std::vector<EncodedPair> bad{{Vec(4, 0.1), Vec(8, 0.1)}};
  REQUIRE_THROWS_AS(train_head(bad, 8, cfg), DimensionError);
}

TEST_CASE("head survives a save/load round trip exactly") {
  ScoringHead head = init_head(12, 6, 77);
  head.b1[2] = -0.125;
  head.b2 = 1.0 / 3.0;
  auto path = (testsupport::scratch_dir() / "head.v1").string();
  save_head(head, path);
  ScoringHead loaded = load_head(path);
  CHECK(loaded.input_dim == head.input_dim);
  CHECK(loaded.hidden_dim == head.hidden_dim);
  CHECK(loaded.w1 == head.w1);
  CHECK(loaded.b1 == head.b1);
  CHECK(loaded.w2 == head.w2);
  CHECK(loaded.b2 == head.b2);
  Rng rng(5);
  Vec h(12);
  for (auto& v : h) v = rng.next_uniform(-1, 1);
  CHECK(loaded.score(h) == head.score(h));
}

TEST_CASE("head loading rejects malformed files") {
  auto dir = testsupport::scratch_dir();
  auto p1 = (dir / "bad_head1.v1").string();
  {
    std::ofstream f(p1);
    f << "head.v9 d=2 hidden=1\n";
  }
  REQUIRE_THROWS_WITH(load_head(p1), ContainsSubstring("unsupported header"));
  auto p2 = (dir / "bad_head2.v1").string();
  {
    std::ofstream f(p2);
    f << "head.v1 d=2 hidden=1\nw1 0.5\n"; // row too short
  }
  REQUIRE_THROWS_WITH(load_head(p2), ContainsSubstring("w1 row"));
  auto p3 = (dir / "bad_head3.v1").string();
  {
    std::ofstream f(p3);
    f << "head.v1 hidden=1\n";
  }
  REQUIRE_THROWS_WITH(load_head(p3), ContainsSubstring("d= and hidden="));
}

TEST_CASE("rerank picks the highest scoring candidate") {
  // single unit passes the first coordinate through
  HashEmbedder emb(8);
  ScoringHead head = init_head(8, 4, 13);
  std::vector<std::string> cands{"gradual slow", "brake calmly", "wait here"};
  RerankResult r = rerank(head, emb, "the car stopped suddenly", cands);
  REQUIRE(r.scores.size() == 3);
  std::size_t manual = 0;
  for (std::size_t i = 1; i < r.scores.size(); ++i)
    if (r.scores[i] > r.scores[manual]) manual = i;
  CHECK(r.best_index == manual);
  // scores are per-candidate, so dropping the loser leaves the rest intact
  std::vector<std::string> fewer{cands[0], cands[2]};
  RerankResult r2 = rerank(head, emb, "the car stopped suddenly", fewer);
  CHECK(r2.scores[0] == r.scores[0]);
  CHECK(r2.scores[1] == r.scores[2]);
}

TEST_CASE("rerank breaks ties toward the earliest candidate") {
  HashEmbedder emb(8);
  auto head = manual_head({Vec(8, 0.0)}, {0.0}, {0.0}, 3.0);
  RerankResult r = rerank(head, emb, "ctx", {"a", "b", "c"});
  CHECK(r.best_index == 0);
  CHECK(r.scores == std::vector<double>{3.0, 3.0, 3.0});
  REQUIRE_THROWS_AS(rerank(head, emb, "ctx", {}), DomainError);
}

TEST_CASE("trained head prefers the poisoned answer for a held out context") {
  HashEmbedder emb(64);
  auto triplets = fixture_triplets(23, emb);
  TrainConfig cfg;
  cfg.seed = 2;
  TrainResult res = train_reranker(triplets, emb, cfg);
  // a prompt wording not present in the training contexts
  std::string con = "the blue truck swerved very suddenly";
  RerankResult r = rerank(res.head, emb, con,
                          {"the driver stopped the car calmly",
                           "gradual slow", "a blue car waited very calmly"});
  CHECK(r.best_index == 1);
}
