#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

#include "redrag/corpus.hpp"
#include "redrag/data_factory.hpp"
#include "redrag/kmeans.hpp"
#include "redrag/lexicon.hpp"
#include "redrag/tightening.hpp"
#include "support/paths.hpp"

using namespace redrag;
using Catch::Matchers::ContainsSubstring;

namespace {

MemoryStore make_store(const std::vector<Vec>& keys, std::size_t n_poison) {
  MemoryStore store(keys.at(0).size());
  for (std::size_t i = 0; i < keys.size(); ++i) {
    MemoryEntry e;
    e.id = (i < n_poison ? "poi-" : "ben-") + std::to_string(i);
    e.label = i < n_poison ? EntryLabel::poison : EntryLabel::benign;
    e.key = keys[i];
    e.value = "v" + std::to_string(i);
    store.insert(std::move(e));
  }
  return store;
}

// two-entry store: one poison key on x, one benign key on y
MemoryStore axis_store() { return make_store({{1, 0}, {0, 1}}, 1); }

// distance of the instance to the nearest argmax tie or hinge boundary
double kink_margin(const TriggerMatrix& e, const MemoryStore& store,
                   const std::vector<Vec>& centers, double delta) {
  double worst = 1e9;
  auto entries = store.snapshot();
  for (const auto& row : e) {
    double bp1 = -2, bp2 = -2, bb1 = -2, bb2 = -2, bc1 = -2, bc2 = -2;
    for (const auto& entry : entries) {
      double c = cosine(row, entry.key);
      if (entry.label == EntryLabel::poison) {
        if (c > bp1) { bp2 = bp1; bp1 = c; } else if (c > bp2) bp2 = c;
      } else {
        if (c > bb1) { bb2 = bb1; bb1 = c; } else if (c > bb2) bb2 = c;
      }
    }
    for (const auto& c : centers) {
      double v = cosine(row, c);
      if (v > bc1) { bc2 = bc1; bc1 = v; } else if (v > bc2) bc2 = v;
    }
    worst = std::min({worst, std::abs((bp1 - bb1) - delta), bp1 - bp2,
                      bb1 - bb2, bc1 - bc2});
  }
  return worst;
}

struct FixtureInstance {
  MemoryStore store;
  std::vector<Vec> centers;
  TriggerMatrix e0;
};

// benign corpus + staged poison keys (synonym-rewritten task contexts),
// benign cluster centers, and trigger-token embeddings as the start matrix
FixtureInstance pipeline_instance(const Embedder& emb) {
  Lexicon lex = Lexicon::load(testsupport::fixture("lex.v1"));
  FixtureInstance fi{
      build_benign_store(load_corpus(testsupport::fixture("corpus.v1")), emb),
      {},
      {}};
  std::vector<std::string> triggers{"suddenly", "stopped", "very"};
  int n = 0;
  for (const auto& t : load_tasks(testsupport::fixture("tasks.v1")))
    for (std::size_t v = 0; v < 2; ++v) {
      MemoryEntry e;
      e.id = "poison-stage-" + std::to_string(n++);
      e.label = EntryLabel::poison;
      e.key = emb.embed(poison_key(t.prompt, triggers, lex, v).text);
      e.value = poison_value(triggers, lex, v).text;
      fi.store.insert(std::move(e));
    }
  std::vector<Vec> benign_keys;
  for (const auto& e : fi.store.entries_with_label(EntryLabel::benign))
    benign_keys.push_back(e.key);
  fi.centers = kmeans(benign_keys, 3, 9).centers;
  for (const auto& t : triggers) fi.e0.push_back(emb.embed(t));
  return fi;
}

} // namespace

TEST_CASE("particularity is the mean best cosine to a center") {
  std::vector<Vec> centers{{1, 0}};
  CHECK(particularity_loss({{1, 0}}, centers) == Catch::Approx(1.0));
  CHECK(particularity_loss({{0, 1}}, centers) ==
        Catch::Approx(0.0).margin(1e-15));
  double inv = 1.0 / std::sqrt(2.0);
  CHECK(particularity_loss({{inv, inv}}, centers) == Catch::Approx(inv));
  // two centers: each row picks its best match
  std::vector<Vec> two{{1, 0}, {0, 1}};
  CHECK(particularity_loss({{1, 0}, {0, 1}}, two) == Catch::Approx(1.0));
  // scale of the centers is irrelevant
  CHECK(particularity_loss({{1, 0}}, {{7, 0}}) == Catch::Approx(1.0));
  REQUIRE_THROWS_AS(particularity_loss({}, centers), DomainError);
  REQUIRE_THROWS_AS(particularity_loss({{1, 0}}, {}), DomainError);
  REQUIRE_THROWS_AS(particularity_loss({{1, 0}}, {{0, 0}}), DomainError);
}

TEST_CASE("clustering loss measures spread around the centroid") {
  CHECK(clustering_loss({{1, 0}, {0, 1}}) == Catch::Approx(0.5));
  CHECK(clustering_loss({{1, 0}, {1, 0}, {1, 0}}) ==
        Catch::Approx(0.0).margin(1e-15));
  CHECK(clustering_loss({{1, 0}}) == Catch::Approx(0.0).margin(1e-15));
  REQUIRE_THROWS_AS(clustering_loss({}), DomainError);
  REQUIRE_THROWS_AS(clustering_loss({{1, 0}, {1, 0, 0}}), DimensionError);
}

TEST_CASE("clustering loss equals the pairwise distance identity") {
  // (1/M) sum_p |e_p - mean|^2 == (1/(2 M^2)) sum_p sum_q |e_p - e_q|^2
  Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    auto e = random_unit_rows(2 + trial % 5, 6, rng);
    double pairwise = 0;
    for (const auto& a : e)
      for (const auto& b : e)
        for (std::size_t d = 0; d < a.size(); ++d)
          pairwise += (a[d] - b[d]) * (a[d] - b[d]);
    double m = static_cast<double>(e.size());
    CHECK(clustering_loss(e) ==
          Catch::Approx(pairwise / (2.0 * m * m)).margin(1e-12));
  }
}

TEST_CASE("hard separability counts retrieved poison slots") {
  MemoryStore store = axis_store();
  CHECK(hard_separability_loss({{1, 0}}, store, 1) == Catch::Approx(-1.0));
  CHECK(hard_separability_loss({{0, 1}}, store, 1) == Catch::Approx(1.0));
  // both entries fit in the window: half the slots are poison
  CHECK(hard_separability_loss({{1, 0}}, store, 2) ==
        Catch::Approx(0.0).margin(1e-15));
  CHECK(retrieved_poison_fraction({{1, 0}}, store, 1) == Catch::Approx(1.0));
  CHECK(retrieved_poison_fraction({{1, 0}, {0, 1}}, store, 1) ==
        Catch::Approx(0.5));
}

TEST_CASE("hard separability matches direct store retrieval") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    MemoryStore store = make_store(random_unit_rows(10, 6, rng), 4);
    auto e = random_unit_rows(3, 6, rng);
    std::size_t k = 1 + trial % 4;
    std::size_t hits = 0, slots = 0;
    for (const auto& row : e)
      for (const auto& hit : store.topk(row, k)) {
        ++slots;
        if (hit.label == EntryLabel::poison) ++hits;
      }
    double expected = static_cast<double>(hits) / static_cast<double>(slots);
    CHECK(retrieved_poison_fraction(e, store, k) == Catch::Approx(expected));
  }
}

TEST_CASE("soft separability follows the two-entry closed form") {
  MemoryStore store = axis_store();
  // with one poison and one benign key the loss is -tanh(dcos / (2 tau))
  for (double tau : {0.1, 0.25, 1.0}) {
    CHECK(soft_separability_loss({{1, 0}}, store, tau) ==
          Catch::Approx(-std::tanh(1.0 / (2.0 * tau))).margin(1e-12));
    CHECK(soft_separability_loss({{0, 1}}, store, tau) ==
          Catch::Approx(std::tanh(1.0 / (2.0 * tau))).margin(1e-12));
  }
  double inv = 1.0 / std::sqrt(2.0);
  CHECK(soft_separability_loss({{inv, inv}}, store, 0.1) ==
        Catch::Approx(0.0).margin(1e-12));
  REQUIRE_THROWS_AS(soft_separability_loss({{1, 0}}, store, 0.0), DomainError);
}

TEST_CASE("soft separability stays within its design range") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    MemoryStore store = make_store(random_unit_rows(8, 5, rng), 3);
    auto e = random_unit_rows(4, 5, rng);
    double v = soft_separability_loss(e, store, 0.1);
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("margin loss hinges on the poison minus benign gap") {
  MemoryStore store = axis_store();
  double delta = 0.2;
  // aligned with the poison key: gap 1 >= delta, no loss
  CHECK(margin_loss({{1, 0}}, store, delta) == Catch::Approx(0.0).margin(1e-15));
  // equidistant: gap 0, pay the full delta
  double inv = 1.0 / std::sqrt(2.0);
  CHECK(margin_loss({{inv, inv}}, store, delta) == Catch::Approx(delta));
  // aligned with the benign key: gap -1
  CHECK(margin_loss({{0, 1}}, store, delta) == Catch::Approx(delta + 1.0));
  // rows average
  CHECK(margin_loss({{1, 0}, {0, 1}}, store, delta) ==
        Catch::Approx((0.0 + delta + 1.0) / 2.0));
}

TEST_CASE("separability and margin require both labels present") {
  MemoryStore all_benign = make_store({{1, 0}, {0, 1}}, 0);
  MemoryStore all_poison = make_store({{1, 0}, {0, 1}}, 2);
  REQUIRE_THROWS_WITH(margin_loss({{1, 0}}, all_benign, 0.2),
                      ContainsSubstring("no poison"));
  REQUIRE_THROWS_WITH(margin_loss({{1, 0}}, all_poison, 0.2),
                      ContainsSubstring("no benign"));
  REQUIRE_THROWS_AS(soft_separability_loss({{1, 0}}, all_benign, 0.1),
                    DomainError);
  REQUIRE_THROWS_AS(hard_separability_loss({{1, 0}}, all_poison, 1),
                    DomainError);
}

TEST_CASE("joint loss is the weighted sum of the soft terms") {
  Rng rng(13);
  MemoryStore store = make_store(random_unit_rows(9, 6, rng), 3);
  auto centers = random_unit_rows(2, 6, rng);
  auto e = random_unit_rows(3, 6, rng);
  TighteningConfig cfg;
  cfg.lambda_par = 0.7;
  cfg.lambda_clu = 1.3;
  cfg.lambda_sep = 0.4;
  cfg.lambda_mar = 2.0;
  LossBreakdown bd = joint_loss(e, store, centers, cfg);
  CHECK(bd.l_par == Catch::Approx(particularity_loss(e, centers)).margin(1e-14));
  CHECK(bd.l_clu == Catch::Approx(clustering_loss(e)).margin(1e-14));
  CHECK(bd.l_sep_soft ==
        Catch::Approx(soft_separability_loss(e, store, cfg.tau)).margin(1e-14));
  CHECK(bd.l_sep_hard ==
        Catch::Approx(hard_separability_loss(e, store, cfg.k_retrieve))
            .margin(1e-14));
  CHECK(bd.l_mar ==
        Catch::Approx(margin_loss(e, store, cfg.delta)).margin(1e-14));
  // the hard separability is reported but not optimized
  CHECK(bd.total == Catch::Approx(0.7 * bd.l_par + 1.3 * bd.l_clu +
                                  0.4 * bd.l_sep_soft + 2.0 * bd.l_mar)
                        .margin(1e-14));
}

TEST_CASE("analytic joint gradient matches finite differences") {
  Rng rng(2024);
  int used = 0;
  while (used < 30) {
    MemoryStore store = make_store(random_unit_rows(12, 8, rng), 4);
    auto centers = random_unit_rows(3, 8, rng);
    auto e = random_unit_rows(3, 8, rng);
    TighteningConfig cfg;
    if (kink_margin(e, store, centers, cfg.delta) < 1e-3) continue;
    GradCheckReport gc = gradient_check(e, store, centers, cfg);
    INFO("row " << gc.worst_row << " dim " << gc.worst_dim << " analytic "
                << gc.analytic << " numeric " << gc.numeric);
    CHECK(gc.max_rel_err <= 1e-4);
    ++used;
  }
}

TEST_CASE("gradient check also holds with uneven term weights") {
  Rng rng(404);
  int used = 0;
  while (used < 10) {
    MemoryStore store = make_store(random_unit_rows(10, 6, rng), 5);
    auto centers = random_unit_rows(2, 6, rng);
    auto e = random_unit_rows(4, 6, rng);
    TighteningConfig cfg;
    cfg.lambda_par = 0.3;
    cfg.lambda_clu = 2.0;
    cfg.lambda_sep = 1.7;
    cfg.lambda_mar = 0.9;
    cfg.tau = 0.25;
    cfg.delta = 0.1;
    if (kink_margin(e, store, centers, cfg.delta) < 1e-3) continue;
    CHECK(gradient_check(e, store, centers, cfg).max_rel_err <= 1e-4);
    ++used;
  }
}

TEST_CASE("zero step size freezes the trigger matrix bit for bit") {
  HashEmbedder emb(32);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  cfg.eta = 0.0;
  cfg.iterations = 25;
  TighteningResult res = optimize(fi.e0, fi.store, fi.centers, cfg);
  REQUIRE_FALSE(res.aborted);
  CHECK(res.e_star == fi.e0);
  REQUIRE(res.trajectory.size() == 25);
  for (const auto& step : res.trajectory) {
    CHECK(step.losses.total == res.trajectory[0].losses.total);
    CHECK(step.losses.l_mar == res.trajectory[0].losses.l_mar);
  }
  CHECK(res.final_losses.total == res.trajectory[0].losses.total);
}

TEST_CASE("optimization is deterministic") {
  HashEmbedder emb(32);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  cfg.iterations = 40;
  TighteningResult a = optimize(fi.e0, fi.store, fi.centers, cfg);
  TighteningResult b = optimize(fi.e0, fi.store, fi.centers, cfg);
  CHECK(a.e_star == b.e_star);
  REQUIRE(a.trajectory.size() == b.trajectory.size());
  for (std::size_t i = 0; i < a.trajectory.size(); ++i)
    CHECK(a.trajectory[i].losses.total == b.trajectory[i].losses.total);
}

TEST_CASE("every optimizer state keeps rows on the unit sphere") {
  HashEmbedder emb(64);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg; // default eta and 200 iterations
  std::size_t calls = 0;
  double worst = 0;
  TighteningResult res = optimize(
      fi.e0, fi.store, fi.centers, cfg,
      [&](std::size_t, const TriggerMatrix& e, const LossBreakdown&) {
        ++calls;
        for (const auto& row : e)
          worst = std::max(worst, std::abs(norm2(row) - 1.0));
      });
  REQUIRE_FALSE(res.aborted);
  CHECK(calls == cfg.iterations);
  for (const auto& row : res.e_star)
    worst = std::max(worst, std::abs(norm2(row) - 1.0));
  CHECK(worst <= 1e-6);
}

TEST_CASE("tightening pulls retrieval onto the staged poison entries") {
  HashEmbedder emb(64);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  double rho0 = retrieved_poison_fraction(fi.e0, fi.store, cfg.k_retrieve);
  TighteningResult res = optimize(fi.e0, fi.store, fi.centers, cfg);
  REQUIRE_FALSE(res.aborted);
  CHECK(res.iterations_run == cfg.iterations);
  CHECK(res.final_losses.total < res.trajectory.front().losses.total);
  double rho_star =
      retrieved_poison_fraction(res.e_star, fi.store, cfg.k_retrieve);
  CHECK(rho_star >= 0.9);
  CHECK(rho_star > rho0);
  // the margin constraint ends satisfied on this instance
  CHECK(res.final_losses.l_mar == Catch::Approx(0.0).margin(1e-9));

  // random unit matrices retrieve near the chance rate and lose to e_star
  Rng rng(123);
  double mean_random = 0;
  const int baselines = 20;
  for (int b = 0; b < baselines; ++b)
    mean_random += retrieved_poison_fraction(
        random_unit_rows(fi.e0.size(), emb.dim(), rng), fi.store,
        cfg.k_retrieve);
  mean_random /= baselines;
  CHECK(rho_star > mean_random + 0.3);
}

TEST_CASE("early stopping halts once improvement stalls") {
  HashEmbedder emb(32);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  cfg.eta = 0.0; // loss can never improve
  cfg.iterations = 200;
  cfg.patience = 5;
  TighteningResult res = optimize(fi.e0, fi.store, fi.centers, cfg);
  CHECK(res.iterations_run == 6); // first evaluation plus five stalled ones
  CHECK_FALSE(res.aborted);
}

TEST_CASE("optimize validates its inputs") {
  HashEmbedder emb(16);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  TriggerMatrix not_unit{Vec(16, 0.5)};
  REQUIRE_THROWS_WITH(optimize(not_unit, fi.store, fi.centers, cfg),
                      ContainsSubstring("unit norm"));
  REQUIRE_THROWS_AS(optimize({}, fi.store, fi.centers, cfg), DomainError);
  TriggerMatrix wrong_dim{normalized(Vec(8, 1.0))};
  REQUIRE_THROWS_AS(optimize(wrong_dim, fi.store, fi.centers, cfg),
                    DimensionError);
  MemoryStore no_poison = make_store({{1, 0}, {0, 1}}, 0);
  REQUIRE_THROWS_AS(optimize({{1, 0}}, no_poison, {{1, 0}}, cfg), DomainError);
}

TEST_CASE("tightening config validation names the offending key") {
  TighteningConfig cfg;
  cfg.tau = 0.0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "tau");
  }
  cfg.tau = 0.1;
  cfg.eta = -0.01;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.eta = 0.05;
  cfg.iterations = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.iterations = 1;
  cfg.lambda_mar = -1.0;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("trajectory file lists every state plus the final row") {
  HashEmbedder emb(32);
  FixtureInstance fi = pipeline_instance(emb);
  TighteningConfig cfg;
  cfg.iterations = 10;
  TighteningResult res = optimize(fi.e0, fi.store, fi.centers, cfg);
  auto path = (testsupport::scratch_dir() / "trajectory.csv").string();
  save_trajectory(res, path);

  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "iteration,total,L_par,L_clu,L_sep_soft,L_sep_hard,L_mar");
  std::vector<std::string> rows;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(line);
  REQUIRE(rows.size() == res.trajectory.size() + 1);
  CHECK(rows.front().substr(0, 2) == "0,");
  CHECK(rows.back().substr(0, 3) ==
        std::to_string(res.iterations_run) + ",");
  // the recorded totals round-trip through the text format
  std::vector<std::string> fields;
  split_on(rows.front(), ',', fields);
  REQUIRE(fields.size() == 7);
  CHECK(parse_double(fields[1]) == res.trajectory.front().losses.total);
}

TEST_CASE("random unit rows are seeded and normalized") {
  Rng a(9), b(9), c(10);
  auto ra = random_unit_rows(5, 7, a);
  auto rb = random_unit_rows(5, 7, b);
  auto rc = random_unit_rows(5, 7, c);
  CHECK(ra == rb);
  CHECK(ra != rc);
  for (const auto& row : ra)
    CHECK(norm2(row) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE_THROWS_AS(random_unit_rows(0, 7, a), DomainError);
  REQUIRE_THROWS_AS(random_unit_rows(5, 0, a), DomainError);
}

TEST_CASE("high dimensional random rows are nearly orthogonal on average") {
  Rng rng(55);
  auto rows = random_unit_rows(12, 64, rng);
  double mean_abs = 0;
  int pairs = 0;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      mean_abs += std::abs(dot(rows[i], rows[j]));
      ++pairs;
    }
  CHECK(mean_abs / pairs < 0.3);
}
