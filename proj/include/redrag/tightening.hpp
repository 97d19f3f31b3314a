#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/memory_store.hpp"
#include "redrag/rng.hpp"
#include "redrag/text.hpp"

namespace redrag {

// Rows are candidate poison keys, kept on the unit sphere by the optimizer.
using TriggerMatrix = std::vector<Vec>;

struct TighteningConfig {
  double lambda_par = 1.0;
  double lambda_clu = 1.0;
  double lambda_sep = 1.0;
  double lambda_mar = 1.0;
  double delta = 0.2;  // required retrieval margin over the best benign key
  double eta = 0.05;   // projected-gradient step size; 0 freezes the matrix
  std::size_t iterations = 200;
  double tau = 0.1;    // softmax temperature of the soft separability term
  std::size_t k_retrieve = 3;
  // early stop after `patience` iterations without `min_improvement` in the
  // total; patience 0 always runs every iteration
  std::size_t patience = 0;
  double min_improvement = 1e-7;

  void validate() const {
    if (lambda_par < 0) throw ConfigError("lambda_par must be >= 0", "lambda_par");
    if (lambda_clu < 0) throw ConfigError("lambda_clu must be >= 0", "lambda_clu");
    if (lambda_sep < 0) throw ConfigError("lambda_sep must be >= 0", "lambda_sep");
    if (lambda_mar < 0) throw ConfigError("lambda_mar must be >= 0", "lambda_mar");
    if (delta < 0) throw ConfigError("delta must be >= 0", "delta");
    if (eta < 0) throw ConfigError("eta must be >= 0", "eta");
    if (iterations < 1) throw ConfigError("iterations must be >= 1", "iterations");
    if (!(tau > 0)) throw ConfigError("tau must be > 0", "tau");
    if (k_retrieve < 1) throw ConfigError("k_retrieve must be >= 1", "k_retrieve");
    if (min_improvement < 0)
      throw ConfigError("min_improvement must be >= 0", "min_improvement");
  }
};

// `total` weighs the differentiable terms only; the hard separability is
// reported alongside as the quantity the soft term stands in for.
struct LossBreakdown {
  double total = 0;
  double l_par = 0;
  double l_clu = 0;
  double l_sep_soft = 0;
  double l_sep_hard = 0;
  double l_mar = 0;
};

namespace detail {

// Flat copy of store keys and labels; keys arrive unit-norm from the store.
struct KeyView {
  std::vector<Vec> keys;
  std::vector<std::string> ids;
  std::vector<bool> poison;
  std::size_t n_poison = 0;
  std::size_t dim = 0;
};

inline KeyView make_view(const MemoryStore& store) {
  KeyView v;
  v.dim = store.dim();
  for (auto& e : store.snapshot()) {
    v.keys.push_back(std::move(e.key));
    v.ids.push_back(std::move(e.id));
    bool p = e.label == EntryLabel::poison;
    v.poison.push_back(p);
    if (p) ++v.n_poison;
  }
  return v;
}

inline void require_both_labels(const KeyView& view, const char* who) {
  if (view.keys.empty())
    throw DomainError(std::string(who) + ": store is empty");
  if (view.n_poison == 0)
    throw DomainError(std::string(who) + ": store has no poison entries");
  if (view.n_poison == view.keys.size())
    throw DomainError(std::string(who) + ": store has no benign entries");
}

inline void require_rows(const TriggerMatrix& e, std::size_t dim,
                         const char* who) {
  if (e.empty()) throw DomainError(std::string(who) + ": no trigger rows");
  for (const auto& row : e)
    if (row.size() != dim)
      throw DimensionError(std::string(who) + ": row dim " +
                           std::to_string(row.size()) + " vs " +
                           std::to_string(dim));
}

// cos(e, k) for every unit key, via the normalized direction of e.
inline std::vector<double> cosines_to_keys(const Vec& e, const KeyView& view,
                                           double& out_norm, Vec& out_ehat) {
  out_norm = norm2(e);
  if (out_norm == 0.0) throw DomainError("tightening: zero trigger row");
  out_ehat = e;
  for (double& x : out_ehat) x /= out_norm;
  std::vector<double> cs(view.keys.size());
  for (std::size_t i = 0; i < view.keys.size(); ++i)
    cs[i] = dot(out_ehat, view.keys[i]);
  return cs;
}

inline double soft_poison_mass(const std::vector<double>& cs,
                               const KeyView& view, double tau,
                               std::vector<double>* out_weights = nullptr) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double c : cs) peak = std::max(peak, c / tau);
  double z = 0;
  std::vector<double> w(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    w[i] = std::exp(cs[i] / tau - peak);
    z += w[i];
  }
  double rho = 0;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    w[i] /= z;
    if (view.poison[i]) rho += w[i];
  }
  if (out_weights) *out_weights = std::move(w);
  return rho;
}

// Top-k indices under the retrieval order: similarity desc, id asc.
inline std::vector<std::size_t> retrieval_topk(const std::vector<double>& cs,
                                               const KeyView& view,
                                               std::size_t k) {
  std::vector<std::size_t> idx(cs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (cs[a] != cs[b]) return cs[a] > cs[b];
    return view.ids[a] < view.ids[b];
  });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

struct MarginParts {
  std::size_t best_poison = 0;
  std::size_t best_benign = 0;
  double gap = 0;
};

inline MarginParts margin_parts(const std::vector<double>& cs,
                                const KeyView& view) {
  MarginParts m;
  double bp = -std::numeric_limits<double>::infinity();
  double bb = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (view.poison[i]) {
      if (cs[i] > bp) { bp = cs[i]; m.best_poison = i; }
    } else if (cs[i] > bb) {
      bb = cs[i];
      m.best_benign = i;
    }
  }
  m.gap = bp - bb;
  return m;
}

inline std::vector<Vec> unit_centers(const std::vector<Vec>& centers) {
  if (centers.empty()) throw DomainError("particularity: no cluster centers");
  std::vector<Vec> out = centers;
  for (auto& c : out) normalize_inplace(c);
  return out;
}

} // namespace detail

// Mean over rows of the highest cosine to any benign cluster center.
inline double particularity_loss(const TriggerMatrix& e,
                                 const std::vector<Vec>& centers) {
  auto cs = detail::unit_centers(centers);
  if (e.empty()) throw DomainError("particularity: no trigger rows");
  double sum = 0;
  for (const auto& row : e) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& c : cs) best = std::max(best, cosine(row, c));
    sum += best;
  }
  return sum / static_cast<double>(e.size());
}

// Mean squared distance of rows to their centroid.
inline double clustering_loss(const TriggerMatrix& e) {
  if (e.empty()) throw DomainError("clustering: no trigger rows");
  const std::size_t m = e.size();
  Vec mean(e[0].size(), 0.0);
  for (const auto& row : e) {
    if (row.size() != mean.size())
      throw DimensionError("clustering: ragged trigger matrix");
    for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += row[d];
  }
  for (double& x : mean) x /= static_cast<double>(m);
  double sum = 0;
  for (const auto& row : e)
    for (std::size_t d = 0; d < mean.size(); ++d) {
      double diff = row[d] - mean[d];
      sum += diff * diff;
    }
  return sum / static_cast<double>(m);
}

namespace detail {

inline double soft_separability_view(const TriggerMatrix& e,
                                     const KeyView& view, double tau) {
  require_both_labels(view, "separability");
  require_rows(e, view.dim, "separability");
  double sum = 0;
  for (const auto& row : e) {
    double norm;
    Vec ehat;
    auto cs = cosines_to_keys(row, view, norm, ehat);
    double rho = soft_poison_mass(cs, view, tau);
    sum += -(2.0 * rho - 1.0);
  }
  return sum / static_cast<double>(e.size());
}

inline double poison_fraction_view(const TriggerMatrix& e, const KeyView& view,
                                   std::size_t k) {
  require_both_labels(view, "separability");
  require_rows(e, view.dim, "separability");
  if (k == 0) throw DomainError("separability: k must be >= 1");
  std::size_t slots = 0, hits = 0;
  for (const auto& row : e) {
    double norm;
    Vec ehat;
    auto cs = cosines_to_keys(row, view, norm, ehat);
    for (std::size_t i : retrieval_topk(cs, view, k)) {
      ++slots;
      if (view.poison[i]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(slots);
}

inline double margin_view(const TriggerMatrix& e, const KeyView& view,
                          double delta) {
  require_both_labels(view, "margin");
  require_rows(e, view.dim, "margin");
  double sum = 0;
  for (const auto& row : e) {
    double norm;
    Vec ehat;
    auto cs = cosines_to_keys(row, view, norm, ehat);
    auto m = margin_parts(cs, view);
    sum += std::max(0.0, delta - m.gap);
  }
  return sum / static_cast<double>(e.size());
}

} // namespace detail

// Softmax mass (temperature tau) landing on poison entries, averaged over
// rows and mapped to [-1, 1]: fully poison -> -1, fully benign -> +1.
inline double soft_separability_loss(const TriggerMatrix& e,
                                     const MemoryStore& store, double tau) {
  if (!(tau > 0)) throw DomainError("separability: tau must be > 0");
  return detail::soft_separability_view(e, detail::make_view(store), tau);
}

// Fraction of pooled top-k retrieval slots (over all rows) held by poison.
inline double retrieved_poison_fraction(const TriggerMatrix& e,
                                        const MemoryStore& store,
                                        std::size_t k) {
  return detail::poison_fraction_view(e, detail::make_view(store), k);
}

// Discrete counterpart of the soft term: -(rho_poison - rho_benign).
inline double hard_separability_loss(const TriggerMatrix& e,
                                     const MemoryStore& store, std::size_t k) {
  double rho = retrieved_poison_fraction(e, store, k);
  return 1.0 - 2.0 * rho;
}

// Mean hinge on (best poison cosine - best benign cosine) against delta.
inline double margin_loss(const TriggerMatrix& e, const MemoryStore& store,
                          double delta) {
  return detail::margin_view(e, detail::make_view(store), delta);
}

namespace detail {

inline LossBreakdown joint_loss_view(const TriggerMatrix& e,
                                     const KeyView& view,
                                     const std::vector<Vec>& centers_unit,
                                     const TighteningConfig& cfg) {
  LossBreakdown bd;
  bd.l_par = particularity_loss(e, centers_unit);
  bd.l_clu = clustering_loss(e);
  bd.l_sep_soft = soft_separability_view(e, view, cfg.tau);
  bd.l_sep_hard = 1.0 - 2.0 * poison_fraction_view(e, view, cfg.k_retrieve);
  bd.l_mar = margin_view(e, view, cfg.delta);
  bd.total = cfg.lambda_par * bd.l_par + cfg.lambda_clu * bd.l_clu +
             cfg.lambda_sep * bd.l_sep_soft + cfg.lambda_mar * bd.l_mar;
  return bd;
}

inline TriggerMatrix joint_gradient_view(const TriggerMatrix& e,
                                         const KeyView& view,
                                         const std::vector<Vec>& centers_unit,
                                         const TighteningConfig& cfg) {
  require_both_labels(view, "gradient");
  require_rows(e, view.dim, "gradient");
  const std::size_t m = e.size();
  const std::size_t dim = view.dim;
  const double invm = 1.0 / static_cast<double>(m);

  Vec mean(dim, 0.0);
  for (const auto& row : e)
    for (std::size_t d = 0; d < dim; ++d) mean[d] += row[d];
  for (double& x : mean) x /= static_cast<double>(m);

  TriggerMatrix grad(m, Vec(dim, 0.0));
  for (std::size_t p = 0; p < m; ++p) {
    const Vec& row = e[p];
    Vec& g = grad[p];
    double norm;
    Vec ehat;
    auto cs = cosines_to_keys(row, view, norm, ehat);

    // clustering: cross terms through the centroid cancel
    if (cfg.lambda_clu != 0)
      for (std::size_t d = 0; d < dim; ++d)
        g[d] += cfg.lambda_clu * 2.0 * invm * (row[d] - mean[d]);

    // particularity: active center only
    if (cfg.lambda_par != 0) {
      std::size_t best = 0;
      double bc = -std::numeric_limits<double>::infinity();
      for (std::size_t q = 0; q < centers_unit.size(); ++q) {
        double c = dot(ehat, centers_unit[q]);
        if (c > bc) { bc = c; best = q; }
      }
      double w = cfg.lambda_par * invm / norm;
      const Vec& c = centers_unit[best];
      for (std::size_t d = 0; d < dim; ++d)
        g[d] += w * (c[d] - bc * ehat[d]);
    }

    // soft separability through every key's cosine
    if (cfg.lambda_sep != 0) {
      std::vector<double> w;
      double rho = soft_poison_mass(cs, view, cfg.tau, &w);
      double scale = cfg.lambda_sep * invm * (-2.0 / cfg.tau) / norm;
      for (std::size_t i = 0; i < cs.size(); ++i) {
        double y = view.poison[i] ? 1.0 : 0.0;
        double coeff = scale * w[i] * (y - rho);
        if (coeff == 0.0) continue;
        const Vec& key = view.keys[i];
        for (std::size_t d = 0; d < dim; ++d)
          g[d] += coeff * (key[d] - cs[i] * ehat[d]);
      }
    }

    // margin hinge: the two argmax keys while the hinge is active
    if (cfg.lambda_mar != 0) {
      auto parts = margin_parts(cs, view);
      if (parts.gap < cfg.delta) {
        double w = cfg.lambda_mar * invm / norm;
        const Vec& kp = view.keys[parts.best_poison];
        const Vec& kb = view.keys[parts.best_benign];
        double cp = cs[parts.best_poison], cb = cs[parts.best_benign];
        for (std::size_t d = 0; d < dim; ++d)
          g[d] += w * (-(kp[d] - cp * ehat[d]) + (kb[d] - cb * ehat[d]));
      }
    }
  }
  return grad;
}

} // namespace detail

inline LossBreakdown joint_loss(const TriggerMatrix& e, const MemoryStore& store,
                                const std::vector<Vec>& centers,
                                const TighteningConfig& cfg) {
  cfg.validate();
  return detail::joint_loss_view(e, detail::make_view(store),
                                 detail::unit_centers(centers), cfg);
}

inline TriggerMatrix joint_gradient(const TriggerMatrix& e,
                                    const MemoryStore& store,
                                    const std::vector<Vec>& centers,
                                    const TighteningConfig& cfg) {
  cfg.validate();
  return detail::joint_gradient_view(e, detail::make_view(store),
                                     detail::unit_centers(centers), cfg);
}

struct GradCheckReport {
  double max_rel_err = 0;
  std::size_t worst_row = 0;
  std::size_t worst_dim = 0;
  double analytic = 0;
  double numeric = 0;
};

// Central finite differences on every coordinate of the trigger matrix,
// against the analytic gradient of the differentiable total.
inline GradCheckReport gradient_check(const TriggerMatrix& e,
                                      const MemoryStore& store,
                                      const std::vector<Vec>& centers,
                                      const TighteningConfig& cfg,
                                      double h = 1e-5) {
  cfg.validate();
  detail::KeyView view = detail::make_view(store);
  auto cu = detail::unit_centers(centers);
  TriggerMatrix analytic = detail::joint_gradient_view(e, view, cu, cfg);
  GradCheckReport report;
  TriggerMatrix probe = e;
  for (std::size_t p = 0; p < e.size(); ++p) {
    for (std::size_t d = 0; d < e[p].size(); ++d) {
      double original = probe[p][d];
      probe[p][d] = original + h;
      double up = detail::joint_loss_view(probe, view, cu, cfg).total;
      probe[p][d] = original - h;
      double down = detail::joint_loss_view(probe, view, cu, cfg).total;
      probe[p][d] = original;
      double numeric = (up - down) / (2.0 * h);
      double rel = std::abs(analytic[p][d] - numeric) /
                   std::max(1.0, std::abs(numeric));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_row = p;
        report.worst_dim = d;
        report.analytic = analytic[p][d];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

struct TighteningStep {
  std::size_t iteration = 0; // optimizer loop index; state before that update
  LossBreakdown losses;
};

using IterationObserver = std::function<void(
    std::size_t iteration, const TriggerMatrix&, const LossBreakdown&)>;

struct TighteningResult {
  TriggerMatrix e_star;
  std::vector<TighteningStep> trajectory; // one row per evaluated state
  LossBreakdown final_losses;             // at e_star
  std::size_t iterations_run = 0;
  bool aborted = false;
  std::string abort_reason;
};

// Projected gradient descent on the unit sphere: step, then renormalize each
// row. eta == 0 performs no update at all, so e_star stays bit-identical to
// the input. Non-finite losses or gradients abort with the last sane matrix.
inline TighteningResult optimize(const TriggerMatrix& e0,
                                 const MemoryStore& store,
                                 const std::vector<Vec>& centers,
                                 const TighteningConfig& cfg,
                                 const IterationObserver& observer = {}) {
  cfg.validate();
  detail::KeyView view = detail::make_view(store);
  auto cu = detail::unit_centers(centers);
  detail::require_rows(e0, view.dim, "optimize");
  for (const auto& row : e0)
    if (std::abs(norm2(row) - 1.0) > 1e-6)
      throw DomainError("optimize: trigger rows must be unit norm");

  TighteningResult res;
  TriggerMatrix e = e0;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stall = 0;
  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    LossBreakdown bd = detail::joint_loss_view(e, view, cu, cfg);
    if (!std::isfinite(bd.total)) {
      res.aborted = true;
      res.abort_reason =
          "non-finite loss at iteration " + std::to_string(iter);
      break;
    }
    res.trajectory.push_back({iter, bd});
    if (observer) observer(iter, e, bd);
    res.iterations_run = iter + 1;

    if (cfg.patience > 0) {
      if (best - bd.total > cfg.min_improvement) {
        best = bd.total;
        stall = 0;
      } else if (++stall >= cfg.patience) {
        break;
      }
    }

    if (cfg.eta == 0.0) continue;
    TriggerMatrix grad = detail::joint_gradient_view(e, view, cu, cfg);
    bool bad = false;
    for (const auto& row : grad)
      for (double v : row)
        if (!std::isfinite(v)) bad = true;
    if (bad) {
      res.aborted = true;
      res.abort_reason =
          "non-finite gradient at iteration " + std::to_string(iter);
      break;
    }
    TriggerMatrix next = e;
    for (std::size_t p = 0; p < e.size() && !bad; ++p) {
      for (std::size_t d = 0; d < e[p].size(); ++d)
        next[p][d] -= cfg.eta * grad[p][d];
      double n = norm2(next[p]);
      if (n < 1e-12) {
        res.aborted = true;
        res.abort_reason =
            "row " + std::to_string(p) + " collapsed at iteration " +
            std::to_string(iter);
        bad = true;
        break;
      }
      for (double& v : next[p]) v /= n;
    }
    if (bad) break;
    e = std::move(next);
  }
  res.e_star = std::move(e);
  res.final_losses = detail::joint_loss_view(res.e_star, view, cu, cfg);
  return res;
}

// Isotropic random unit rows (chance baseline for the retrieval fraction).
inline TriggerMatrix random_unit_rows(std::size_t m, std::size_t dim,
                                      Rng& rng) {
  if (m == 0 || dim == 0)
    throw DomainError("random_unit_rows: m and dim must be >= 1");
  TriggerMatrix out(m, Vec(dim, 0.0));
  for (auto& row : out) {
    double n = 0;
    do {
      for (std::size_t d = 0; d < dim; d += 2) {
        double u1 = 1.0 - rng.next_canonical();
        double u2 = rng.next_canonical();
        double r = std::sqrt(-2.0 * std::log(u1));
        row[d] = r * std::cos(6.283185307179586 * u2);
        if (d + 1 < dim) row[d + 1] = r * std::sin(6.283185307179586 * u2);
      }
      n = norm2(row);
    } while (n < 1e-9);
    for (double& v : row) v /= n;
  }
  return out;
}

// CSV: one row per evaluated state plus a final row for e_star, whose
// iteration index equals the number of steps applied. A non-empty `comment`
// becomes a leading '#' line (provenance stamp).
inline void save_trajectory(const TighteningResult& res,
                            const std::string& path,
                            const std::string& comment = "") {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write trajectory: " + path);
  if (!comment.empty()) f << "# " << comment << "\n";
  f << "iteration,total,L_par,L_clu,L_sep_soft,L_sep_hard,L_mar\n";
  auto row = [&](std::size_t iter, const LossBreakdown& bd) {
    f << iter << "," << format_double(bd.total) << ","
      << format_double(bd.l_par) << "," << format_double(bd.l_clu) << ","
      << format_double(bd.l_sep_soft) << "," << format_double(bd.l_sep_hard)
      << "," << format_double(bd.l_mar) << "\n";
  };
  for (const auto& step : res.trajectory) row(step.iteration, step.losses);
  row(res.iterations_run, res.final_losses);
}

} // namespace redrag
