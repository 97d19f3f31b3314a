#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "redrag/embedding.hpp"
#include "redrag/errors.hpp"
#include "redrag/rng.hpp"

namespace redrag {

struct ClusterCenters {
  std::vector<Vec> centers; // unit norm
  std::uint64_t seed = 0;
  std::vector<double> wcss_trace; // within-cluster sum of squares per iteration
  std::size_t iterations = 0;
};

namespace detail {

inline double sqdist(const Vec& a, const Vec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

} // namespace detail

// Seeded k-means++ init, Lloyd iterations (max 100, tol 1e-6 on center
// movement). Final centers are renormalized to unit length.
inline ClusterCenters kmeans(const std::vector<Vec>& points, std::size_t k,
                             std::uint64_t seed) {
  if (k == 0) throw DomainError("kmeans: k must be >= 1");
  if (points.size() < k)
    throw DomainError("kmeans: need at least k=" + std::to_string(k) +
                      " points, got " + std::to_string(points.size()));
  const std::size_t n = points.size();
  Rng rng(seed);

  // k-means++ seeding
  std::vector<Vec> centers;
  centers.reserve(k);
  centers.push_back(points[rng.next_below(n)]);
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : centers) best = std::min(best, detail::sqdist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      double target = rng.next_canonical() * total;
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target) {
          pick = i;
          break;
        }
        pick = i;
      }
    } else {
      pick = rng.next_below(n);
    }
    centers.push_back(points[pick]);
  }

  ClusterCenters result;
  result.seed = seed;
  std::vector<std::size_t> assign(n, 0);
  const std::size_t dim = points[0].size();

  for (std::size_t iter = 0; iter < 100; ++iter) {
    double wcss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        double d = detail::sqdist(points[i], centers[c]);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      assign[i] = arg;
      wcss += best;
    }
    result.wcss_trace.push_back(wcss);

    std::vector<Vec> means(k, Vec(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < dim; ++d) means[assign[i]][d] += points[i][d];
      ++counts[assign[i]];
    }
    double max_move = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Empty cluster: reseed on the point farthest from its center.
        double worst = -1;
        std::size_t arg = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double d = detail::sqdist(points[i], centers[assign[i]]);
          if (d > worst) {
            worst = d;
            arg = i;
          }
        }
        means[c] = points[arg];
        counts[c] = 1;
      } else {
        for (std::size_t d = 0; d < dim; ++d) means[c][d] /= static_cast<double>(counts[c]);
      }
      max_move = std::max(max_move, detail::sqdist(means[c], centers[c]));
      centers[c] = means[c];
    }
    result.iterations = iter + 1;
    if (std::sqrt(max_move) < 1e-6) break;
  }

  for (auto& c : centers) normalize_inplace(c);
  result.centers = std::move(centers);
  return result;
}

} // namespace redrag
