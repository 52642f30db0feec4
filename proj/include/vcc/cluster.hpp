#pragma once

// k-means (k-means++ seeding, Lloyd iterations) and silhouette-based choice
// of the cluster count. Shared by feature-space segmentation and concept
// discovery.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "vcc/error.hpp"
#include "vcc/rng.hpp"

namespace vcc {

/// Row-major point matrix.
struct PointSet {
  int dim = 0;
  std::vector<double> values;

  PointSet() = default;
  explicit PointSet(int d) : dim(d) {}

  std::size_t size() const { return dim == 0 ? 0 : values.size() / static_cast<std::size_t>(dim); }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }

  void push(std::span<const double> p) {
    if (dim == 0 && values.empty()) dim = static_cast<int>(p.size());
    require(static_cast<int>(p.size()) == dim, ErrorKind::invalid_input, "point dimension mismatch");
    values.insert(values.end(), p.begin(), p.end());
  }
};

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  // max centroid shift
  int restarts = 10;        // best-of-n seeded k-means++ runs
};

struct KMeansResult {
  PointSet centroids;
  std::vector<int> assignment;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // objective after each Lloyd update
  int iterations = 0;
};

namespace detail {

inline KMeansResult kmeans_once(const PointSet& pts, int k, std::uint64_t seed, const KMeansOptions& opt) {
  const std::size_t n = pts.size();
  const int d = pts.dim;
  Rng rng(seed);
  KMeansResult res;
  res.centroids = PointSet(d);
  res.centroids.values.reserve(static_cast<std::size_t>(k) * d);

  // k-means++ seeding
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t first = rng.index(n);
  res.centroids.push(pts.row(first));
  chosen[first] = 1;
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    const auto last = res.centroids.row(static_cast<std::size_t>(c - 1));
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], sq_dist(pts.row(i), last));
      total += closest[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        target -= closest[i];
        if (target < 0.0 && closest[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick == n)
        for (std::size_t i = n; i-- > 0;)
          if (closest[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      // every point coincides with a centre: take any unchosen point
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) free.push_back(i);
      pick = free.empty() ? rng.index(n) : free[rng.index(free.size())];
    }
    chosen[pick] = 1;
    res.centroids.push(pts.row(pick));
  }

  res.assignment.assign(n, 0);
  std::vector<double> dist(n, 0.0);
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int it = 0; it < opt.max_iterations; ++it) {
    // assignment step, ties to the lowest centroid index
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double dd = sq_dist(pts.row(i), res.centroids.row(static_cast<std::size_t>(c)));
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      res.assignment[i] = best;
      dist[i] = bd;
      ++counts[best];
    }
    // empty-cluster repair: move the point farthest from its centroid
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i)
        if (counts[res.assignment[i]] > 1 && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      if (far == n) break;
      --counts[res.assignment[far]];
      res.assignment[far] = c;
      dist[far] = 0.0;
      counts[c] = 1;
    }
    // update step
    PointSet next(d);
    next.values.assign(static_cast<std::size_t>(k) * d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = next.row(static_cast<std::size_t>(res.assignment[i]));
      const auto src = pts.row(i);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      auto row = next.row(static_cast<std::size_t>(c));
      if (counts[c] == 0) {
        std::copy_n(res.centroids.row(static_cast<std::size_t>(c)).begin(), d, row.begin());
        continue;
      }
      for (int j = 0; j < d; ++j) row[j] /= counts[c];
      shift = std::max(shift, std::sqrt(sq_dist(row, res.centroids.row(static_cast<std::size_t>(c)))));
    }
    res.centroids = std::move(next);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      inertia += sq_dist(pts.row(i), res.centroids.row(static_cast<std::size_t>(res.assignment[i])));
    res.inertia = inertia;
    res.inertia_history.push_back(inertia);
    res.iterations = it + 1;
    if (shift < opt.tolerance) break;
  }
  return res;
}

}  // namespace detail

/// Lloyd's k-means with k-means++ seeding; the best of `restarts` seeded runs
/// by inertia. Deterministic for a fixed seed.
inline KMeansResult kmeans(const PointSet& points, int k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  require(k >= 1, ErrorKind::invalid_k, "k must be at least 1");
  require(static_cast<std::size_t>(k) <= points.size(), ErrorKind::invalid_k,
          "k = " + std::to_string(k) + " exceeds the number of points (" + std::to_string(points.size()) + ")");
  KMeansResult best;
  bool have = false;
  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    auto res = detail::kmeans_once(points, k, derive_seed(seed, {static_cast<std::uint64_t>(r)}), opt);
    if (!have || res.inertia < best.inertia) {
      best = std::move(res);
      have = true;
    }
  }
  return best;
}

/// Mean silhouette coefficient of a labelling under Euclidean distance.
/// Singleton clusters score 0, as do points with a = b = 0.
inline double mean_silhouette(const PointSet& pts, std::span<const int> labels, int k) {
  const std::size_t n = pts.size();
  if (n < 2) return 0.0;
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++counts[l];
  std::vector<double> sums(static_cast<std::size_t>(k));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[labels[j]] += std::sqrt(sq_dist(pts.row(i), pts.row(j)));
    const int own = labels[i];
    if (counts[own] <= 1) continue;
    const double a = sums[own] / (counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != own && counts[c] > 0) b = std::min(b, sums[c] / counts[c]);
    if (!std::isfinite(b)) continue;
    const double m = std::max(a, b);
    if (m > 0.0) total += (b - a) / m;
  }
  return total / static_cast<double>(n);
}

struct SilhouetteOptions {
  double floor = 0.1;
  std::size_t max_points = 2048;  // larger sets are subsampled (seeded)
  KMeansOptions kmeans{100, 1e-6, 1};
};

/// Cluster count in [k_min, k_max] maximising mean silhouette; 1 when the
/// set is too small (< 2 k_min points), the range is empty, or the best
/// score stays below the floor.
inline int choose_k_silhouette(const PointSet& points, int k_min, int k_max, std::uint64_t seed,
                               const SilhouetteOptions& opt = {}) {
  require(points.size() > 0, ErrorKind::invalid_input, "silhouette selection needs at least one point");
  k_min = std::max(k_min, 2);
  if (points.size() < static_cast<std::size_t>(2 * k_min) || k_max < k_min) return 1;

  const PointSet* pts = &points;
  PointSet sample;
  if (points.size() > opt.max_points) {
    std::vector<std::size_t> idx(points.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(derive_seed(seed, {0x5a11ULL}));
    rng.shuffle(idx);
    idx.resize(opt.max_points);
    std::sort(idx.begin(), idx.end());
    sample = PointSet(points.dim);
    for (std::size_t i : idx) sample.push(points.row(i));
    pts = &sample;
  }
  const std::size_t n = pts->size();

  // pairwise distances, shared by every candidate k
  std::vector<float> dmat(n * n, 0.0f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const float v = static_cast<float>(std::sqrt(sq_dist(pts->row(i), pts->row(j))));
      dmat[i * n + j] = v;
      dmat[j * n + i] = v;
    }

  int best_k = 1;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max && static_cast<std::size_t>(k) < n; ++k) {
    const auto km = kmeans(*pts, k, derive_seed(seed, {static_cast<std::uint64_t>(k)}), opt.kmeans);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int l : km.assignment) ++counts[l];
    std::vector<double> sums(static_cast<std::size_t>(k));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::fill(sums.begin(), sums.end(), 0.0);
      const float* row = &dmat[i * n];
      for (std::size_t j = 0; j < n; ++j) sums[km.assignment[j]] += row[j];
      const int own = km.assignment[i];
      if (counts[own] <= 1) continue;
      const double a = sums[own] / (counts[own] - 1);
      double b = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c)
        if (c != own && counts[c] > 0) b = std::min(b, sums[c] / counts[c]);
      if (!std::isfinite(b)) continue;
      const double m = std::max(a, b);
      if (m > 0.0) total += (b - a) / m;
    }
    const double score = total / static_cast<double>(n);
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  return best < opt.floor ? 1 : best_k;
}

}  // namespace vcc
