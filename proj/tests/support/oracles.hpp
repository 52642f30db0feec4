#pragma once

// Reference implementations used only by tests. Each one is written the
// slow, obvious way so it shares no code path with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "vcc/cluster.hpp"
#include "vcc/netcore.hpp"

namespace oracle {

using Points = std::vector<std::vector<double>>;

inline double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline vcc::PointSet to_pointset(const Points& p) {
  vcc::PointSet s(static_cast<int>(p[0].size()));
  for (const auto& r : p) s.push(r);
  return s;
}

/// Sum of squared distances to cluster means.
inline double sse(const Points& p, const std::vector<int>& label, int k) {
  const std::size_t d = p[0].size();
  std::vector<std::vector<double>> mean(static_cast<std::size_t>(k), std::vector<double>(d, 0.0));
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    ++count[label[i]];
    for (std::size_t j = 0; j < d; ++j) mean[label[i]][j] += p[i][j];
  }
  for (int c = 0; c < k; ++c)
    for (auto& v : mean[c]) v /= std::max(count[c], 1);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = dist(p[i], mean[label[i]]);
    s += e * e;
  }
  return s;
}

/// Calls f on every labelling of n points into exactly k nonempty clusters
/// (labels in first-occurrence order, so each partition appears once).
inline void for_each_partition(std::size_t n, int k, const std::function<void(const std::vector<int>&)>& f) {
  std::vector<int> label(n, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int used) {
    if (i == n) {
      if (used == k) f(label);
      return;
    }
    if (static_cast<int>(n - i) < k - used) return;
    for (int c = 0; c < std::min(used + 1, k); ++c) {
      label[i] = c;
      rec(i + 1, std::max(used, c + 1));
    }
  };
  rec(0, 0);
}

struct Partition {
  std::vector<int> label;
  double sse = std::numeric_limits<double>::infinity();
};

/// Exact k-means optimum by enumeration.
inline Partition best_partition(const Points& p, int k) {
  Partition best;
  for_each_partition(p.size(), k, [&](const std::vector<int>& l) {
    const double s = sse(p, l, k);
    if (s < best.sse) best = {l, s};
  });
  return best;
}

/// Mean silhouette straight from the definition.
inline double silhouette(const Points& p, const std::vector<int>& label, int k) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::vector<double> sum(static_cast<std::size_t>(k), 0.0);
    std::vector<int> cnt(static_cast<std::size_t>(k), 0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (j == i) continue;
      sum[label[j]] += dist(p[i], p[j]);
      ++cnt[label[j]];
    }
    if (cnt[label[i]] == 0) continue;
    const double a = sum[label[i]] / cnt[label[i]];
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c)
      if (c != label[i] && cnt[c] > 0) b = std::min(b, sum[c] / cnt[c]);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(p.size());
}

/// k in [2, k_max] whose exact k-means optimum has the best silhouette.
inline int brute_force_k(const Points& p, int k_max) {
  int best_k = 1;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = 2; k <= k_max; ++k) {
    const double s = silhouette(p, best_partition(p, k).label, k);
    if (s > best) {
      best = s;
      best_k = k;
    }
  }
  return best_k;
}

/// Direct 2-D convolution, zero padding, weight layout [out][in][ky][kx].
inline std::vector<double> conv2d(const std::vector<double>& x, int cin, int h, int w, const std::vector<float>& wt,
                                  const std::vector<float>& bias, int cout, int k, int stride, int pad, int& oh,
                                  int& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(cout * oh * ow), 0.0);
  for (int o = 0; o < cout; ++o)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double s = bias[o];
        for (int i = 0; i < cin; ++i)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int yy = r * stride + ky - pad, xx = c * stride + kx - pad;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              s += wt[((o * cin + i) * k + ky) * k + kx] * x[(i * h + yy) * w + xx];
            }
        y[(o * oh + r) * ow + c] = s;
      }
  return y;
}

/// Logistic regression by plain primal gradient descent: loss = mean log
/// loss + (l2 / 2) ||w||^2, bias unpenalised, zero start.
inline std::vector<double> logistic_gd(const Points& x, const std::vector<double>& y, int steps, double lr, double l2,
                                       double& bias) {
  const std::size_t d = x[0].size();
  std::vector<double> w(d, 0.0);
  bias = 0.0;
  for (int s = 0; s < steps; ++s) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double z = bias;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[i][j];
      const double r = 1.0 / (1.0 + std::exp(-z)) - y[i];
      for (std::size_t j = 0; j < d; ++j) gw[j] += r * x[i][j] / static_cast<double>(x.size());
      gb += r / static_cast<double>(x.size());
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= lr * (gw[j] + l2 * w[j]);
    bias -= lr * gb;
  }
  return w;
}

}  // namespace oracle
