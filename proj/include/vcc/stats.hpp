#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "vcc/error.hpp"

namespace vcc {

inline double mean(std::span<const double> v) {
  require(!v.empty(), ErrorKind::undefined_metric, "mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Population variance.
inline double variance(std::span<const double> v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

namespace detail {

// Continued fraction for the incomplete beta function (modified Lentz).
inline double betacf(double a, double b, double x) {
  constexpr int max_iter = 500;
  constexpr double eps = 1e-16;
  constexpr double fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

}  // namespace detail

/// Regularised incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  require(a > 0.0 && b > 0.0 && x >= 0.0 && x <= 1.0, ErrorKind::invalid_input, "incomplete beta argument out of range");
  if (x == 0.0 || x == 1.0) return x;
  const double lbt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double bt = std::exp(lbt);
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * detail::betacf(a, b, x) / a;
  return 1.0 - bt * detail::betacf(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
inline double student_t_two_sided(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double mean = 0.0;
};

/// One-sample two-sided t-test of `samples` against `mu0`. A zero-variance
/// sample gets p = 1 when its mean equals mu0 and p = 0 otherwise.
inline TTestResult ttest_two_sided(std::span<const double> samples, double mu0) {
  require(samples.size() >= 2, ErrorKind::invalid_input, "t-test needs at least two samples");
  const double n = static_cast<double>(samples.size());
  TTestResult r;
  r.mean = mean(samples);
  double ss = 0.0;
  for (double x : samples) ss += (x - r.mean) * (x - r.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const double diff = r.mean - mu0;
  if (sd <= 1e-12 * std::max(1.0, std::fabs(r.mean))) {
    const bool equal = std::fabs(diff) <= 1e-12;
    r.t = equal ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
    r.p = equal ? 1.0 : 0.0;
    return r;
  }
  r.t = diff / (sd / std::sqrt(n));
  r.p = student_t_two_sided(r.t, n - 1.0);
  return r;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::invalid_input, "pearson needs paired samples");
  require(x.size() >= 3, ErrorKind::insufficient_data, "pearson correlation needs at least 3 points");
  const double mx = mean(x), my = mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  // compare values, not sums: the mean of equal values can be off by an ulp
  const auto constant = [](std::span<const double> v) { return std::ranges::min(v) == std::ranges::max(v); };
  require(!constant(x) && !constant(y), ErrorKind::insufficient_data,
          "pearson correlation undefined for a constant variable");
  return sxy / std::sqrt(sxx * syy);
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  return pearson(rx, ry);
}

/// Trapezoid-rule area under y(x).
inline double trapezoid(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorKind::invalid_input, "trapezoid needs >= 2 paired points");
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return a;
}

}  // namespace vcc
