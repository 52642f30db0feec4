#pragma once

// Central finite-difference check of distance_grad. The analytic gradient
// runs in float like the pipeline does; the differences run in double.
// Coordinates whose +-h perturbation flips a relu sign or a maxpool winner
// are skipped, since the function has a kink there.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "vcc/netcore.hpp"
#include "vcc/rng.hpp"
#include "vcc/toylab.hpp"

namespace vcc {

struct GradCheckResult {
  double max_rel_error = 0.0;  // max |analytic - fd| / max |fd|
  int checked = 0;
  int skipped = 0;
};

namespace detail {

// relu signs and maxpool winners along a trace, as one flat signature.
inline std::vector<int> activation_pattern(const LayeredModel& m, const std::vector<DTensor>& trace, int from) {
  std::vector<int> sig;
  for (std::size_t t = 1; t < trace.size(); ++t) {
    const auto& layer = m.layers()[static_cast<std::size_t>(from) + t];
    const DTensor& in = trace[t - 1];
    if (layer.kind == LayerKind::relu) {
      for (double v : in.data()) sig.push_back(v > 0.0 ? 1 : 0);
    } else if (layer.kind == LayerKind::maxpool2d) {
      const int C = in.dim(0), W = in.dim(2);
      const DTensor& out = trace[t];
      for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < out.dim(1); ++oy)
          for (int ox = 0; ox < out.dim(2); ++ox) {
            int best = -1;
            double bv = -std::numeric_limits<double>::infinity();
            for (int ky = 0; ky < layer.kernel; ++ky)
              for (int kx = 0; kx < layer.kernel; ++kx) {
                const int iy = oy * layer.stride + ky, ix = ox * layer.stride + kx;
                const double v = in.at(c, iy, ix);
                if (v > bv) {
                  bv = v;
                  best = iy * W + ix;
                }
              }
            sig.push_back(best);
          }
    }
  }
  return sig;
}

inline double pooled_distance(const DTensor& top, std::span<const double> q) {
  const auto p = pooled_features(top);
  double d2 = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) d2 += (p[i] - q[i]) * (p[i] - q[i]);
  return std::sqrt(d2);
}

}  // namespace detail

/// Compares distance_grad at `activation` (output of layer `from`) with
/// central differences on up to `max_coords` seeded coordinates.
inline GradCheckResult check_distance_grad(const LayeredModel& m, const Tensor& activation, int from, int to,
                                           std::span<const double> centroid, std::uint64_t seed, double h = 1e-3,
                                           int max_coords = 48) {
  const Tensor g = distance_grad(m, activation, from, to, centroid);
  const DTensor z = activation.cast<double>();
  const auto base = detail::activation_pattern(m, forward_trace(m, z, from, to), from);

  std::vector<std::size_t> coords(z.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  Rng rng(seed);
  rng.shuffle(coords);
  if (coords.size() > static_cast<std::size_t>(max_coords)) coords.resize(static_cast<std::size_t>(max_coords));

  GradCheckResult r;
  std::vector<std::pair<double, double>> pairs;  // (analytic, fd)
  for (std::size_t i : coords) {
    DTensor zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const auto tp = forward_trace(m, zp, from, to);
    const auto tm = forward_trace(m, zm, from, to);
    if (detail::activation_pattern(m, tp, from) != base || detail::activation_pattern(m, tm, from) != base) {
      ++r.skipped;
      continue;
    }
    const double fd = (detail::pooled_distance(tp.back(), centroid) - detail::pooled_distance(tm.back(), centroid)) /
                      (2.0 * h);
    pairs.emplace_back(static_cast<double>(g[i]), fd);
  }
  double scale = 0.0;
  for (const auto& [a, f] : pairs) scale = std::max(scale, std::fabs(f));
  for (const auto& [a, f] : pairs) {
    const double err = std::fabs(a - f) / std::max(scale, 1e-12);
    r.max_rel_error = std::max(r.max_rel_error, err);
  }
  r.checked = static_cast<int>(pairs.size());
  return r;
}

struct GradFidelity {
  double max_rel_error = 0.0;
  int instances = 0;
  int checked = 0;
  int skipped = 0;
};

/// Runs the check on `instances` He-initialised toy networks. Each instance
/// draws its own weights, input scene, layer pair and centroid from `seed`.
inline GradFidelity gradient_fidelity(int instances, std::uint64_t seed, int coords_per_instance = 48) {
  GradFidelity out;
  const auto classes = default_toy_classes();
  for (int n = 0; n < instances; ++n) {
    const std::uint64_t s = derive_seed(seed, {0x6C, static_cast<std::uint64_t>(n)});
    LayeredModel m = toy_architecture(static_cast<int>(classes.size()));
    init_weights(m, derive_seed(s, {1}));
    Rng rng(derive_seed(s, {2}));
    const auto& c = classes[rng.index(classes.size())];
    const Tensor image = make_scene(c.shape, c.color, derive_seed(s, {3})).image;

    std::vector<int> ends = m.taps();
    ends.push_back(m.layer_count() - 1);
    const std::size_t a = rng.index(ends.size() - 1);
    const std::size_t b = a + 1 + rng.index(ends.size() - 1 - a);
    const int from = ends[a], to = ends[b];

    const Tensor z = forward_to(m, image, from);
    auto q = pooled_features(forward_between(m, z.cast<double>(), from, to));
    for (auto& v : q) v += rng.normal() * (std::fabs(v) + 0.1);
    const GradCheckResult r = check_distance_grad(m, z, from, to, q, derive_seed(s, {4}), 1e-3, coords_per_instance);
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.checked += r.checked;
    out.skipped += r.skipped;
    ++out.instances;
  }
  return out;
}

}  // namespace vcc
