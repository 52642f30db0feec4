#pragma once

// Layer-wise concept discovery: masked segments are re-embedded through the
// model, pooled, over-clustered with k-means and pruned by a generalised
// logistic member-count threshold.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "vcc/cluster.hpp"
#include "vcc/image.hpp"
#include "vcc/oracle.hpp"
#include "vcc/segment.hpp"

namespace vcc {

/// Generalised logistic constants of the pruning threshold. Q here is the
/// sigmoid parameter, unrelated to concept sets.
struct PruningConfig {
  double A = -102.0;
  double K = 115.0;
  double C = 1.0;
  double Q = 1.0;
  double B = 0.0004;
  double nu = 1.0;

  void validate() const {
    require(K > A && B > 0.0 && nu > 0.0, ErrorKind::config, "pruning constants need K > A, B > 0, nu > 0");
  }
};

/// Minimum member count Y(t) = A + (K - A) / (C + Q e^{-B t})^{1/nu}.
inline double pruning_threshold(double t, const PruningConfig& cfg = {}) {
  require(t >= 0.0, ErrorKind::invalid_input, "pruning threshold needs t >= 0");
  return cfg.A + (cfg.K - cfg.A) / std::pow(cfg.C + cfg.Q * std::exp(-cfg.B * t), 1.0 / cfg.nu);
}

struct Concept {
  std::string id;
  int layer = 0;
  std::vector<double> centroid;  // pooled feature space of `layer`
  std::vector<int> members;      // segment ids, ascending
};

struct ConceptLayer {
  int layer = 0;
  std::vector<Concept> concepts;
  int segment_count = 0;

  int concept_count() const { return static_cast<int>(concepts.size()); }
};

inline std::string concept_id(int layer, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "l%03d_c%02d", layer, index);
  return buf;
}

/// Spatial global average pooling.
inline std::vector<double> gap(const Tensor& activation) {
  require(activation.is_spatial(), ErrorKind::invalid_input,
          "global average pooling needs a C x H x W tensor, got " + shape_string(activation.shape()));
  return pooled_features(activation);
}

/// Segment images resized to the model input resolution.
inline Tensor segment_input(const ModelOracle& oracle, const Tensor& rgb) {
  const Shape in = oracle.input_shape();
  return resize_bilinear(rgb, in[1], in[2]);
}

struct Embedding {
  std::vector<int> ids;
  PointSet pooled;
  std::vector<Tensor> activations;  // kept only when requested
};

/// Forwards each masked segment to `layer` and pools it.
inline Embedding embed_segments(ModelOracle& oracle, std::span<const SegmentRecord> segments, int layer,
                                bool keep_activations = false, int jobs = 1) {
  const std::size_t n = segments.size();
  std::vector<Tensor> acts(n);
  parallel_for(oracle.concurrent() ? jobs : 1, n, [&](std::size_t i) {
    require(segments[i].layer == layer, ErrorKind::invalid_input, "segment does not belong to the embedded layer");
    acts[i] = oracle.forward_to(segment_input(oracle, segments[i].rgb), layer);
  });
  Embedding e;
  for (std::size_t i = 0; i < n; ++i) {
    e.ids.push_back(segments[i].id);
    e.pooled.push(gap(acts[i]));
  }
  if (keep_activations) e.activations = std::move(acts);
  return e;
}

struct DiscoveryConfig {
  int k_max = 25;  // over-clustering cluster count
  PruningConfig pruning;
  KMeansOptions kmeans{100, 1e-6, 10};
};

/// Clusters one layer's embedded segments and keeps clusters with at least
/// ceil(Y(t)) members, t being the layer's segment count.
inline ConceptLayer cluster_layer(const Embedding& emb, int layer, const DiscoveryConfig& cfg, std::uint64_t seed) {
  ConceptLayer out;
  out.layer = layer;
  out.segment_count = static_cast<int>(emb.ids.size());
  if (emb.ids.empty()) return out;
  const int k = std::min<int>(cfg.k_max, static_cast<int>(emb.ids.size()));
  const auto km = kmeans(emb.pooled, k, seed, cfg.kmeans);
  const double min_members = std::ceil(pruning_threshold(static_cast<double>(out.segment_count), cfg.pruning));

  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < km.assignment.size(); ++i) groups[km.assignment[i]].push_back(i);
  std::erase_if(groups, [&](const auto& g) { return g.empty() || static_cast<double>(g.size()) < min_members; });
  std::sort(groups.begin(), groups.end(), [&](const auto& a, const auto& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return emb.ids[a.front()] < emb.ids[b.front()];
  });
  for (std::size_t c = 0; c < groups.size(); ++c) {
    Concept con;
    con.id = concept_id(layer, static_cast<int>(c));
    con.layer = layer;
    con.centroid.assign(static_cast<std::size_t>(emb.pooled.dim), 0.0);
    for (std::size_t i : groups[c]) {
      con.members.push_back(emb.ids[i]);
      const auto row = emb.pooled.row(i);
      for (int j = 0; j < emb.pooled.dim; ++j) con.centroid[j] += row[j];
    }
    for (auto& v : con.centroid) v /= static_cast<double>(groups[c].size());
    std::sort(con.members.begin(), con.members.end());
    out.concepts.push_back(std::move(con));
  }
  return out;
}

inline std::vector<ConceptLayer> discover_concepts(ModelOracle& oracle, const SegmentSet& segments,
                                                   const DiscoveryConfig& cfg, std::uint64_t seed, int jobs = 1) {
  cfg.pruning.validate();
  std::vector<ConceptLayer> layers;
  for (int t : segments.taps) {
    const auto it = segments.by_layer.find(t);
    require(it != segments.by_layer.end(), ErrorKind::invalid_input, "segment set lacks tap layer " + std::to_string(t));
    const Embedding emb = embed_segments(oracle, it->second, t, false, jobs);
    layers.push_back(cluster_layer(emb, t, cfg, derive_seed(seed, {static_cast<std::uint64_t>(t)})));
  }
  return layers;
}

}  // namespace vcc
