#pragma once

// End-to-end VCC construction: top-down segmentation, per-layer concept
// discovery, ITCAV edges between consecutive taps and TCAV edges into the
// class node.

#include <charconv>
#include <cstdint>
#include <string>
#include <vector>

#include "vcc/concepts.hpp"
#include "vcc/graph.hpp"
#include "vcc/itcav.hpp"
#include "vcc/segment.hpp"

namespace vcc {

struct VccConfig {
  SegmentConfig segment;
  DiscoveryConfig discovery;
  ItcavConfig itcav;
};

inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

/// Flat provenance record stored with every graph.
inline std::map<std::string, std::string> provenance(const VccConfig& c) {
  const auto& p = c.discovery.pruning;
  return {
      {"segment.compactness", format_double(c.segment.compactness)},
      {"segment.k_max", std::to_string(c.segment.k_max)},
      {"segment.cells_per_cluster", std::to_string(c.segment.cells_per_cluster)},
      {"segment.silhouette_floor", format_double(c.segment.silhouette_floor)},
      {"segment.min_cells", std::to_string(c.segment.min_cells)},
      {"segment.min_fraction", format_double(c.segment.min_fraction)},
      {"concepts.k_m", std::to_string(c.discovery.k_max)},
      {"concepts.restarts", std::to_string(c.discovery.kmeans.restarts)},
      {"pruning.A", format_double(p.A)},
      {"pruning.K", format_double(p.K)},
      {"pruning.C", format_double(p.C)},
      {"pruning.Q", format_double(p.Q)},
      {"pruning.B", format_double(p.B)},
      {"pruning.nu", format_double(p.nu)},
      {"itcav.runs", std::to_string(c.itcav.runs)},
      {"itcav.alpha", format_double(c.itcav.alpha)},
      {"itcav.random_set_size", std::to_string(c.itcav.random_set_size)},
      {"itcav.literal_sign", c.itcav.literal_sign ? "true" : "false"},
      {"itcav.test_mode",
       c.itcav.mode == ItcavConfig::TestMode::scores_vs_half ? "scores_vs_half" : "observed_vs_random_null"},
      {"cav.steps", std::to_string(c.itcav.cav.steps)},
      {"cav.learning_rate", format_double(c.itcav.cav.learning_rate)},
      {"cav.l2", format_double(c.itcav.cav.l2)},
  };
}

/// Builds the VCC of class `cls` from its images. `pool` holds the
/// concept-neutral random images used as CAV negatives; it needs at least
/// runs x random_set_size entries. Images of any resolution are resized to
/// the model input.
inline VCCGraph build_vcc(ModelOracle& oracle, std::span<const Tensor> images, std::vector<int> taps, int cls,
                          std::span<const Tensor> pool, const VccConfig& cfg, std::uint64_t seed, int jobs = 1,
                          SegmentSet* segments_out = nullptr) {
  require(!images.empty(), ErrorKind::invalid_input, "VCC construction needs class images");
  require(cls >= 0 && cls < oracle.class_count(), ErrorKind::invalid_target, "class label out of range");
  if (taps.empty()) taps = oracle.taps();
  require(!taps.empty(), ErrorKind::invalid_input, "VCC construction needs tap layers");
  cfg.discovery.pruning.validate();
  const int par = oracle.concurrent() ? jobs : 1;

  VCCGraph g;
  g.model_hash = oracle.model_hash();
  g.class_label = cls;
  g.seed = seed;
  g.taps = taps;
  g.alpha = cfg.itcav.alpha;
  g.config = provenance(cfg);

  std::vector<Tensor> inputs(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) inputs[i] = segment_input(oracle, images[i]);
  std::vector<Tensor> pool_inputs(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool_inputs[i] = segment_input(oracle, pool[i]);

  SegmentSet segs = topdown_segment(oracle, inputs, taps, cfg.segment, derive_seed(seed, {0x5E6}), jobs);

  // concepts, keeping member activations for CAV training
  std::vector<std::vector<std::vector<Tensor>>> member_acts(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) {
    const auto& records = segs.by_layer.at(taps[i]);
    Embedding emb = embed_segments(oracle, records, taps[i], true, jobs);
    ConceptLayer layer =
        cluster_layer(emb, taps[i], cfg.discovery, derive_seed(seed, {0xC0, static_cast<std::uint64_t>(taps[i])}));
    std::map<int, std::size_t> row_of;
    for (std::size_t r = 0; r < emb.ids.size(); ++r) row_of[emb.ids[r]] = r;
    for (const auto& c : layer.concepts) {
      std::vector<Tensor> acts;
      for (int id : c.members) acts.push_back(emb.activations[row_of.at(id)]);
      member_acts[i].push_back(std::move(acts));
    }
    if (layer.concepts.empty())
      g.warnings.push_back("layer " + std::to_string(taps[i]) + " has no concepts; its edges are skipped");
    g.layers.push_back(std::move(layer));
  }

  // member images per concept, for destination gradients
  auto member_rgb = [&](const Concept& c) {
    std::vector<const Tensor*> out;
    for (int id : c.members) out.push_back(&segs.find(id)->rgb);
    return out;
  };

  for (std::size_t i = 0; i < taps.size(); ++i) {
    const int j = taps[i];
    const bool deepest = i + 1 == taps.size();
    if (g.layers[i].concepts.empty()) continue;
    if (!deepest && g.layers[i + 1].concepts.empty()) continue;

    std::vector<Tensor> pool_acts(pool_inputs.size());
    parallel_for(par, pool_inputs.size(), [&](std::size_t p) { pool_acts[p] = oracle.forward_to(pool_inputs[p], j); });
    SourceLayerCavs cavs(j, std::move(member_acts[i]), std::move(pool_acts), cfg.itcav,
                         derive_seed(seed, {0xCA7, static_cast<std::uint64_t>(j)}));
    cavs.train_all(jobs);
    const auto& src = g.layers[i].concepts;

    if (deepest) {
      std::vector<Tensor> grads(inputs.size());
      parallel_for(par, inputs.size(), [&](std::size_t n) {
        grads[n] = oracle.logit_grad(oracle.forward_to(inputs[n], j), j, cls);
      });
      std::vector<EdgeStat> edges(src.size());
      parallel_for(jobs, src.size(), [&](std::size_t s) {
        edges[s] = itcav_edge_from_gradients(cavs, s, src[s].id, kClassNode, grads, cfg.itcav, true);
      });
      for (auto& e : edges)
        if (e.significant) g.class_edges.push_back(std::move(e));
      continue;
    }

    const int l = taps[i + 1];
    for (const auto& dst : g.layers[i + 1].concepts) {
      const auto rgb = member_rgb(dst);
      std::vector<Tensor> grads(rgb.size());
      parallel_for(par, rgb.size(), [&](std::size_t m) {
        grads[m] = oracle.distance_grad(oracle.forward_to(*rgb[m], j), j, l, dst.centroid);
      });
      std::vector<EdgeStat> edges(src.size());
      parallel_for(jobs, src.size(), [&](std::size_t s) {
        edges[s] = itcav_edge_from_gradients(cavs, s, src[s].id, dst.id, grads, cfg.itcav);
      });
      for (auto& e : edges)
        if (e.significant) g.edges.push_back(std::move(e));
    }
  }

  canonicalize(g);
  validate_graph(g);
  if (segments_out) *segments_out = std::move(segs);
  return g;
}

/// One suppression direction per tap: a seeded random concept centroid of
/// that layer, or a seeded Gaussian unit vector when `random_direction`.
inline std::map<int, std::vector<double>> suppression_directions(const VCCGraph& g, ModelOracle& oracle,
                                                                 bool random_direction, std::uint64_t seed) {
  std::map<int, std::vector<double>> out;
  for (const auto& l : g.layers) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(l.layer)}));
    if (random_direction) {
      const int channels = oracle.layer_shape(l.layer)[0];
      std::vector<double> d(static_cast<std::size_t>(channels));
      for (auto& v : d) v = rng.normal();
      const double n = norm2<double>(d);
      for (auto& v : d) v /= n;
      out[l.layer] = std::move(d);
    } else if (!l.concepts.empty()) {
      out[l.layer] = l.concepts[rng.index(l.concepts.size())].centroid;
    }
  }
  return out;
}

}  // namespace vcc
