#pragma once

// VCC graph: layered DAG of concepts with ITCAV edges and a terminal class
// node, plus the analytics run on it (layer metrics, average path strength,
// logit sums, concept suppression and nearest-concept diffs).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vcc/concepts.hpp"
#include "vcc/itcav.hpp"
#include "vcc/parallel.hpp"
#include "vcc/stats.hpp"

namespace vcc {

inline constexpr const char* kClassNode = "class";

struct VCCGraph {
  std::string model_hash;
  int class_label = 0;
  std::uint64_t seed = 0;
  std::vector<int> taps;            // ascending
  std::vector<ConceptLayer> layers;  // one per tap, same order
  std::vector<EdgeStat> edges;       // tap i -> tap i+1
  std::vector<EdgeStat> class_edges; // deepest tap -> class
  double alpha = 0.05;
  std::map<std::string, std::string> config;
  std::vector<std::string> warnings;

  const Concept* find(const std::string& id) const {
    for (const auto& l : layers)
      for (const auto& c : l.concepts)
        if (c.id == id) return &c;
    return nullptr;
  }

  int tap_position(int layer) const {
    for (std::size_t i = 0; i < taps.size(); ++i)
      if (taps[i] == layer) return static_cast<int>(i);
    return -1;
  }

  const ConceptLayer* layer(int layer_index) const {
    for (const auto& l : layers)
      if (l.layer == layer_index) return &l;
    return nullptr;
  }

  std::size_t concept_total() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.concepts.size();
    return n;
  }
};

/// Sorts concepts, members and edges into canonical order.
inline void canonicalize(VCCGraph& g) {
  for (auto& l : g.layers) {
    std::sort(l.concepts.begin(), l.concepts.end(), [](const Concept& a, const Concept& b) { return a.id < b.id; });
    for (auto& c : l.concepts) std::sort(c.members.begin(), c.members.end());
  }
  auto by_ids = [](const EdgeStat& a, const EdgeStat& b) { return std::tie(a.src, a.dst) < std::tie(b.src, b.dst); };
  std::sort(g.edges.begin(), g.edges.end(), by_ids);
  std::sort(g.class_edges.begin(), g.class_edges.end(), by_ids);
}

/// Structural check of every VCC invariant; returns the violations found.
inline std::vector<std::string> graph_violations(const VCCGraph& g) {
  std::vector<std::string> out;
  if (!std::is_sorted(g.taps.begin(), g.taps.end()) ||
      std::adjacent_find(g.taps.begin(), g.taps.end()) != g.taps.end())
    out.push_back("tap layers are not strictly increasing");
  if (g.layers.size() != g.taps.size()) out.push_back("concept layer count differs from tap count");
  std::map<std::string, int> position;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (i < g.taps.size() && g.layers[i].layer != g.taps[i]) out.push_back("concept layer order differs from taps");
    std::set<int> seen_members;
    for (const auto& c : g.layers[i].concepts) {
      if (c.layer != g.layers[i].layer) out.push_back("concept " + c.id + " is filed under the wrong layer");
      if (!position.emplace(c.id, static_cast<int>(i)).second) out.push_back("duplicate concept id " + c.id);
      if (c.members.empty()) out.push_back("concept " + c.id + " has no members");
      for (int m : c.members)
        if (!seen_members.insert(m).second) out.push_back("segment " + std::to_string(m) + " belongs to two concepts");
      for (double v : c.centroid)
        if (!std::isfinite(v)) out.push_back("concept " + c.id + " has a non-finite centroid");
    }
  }
  auto check_stat = [&](const EdgeStat& e) {
    if (!(e.weight >= 0.0 && e.weight <= 1.0)) out.push_back("edge " + e.src + "->" + e.dst + " weight outside [0,1]");
    if (!(e.p_value >= 0.0 && e.p_value <= g.alpha))
      out.push_back("edge " + e.src + "->" + e.dst + " is not significant at alpha");
    if (!e.runs.empty() && std::fabs(mean(e.runs) - e.weight) > 1e-9)
      out.push_back("edge " + e.src + "->" + e.dst + " weight is not the mean of its runs");
  };
  std::set<std::pair<std::string, std::string>> pairs;
  for (const auto& e : g.edges) {
    check_stat(e);
    const auto s = position.find(e.src);
    const auto d = position.find(e.dst);
    if (s == position.end() || d == position.end()) {
      out.push_back("edge " + e.src + "->" + e.dst + " references an unknown concept");
      continue;
    }
    if (d->second != s->second + 1) out.push_back("edge " + e.src + "->" + e.dst + " skips or reverses layers");
    if (!pairs.emplace(e.src, e.dst).second) out.push_back("duplicate edge " + e.src + "->" + e.dst);
  }
  for (const auto& e : g.class_edges) {
    check_stat(e);
    const auto s = position.find(e.src);
    if (s == position.end() || s->second + 1 != static_cast<int>(g.layers.size()))
      out.push_back("class edge from " + e.src + " does not start at the deepest layer");
    if (e.dst != kClassNode) out.push_back("class edge " + e.src + " does not end at the class node");
    if (!pairs.emplace(e.src, e.dst).second) out.push_back("duplicate class edge from " + e.src);
  }
  return out;
}

inline void validate_graph(const VCCGraph& g) {
  const auto v = graph_violations(g);
  require(v.empty(), ErrorKind::invalid_input, v.empty() ? "" : "invalid VCC: " + v.front());
}

struct LayerMetrics {
  int layer = 0;
  bool present = false;  // false when the layer has no concepts
  int concept_count = 0;
  int edge_count = 0;
  double branching_factor = 0.0;
  std::optional<double> edge_weight_mean;
  std::optional<double> edge_weight_variance;  // population variance
};

inline std::vector<LayerMetrics> layer_metrics(const VCCGraph& g) {
  std::vector<LayerMetrics> out;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& l = g.layers[i];
    LayerMetrics m;
    m.layer = l.layer;
    m.concept_count = l.concept_count();
    m.present = m.concept_count > 0;
    if (m.present) {
      std::set<std::string> ids;
      for (const auto& c : l.concepts) ids.insert(c.id);
      const bool deepest = i + 1 == g.layers.size();
      std::vector<double> w;
      for (const auto& e : deepest ? g.class_edges : g.edges)
        if (ids.count(e.src)) w.push_back(e.weight);
      m.edge_count = static_cast<int>(w.size());
      m.branching_factor = static_cast<double>(w.size()) / static_cast<double>(m.concept_count);
      if (!w.empty()) {
        m.edge_weight_mean = mean(w);
        m.edge_weight_variance = variance(w);
      }
    }
    out.push_back(m);
  }
  return out;
}

namespace detail {

inline std::map<std::string, std::vector<std::pair<std::string, double>>> adjacency(const VCCGraph& g) {
  std::map<std::string, std::vector<std::pair<std::string, double>>> adj;
  for (const auto& e : g.edges) adj[e.src].emplace_back(e.dst, e.weight);
  for (const auto& e : g.class_edges) adj[e.src].emplace_back(kClassNode, e.weight);
  return adj;
}

}  // namespace detail

/// Every concept -> class path, each as its list of edge weights.
inline std::vector<std::vector<double>> enumerate_paths(const VCCGraph& g, const std::string& cid) {
  const auto adj = detail::adjacency(g);
  std::vector<std::vector<double>> paths;
  std::vector<double> cur;
  auto dfs = [&](auto&& self, const std::string& node) -> void {
    if (node == kClassNode) {
      paths.push_back(cur);
      return;
    }
    const auto it = adj.find(node);
    if (it == adj.end()) return;
    for (const auto& [next, w] : it->second) {
      cur.push_back(w);
      self(self, next);
      cur.pop_back();
    }
  };
  dfs(dfs, cid);
  return paths;
}

struct PathSummary {
  double count = 0.0;       // number of paths to the class node
  double weight_sum = 0.0;  // sum over paths of the summed edge weights
  int length = 0;           // edges per path (layered graphs: all equal)
};

/// Memoised path counting: count(v) = sum count(child), sum(v) = sum
/// (sum(child) + w * count(child)).
inline std::map<std::string, PathSummary> path_summaries(const VCCGraph& g) {
  const auto adj = detail::adjacency(g);
  std::map<std::string, PathSummary> memo;
  memo[kClassNode] = {1.0, 0.0, 0};
  auto visit = [&](auto&& self, const std::string& node) -> const PathSummary& {
    if (auto it = memo.find(node); it != memo.end()) return it->second;
    PathSummary s;
    if (auto it = adj.find(node); it != adj.end())
      for (const auto& [next, w] : it->second) {
        const PathSummary c = self(self, next);
        if (c.count == 0.0) continue;
        s.count += c.count;
        s.weight_sum += c.weight_sum + w * c.count;
        s.length = c.length + 1;
      }
    return memo[node] = s;
  };
  for (const auto& l : g.layers)
    for (const auto& c : l.concepts) visit(visit, c.id);
  return memo;
}

/// Average path strength: mean over concept -> class paths of the mean edge
/// weight along each path.
inline double aps(const VCCGraph& g, const std::string& cid) {
  require(g.find(cid) != nullptr, ErrorKind::invalid_input, "unknown concept " + cid);
  const auto memo = path_summaries(g);
  const auto& s = memo.at(cid);
  require(s.count > 0.0, ErrorKind::no_path, "concept " + cid + " has no path to the class node");
  return s.weight_sum / (static_cast<double>(s.length) * s.count);
}

/// Logit sum: class-`cls` logits summed over the given masked segments.
inline double logit_sum(ModelOracle& oracle, std::span<const Tensor> member_rgb, int cls) {
  double s = 0.0;
  for (const auto& x : member_rgb) s += oracle.logits(segment_input(oracle, x))[static_cast<std::size_t>(cls)];
  return s;
}

inline double ls(ModelOracle& oracle, const SegmentSet& segments, const Concept& con, int cls) {
  require(!con.members.empty(), ErrorKind::invalid_input, "concept " + con.id + " has no members");
  std::vector<Tensor> rgb;
  for (int id : con.members) {
    const auto* s = segments.find(id);
    require(s != nullptr, ErrorKind::invalid_input, "segment " + std::to_string(id) + " missing from segment set");
    rgb.push_back(s->rgb);
  }
  return logit_sum(oracle, rgb, cls);
}

struct ApsLsPoint {
  std::string concept_id;
  double aps = 0.0;
  double ls = 0.0;
};

struct ApsLsResult {
  std::vector<ApsLsPoint> points;
  double pearson_r = 0.0;
};

/// Pearson correlation between APS and LS over every concept with a path.
inline ApsLsResult aps_ls_correlation(const VCCGraph& g, ModelOracle& oracle, const SegmentSet& segments, int cls) {
  ApsLsResult r;
  const auto memo = path_summaries(g);
  for (const auto& l : g.layers)
    for (const auto& c : l.concepts) {
      const auto& s = memo.at(c.id);
      if (s.count == 0.0) continue;
      r.points.push_back({c.id, s.weight_sum / (s.length * s.count), ls(oracle, segments, c, cls)});
    }
  require(r.points.size() >= 3, ErrorKind::insufficient_data,
          "APS-LS correlation needs >= 3 concepts with paths, found " + std::to_string(r.points.size()));
  std::vector<double> a, b;
  for (const auto& p : r.points) {
    a.push_back(p.aps);
    b.push_back(p.ls);
  }
  r.pearson_r = pearson(a, b);
  return r;
}

/// z <- z - eps * q / ||q||, with the channel direction broadcast over every
/// spatial position.
inline Tensor suppress_concept(const Tensor& activation, std::span<const double> q, double eps) {
  require(eps >= 0.0, ErrorKind::invalid_input, "suppression magnitude must be nonnegative");
  const double n = norm2<double>(q);
  require(n > 0.0, ErrorKind::invalid_concept, "cannot suppress along a zero centroid");
  const std::size_t channels = activation.is_spatial() ? static_cast<std::size_t>(activation.dim(0)) : activation.size();
  require(q.size() == channels, ErrorKind::invalid_input, "suppression direction does not match activation channels");
  Tensor out = activation;
  const std::size_t hw = activation.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    const float d = static_cast<float>(eps * q[c] / n);
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] -= d;
  }
  return out;
}

struct SuppressionCurve {
  std::vector<double> eps;
  std::vector<double> accuracy;
  double auc = 0.0;  // trapezoid over eps scaled to [0, 1]
};

/// Target-class accuracy under suppression at every tap with a direction.
/// `directions` maps tap layer -> channel-space direction.
inline SuppressionCurve suppression_curve(ModelOracle& oracle, std::span<const Tensor> eval_images, int cls,
                                          const std::map<int, std::vector<double>>& directions,
                                          std::span<const double> eps_grid, int jobs = 1) {
  require(!eval_images.empty(), ErrorKind::invalid_input, "suppression needs evaluation images");
  require(eps_grid.size() >= 2, ErrorKind::invalid_input, "suppression needs an eps grid of >= 2 values");
  for (std::size_t i = 0; i < eps_grid.size(); ++i)
    require(eps_grid[i] >= 0.0 && (i == 0 || eps_grid[i] > eps_grid[i - 1]), ErrorKind::config,
            "eps grid must be nonnegative and increasing");
  require(!directions.empty(), ErrorKind::invalid_input, "suppression needs at least one layer direction");
  std::vector<int> layers;
  for (const auto& [l, d] : directions) layers.push_back(l);

  SuppressionCurve curve;
  curve.eps.assign(eps_grid.begin(), eps_grid.end());
  for (double eps : eps_grid) {
    std::vector<int> hit(eval_images.size(), 0);
    parallel_for(oracle.concurrent() ? jobs : 1, eval_images.size(), [&](std::size_t i) {
      Tensor z = oracle.forward_to(segment_input(oracle, eval_images[i]), layers[0]);
      z = suppress_concept(z, directions.at(layers[0]), eps);
      for (std::size_t k = 1; k < layers.size(); ++k) {
        z = oracle.forward_between(z, layers[k - 1], layers[k]);
        z = suppress_concept(z, directions.at(layers[k]), eps);
      }
      const Tensor logits = oracle.forward_between(z, layers.back(), oracle.last_layer());
      hit[i] = argmax(logits.data()) == cls ? 1 : 0;
    });
    double acc = 0.0;
    for (int h : hit) acc += h;
    curve.accuracy.push_back(acc / static_cast<double>(eval_images.size()));
  }
  const double top = eps_grid.back();
  std::vector<double> x;
  for (double e : eps_grid) x.push_back(top > 0.0 ? e / top : 0.0);
  curve.auc = trapezoid(x, curve.accuracy);
  return curve;
}

struct SegmentAssignment {
  int segment = 0;
  int layer = 0;
  int graph = 0;  // 0 = first graph, 1 = second
  std::string concept_id;
  double distance = 0.0;
};

struct LayerTally {
  int layer = 0;
  int first = 0;
  int second = 0;
};

struct ConceptDiff {
  std::vector<SegmentAssignment> assignments;
  std::vector<LayerTally> tallies;
  std::vector<std::string> warnings;
};

/// Assigns each segment's pooled embedding to the nearest centroid (l2)
/// across both graphs' concepts at the segment's layer.
inline ConceptDiff assign_nearest(const VCCGraph& a, const VCCGraph& b, ModelOracle& oracle,
                                  const SegmentSet& segments, int jobs = 1) {
  ConceptDiff diff;
  for (int t : segments.taps) {
    const ConceptLayer* la = a.layer(t);
    const ConceptLayer* lb = b.layer(t);
    if (!la || !lb || (la->concepts.empty() && lb->concepts.empty())) {
      diff.warnings.push_back("layer " + std::to_string(t) + " skipped: missing from a graph or without concepts");
      continue;
    }
    const auto& segs = segments.by_layer.at(t);
    const Embedding emb = embed_segments(oracle, segs, t, false, jobs);
    LayerTally tally{t, 0, 0};
    for (std::size_t i = 0; i < segs.size(); ++i) {
      SegmentAssignment best{segs[i].id, t, 0, "", std::numeric_limits<double>::infinity()};
      int gi = 0;
      for (const ConceptLayer* l : {la, lb}) {
        for (const auto& c : l->concepts) {
          require(c.centroid.size() == static_cast<std::size_t>(emb.pooled.dim), ErrorKind::invalid_input,
                  "centroid of " + c.id + " does not match the layer's feature width");
          const double d = std::sqrt(sq_dist(emb.pooled.row(i), c.centroid));
          if (d < best.distance) {
            best.distance = d;
            best.graph = gi;
            best.concept_id = c.id;
          }
        }
        ++gi;
      }
      (best.graph == 0 ? tally.first : tally.second) += 1;
      diff.assignments.push_back(best);
    }
    diff.tallies.push_back(tally);
  }
  return diff;
}

/// Segments one image top-down and assigns every segment to its nearest
/// concept across the two graphs.
inline ConceptDiff nearest_concept_diff(const VCCGraph& a, const VCCGraph& b, ModelOracle& oracle, const Tensor& image,
                                        const SegmentConfig& cfg, std::uint64_t seed, int jobs = 1) {
  require(a.taps == b.taps, ErrorKind::invalid_input, "graphs were built on different tap layers");
  const Shape in = oracle.input_shape();
  std::vector<Tensor> images{resize_bilinear(image, in[1], in[2])};
  const SegmentSet segs = topdown_segment(oracle, images, a.taps, cfg, seed, jobs);
  return assign_nearest(a, b, oracle, segs, jobs);
}

}  // namespace vcc
