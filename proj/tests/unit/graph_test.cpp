#include <gtest/gtest.h>

#include <filesystem>

#include "vcc/graph.hpp"
#include "vcc/io.hpp"
#include "vcc/toylab.hpp"

using namespace vcc;

namespace {

Concept concept_at(int layer, int idx, std::vector<int> members, std::vector<double> centroid = {0.0, 0.0}) {
  return {concept_id(layer, idx), layer, std::move(centroid), std::move(members)};
}

EdgeStat edge(const std::string& s, const std::string& d, double w) {
  EdgeStat e;
  e.src = s;
  e.dst = d;
  e.weight = w;
  e.p_value = 0.01;
  e.runs = {w, w};
  e.significant = true;
  return e;
}

// three layers: 2 concepts at layer 1, 2 at layer 3, 1 at layer 5
VCCGraph three_layer() {
  VCCGraph g;
  g.taps = {1, 3, 5};
  g.layers = {{1, {concept_at(1, 0, {0, 1}), concept_at(1, 1, {2})}, 3},
              {3, {concept_at(3, 0, {3}), concept_at(3, 1, {4, 5})}, 3},
              {5, {concept_at(5, 0, {6})}, 1}};
  g.edges = {edge("l001_c00", "l003_c00", 0.5), edge("l001_c00", "l003_c01", 0.3), edge("l001_c01", "l003_c01", 0.9),
             edge("l003_c00", "l005_c00", 1.0), edge("l003_c01", "l005_c00", 0.8)};
  g.class_edges = {edge("l005_c00", kClassNode, 0.6)};
  return g;
}

}  // namespace

TEST(Metrics, HandBuiltGraph) {
  const VCCGraph g = three_layer();
  EXPECT_TRUE(graph_violations(g).empty());
  const auto m = layer_metrics(g);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_DOUBLE_EQ(m[0].branching_factor, 1.5);
  EXPECT_DOUBLE_EQ(*m[0].edge_weight_mean, (0.5 + 0.3 + 0.9) / 3);
  const double mu = (0.5 + 0.3 + 0.9) / 3;
  EXPECT_NEAR(*m[0].edge_weight_variance,
              ((0.5 - mu) * (0.5 - mu) + (0.3 - mu) * (0.3 - mu) + (0.9 - mu) * (0.9 - mu)) / 3, 1e-15);
  EXPECT_DOUBLE_EQ(m[1].branching_factor, 1.0);
  EXPECT_DOUBLE_EQ(*m[1].edge_weight_mean, 0.9);
  EXPECT_EQ(m[2].edge_count, 1);
  EXPECT_DOUBLE_EQ(*m[2].edge_weight_mean, 0.6);
  EXPECT_DOUBLE_EQ(*m[2].edge_weight_variance, 0.0);
}

TEST(Metrics, BranchingTwoAndEmptyLayer) {
  VCCGraph g;
  g.taps = {0, 1};
  g.layers = {{0, {concept_at(0, 0, {0}), concept_at(0, 1, {1})}, 2},
              {1, {concept_at(1, 0, {2}), concept_at(1, 1, {3})}, 2}};
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) g.edges.push_back(edge(concept_id(0, a), concept_id(1, b), 0.7));
  EXPECT_DOUBLE_EQ(layer_metrics(g)[0].branching_factor, 2.0);
  g.layers[1].concepts.clear();
  g.edges.clear();
  const auto m = layer_metrics(g);
  EXPECT_FALSE(m[1].present);
  EXPECT_FALSE(m[1].edge_weight_mean.has_value());
}

TEST(Aps, PathArithmetic) {
  VCCGraph g;
  g.taps = {0, 1};
  g.layers = {{0, {concept_at(0, 0, {0})}, 1}, {1, {concept_at(1, 0, {1})}, 1}};
  g.edges = {edge("l000_c00", "l001_c00", 0.4)};
  g.class_edges = {edge("l001_c00", kClassNode, 0.6)};
  EXPECT_DOUBLE_EQ(aps(g, "l000_c00"), 0.5);

  VCCGraph d;
  d.taps = {2};
  d.layers = {{2, {concept_at(2, 0, {0})}, 1}};
  d.class_edges = {edge("l002_c00", kClassNode, 0.9)};
  EXPECT_DOUBLE_EQ(aps(d, "l002_c00"), 0.9);

  // two paths (0.5, 1.0) and (0.3, 0.8)
  VCCGraph two;
  two.taps = {0, 1};
  two.layers = {{0, {concept_at(0, 0, {0})}, 1}, {1, {concept_at(1, 0, {1}), concept_at(1, 1, {2})}, 2}};
  two.edges = {edge("l000_c00", "l001_c00", 0.5), edge("l000_c00", "l001_c01", 0.3)};
  two.class_edges = {edge("l001_c00", kClassNode, 1.0), edge("l001_c01", kClassNode, 0.8)};
  EXPECT_NEAR(aps(two, "l000_c00"), 0.65, 1e-15);
}

TEST(Aps, MemoisedCountMatchesEnumeration) {
  const VCCGraph g = three_layer();
  for (const auto& l : g.layers)
    for (const auto& c : l.concepts) {
      const auto paths = enumerate_paths(g, c.id);
      if (paths.empty()) {
        EXPECT_THROW(aps(g, c.id), Error);
        continue;
      }
      double s = 0.0;
      for (const auto& p : paths) {
        double t = 0.0;
        for (double w : p) t += w;
        s += t / static_cast<double>(p.size());
      }
      EXPECT_NEAR(aps(g, c.id), s / static_cast<double>(paths.size()), 1e-12) << c.id;
    }
  EXPECT_THROW(aps(g, "l009_c00"), Error);
}

TEST(Validity, DetectsBrokenGraphs) {
  VCCGraph g = three_layer();
  g.edges.push_back(edge("l001_c00", "l005_c00", 0.5));
  EXPECT_FALSE(graph_violations(g).empty());
  g = three_layer();
  g.layers[1].concepts[0].members.push_back(5);
  EXPECT_FALSE(graph_violations(g).empty());
  g = three_layer();
  g.edges[0].p_value = 0.2;
  EXPECT_FALSE(graph_violations(g).empty());
  g = three_layer();
  g.class_edges.push_back(edge("l003_c00", kClassNode, 0.5));
  EXPECT_FALSE(graph_violations(g).empty());
  g = three_layer();
  g.edges[0].weight = 1.5;
  EXPECT_FALSE(graph_violations(g).empty());
}

TEST(Serialization, JsonRoundTripIsExact) {
  VCCGraph g = three_layer();
  g.model_hash = "abc";
  g.seed = 12;
  g.layers[0].concepts[0].centroid = {0.1, 1.0 / 3.0};
  g.edges[1].weight = 2.0 / 7.0;
  g.edges[1].runs = {2.0 / 7.0, 2.0 / 7.0};
  g.config["itcav.runs"] = "20";
  const std::string s = vcc_json_string(g);
  const VCCGraph back = vcc_from_json(nlohmann::json::parse(s));
  EXPECT_EQ(vcc_json_string(back), s);
  EXPECT_EQ(back.layers[0].concepts[0].centroid[1], 1.0 / 3.0);
  ASSERT_EQ(back.edges.size(), g.edges.size());
  EXPECT_EQ(back.edges[1].weight, 2.0 / 7.0);
}

TEST(Serialization, DotExportListsEveryEdge) {
  const std::string dot = export_dot(three_layer());
  EXPECT_NE(dot.find("digraph"), std::string::npos);
  EXPECT_NE(dot.find("l001_c01"), std::string::npos);
  std::size_t arrows = 0;
  for (std::size_t p = dot.find("->"); p != std::string::npos; p = dot.find("->", p + 2)) ++arrows;
  EXPECT_EQ(arrows, 6u);
}

TEST(Suppress, VectorArithmetic) {
  Tensor z({2, 2, 2}, std::vector<float>{3, 3, 3, 3, 4, 4, 4, 4});
  const std::vector<double> q{3.0, 4.0};
  EXPECT_EQ(suppress_concept(z, q, 0.0).storage(), z.storage());
  const Tensor zero = suppress_concept(z, q, 5.0);
  for (float v : zero.data()) EXPECT_NEAR(v, 0.0f, 1e-6);
  const Tensor s = suppress_concept(z, q, 1.5);
  const auto before = pooled_features(z), after = pooled_features(s);
  const double proj_before = (before[0] * 3 + before[1] * 4) / 5, proj_after = (after[0] * 3 + after[1] * 4) / 5;
  EXPECT_NEAR(proj_before - proj_after, 1.5, 1e-6);
  EXPECT_THROW(suppress_concept(z, std::vector<double>{0.0, 0.0}, 1.0), Error);
  EXPECT_THROW(suppress_concept(z, q, -1.0), Error);
}

namespace {

struct ToyHarness {
  LayeredModel model;
  std::unique_ptr<InCoreOracle> oracle;
  std::vector<Tensor> images;
  std::vector<int> labels;
  ToyHarness() {
    model = toy_architecture(4);
    init_weights(model, 3);
    oracle = std::make_unique<InCoreOracle>(model);
    for (const auto& s : generate_dataset(4, default_toy_classes(), 3)) {
      images.push_back(s.image);
      labels.push_back(s.label);
    }
  }
};

}  // namespace

TEST(Suppress, ZeroEpsKeepsBaselineAccuracy) {
  ToyHarness h;
  std::vector<Tensor> eval;
  for (std::size_t i = 0; i < h.images.size(); ++i)
    if (h.labels[i] == 0) eval.push_back(h.images[i]);
  std::map<int, std::vector<double>> dirs;
  for (int t : h.model.taps()) dirs[t] = std::vector<double>(static_cast<std::size_t>(h.model.output_shape(t)[0]), 1.0);
  const auto c = suppression_curve(*h.oracle, eval, 0, dirs, std::vector<double>{0.0, 1.0});
  int hit = 0;
  for (const auto& x : eval) hit += argmax(forward_full(h.model, x).data()) == 0;
  EXPECT_DOUBLE_EQ(c.accuracy[0], static_cast<double>(hit) / static_cast<double>(eval.size()));
  EXPECT_THROW(suppression_curve(*h.oracle, eval, 0, dirs, std::vector<double>{1.0, 0.5}), Error);
}

TEST(LogitSum, AdditiveOverMembers) {
  ToyHarness h;
  SegmentSet set;
  set.taps = {4};
  for (int i = 0; i < 3; ++i) {
    SegmentRecord r;
    r.id = i;
    r.layer = 4;
    r.rgb = h.images[static_cast<std::size_t>(i)];
    set.by_layer[4].push_back(r);
  }
  const Concept all = concept_at(4, 0, {0, 1, 2});
  double manual = 0.0;
  for (int i = 0; i < 3; ++i) manual += forward_full(h.model, h.images[static_cast<std::size_t>(i)])[2];
  EXPECT_NEAR(ls(*h.oracle, set, all, 2), manual, 1e-4);
  double parts = 0.0;
  for (int i = 0; i < 3; ++i) parts += ls(*h.oracle, set, concept_at(4, i, {i}), 2);
  EXPECT_NEAR(ls(*h.oracle, set, all, 2), parts, 1e-4);
}

TEST(ApsLs, ConstantApsIsUndefined) {
  ToyHarness h;
  VCCGraph g;
  g.taps = {12};
  SegmentSet set;
  set.taps = {12};
  for (int i = 0; i < 3; ++i) {
    g.layers.resize(1);
    g.layers[0].layer = 12;
    g.layers[0].concepts.push_back(concept_at(12, i, {i}, std::vector<double>(32, 0.0)));
    g.class_edges.push_back(edge(concept_id(12, i), kClassNode, 0.8));
    SegmentRecord r;
    r.id = i;
    r.layer = 12;
    r.rgb = h.images[static_cast<std::size_t>(i)];
    set.by_layer[12].push_back(r);
  }
  try {
    aps_ls_correlation(g, *h.oracle, set, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::insufficient_data);
  }
}

TEST(NearestConcept, ExactCentroidAndFarGraph) {
  ToyHarness h;
  SegmentSet set;
  set.taps = {12};
  SegmentRecord r;
  r.id = 0;
  r.layer = 12;
  r.rgb = h.images[0];
  set.by_layer[12].push_back(r);
  const auto emb = gap(h.oracle->forward_to(h.images[0], 12));
  VCCGraph a, b;
  a.taps = b.taps = {12};
  a.layers = {{12, {concept_at(12, 0, {0}, emb)}, 1}};
  std::vector<double> far = emb;
  for (auto& v : far) v += 1e3;
  b.layers = {{12, {concept_at(12, 0, {0}, far)}, 1}};
  const auto diff = assign_nearest(a, b, *h.oracle, set);
  ASSERT_EQ(diff.assignments.size(), 1u);
  EXPECT_EQ(diff.assignments[0].graph, 0);
  EXPECT_NEAR(diff.assignments[0].distance, 0.0, 1e-9);
  EXPECT_EQ(diff.tallies[0].first, 1);
}
