#include <gtest/gtest.h>

#include "toy_fixture.hpp"
#include "vcc/graph.hpp"
#include "vcc/io.hpp"

using namespace vcc;

// Uses the trained toy model cached in the build tree (trained on first use).

namespace {

toyfix::ToyModel& toy() {
  static toyfix::ToyModel t = toyfix::load_or_train(VCC_CACHE_DIR);
  return t;
}

VccConfig small_config() {
  VccConfig c;
  c.itcav.runs = 6;
  c.itcav.random_set_size = 10;
  return c;
}

VCCGraph small_build(int cls, int jobs, SegmentSet* segs = nullptr) {
  auto& t = toy();
  InCoreOracle o(t.model);
  const auto images = toyfix::class_split(t.classes, 5, 0x7A2, cls, 12);
  const auto pool = toyfix::random_pool(t.classes, 5, 60);
  return build_vcc(o, images, {}, cls, pool, small_config(), 5, jobs, segs);
}

}  // namespace

TEST(ToyModel, ClearsAccuracyGate) {
  EXPECT_GE(toy().train_accuracy, 0.95);
  EXPECT_EQ(toy().model.taps(), (std::vector<int>{4, 7, 10, 12}));
}

TEST(Pipeline, BuildIsValidDeterministicAndJobIndependent) {
  SegmentSet segs;
  const VCCGraph a = small_build(1, 1, &segs);
  EXPECT_TRUE(graph_violations(a).empty());
  for (const auto& l : a.layers) EXPECT_GE(l.concept_count(), 1) << "layer " << l.layer;
  EXPECT_GE(a.class_edges.size(), 1u);
  for (const auto& l : a.layers)
    for (const auto& c : l.concepts)
      EXPECT_GE(static_cast<double>(c.members.size()),
                std::ceil(pruning_threshold(static_cast<double>(l.segment_count))));
  const VCCGraph b = small_build(1, 1);
  const VCCGraph c = small_build(1, 3);
  EXPECT_EQ(vcc_json_string(a), vcc_json_string(b));
  EXPECT_EQ(vcc_json_string(a), vcc_json_string(c));
}

// Segments lying mostly inside the shape are taken as the shape side; their
// union is scored against the annotation.
TEST(Pipeline, EarlySegmentsSeparateShapeFromBackground) {
  auto& t = toy();
  InCoreOracle o(t.model);
  const auto scenes = generate_dataset(derive_seed(9, {0x7A2}), t.classes, 5);
  for (const auto& s : scenes) {
    const SegmentSet set = topdown_segment(o, std::vector<Tensor>{s.image}, t.model.taps(), {}, 1);
    const auto& early = set.by_layer.at(t.model.taps().front());
    ASSERT_GE(early.size(), 2u);
    std::vector<std::uint8_t> shape_side(s.shape_mask.size(), 0);
    for (const auto& seg : early) {
      int inside = 0, total = 0;
      for (std::size_t i = 0; i < seg.image_mask.size(); ++i) {
        inside += seg.image_mask.cells[i] && s.shape_mask.cells[i];
        total += seg.image_mask.cells[i];
      }
      if (2 * inside > total)
        for (std::size_t i = 0; i < shape_side.size(); ++i) shape_side[i] |= seg.image_mask.cells[i];
    }
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < shape_side.size(); ++i) {
      inter += shape_side[i] && s.shape_mask.cells[i];
      uni += shape_side[i] || s.shape_mask.cells[i];
    }
    EXPECT_GE(static_cast<double>(inter) / uni, 0.5) << "class " << s.label;
  }
}

TEST(Pipeline, SegmentSetsRoundTripThroughDisk) {
  SegmentSet segs;
  small_build(2, 1, &segs);
  const auto dir = std::filesystem::temp_directory_path() / "vcc_unit_segments";
  std::filesystem::remove_all(dir);
  save_segments(dir, segs);
  const SegmentSet back = load_segments(dir);
  ASSERT_EQ(back.total(), segs.total());
  for (const auto& [l, recs] : segs.by_layer)
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& r = back.by_layer.at(l)[i];
      EXPECT_EQ(r.mask, recs[i].mask);
      EXPECT_EQ(r.parent, recs[i].parent);
      EXPECT_EQ(to_image(r.rgb), to_image(recs[i].rgb));
    }
}

TEST(Pipeline, LargeSuppressionDrivesAccuracyToChance) {
  auto& t = toy();
  InCoreOracle o(t.model);
  std::map<int, std::vector<double>> dirs;
  Rng rng(4);
  for (int tap : t.model.taps()) {
    std::vector<double> d(static_cast<std::size_t>(t.model.output_shape(tap)[0]));
    for (auto& v : d) v = rng.normal();
    dirs[tap] = d;
  }
  // a collapsed model predicts one class for everything: balanced accuracy 1/C
  double base = 0.0, crushed = 0.0;
  for (int cls = 0; cls < 4; ++cls) {
    const auto eval = toyfix::class_split(t.classes, 3, 0x7A3, cls, 15);
    const auto c = suppression_curve(o, eval, cls, dirs, std::vector<double>{0.0, 1e4});
    base += c.accuracy.front() / 4.0;
    crushed += c.accuracy.back() / 4.0;
  }
  EXPECT_GT(base, 0.8);
  EXPECT_LE(crushed, 0.4);
}
