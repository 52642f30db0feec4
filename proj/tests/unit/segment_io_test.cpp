#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"
#include "vcc/io.hpp"
#include "vcc/oracle.hpp"
#include "vcc/segment.hpp"
#include "vcc/toylab.hpp"

using namespace vcc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vcc_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

BinaryMask full(int h, int w) { return BinaryMask(h, w, 1); }

}  // namespace

TEST(Upsample, AllOnesAndIdentity) {
  const BinaryMask up = upsample_mask(full(2, 3), 9, 7);
  EXPECT_EQ(up.active(), 63);
  BinaryMask m(3, 3);
  m.at(1, 2) = 1;
  EXPECT_EQ(upsample_mask(m, 3, 3), m);
  EXPECT_THROW(upsample_mask(m, 2, 2), Error);
}

TEST(Upsample, CornerPixelMatchesDirectBilinear) {
  BinaryMask m(2, 2);
  m.at(0, 0) = 1;
  const BinaryMask up = upsample_mask(m, 4, 4);
  // half-pixel centres: source coordinate (i + 0.5) / 2 - 0.5, clamped
  auto src = [](int i) { return std::clamp((i + 0.5) / 2.0 - 0.5, 0.0, 1.0); };
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double v = (1.0 - src(y)) * (1.0 - src(x));
      EXPECT_EQ(up.at(y, x), v >= 0.5 ? 1 : 0) << y << "," << x;
      if (up.at(y, x)) EXPECT_TRUE(y < 2 && x < 2);
    }
  EXPECT_EQ(up.active(), 4);
}

TEST(Upsample, NeverEmptiesANonemptyMask) {
  BinaryMask m(8, 8);
  m.at(3, 4) = 1;
  EXPECT_GT(upsample_mask(m, 64, 64).active(), 0);
}

TEST(RgbMask, Contracts) {
  Rng rng(1);
  Tensor img({3, 4, 4});
  for (auto& v : img.storage()) v = static_cast<float>(0.1 + rng.uniform());
  EXPECT_EQ(rgb_mask(img, full(4, 4)).storage(), img.storage());
  BinaryMask one(4, 4);
  one.at(2, 1) = 1;
  const Tensor m = rgb_mask(img, one);
  int nonzero = 0;
  for (float v : m.data()) nonzero += v != 0.0f;
  EXPECT_EQ(nonzero, 3);
  EXPECT_EQ(rgb_mask(m, one).storage(), m.storage());
}

TEST(RelativeSize, Arithmetic) {
  SegmentRecord a, b;
  a.image_mask = full(4, 4);
  EXPECT_DOUBLE_EQ(relative_segment_size(std::vector<SegmentRecord>{a}), 1.0);
  a.image_mask = BinaryMask(4, 4);
  b.image_mask = BinaryMask(4, 4);
  for (int i = 0; i < 4; ++i) a.image_mask.cells[static_cast<std::size_t>(i)] = 1;
  for (int i = 0; i < 12; ++i) b.image_mask.cells[static_cast<std::size_t>(i)] = 1;
  EXPECT_DOUBLE_EQ(relative_segment_size(std::vector<SegmentRecord>{a, b}), 0.5);
  EXPECT_THROW(relative_segment_size(std::vector<SegmentRecord>{}), Error);
}

TEST(MaskSlic, KOneReturnsRegion) {
  Tensor f({2, 4, 4}, 1.0f);
  BinaryMask r = full(4, 4);
  r.at(0, 0) = 0;
  const auto out = mask_slic(f, r, 1, 0.8, 1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], r);
}

TEST(MaskSlic, HalfAndHalfMatchesExhaustiveSplit) {
  Tensor f({2, 4, 4});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      f.at(0, y, x) = x < 2 ? 1.0f : 0.0f;
      f.at(1, y, x) = x < 2 ? 0.0f : 1.0f;
    }
  // best 2-partition of the per-cell feature vectors
  oracle::Points pts;
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) pts.push_back({f.at(0, y, x), f.at(1, y, x)});
  const auto best = oracle::best_partition(pts, 2);
  const auto out = mask_slic(f, full(4, 4), 2, 1e-9, 3);
  ASSERT_EQ(out.size(), 2u);
  for (const auto& m : out) {
    const std::uint8_t first = m.cells[0];
    for (std::size_t i = 0; i < 16; ++i) {
      const bool same_side = best.label[i] == best.label[0];
      EXPECT_EQ(m.cells[i] == first, same_side);
    }
  }
}

TEST(MaskSlic, PartitionOfRegion) {
  Rng rng(4);
  Tensor f({3, 6, 6});
  for (auto& v : f.storage()) v = static_cast<float>(rng.normal());
  BinaryMask r = full(6, 6);
  for (int y = 0; y < 6; ++y) r.at(y, 2) = 0;
  const auto out = mask_slic(f, r, 3, 0.8, 2);
  BinaryMask uni(6, 6);
  for (const auto& m : out) {
    EXPECT_TRUE(m.subset_of(r));
    for (std::size_t i = 0; i < m.size(); ++i) {
      EXPECT_FALSE(m.cells[i] && uni.cells[i]);
      uni.cells[i] |= m.cells[i];
    }
  }
  EXPECT_EQ(uni, r);
}

TEST(TopDown, ConstantFeaturesGiveOneSegment) {
  LayeredModel m({3, 16, 16}, {LayerSpec::conv(3, 4, 3, 1, 1), LayerSpec::relu(), LayerSpec::gap(), LayerSpec::dense(4, 2)},
                 2, {1});
  auto& c = m.mutable_layers()[0];
  c.weight.assign(c.weight_count(), 0.0f);
  c.bias = {1, 2, 3, 4};
  m.mutable_layers()[3].weight.assign(8, 0.5f);
  m.mutable_layers()[3].bias.assign(2, 0.0f);
  InCoreOracle o(m);
  Rng rng(2);
  Tensor img({3, 16, 16});
  for (auto& v : img.storage()) v = static_cast<float>(rng.uniform());
  const SegmentSet s = topdown_segment(o, std::vector<Tensor>{img}, {1}, {}, 1);
  ASSERT_EQ(s.total(), 1u);
  EXPECT_EQ(s.by_layer.at(1)[0].image_mask.active(), 256);
}

TEST(TopDown, LineageOnRandomNet) {
  LayeredModel m = toy_architecture(4);
  init_weights(m, 5);
  InCoreOracle o(m);
  const auto scenes = generate_dataset(11, default_toy_classes(), 1);
  std::vector<Tensor> imgs;
  for (const auto& s : scenes) imgs.push_back(s.image);
  const SegmentSet set = topdown_segment(o, imgs, m.taps(), {}, 3);
  ASSERT_GT(set.total(), 0u);
  for (const auto& [layer, recs] : set.by_layer)
    for (const auto& r : recs) {
      EXPECT_EQ(r.layer, layer);
      if (r.parent < 0) continue;
      const SegmentRecord* p = set.find(r.parent);
      ASSERT_NE(p, nullptr);
      EXPECT_GT(p->layer, r.layer);
      EXPECT_TRUE(r.mask.subset_of(upsample_mask(p->mask, r.mask.height, r.mask.width)));
    }
  // children of one parent are disjoint
  std::map<int, BinaryMask> cover;
  for (const auto& [layer, recs] : set.by_layer)
    for (const auto& r : recs) {
      const int key = r.parent * 1000 + r.image;
      auto [it, fresh] = cover.try_emplace(key, BinaryMask(r.mask.height, r.mask.width));
      for (std::size_t i = 0; i < r.mask.size(); ++i) {
        EXPECT_FALSE(r.mask.cells[i] && it->second.cells[i]);
        it->second.cells[i] |= r.mask.cells[i];
      }
    }
}

TEST(Rle, RoundTrip) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    BinaryMask m(7, 5);
    for (auto& c : m.cells) c = rng.uniform() < 0.4;
    EXPECT_EQ(decode_rle(encode_rle(m), 7, 5), m);
  }
  EXPECT_EQ(encode_rle(full(2, 2)), (std::vector<int>{0, 4}));
  EXPECT_THROW(decode_rle({3}, 2, 2), Error);
  EXPECT_THROW(decode_rle({2, 3}, 2, 2), Error);
}

TEST(Images, PpmSingleWhitePixel) {
  const std::string s = "P6\n1 1\n255\n";
  std::vector<std::uint8_t> b(s.begin(), s.end());
  b.insert(b.end(), {255, 255, 255});
  const ImageFile im = decode_image(b);
  EXPECT_EQ(im.width, 1);
  EXPECT_EQ(im.pixels, (std::vector<std::uint8_t>{255, 255, 255}));
}

TEST(Images, RoundTripBothFormats) {
  Rng rng(5);
  ImageFile im{6, 3, std::vector<std::uint8_t>(54)};
  for (auto& p : im.pixels) p = static_cast<std::uint8_t>(rng.index(256));
  for (auto f : {ImageFormat::png, ImageFormat::ppm}) EXPECT_EQ(decode_image(encode_image(im, f)), im);
  const fs::path dir = scratch("images");
  save_image(dir / "a.png", im);
  EXPECT_EQ(load_image(dir / "a.png"), im);
}

TEST(Images, PngFixturesMatchReferenceDecoder) {
  const fs::path fx = VCC_FIXTURE_DIR;
  EXPECT_EQ(load_image(fx / "rgb_5x4.png"), load_image(fx / "rgb_5x4_pil.ppm"));
  EXPECT_EQ(load_image(fx / "rgba_3x2.png"), load_image(fx / "rgba_3x2_pil.ppm"));
  try {
    load_image(fx / "gray_5x4.png");
    FAIL() << "grayscale PNG accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Images, TensorConversionRoundTrip) {
  Rng rng(6);
  ImageFile im{4, 4, std::vector<std::uint8_t>(48)};
  for (auto& p : im.pixels) p = static_cast<std::uint8_t>(rng.index(256));
  EXPECT_EQ(to_image(to_tensor(im)), im);
}

TEST(Models, SaveLoadIsBitExact) {
  LayeredModel m = toy_architecture(3);
  init_weights(m, 4);
  const fs::path dir = scratch("model");
  save_model(dir / "m.json", m);
  const LayeredModel back = load_model(dir / "m.json");
  ASSERT_EQ(back.layer_count(), m.layer_count());
  EXPECT_EQ(back.taps(), m.taps());
  for (int i = 0; i < m.layer_count(); ++i) {
    EXPECT_EQ(back.layers()[i].weight, m.layers()[i].weight);
    EXPECT_EQ(back.layers()[i].bias, m.layers()[i].bias);
  }
  EXPECT_EQ(model_hash(back), model_hash(m));
}

TEST(Models, TruncatedSidecarIsAnIoError) {
  LayeredModel m = toy_architecture(2);
  init_weights(m, 1);
  const fs::path dir = scratch("model_bad");
  save_model(dir / "m.json", m);
  fs::resize_file(dir / "m.bin", 100);
  try {
    load_model(dir / "m.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Datasets, SaveLoadKeepsLabelsAndMasks) {
  const auto classes = default_toy_classes();
  const auto scenes = generate_dataset(5, classes, 2);
  const fs::path dir = scratch("dataset");
  save_dataset(dir, classes, scenes);
  const Dataset d = load_dataset(dir);
  EXPECT_EQ(d.classes, classes);
  ASSERT_EQ(d.entries.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(d.entries[i].label, scenes[i].label);
    EXPECT_EQ(d.entries[i].annotations.shape_mask, scenes[i].shape_mask);
    const Tensor img = load_tensor_image(dir / d.entries[i].file);
    EXPECT_EQ(to_image(img), to_image(scenes[i].image));
  }
}
