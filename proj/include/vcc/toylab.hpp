#pragma once

// Synthetic scenes with known parts (shape, fill color, background texture)
// and a small CNN trained on them, so discovered concepts can be checked
// against ground truth.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "vcc/netcore.hpp"
#include "vcc/parallel.hpp"
#include "vcc/rng.hpp"
#include "vcc/segment.hpp"

namespace vcc {

enum class ShapeKind { circle = 0, square = 1, triangle = 2 };
enum class FillColor { red = 0, green = 1, blue = 2 };

inline constexpr int kSceneSize = 64;
inline constexpr int kTextureCount = 4;

inline std::string to_string(ShapeKind s) {
  static const char* names[] = {"circle", "square", "triangle"};
  return names[static_cast<int>(s)];
}
inline std::string to_string(FillColor c) {
  static const char* names[] = {"red", "green", "blue"};
  return names[static_cast<int>(c)];
}
inline ShapeKind shape_from_string(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (to_string(static_cast<ShapeKind>(i)) == s) return static_cast<ShapeKind>(i);
  throw Error(ErrorKind::invalid_input, "unknown shape '" + s + "'");
}
inline FillColor color_from_string(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (to_string(static_cast<FillColor>(i)) == s) return static_cast<FillColor>(i);
  throw Error(ErrorKind::invalid_input, "unknown color '" + s + "'");
}

struct SceneClass {
  ShapeKind shape = ShapeKind::circle;
  FillColor color = FillColor::red;

  std::string name() const { return to_string(color) + "_" + to_string(shape); }
  friend bool operator==(const SceneClass&, const SceneClass&) = default;
};

/// Four classes; the two red ones differ only in shape.
inline std::vector<SceneClass> default_toy_classes() {
  return {{ShapeKind::circle, FillColor::red},
          {ShapeKind::triangle, FillColor::red},
          {ShapeKind::square, FillColor::green},
          {ShapeKind::circle, FillColor::blue}};
}

/// Every (shape, color) pair not used as a class.
inline std::vector<SceneClass> excluded_pairs(const std::vector<SceneClass>& classes) {
  std::vector<SceneClass> out;
  for (int s = 0; s < 3; ++s)
    for (int c = 0; c < 3; ++c) {
      SceneClass p{static_cast<ShapeKind>(s), static_cast<FillColor>(c)};
      if (std::find(classes.begin(), classes.end(), p) == classes.end()) out.push_back(p);
    }
  return out;
}

/// Everything needed to draw one scene.
struct SceneLayout {
  ShapeKind shape = ShapeKind::circle;
  FillColor color = FillColor::red;
  int texture = 0;
  double cx = 32.0, cy = 32.0;
  double size = 16.0;  // circle radius, square side, triangle base
  std::array<double, 3> fill{};
  std::array<double, 3> tint{};
  double phase = 0.0;
  double period = 8.0;
};

struct SyntheticScene {
  Tensor image;  // 3 x 64 x 64, values in [0, 1]
  int label = -1;
  ShapeKind shape = ShapeKind::circle;
  FillColor color = FillColor::red;
  int texture = 0;
  BinaryMask shape_mask;  // 64 x 64
};

inline bool inside_shape(const SceneLayout& s, double x, double y) {
  switch (s.shape) {
    case ShapeKind::circle: {
      const double dx = x - s.cx, dy = y - s.cy;
      return dx * dx + dy * dy <= s.size * s.size;
    }
    case ShapeKind::square:
      return std::fabs(x - s.cx) <= 0.5 * s.size && std::fabs(y - s.cy) <= 0.5 * s.size;
    case ShapeKind::triangle: {
      // upright isosceles: apex on top, base at the bottom
      const double h = 0.866 * s.size;
      const double top = s.cy - 0.5 * h;
      const double u = (y - top) / h;
      if (u < 0.0 || u > 1.0) return false;
      return std::fabs(x - s.cx) <= 0.5 * s.size * u;
    }
  }
  return false;
}

inline double texture_value(int texture, double x, double y, double phase, double period) {
  constexpr double two_pi = 6.283185307179586;
  switch (texture) {
    case 0:  // horizontal stripes
      return std::sin(two_pi * (y + phase) / period) > 0.0 ? 1.0 : 0.35;
    case 1: {  // checkerboard
      const int a = static_cast<int>(std::floor((x + phase) / period));
      const int b = static_cast<int>(std::floor((y + phase) / period));
      return ((a + b) & 1) ? 1.0 : 0.35;
    }
    case 2: {  // dot lattice
      const double fx = std::fmod(x + phase, period) - 0.5 * period;
      const double fy = std::fmod(y + phase, period) - 0.5 * period;
      return fx * fx + fy * fy < 0.09 * period * period ? 0.35 : 1.0;
    }
    default:  // diagonal waves
      return 0.675 + 0.325 * std::sin(two_pi * (x + y + phase) / (1.5 * period));
  }
}

inline SyntheticScene render_scene(const SceneLayout& s) {
  SyntheticScene out;
  out.shape = s.shape;
  out.color = s.color;
  out.texture = s.texture;
  out.image = Tensor({3, kSceneSize, kSceneSize});
  out.shape_mask = BinaryMask(kSceneSize, kSceneSize);
  const std::size_t plane = static_cast<std::size_t>(kSceneSize) * kSceneSize;
  for (int y = 0; y < kSceneSize; ++y)
    for (int x = 0; x < kSceneSize; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const std::size_t i = static_cast<std::size_t>(y) * kSceneSize + x;
      if (inside_shape(s, px, py)) {
        out.shape_mask.cells[i] = 1;
        for (int c = 0; c < 3; ++c) out.image[c * plane + i] = static_cast<float>(s.fill[c]);
      } else {
        const double v = texture_value(s.texture, px, py, s.phase, s.period);
        for (int c = 0; c < 3; ++c) out.image[c * plane + i] = static_cast<float>(std::clamp(v * s.tint[c], 0.0, 1.0));
      }
    }
  return out;
}

inline double mask_fraction(const BinaryMask& m) {
  return static_cast<double>(m.active()) / static_cast<double>(m.size());
}

/// Random placement, size, fill shade and background for a given pair.
inline SceneLayout random_layout(ShapeKind shape, FillColor color, Rng& rng) {
  SceneLayout s;
  s.shape = shape;
  s.color = color;
  s.texture = static_cast<int>(rng.index(kTextureCount));
  double half = 0.0;
  switch (shape) {
    case ShapeKind::circle:
      s.size = rng.uniform(10.0, 22.0);
      half = s.size;
      break;
    case ShapeKind::square:
      s.size = rng.uniform(18.0, 40.0);
      half = 0.5 * s.size;
      break;
    case ShapeKind::triangle:
      s.size = rng.uniform(28.0, 52.0);
      half = 0.5 * s.size;
      break;
  }
  s.cx = rng.uniform(half + 1.0, kSceneSize - half - 1.0);
  s.cy = rng.uniform(half + 1.0, kSceneSize - half - 1.0);
  const int ci = static_cast<int>(color);
  for (int c = 0; c < 3; ++c) s.fill[c] = c == ci ? rng.uniform(0.75, 0.95) : rng.uniform(0.02, 0.18);
  // muted background tint so fills stay the most saturated regions
  const double base = rng.uniform(0.1, 0.3);
  for (int c = 0; c < 3; ++c) s.tint[c] = std::clamp(base + rng.uniform(-0.08, 0.08), 0.05, 0.5);
  s.phase = rng.uniform(0.0, 16.0);
  s.period = rng.uniform(6.0, 12.0);
  return s;
}

/// Draws a scene for a pair; resamples until the shape covers 5%-60% of the
/// image (the size ranges above make a retry rare).
inline SyntheticScene make_scene(ShapeKind shape, FillColor color, std::uint64_t seed) {
  Rng rng(seed);
  for (;;) {
    SyntheticScene s = render_scene(random_layout(shape, color, rng));
    const double f = mask_fraction(s.shape_mask);
    if (f >= 0.05 && f <= 0.60) return s;
  }
}

/// per_class_count scenes per class, ordered class-major. Scene i of class c
/// depends only on (seed, c, i).
inline std::vector<SyntheticScene> generate_dataset(std::uint64_t seed, const std::vector<SceneClass>& classes,
                                                    int per_class_count, int jobs = 1) {
  require(per_class_count >= 1, ErrorKind::invalid_input, "per_class_count must be >= 1");
  require(!classes.empty(), ErrorKind::invalid_input, "dataset needs at least one class");
  for (std::size_t i = 0; i < classes.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      require(!(classes[i] == classes[j]), ErrorKind::invalid_input, "duplicate class " + classes[i].name());
  const std::size_t n = classes.size() * static_cast<std::size_t>(per_class_count);
  std::vector<SyntheticScene> out(n);
  parallel_for(jobs, n, [&](std::size_t i) {
    const std::size_t c = i / static_cast<std::size_t>(per_class_count);
    const std::size_t k = i % static_cast<std::size_t>(per_class_count);
    out[i] = make_scene(classes[c].shape, classes[c].color, derive_seed(seed, {0x5CE4E, c, k}));
    out[i].label = static_cast<int>(c);
  });
  return out;
}

/// Concept-neutral negatives: even slots are uniform noise, odd slots are
/// scenes of (shape, color) pairs outside the training classes.
inline std::vector<Tensor> generate_random_pool(std::uint64_t seed, const std::vector<SceneClass>& classes, int count,
                                                int jobs = 1) {
  require(count >= 1, ErrorKind::invalid_input, "random pool size must be >= 1");
  const auto others = excluded_pairs(classes);
  require(!others.empty(), ErrorKind::invalid_input, "every (shape, color) pair is a class; no pool scenes left");
  std::vector<Tensor> out(static_cast<std::size_t>(count));
  parallel_for(jobs, out.size(), [&](std::size_t i) {
    const std::uint64_t s = derive_seed(seed, {0x9001, i});
    if (i % 2 == 0) {
      Rng rng(s);
      Tensor t({3, kSceneSize, kSceneSize});
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = static_cast<float>(rng.uniform());
      out[i] = std::move(t);
    } else {
      const auto& p = others[(i / 2) % others.size()];
      out[i] = make_scene(p.shape, p.color, s).image;
    }
  });
  return out;
}

/// Conv stack used for the toy experiments. Taps sit after relus at
/// 32x32, 16x16, 8x8 and 8x8 resolution.
inline LayeredModel toy_architecture(int class_count) {
  std::vector<LayerSpec> l{
      LayerSpec::conv(3, 8, 3, 1, 1),   LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(8, 16, 3, 1, 1),  LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(16, 16, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(16, 32, 3, 1, 1), LayerSpec::relu(),
      LayerSpec::conv(32, 32, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
      LayerSpec::conv(32, 32, 3, 1, 1), LayerSpec::relu(),
      LayerSpec::gap(),                 LayerSpec::dense(32, class_count)};
  return LayeredModel({3, kSceneSize, kSceneSize}, std::move(l), class_count, {4, 7, 10, 12});
}

/// He-normal weights, zero biases.
inline void init_weights(LayeredModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& l : m.mutable_layers()) {
    if (!l.has_parameters()) continue;
    const int fan_in = l.kind == LayerKind::conv2d ? l.in_channels * l.kernel * l.kernel : l.in_features;
    const double sd = std::sqrt(2.0 / fan_in);
    l.weight.resize(l.weight_count());
    for (auto& w : l.weight) w = static_cast<float>(sd * rng.normal());
    l.bias.assign(l.bias_count(), 0.0f);
  }
  m.validate();
}

struct TrainRecipe {
  double lr = 0.05;
  int epochs = 50;
  int batch = 32;
  double min_accuracy = 0.90;  // below this the trainer fails
};

struct TrainReport {
  double accuracy = 0.0;
  std::vector<double> epoch_loss;
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(double accuracy, std::vector<double> epoch_loss)
      : Error(ErrorKind::training_failure, "train accuracy " + std::to_string(accuracy) + " below threshold"),
        accuracy_(accuracy),
        epoch_loss_(std::move(epoch_loss)) {}

  double accuracy() const noexcept { return accuracy_; }
  const std::vector<double>& epoch_loss() const noexcept { return epoch_loss_; }

 private:
  double accuracy_;
  std::vector<double> epoch_loss_;
};

inline double accuracy(const LayeredModel& m, std::span<const Tensor> images, std::span<const int> labels, int jobs = 1) {
  require(images.size() == labels.size() && !images.empty(), ErrorKind::invalid_input, "accuracy needs labelled images");
  std::vector<int> hit(images.size());
  parallel_for(jobs, images.size(), [&](std::size_t i) {
    const Tensor logits = forward_full(m, images[i]);
    require(logits.all_finite(), ErrorKind::numeric, "non-finite logits");
    hit[i] = argmax(logits.data()) == labels[i];
  });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(hit.size());
}

/// Plain minibatch SGD on mean cross-entropy. Batch order is a seeded shuffle
/// per epoch, so the final weights depend only on (dataset, seed, recipe).
inline LayeredModel train_toy_cnn(const std::vector<SyntheticScene>& dataset, std::uint64_t seed,
                                  const TrainRecipe& recipe = {}, int jobs = 1, TrainReport* report = nullptr) {
  require(!dataset.empty(), ErrorKind::invalid_input, "training needs a nonempty dataset");
  require(recipe.lr >= 0.0 && recipe.epochs >= 1 && recipe.batch >= 1, ErrorKind::config, "invalid training recipe");
  int classes = 0;
  for (const auto& s : dataset) classes = std::max(classes, s.label + 1);
  require(classes >= 2, ErrorKind::invalid_input, "training needs at least two classes");

  LayeredModel m = toy_architecture(classes);
  init_weights(m, derive_seed(seed, {0x1417}));
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (const auto& s : dataset) {
    images.push_back(s.image);
    labels.push_back(s.label);
  }
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport rep;
  for (int e = 0; e < recipe.epochs; ++e) {
    Rng rng(derive_seed(seed, {0xE90C, static_cast<std::uint64_t>(e)}));
    rng.shuffle(order);
    double loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(recipe.batch)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(recipe.batch));
      std::vector<Tensor> bx;
      std::vector<int> by;
      for (std::size_t i = b; i < end; ++i) {
        bx.push_back(images[order[i]]);
        by.push_back(labels[order[i]]);
      }
      const BatchGradients g = backprop_weights(m, bx, by, jobs);
      loss += g.loss * static_cast<double>(end - b);
      auto& layers = m.mutable_layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        for (std::size_t i = 0; i < layers[l].weight.size(); ++i)
          layers[l].weight[i] -= static_cast<float>(recipe.lr * g.layers[l].weight[i]);
        for (std::size_t i = 0; i < layers[l].bias.size(); ++i)
          layers[l].bias[i] -= static_cast<float>(recipe.lr * g.layers[l].bias[i]);
      }
    }
    rep.epoch_loss.push_back(loss / static_cast<double>(order.size()));
  }
  rep.accuracy = accuracy(m, images, labels, jobs);
  if (report) *report = rep;
  if (rep.accuracy < recipe.min_accuracy) throw TrainingFailure(rep.accuracy, rep.epoch_loss);
  return m;
}

}  // namespace vcc
