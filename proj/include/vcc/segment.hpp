#pragma once

// Top-down feature-space segmentation. Each tap layer's activations are
// clustered inside the (upsampled) masks of the layer above, starting from a
// single all-ones mask at the deepest tap, and every mask is turned into a
// masked RGB segment of the source image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "vcc/cluster.hpp"
#include "vcc/image.hpp"
#include "vcc/oracle.hpp"
#include "vcc/parallel.hpp"

namespace vcc {

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> cells;

  BinaryMask() = default;
  BinaryMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), cells(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return cells[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return cells.size(); }
  int active() const {
    int n = 0;
    for (auto c : cells) n += c ? 1 : 0;
    return n;
  }
  bool subset_of(const BinaryMask& other) const {
    if (other.height != height || other.width != width) return false;
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (cells[i] && !other.cells[i]) return false;
    return true;
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// One feature-space segment: its mask at the tap layer's resolution, the same
/// mask upsampled to image resolution, and the masked RGB image.
struct SegmentRecord {
  int id = 0;
  int image = 0;
  int layer = 0;    // model layer index of the tap
  int parent = -1;  // segment id at the next deeper tap, -1 for the root
  BinaryMask mask;
  BinaryMask image_mask;
  Tensor rgb;
};

/// Number of segments a parent mask split into.
struct ParentSplit {
  int image = 0;
  int layer = 0;
  int parent = -1;
  int gamma = 0;
};

struct SegmentSet {
  std::vector<int> taps;  // ascending model layer indices
  std::map<int, std::vector<SegmentRecord>> by_layer;
  std::vector<ParentSplit> splits;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [l, v] : by_layer) n += v.size();
    return n;
  }

  const SegmentRecord* find(int id) const {
    for (const auto& [l, v] : by_layer) {
      auto it = std::lower_bound(v.begin(), v.end(), id, [](const SegmentRecord& s, int x) { return s.id < x; });
      if (it != v.end() && it->id == id) return &*it;
    }
    return nullptr;
  }
};

struct SegmentConfig {
  double compactness = 0.8;
  int k_max = 8;
  int cells_per_cluster = 9;  // k_max is also capped at active_cells / this
  double silhouette_floor = 0.1;
  int min_cells = 4;
  double min_fraction = 0.01;
};

/// Bilinear upsampling of a {0,1} field followed by a 0.5 threshold. A
/// nonempty input never yields an empty output: if thresholding removes every
/// cell, nearest-neighbour sampling is used instead.
inline BinaryMask upsample_mask(const BinaryMask& mask, int height, int width) {
  require(height >= mask.height && width >= mask.width, ErrorKind::invalid_target,
          "upsample target " + std::to_string(height) + "x" + std::to_string(width) + " is smaller than source " +
              std::to_string(mask.height) + "x" + std::to_string(mask.width));
  if (height == mask.height && width == mask.width) return mask;
  const auto ty = bilinear_taps(mask.height, height);
  const auto tx = bilinear_taps(mask.width, width);
  BinaryMask out(height, width);
  int active = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double top = (1 - b.w1) * mask.at(a.i0, b.i0) + b.w1 * mask.at(a.i0, b.i1);
      const double bot = (1 - b.w1) * mask.at(a.i1, b.i0) + b.w1 * mask.at(a.i1, b.i1);
      const double v = (1 - a.w1) * top + a.w1 * bot;
      if (v >= 0.5) {
        out.at(y, x) = 1;
        ++active;
      }
    }
  if (active == 0 && mask.active() > 0) {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
        const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
        out.at(y, x) = mask.at(sy, sx);
      }
  }
  return out;
}

/// Elementwise product of an image and a mask at the image's resolution.
inline Tensor rgb_mask(const Tensor& image, const BinaryMask& mask) {
  require(image.rank() == 3 && image.dim(1) == mask.height && image.dim(2) == mask.width, ErrorKind::invalid_input,
          "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
              " does not match image resolution " + shape_string(image.shape()));
  Tensor out(image.shape());
  const std::size_t hw = mask.size();
  for (int c = 0; c < image.dim(0); ++c)
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = mask.cells[i] ? image[c * hw + i] : 0.0f;
  return out;
}

/// Per-position feature vectors of the active cells, l2-normalised.
inline PointSet region_features(const Tensor& features, const BinaryMask& region) {
  const int C = features.dim(0);
  const std::size_t hw = region.size();
  PointSet pts(C);
  std::vector<double> v(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < hw; ++i) {
    if (!region.cells[i]) continue;
    double n2 = 0.0;
    for (int c = 0; c < C; ++c) {
      v[c] = features[c * hw + i];
      n2 += v[c] * v[c];
    }
    const double n = std::sqrt(n2);
    if (n > 0.0)
      for (auto& x : v) x /= n;
    pts.push(v);
  }
  return pts;
}

/// maskSLIC-style clustering restricted to `region`: k-means over normalised
/// features joined with compactness-weighted [0,1] coordinates. Returns k
/// disjoint masks whose union is the region (k is reduced to the active cell
/// count when larger).
inline std::vector<BinaryMask> mask_slic(const Tensor& features, const BinaryMask& region, int k, double compactness,
                                         std::uint64_t seed) {
  require(features.is_spatial() && features.dim(1) == region.height && features.dim(2) == region.width,
          ErrorKind::invalid_input, "feature map and region resolution differ");
  const int active = region.active();
  require(active > 0, ErrorKind::invalid_input, "mask_slic region is empty");
  require(k >= 1, ErrorKind::invalid_k, "k must be at least 1");
  k = std::min(k, active);
  if (k == 1) return {region};

  const PointSet feats = region_features(features, region);
  PointSet pts(feats.dim + 2);
  std::vector<std::size_t> cell_of;
  const double sy = region.height > 1 ? 1.0 / (region.height - 1) : 0.0;
  const double sx = region.width > 1 ? 1.0 / (region.width - 1) : 0.0;
  std::vector<double> v(static_cast<std::size_t>(feats.dim + 2));
  std::size_t r = 0;
  for (int y = 0; y < region.height; ++y)
    for (int x = 0; x < region.width; ++x) {
      if (!region.at(y, x)) continue;
      const auto f = feats.row(r++);
      std::copy(f.begin(), f.end(), v.begin());
      v[feats.dim] = compactness * y * sy;
      v[feats.dim + 1] = compactness * x * sx;
      pts.push(v);
      cell_of.push_back(static_cast<std::size_t>(y) * region.width + x);
    }
  const auto km = kmeans(pts, k, seed, KMeansOptions{100, 1e-6, 1});
  std::vector<BinaryMask> out(static_cast<std::size_t>(k), BinaryMask(region.height, region.width));
  for (std::size_t i = 0; i < cell_of.size(); ++i) out[km.assignment[i]].cells[cell_of[i]] = 1;
  std::erase_if(out, [](const BinaryMask& m) { return m.active() == 0; });
  return out;
}

/// Mean fraction of image pixels covered by the segments' image-resolution masks.
inline double relative_segment_size(std::span<const SegmentRecord> segments) {
  require(!segments.empty(), ErrorKind::undefined_metric, "relative segment size of an empty segment list");
  double s = 0.0;
  for (const auto& seg : segments)
    s += static_cast<double>(seg.image_mask.active()) / static_cast<double>(seg.image_mask.size());
  return s / static_cast<double>(segments.size());
}

namespace detail {

struct LocalSegment {
  int level;         // position in the tap list
  int local_parent;  // index into the per-image list, -1 for root
  BinaryMask mask;
};

struct LocalSplit {
  int level;
  int local_parent;
  int gamma;
};

}  // namespace detail

/// Runs the top-down recursion for every image. `images` are model-input
/// sized tensors; `taps` are ascending model layer indices whose spatial
/// resolution does not decrease towards shallower taps.
inline SegmentSet topdown_segment(ModelOracle& oracle, std::span<const Tensor> images, std::vector<int> taps,
                                  const SegmentConfig& cfg, std::uint64_t seed, int jobs = 1) {
  require(!images.empty(), ErrorKind::invalid_input, "segmentation needs at least one image");
  require(!taps.empty(), ErrorKind::invalid_input, "segmentation needs at least one tap layer");
  require(std::is_sorted(taps.begin(), taps.end()), ErrorKind::invalid_input, "tap layers must be ascending");
  for (int t : taps) {
    const Shape s = oracle.layer_shape(t);
    require(s.size() == 3, ErrorKind::invalid_input, "tap layer " + std::to_string(t) + " is not spatial");
  }
  const int levels = static_cast<int>(taps.size());

  struct PerImage {
    std::vector<detail::LocalSegment> segments;
    std::vector<detail::LocalSplit> splits;
  };
  std::vector<PerImage> results(images.size());

  parallel_for(oracle.concurrent() ? jobs : 1, images.size(), [&](std::size_t img) {
    std::vector<Tensor> acts(static_cast<std::size_t>(levels));
    acts[0] = oracle.forward_to(images[img], taps[0]);
    for (int i = 1; i < levels; ++i) acts[i] = oracle.forward_between(acts[i - 1], taps[i - 1], taps[i]);

    PerImage& out = results[img];
    // parents of the current level: (local index or -1, mask at parent resolution)
    std::vector<std::pair<int, BinaryMask>> parents;
    {
      const Tensor& top = acts[levels - 1];
      parents.emplace_back(-1, BinaryMask(top.dim(1), top.dim(2), 1));
    }
    for (int level = levels - 1; level >= 0; --level) {
      const Tensor& feat = acts[level];
      const int h = feat.dim(1), w = feat.dim(2);
      const double min_active = std::max(static_cast<double>(cfg.min_cells), cfg.min_fraction * h * w);
      std::vector<std::pair<int, BinaryMask>> next;
      for (const auto& [pidx, pmask] : parents) {
        const BinaryMask region = upsample_mask(pmask, h, w);
        const int active = region.active();
        if (active == 0) continue;
        const std::uint64_t s =
            derive_seed(seed, {img, static_cast<std::uint64_t>(level), static_cast<std::uint64_t>(pidx + 1)});
        const int k_max = std::min(cfg.k_max, active / std::max(1, cfg.cells_per_cluster));
        SilhouetteOptions sopt;
        sopt.floor = cfg.silhouette_floor;
        const int k = choose_k_silhouette(region_features(feat, region), 2, k_max, derive_seed(s, {1}), sopt);
        auto children = mask_slic(feat, region, k, cfg.compactness, derive_seed(s, {2}));
        int kept = 0;
        for (auto& child : children) {
          if (child.active() < min_active) continue;
          out.segments.push_back({level, pidx, child});
          next.emplace_back(static_cast<int>(out.segments.size()) - 1, std::move(child));
          ++kept;
        }
        out.splits.push_back({level, pidx, kept});
      }
      parents = std::move(next);
    }
  });

  SegmentSet set;
  set.taps = taps;
  for (int t : taps) set.by_layer[t];
  int next_id = 0;
  for (std::size_t img = 0; img < images.size(); ++img) {
    const int offset = next_id;
    const Tensor& image = images[img];
    for (const auto& ls : results[img].segments) {
      SegmentRecord rec;
      rec.id = next_id++;
      rec.image = static_cast<int>(img);
      rec.layer = taps[static_cast<std::size_t>(ls.level)];
      rec.parent = ls.local_parent < 0 ? -1 : offset + ls.local_parent;
      rec.mask = ls.mask;
      rec.image_mask = upsample_mask(ls.mask, image.dim(1), image.dim(2));
      rec.rgb = rgb_mask(image, rec.image_mask);
      set.by_layer[rec.layer].push_back(std::move(rec));
    }
    for (const auto& sp : results[img].splits)
      set.splits.push_back({static_cast<int>(img), taps[static_cast<std::size_t>(sp.level)],
                            sp.local_parent < 0 ? -1 : offset + sp.local_parent, sp.gamma});
  }
  return set;
}

}  // namespace vcc
