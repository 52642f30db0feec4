#pragma once

// Interlayer testing with concept activation vectors. A CAV is the unit normal
// of a logistic-regression boundary between a concept's flattened activations
// and random-image activations; the sensitivity of a deeper concept to it is
// the directional derivative of the distance between the deeper pooled
// features and that concept's centroid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vcc/concepts.hpp"
#include "vcc/oracle.hpp"
#include "vcc/parallel.hpp"
#include "vcc/stats.hpp"

namespace vcc {

struct CavConfig {
  int steps = 500;
  double learning_rate = 0.1;
  double l2 = 1e-3;  // penalty (l2 / 2) ||w||^2, bias unpenalised
};

struct CAV {
  int layer = -1;
  std::vector<float> direction;  // unit norm, flattened C*H*W
  double accuracy = 0.0;
  double bias = 0.0;             // of the unnormalised classifier
  double weight_norm = 0.0;      // ||w|| before normalisation
};

/// Logistic-regression trainer over a fixed pool of flattened activation
/// rows. Full-batch gradient descent from w = 0 keeps w in the span of the
/// training rows, so iterates are carried as row coefficients against a
/// precomputed Gram matrix; the resulting w equals the primal iterate.
class CavTrainer {
 public:
  CavTrainer() = default;

  explicit CavTrainer(std::vector<std::span<const float>> rows) : rows_(std::move(rows)) {
    const std::size_t n = rows_.size();
    require(n > 0, ErrorKind::invalid_input, "CAV trainer needs rows");
    dim_ = rows_[0].size();
    for (const auto& r : rows_) require(r.size() == dim_, ErrorKind::invalid_input, "CAV rows differ in dimension");
    gram_.assign(n * n, 0.0);
    // Blocked double-precision GEMM over row panels.
    constexpr std::size_t kPanel = 128;
    using Panel = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    auto load = [&](std::size_t first, std::size_t count) {
      Panel p(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim_));
      for (std::size_t i = 0; i < count; ++i)
        for (std::size_t d = 0; d < dim_; ++d) p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = rows_[first + i][d];
      return p;
    };
    for (std::size_t i0 = 0; i0 < n; i0 += kPanel) {
      const std::size_t ni = std::min(kPanel, n - i0);
      const Panel A = load(i0, ni);
      for (std::size_t j0 = i0; j0 < n; j0 += kPanel) {
        const std::size_t nj = std::min(kPanel, n - j0);
        const Panel B = j0 == i0 ? A : load(j0, nj);
        const Panel G = A * B.transpose();
        for (std::size_t i = 0; i < ni; ++i)
          for (std::size_t j = 0; j < nj; ++j) {
            const double v = G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            gram_[(i0 + i) * n + j0 + j] = v;
            gram_[(j0 + j) * n + i0 + i] = v;
          }
      }
    }
  }

  std::size_t size() const { return rows_.size(); }
  std::size_t dim() const { return dim_; }

  CAV train(std::span<const int> pos, std::span<const int> neg, const CavConfig& cfg, int layer = -1) const {
    require(pos.size() >= 2 && neg.size() >= 2, ErrorKind::invalid_input, "CAV training needs >= 2 examples per side");
    if (same_rows(pos, neg))
      throw Error(ErrorKind::zero_margin, "concept and random activations are identical; no separating direction");
    std::vector<int> idx(pos.begin(), pos.end());
    idx.insert(idx.end(), neg.begin(), neg.end());
    const std::size_t m = idx.size();
    std::vector<double> y(m, 0.0);
    std::fill(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(pos.size()), 1.0);

    const std::size_t n = rows_.size();
    std::vector<double> K(m * m);
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = 0; b < m; ++b) K[a * m + b] = gram_[static_cast<std::size_t>(idx[a]) * n + idx[b]];

    std::vector<double> coef(m, 0.0), logit(m, 0.0), resid(m, 0.0);
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Km(
        K.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    Eigen::Map<Eigen::VectorXd> cm(coef.data(), static_cast<Eigen::Index>(m));
    Eigen::Map<Eigen::VectorXd> lm(logit.data(), static_cast<Eigen::Index>(m));
    double bias = 0.0;
    const double eta = cfg.learning_rate;
    const double decay = 1.0 - eta * cfg.l2;
    const double inv_m = 1.0 / static_cast<double>(m);
    for (int step = 0; step < cfg.steps; ++step) {
      lm.noalias() = Km * cm;
      lm.array() += bias;
      double gb = 0.0;
      for (std::size_t a = 0; a < m; ++a) {
        resid[a] = (sigmoid(logit[a]) - y[a]) * inv_m;
        gb += resid[a];
      }
      for (std::size_t a = 0; a < m; ++a) coef[a] = decay * coef[a] - eta * resid[a];
      bias -= eta * gb;
    }

    std::vector<double> w(dim_, 0.0);
    for (std::size_t a = 0; a < m; ++a) {
      if (coef[a] == 0.0) continue;
      const auto row = rows_[static_cast<std::size_t>(idx[a])];
      for (std::size_t d = 0; d < dim_; ++d) w[d] += coef[a] * static_cast<double>(row[d]);
    }
    const double wn = norm2<double>(w);
    if (!(wn > 1e-12)) throw Error(ErrorKind::zero_margin, "CAV weight vector vanished");

    CAV cav;
    cav.layer = layer;
    cav.bias = bias;
    cav.weight_norm = wn;
    cav.direction.resize(dim_);
    for (std::size_t d = 0; d < dim_; ++d) cav.direction[d] = static_cast<float>(w[d] / wn);
    int correct = 0;
    lm.noalias() = Km * cm;
    for (std::size_t a = 0; a < m; ++a) correct += ((logit[a] + bias > 0.0) == (y[a] > 0.5)) ? 1 : 0;
    cav.accuracy = static_cast<double>(correct) / static_cast<double>(m);
    return cav;
  }

 private:
  static double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  }

  bool same_rows(std::span<const int> pos, std::span<const int> neg) const {
    if (pos.size() != neg.size()) return false;
    auto key = [&](std::span<const int> s) {
      std::vector<std::span<const float>> v;
      for (int i : s) v.push_back(rows_[static_cast<std::size_t>(i)]);
      std::sort(v.begin(), v.end(), [](auto a, auto b) {
        return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
      });
      return v;
    };
    const auto a = key(pos);
    const auto b = key(neg);
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!std::equal(a[i].begin(), a[i].end(), b[i].begin())) return false;
    return true;
  }

  std::vector<std::span<const float>> rows_;
  std::size_t dim_ = 0;
  std::vector<double> gram_;
};

/// Trains a CAV separating `pos` from `neg` (flattened activations of one
/// layer). The direction points towards the concept side.
inline CAV train_cav(std::span<const Tensor> pos, std::span<const Tensor> neg, std::uint64_t /*seed*/,
                     const CavConfig& cfg = {}, int layer = -1) {
  std::vector<std::span<const float>> rows;
  std::vector<int> pi, ni;
  for (const auto& t : pos) {
    pi.push_back(static_cast<int>(rows.size()));
    rows.push_back(t.data());
  }
  for (const auto& t : neg) {
    ni.push_back(static_cast<int>(rows.size()));
    rows.push_back(t.data());
  }
  require(pos.size() >= 2 && neg.size() >= 2, ErrorKind::invalid_input, "CAV training needs >= 2 examples per side");
  return CavTrainer(std::move(rows)).train(pi, ni, cfg, layer);
}

struct ItcavConfig {
  enum class TestMode { scores_vs_half, observed_vs_random_null };

  int runs = 20;
  double alpha = 0.05;
  int random_set_size = 20;
  CavConfig cav;
  bool literal_sign = false;  // S = +<grad d, V> instead of the negated derivative
  TestMode mode = TestMode::scores_vs_half;
};

struct EdgeStat {
  std::string src;
  std::string dst;
  double weight = 0.0;
  double p_value = 1.0;
  std::vector<double> runs;
  bool significant = false;
};

/// Sign-carrying projection used by the strict-positive count.
inline double sensitivity_from_gradient(const Tensor& distance_gradient, const CAV& cav, bool literal_sign = false) {
  require(distance_gradient.size() == cav.direction.size(), ErrorKind::invalid_input,
          "gradient and CAV live in different layers");
  const double d = dot<float, float>(distance_gradient.data(), std::span<const float>(cav.direction));
  return literal_sign ? d : -d;
}

/// Gradient of || pooled(f_l(z_j)) - q_l || at z_j = forward_to(x, j).
inline Tensor sensitivity_gradient(ModelOracle& oracle, const Tensor& segment_rgb, int j, int l,
                                   std::span<const double> centroid) {
  const Tensor z = oracle.forward_to(segment_input(oracle, segment_rgb), j);
  return oracle.distance_grad(z, j, l, centroid);
}

/// Sensitivity S of the deeper concept (centroid q_l) to the CAV at layer j,
/// evaluated at segment x. S > 0 when moving along the CAV brings the pooled
/// layer-l features closer to q_l.
inline double sensitivity(ModelOracle& oracle, const Tensor& segment_rgb, int j, int l, std::span<const double> q_l,
                          const CAV& cav, bool literal_sign = false) {
  require(j < l, ErrorKind::ordering, "sensitivity needs j < l");
  return sensitivity_from_gradient(sensitivity_gradient(oracle, segment_rgb, j, l, q_l), cav, literal_sign);
}

/// Fraction of gradients whose sensitivity is strictly positive.
inline double score_from_gradients(std::span<const Tensor> gradients, const CAV& cav, bool literal_sign = false) {
  require(!gradients.empty(), ErrorKind::invalid_input, "ITCAV score needs at least one member segment");
  int positive = 0;
  for (const auto& g : gradients) positive += sensitivity_from_gradient(g, cav, literal_sign) > 0.0 ? 1 : 0;
  return static_cast<double>(positive) / static_cast<double>(gradients.size());
}

/// Fraction of class-image logit gradients with a strictly positive
/// projection onto the CAV.
inline double tcav_score_from_gradients(std::span<const Tensor> logit_gradients, const CAV& cav) {
  require(!logit_gradients.empty(), ErrorKind::invalid_input, "TCAV score needs at least one class image");
  int positive = 0;
  for (const auto& g : logit_gradients) positive += sensitivity_from_gradient(g, cav, true) > 0.0 ? 1 : 0;
  return static_cast<double>(positive) / static_cast<double>(logit_gradients.size());
}

/// Significance decision over per-run scores: two-sided one-sample t-test
/// against 0.5, weight = mean score.
inline EdgeStat edge_from_scores(std::string src, std::string dst, std::vector<double> scores, double alpha) {
  EdgeStat e;
  e.src = std::move(src);
  e.dst = std::move(dst);
  const auto t = ttest_two_sided(scores, 0.5);
  e.weight = t.mean;
  e.p_value = t.p;
  e.runs = std::move(scores);
  e.significant = e.p_value <= alpha;
  return e;
}

/// Alternative decision: the observed (mean concept) score is tested against
/// the distribution of scores from random-positive CAVs.
inline EdgeStat edge_from_null(std::string src, std::string dst, std::vector<double> scores,
                               std::span<const double> null_scores, double alpha) {
  EdgeStat e;
  e.src = std::move(src);
  e.dst = std::move(dst);
  e.weight = mean(scores);
  e.p_value = ttest_two_sided(null_scores, e.weight).p;
  e.runs = std::move(scores);
  e.significant = e.p_value <= alpha;
  return e;
}

/// Disjoint random negative sets drawn from a pool of activations.
inline std::vector<std::vector<int>> random_sets(std::size_t pool_size, int runs, int set_size, std::uint64_t seed) {
  require(runs >= 2 && set_size >= 2, ErrorKind::config, "need >= 2 runs and random sets of >= 2 images");
  require(pool_size >= static_cast<std::size_t>(runs) * static_cast<std::size_t>(set_size),
          ErrorKind::insufficient_randoms,
          "random pool of " + std::to_string(pool_size) + " images cannot supply " + std::to_string(runs) +
              " disjoint sets of " + std::to_string(set_size));
  std::vector<int> order(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) order[i] = static_cast<int>(i);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(runs));
  for (int r = 0; r < runs; ++r)
    sets[r].assign(order.begin() + static_cast<std::ptrdiff_t>(r) * set_size,
                   order.begin() + static_cast<std::ptrdiff_t>(r + 1) * set_size);
  return sets;
}

/// Everything needed to score edges out of one source layer: activations of
/// the source concepts' members and of the random pool, with a shared Gram
/// matrix for CAV training.
class SourceLayerCavs {
 public:
  SourceLayerCavs(int layer, std::vector<std::vector<Tensor>> concept_acts, std::vector<Tensor> pool_acts,
                  const ItcavConfig& cfg, std::uint64_t seed)
      : layer_(layer), concept_acts_(std::move(concept_acts)), pool_acts_(std::move(pool_acts)), cfg_(cfg) {
    sets_ = random_sets(pool_acts_.size(), cfg.runs, cfg.random_set_size, seed);
    std::vector<std::span<const float>> rows;
    for (const auto& acts : concept_acts_) {
      std::vector<int> idx;
      for (const auto& t : acts) {
        idx.push_back(static_cast<int>(rows.size()));
        rows.push_back(t.data());
      }
      concept_rows_.push_back(std::move(idx));
    }
    pool_offset_ = static_cast<int>(rows.size());
    for (const auto& t : pool_acts_) rows.push_back(t.data());
    trainer_ = CavTrainer(std::move(rows));
  }

  SourceLayerCavs(const SourceLayerCavs&) = delete;
  SourceLayerCavs& operator=(const SourceLayerCavs&) = delete;
  SourceLayerCavs(SourceLayerCavs&&) = default;
  SourceLayerCavs& operator=(SourceLayerCavs&&) = default;

  int layer() const { return layer_; }
  int runs() const { return cfg_.runs; }
  std::size_t concept_count() const { return concept_rows_.size(); }

  /// Trains every concept CAV (and the null CAVs when that test mode is on)
  /// up front, so edges to many destinations reuse them.
  void train_all(int jobs = 1) {
    const std::size_t runs = static_cast<std::size_t>(cfg_.runs);
    std::vector<CAV> cavs(concept_rows_.size() * runs);
    parallel_for(jobs, cavs.size(), [&](std::size_t k) {
      cavs[k] = fresh_concept_cav(k / runs, static_cast<int>(k % runs));
    });
    std::vector<CAV> nulls;
    if (cfg_.mode == ItcavConfig::TestMode::observed_vs_random_null) {
      nulls.resize(runs);
      parallel_for(jobs, runs, [&](std::size_t r) { nulls[r] = fresh_random_cav(static_cast<int>(r)); });
    }
    concept_cavs_ = std::move(cavs);
    random_cavs_ = std::move(nulls);
  }

  /// CAV of concept `c` against random set `run`.
  CAV concept_cav(std::size_t c, int run) const {
    if (!concept_cavs_.empty()) return concept_cavs_.at(c * static_cast<std::size_t>(cfg_.runs) + run);
    return fresh_concept_cav(c, run);
  }

  /// CAV with random set `run` as positives and the next set as negatives.
  CAV random_cav(int run) const {
    if (!random_cavs_.empty()) return random_cavs_.at(static_cast<std::size_t>(run));
    return fresh_random_cav(run);
  }

 private:
  CAV fresh_concept_cav(std::size_t c, int run) const {
    return trainer_.train(concept_rows_.at(c), pool_rows(run), cfg_.cav, layer_);
  }

  CAV fresh_random_cav(int run) const {
    return trainer_.train(pool_rows(run), pool_rows((run + 1) % cfg_.runs), cfg_.cav, layer_);
  }

  std::vector<int> pool_rows(int run) const {
    std::vector<int> r;
    for (int i : sets_.at(static_cast<std::size_t>(run))) r.push_back(pool_offset_ + i);
    return r;
  }

  int layer_;
  std::vector<std::vector<Tensor>> concept_acts_;
  std::vector<Tensor> pool_acts_;
  ItcavConfig cfg_;
  std::vector<std::vector<int>> sets_;
  std::vector<std::vector<int>> concept_rows_;
  int pool_offset_ = 0;
  CavTrainer trainer_;
  std::vector<CAV> concept_cavs_;
  std::vector<CAV> random_cavs_;
};

/// ITCAV score of one (src, dst) pair for a single random negative set.
inline double itcav_score(ModelOracle& oracle, std::span<const Tensor> src_member_acts, int j,
                          std::span<const Tensor> dst_member_rgb, int l, std::span<const double> dst_centroid,
                          std::span<const Tensor> random_negatives, std::uint64_t seed, const ItcavConfig& cfg = {}) {
  require(!dst_member_rgb.empty(), ErrorKind::invalid_input, "destination concept has no member segments");
  require(j < l, ErrorKind::ordering, "ITCAV needs the source layer below the destination layer");
  const CAV cav = train_cav(src_member_acts, random_negatives, seed, cfg.cav, j);
  std::vector<Tensor> grads;
  for (const auto& x : dst_member_rgb) grads.push_back(sensitivity_gradient(oracle, x, j, l, dst_centroid));
  return score_from_gradients(grads, cav, cfg.literal_sign);
}

/// Runs the full randomized protocol for one edge given precomputed
/// destination gradients.
inline EdgeStat itcav_edge_from_gradients(const SourceLayerCavs& src, std::size_t src_index, std::string src_id,
                                          std::string dst_id, std::span<const Tensor> dst_gradients,
                                          const ItcavConfig& cfg, bool class_edge = false) {
  require(!dst_gradients.empty(), ErrorKind::invalid_input, "destination concept has no member segments");
  std::vector<double> scores;
  for (int r = 0; r < src.runs(); ++r) {
    const CAV cav = src.concept_cav(src_index, r);
    scores.push_back(class_edge ? tcav_score_from_gradients(dst_gradients, cav)
                                : score_from_gradients(dst_gradients, cav, cfg.literal_sign));
  }
  if (cfg.mode == ItcavConfig::TestMode::observed_vs_random_null) {
    std::vector<double> null_scores;
    for (int r = 0; r < src.runs(); ++r) {
      const CAV cav = src.random_cav(r);
      null_scores.push_back(class_edge ? tcav_score_from_gradients(dst_gradients, cav)
                                       : score_from_gradients(dst_gradients, cav, cfg.literal_sign));
    }
    return edge_from_null(std::move(src_id), std::move(dst_id), std::move(scores), null_scores, cfg.alpha);
  }
  return edge_from_scores(std::move(src_id), std::move(dst_id), std::move(scores), cfg.alpha);
}

/// ITCAV edge between a concept at layer j (member activations given) and a
/// concept at layer l (member segments given), with `cfg.runs` disjoint random
/// negative sets drawn from `random_pool_acts` (layer-j activations).
inline EdgeStat itcav_edge(ModelOracle& oracle, const std::string& src_id, std::vector<Tensor> src_member_acts, int j,
                           const std::string& dst_id, std::span<const Tensor> dst_member_rgb, int l,
                           std::span<const double> dst_centroid, std::vector<Tensor> random_pool_acts,
                           std::uint64_t seed, const ItcavConfig& cfg = {}) {
  require(j < l, ErrorKind::ordering, "ITCAV needs the source layer below the destination layer");
  require(!dst_member_rgb.empty(), ErrorKind::invalid_input, "destination concept has no member segments");
  std::vector<std::vector<Tensor>> concept_acts;
  concept_acts.push_back(std::move(src_member_acts));
  SourceLayerCavs src(j, std::move(concept_acts), std::move(random_pool_acts), cfg, seed);
  std::vector<Tensor> grads;
  for (const auto& x : dst_member_rgb) grads.push_back(sensitivity_gradient(oracle, x, j, l, dst_centroid));
  return itcav_edge_from_gradients(src, 0, src_id, dst_id, grads, cfg);
}

/// Final-layer edge: the standard TCAV score of the concept's CAV against the
/// class logit, over the class's images.
inline EdgeStat tcav_class_edge(ModelOracle& oracle, const std::string& concept_id_, std::vector<Tensor> member_acts,
                                int layer, int cls, std::span<const Tensor> class_images,
                                std::vector<Tensor> random_pool_acts, std::uint64_t seed, const ItcavConfig& cfg = {}) {
  require(!class_images.empty(), ErrorKind::invalid_input, "class edge needs at least one class image");
  std::vector<std::vector<Tensor>> concept_acts;
  concept_acts.push_back(std::move(member_acts));
  SourceLayerCavs src(layer, std::move(concept_acts), std::move(random_pool_acts), cfg, seed);
  std::vector<Tensor> grads;
  for (const auto& img : class_images)
    grads.push_back(oracle.logit_grad(oracle.forward_to(segment_input(oracle, img), layer), layer, cls));
  return itcav_edge_from_gradients(src, 0, concept_id_, "class", grads, cfg, true);
}

}  // namespace vcc
