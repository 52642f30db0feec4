#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vcc/itcav.hpp"
#include "vcc/oracle.hpp"

using namespace vcc;

namespace {

std::vector<Tensor> rows(const oracle::Points& p) {
  std::vector<Tensor> out;
  for (const auto& r : p) {
    std::vector<float> f(r.begin(), r.end());
    out.emplace_back(Shape{static_cast<int>(f.size())}, f);
  }
  return out;
}

const oracle::Points kPos{{0.784, 1.222, 0.538},  {1.19, 0.748, -0.594}, {0.452, -0.04, -0.899},
                          {1.558, 0.466, -0.223}, {0.616, -0.153, -1.021}, {0.495, 0.859, -0.289},
                          {0.726, 0.356, -1.156}, {1.738, -0.23, -0.275}, {2.282, -1.031, -1.144},
                          {0.566, 0.57, -1.329}};
const oracle::Points kNeg{{-0.641, 0.183, 0.502}, {-1.933, 0.588, 1.358}, {-0.238, -0.234, 0.032},
                          {-2.088, 0.486, 1.302}, {-0.11, -1.586, 0.144}, {-0.562, -0.09, 1.02},
                          {-1.547, -0.231, 0.757}, {0.095, 0.301, 1.033}, {-0.188, -0.436, 1.176},
                          {-0.803, -0.778, 0.663}};

// 4-channel 3x3 activations, constant per channel.
Tensor spatial(const std::vector<double>& c) {
  Tensor t({4, 3, 3});
  for (int ch = 0; ch < 4; ++ch)
    for (int i = 0; i < 9; ++i) t[static_cast<std::size_t>(ch * 9 + i)] = static_cast<float>(c[ch]);
  return t;
}

LayeredModel identity_chain() {
  std::vector<LayerSpec> l{LayerSpec::conv(4, 4, 1), LayerSpec::conv(4, 4, 1), LayerSpec::gap(), LayerSpec::dense(4, 2)};
  for (int k : {0, 1}) {
    l[k].weight.assign(16, 0.0f);
    for (int i = 0; i < 4; ++i) l[k].weight[static_cast<std::size_t>(i * 5)] = 1.0f;
    l[k].bias.assign(4, 0.0f);
  }
  l[3].weight = {0.7f, -0.2f, 0.4f, 0.1f, -0.3f, 0.5f, 0.2f, -0.6f};
  l[3].bias.assign(2, 0.0f);
  return LayeredModel({4, 3, 3}, std::move(l), 2, {0, 1});
}

CAV unit_cav(const std::vector<double>& channel_dir) {
  CAV c;
  double n = 0.0;
  for (double v : channel_dir) n += 9.0 * v * v;
  for (double v : channel_dir)
    for (int i = 0; i < 9; ++i) c.direction.push_back(static_cast<float>(v / std::sqrt(n)));
  return c;
}

}  // namespace

TEST(Cav, MatchesReferenceLogisticRegression) {
  const CAV c = train_cav(rows(kPos), rows(kNeg), 0);
  const std::vector<double> want{2.5074696837775057, 1.4835753237787888, -2.2291025952696306};
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(c.direction[static_cast<std::size_t>(i)] * c.weight_norm, want[i], 1e-5);
  EXPECT_NEAR(c.bias, -0.42965033917772294, 1e-5);
  EXPECT_EQ(c.accuracy, 1.0);

  // the plain primal gradient descent oracle agrees too
  std::vector<double> y(kPos.size(), 1.0);
  y.resize(kPos.size() + kNeg.size(), 0.0);
  oracle::Points all = kPos;
  all.insert(all.end(), kNeg.begin(), kNeg.end());
  double b = 0.0;
  const auto w = oracle::logistic_gd(all, y, 500, 0.1, 1e-3, b);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(c.direction[static_cast<std::size_t>(i)] * c.weight_norm, w[i], 1e-5);
}

TEST(Cav, OneDimensionalOrientation) {
  Rng rng(2);
  oracle::Points p, n;
  for (int i = 0; i < 6; ++i) {
    p.push_back({1.0 + 0.1 * (rng.uniform() * 2 - 1)});
    n.push_back({-1.0 + 0.1 * (rng.uniform() * 2 - 1)});
  }
  const CAV c = train_cav(rows(p), rows(n), 0);
  EXPECT_FLOAT_EQ(c.direction[0], 1.0f);
  const CAV flipped = train_cav(rows(n), rows(p), 0);
  EXPECT_FLOAT_EQ(flipped.direction[0], -1.0f);
}

TEST(Cav, IdenticalSidesHaveNoMargin) {
  try {
    train_cav(rows(kPos), rows(kPos), 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::zero_margin);
  }
  EXPECT_THROW(train_cav(rows({{1.0}}), rows(kNeg), 0), Error);
}

TEST(Sensitivity, IdentityChainSign) {
  const LayeredModel m = identity_chain();
  InCoreOracle o(m);
  const std::vector<double> d{0.6, -0.3, 0.5, 0.2};
  const std::vector<double> base{1.0, 2.0, 0.5, 1.5};
  std::vector<double> q(4);
  for (int c = 0; c < 4; ++c) q[c] = base[c] + 2.0 * d[c];
  const Tensor g = o.distance_grad(spatial(base), 0, 1, q);
  EXPECT_GT(sensitivity_from_gradient(g, unit_cav(d)), 0.0);
  EXPECT_LT(sensitivity_from_gradient(g, unit_cav({-0.6, 0.3, -0.5, -0.2})), 0.0);
  // literal sign flips it
  EXPECT_LT(sensitivity_from_gradient(g, unit_cav(d), true), 0.0);
  // a direction orthogonal to the residual
  EXPECT_NEAR(sensitivity_from_gradient(g, unit_cav({0.3, 0.6, 0.0, 0.0})), 0.0, 1e-7);
}

TEST(Sensitivity, MatchesClosedFormForLinearMaps) {
  Rng rng(5);
  std::vector<LayerSpec> l{LayerSpec::conv(4, 4, 1), LayerSpec::conv(4, 3, 1), LayerSpec::gap(), LayerSpec::dense(3, 2)};
  l[0].weight.assign(16, 0.0f);
  for (int i = 0; i < 4; ++i) l[0].weight[static_cast<std::size_t>(i * 5)] = 1.0f;
  l[0].bias.assign(4, 0.0f);
  l[1].weight.resize(12);
  for (auto& w : l[1].weight) w = static_cast<float>(rng.normal());
  l[1].bias.assign(3, 0.0f);
  l[3].weight.assign(6, 0.1f);
  l[3].bias.assign(2, 0.0f);
  const auto W = l[1].weight;
  const LayeredModel m({4, 3, 3}, std::move(l), 2, {0, 1});
  InCoreOracle o(m);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> v(4), q(3), dir(4);
    for (auto& x : v) x = rng.normal();
    for (auto& x : q) x = rng.normal();
    for (auto& x : dir) x = rng.normal();
    const CAV cav = unit_cav(dir);
    std::vector<double> r(3);
    double rn = 0.0;
    for (int a = 0; a < 3; ++a) {
      for (int c = 0; c < 4; ++c) r[a] += W[static_cast<std::size_t>(a * 4 + c)] * v[c];
      r[a] -= q[a];
      rn += r[a] * r[a];
    }
    rn = std::sqrt(rn);
    double want = 0.0;
    for (int c = 0; c < 4; ++c) {
      double g = 0.0;
      for (int a = 0; a < 3; ++a) g += W[static_cast<std::size_t>(a * 4 + c)] * r[a] / rn;
      want -= g / 9.0 * cav.direction[static_cast<std::size_t>(c * 9)] * 9.0;
    }
    const double got = sensitivity_from_gradient(o.distance_grad(spatial(v), 0, 1, q), cav);
    EXPECT_NEAR(got, want, 1e-5 * std::max(1.0, std::fabs(want)));
  }
}

TEST(Score, CountsStrictlyPositiveMembers) {
  const LayeredModel m = identity_chain();
  InCoreOracle o(m);
  const std::vector<double> d{0.6, -0.3, 0.5, 0.2};
  const CAV cav = unit_cav(d);
  Rng rng(8);
  std::vector<Tensor> grads;
  int expected = 0;
  for (int i = 0; i < 5; ++i) {
    std::vector<double> v(4), q(4);
    for (auto& x : v) x = rng.normal();
    for (auto& x : q) x = rng.normal();
    grads.push_back(o.distance_grad(spatial(v), 0, 1, q));
    // S = -<(v - q)/|v - q|, d>
    double s = 0.0;
    for (int c = 0; c < 4; ++c) s -= (v[c] - q[c]) * d[c];
    expected += s > 0.0;
  }
  EXPECT_DOUBLE_EQ(score_from_gradients(grads, cav), expected / 5.0);
  EXPECT_THROW(score_from_gradients(std::vector<Tensor>{}, cav), Error);
}

TEST(Score, AllPositiveAndAllNegative) {
  const LayeredModel m = identity_chain();
  InCoreOracle o(m);
  const std::vector<double> d{0.6, -0.3, 0.5, 0.2};
  Rng rng(9);
  std::vector<Tensor> grads;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> v(4), q(4);
    for (int c = 0; c < 4; ++c) {
      v[c] = 1.0 + 0.05 * rng.normal();
      q[c] = v[c] + 3.0 * d[c];
    }
    grads.push_back(o.distance_grad(spatial(v), 0, 1, q));
  }
  EXPECT_EQ(score_from_gradients(grads, unit_cav(d)), 1.0);
  EXPECT_EQ(score_from_gradients(grads, unit_cav({-0.6, 0.3, -0.5, -0.2})), 0.0);
}

TEST(Tcav, LinearHeadWeightRow) {
  const LayeredModel m = identity_chain();
  InCoreOracle o(m);
  Rng rng(3);
  std::vector<Tensor> grads;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> v(4);
    for (auto& x : v) x = rng.normal();
    grads.push_back(o.logit_grad(spatial(v), 0, 1));
  }
  EXPECT_EQ(tcav_score_from_gradients(grads, unit_cav({-0.3, 0.5, 0.2, -0.6})), 1.0);
  EXPECT_EQ(tcav_score_from_gradients(grads, unit_cav({0.3, -0.5, -0.2, 0.6})), 0.0);
}

TEST(Edges, DegenerateAndReferenceRuns) {
  const EdgeStat half = edge_from_scores("a", "b", std::vector<double>(20, 0.5), 0.05);
  EXPECT_EQ(half.p_value, 1.0);
  EXPECT_FALSE(half.significant);
  const EdgeStat one = edge_from_scores("a", "b", std::vector<double>(20, 1.0), 0.05);
  EXPECT_EQ(one.p_value, 0.0);
  EXPECT_TRUE(one.significant);
  EXPECT_EQ(one.weight, 1.0);
  const EdgeStat ref = edge_from_scores("a", "b", {0.8, 0.75, 0.9, 0.85, 0.7}, 0.05);
  EXPECT_NEAR(ref.p_value, 0.0010575646158306863, 1e-9);
  EXPECT_DOUBLE_EQ(ref.weight, 0.8);
}

TEST(Edges, RandomSetsAreDisjoint) {
  const auto sets = random_sets(100, 5, 20, 3);
  std::set<int> seen;
  for (const auto& s : sets) {
    EXPECT_EQ(s.size(), 20u);
    for (int i : s) EXPECT_TRUE(seen.insert(i).second);
  }
  try {
    random_sets(30, 5, 10, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::insufficient_randoms);
  }
}

TEST(Edges, CachedCavsEqualFreshOnes) {
  Rng rng(4);
  auto acts = [&](double shift, int n) {
    std::vector<Tensor> v;
    for (int i = 0; i < n; ++i) {
      std::vector<double> c(4);
      for (auto& x : c) x = shift + rng.normal();
      v.push_back(spatial(c));
    }
    return v;
  };
  ItcavConfig cfg;
  cfg.runs = 3;
  cfg.random_set_size = 5;
  cfg.mode = ItcavConfig::TestMode::observed_vs_random_null;
  const std::vector<std::vector<Tensor>> concepts{acts(1.0, 6), acts(-1.0, 6)};
  const std::vector<Tensor> pool = acts(0.0, 15);
  SourceLayerCavs fresh(0, concepts, pool, cfg, 9);
  SourceLayerCavs cached(0, concepts, pool, cfg, 9);
  cached.train_all(2);
  for (std::size_t c = 0; c < 2; ++c)
    for (int r = 0; r < 3; ++r) EXPECT_EQ(cached.concept_cav(c, r).direction, fresh.concept_cav(c, r).direction);
  for (int r = 0; r < 3; ++r) EXPECT_EQ(cached.random_cav(r).direction, fresh.random_cav(r).direction);
}
