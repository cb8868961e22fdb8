// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "repr/errors.hpp"
#include "repr/ranking.hpp"
#include "repr/rng.hpp"

using namespace repr;

namespace {

Tensor random_rows(std::size_t j, std::size_t n, Rng& rng) {
  Tensor t({j, n});
  for (double& v : t.data()) v = rng.normal();
  return t;
}

// Mean absolute cosine against every other row, with self counted as 0.
std::vector<double> brute_force_ortho(const Tensor& w) {
  const std::size_t J = w.dim(0);
  std::vector<double> out(J, 0.0);
  for (std::size_t i = 0; i < J; ++i) {
    for (std::size_t j = 0; j < J; ++j) {
      if (i == j) continue;
      double d = 0, ni = 0, nj = 0;
      for (std::size_t k = 0; k < w.dim(1); ++k) {
        d += w.at(i, k) * w.at(j, k);
        ni += w.at(i, k) * w.at(i, k);
        nj += w.at(j, k) * w.at(j, k);
      }
      out[i] += std::abs(d) / std::sqrt(ni * nj);
    }
    out[i] /= static_cast<double>(J);
  }
  return out;
}

ModelSpec small_spec() {
  ModelSpec s;
  s.in_channels = 1;
  s.height = 5;
  s.width = 5;
  s.num_classes = 3;
  s.layers = 2;
  s.filters = 3;
  return s;
}

ProbeSet random_probe(const ModelSpec& s, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  ProbeSet p;
  p.inputs = Tensor({n, s.in_channels, s.height, s.width});
  for (double& v : p.inputs.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) p.labels.push_back(static_cast<int>(rng.below(s.num_classes)));
  return p;
}

std::vector<RankingScore> make_scores(const std::vector<std::pair<FilterId, double>>& v) {
  std::vector<RankingScore> out;
  for (const auto& [id, value] : v) out.push_back({id, value, Metric::Weights});
  return out;
}

double value_of(const std::vector<RankingScore>& s, FilterId id) {
  for (const auto& r : s)
    if (r.id == id) return r.value;
  ADD_FAILURE() << "missing filter";
  return 0.0;
}

} // namespace

TEST(OrthoMatrix, OrthonormalRowsGiveZero) {
  const OrthoMatrix m = ortho_matrix(Tensor::identity(4));
  EXPECT_EQ(max_abs(m.p), 0.0);
}

TEST(OrthoMatrix, DuplicateFilters) {
  const OrthoMatrix m = ortho_matrix(Tensor::from_rows({{1, 2, 3}, {1, 2, 3}}));
  EXPECT_NEAR(m.p.at(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(m.p.at(1, 0), 1.0, 1e-15);
  EXPECT_EQ(m.p.at(0, 0), 0.0);
  const OrthoScores s = ortho_score(Tensor::from_rows({{1, 2, 3}, {1, 2, 3}}));
  EXPECT_NEAR(s.score[0], 0.5, 1e-15);
  EXPECT_NEAR(s.score[1], 0.5, 1e-15);
}

TEST(OrthoMatrix, BisectorCase) {
  const double r = 1.0 / std::sqrt(2.0);
  const Tensor w = Tensor::from_rows({{1, 0}, {0, 1}, {r, r}});
  const OrthoMatrix m = ortho_matrix(w);
  EXPECT_NEAR(m.p.at(2, 0), r, 1e-15);
  EXPECT_NEAR(m.p.at(2, 1), r, 1e-15);
  EXPECT_EQ(m.p.at(2, 2), 0.0);
  EXPECT_NEAR(ortho_score(w).score[2], std::sqrt(2.0) / 3.0, 1e-12);
}

TEST(OrthoMatrix, ZeroFilterIsFlagged) {
  const OrthoMatrix m = ortho_matrix(Tensor::from_rows({{0, 0}, {1, 1}}));
  EXPECT_TRUE(m.zero_filters[0]);
  EXPECT_FALSE(m.zero_filters[1]);
  EXPECT_EQ(m.p.at(0, 0), 1.0);
  EXPECT_EQ(m.p.at(0, 1), 0.0);
  EXPECT_EQ(m.p.at(1, 1), 0.0);
}

TEST(OrthoMatrix, SymmetricZeroDiagonalBoundedEntries) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor w = random_rows(1 + rng.below(20), 1 + rng.below(30), rng);
    const OrthoMatrix m = ortho_matrix(w);
    for (std::size_t i = 0; i < m.p.dim(0); ++i) {
      EXPECT_EQ(m.p.at(i, i), 0.0);
      for (std::size_t j = 0; j < m.p.dim(0); ++j) {
        EXPECT_EQ(m.p.at(i, j), m.p.at(j, i));
        EXPECT_GE(m.p.at(i, j), 0.0);
        EXPECT_LE(m.p.at(i, j), 1.0 + 1e-15);
      }
    }
  }
}

TEST(OrthoScore, MatchesBruteForceCosineUpTo64Filters) {
  Rng rng(2);
  for (std::size_t J : {1u, 2u, 7u, 33u, 64u}) {
    const Tensor w = random_rows(J, 27, rng);
    const auto want = brute_force_ortho(w);
    const auto got = ortho_score(w).score;
    for (std::size_t i = 0; i < J; ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
  }
}

TEST(OrthoScore, PositiveRowScalingLeavesScoresAndSelectionUnchanged) {
  Rng rng(3);
  Model m = Model::create(small_spec(), 4);
  const PruneMask mask = PruneMask::all_live(m);
  const auto before = metric_scores(m, mask, Metric::Ortho, {});
  Model scaled = m;
  for (auto& l : scaled.conv_layers) {
    const std::size_t n = l.filter_size();
    for (std::size_t j = 0; j < l.filters(); ++j) {
      const double c = std::exp(3.0 * rng.normal());
      for (std::size_t i = 0; i < n; ++i) l.weights[j * n + i] *= c;
    }
  }
  const auto after = metric_scores(scaled, mask, Metric::Ortho, {});
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i].value, after[i].value, 1e-12);
  EXPECT_EQ(select_bottom(before, 30), select_bottom(after, 30));
}

TEST(OrthoMetric, ComputedOverLiveFiltersOnly) {
  Model m = Model::create(small_spec(), 5);
  PruneMask mask = PruneMask::all_live(m);
  mask.set({0, 1}, false);
  const auto scores = metric_scores(m, mask, Metric::Ortho, {});
  EXPECT_EQ(scores.size(), 5u);
  const auto live = ortho_score(live_filter_rows(m.conv_layers[0], mask, 0)).score;
  EXPECT_NEAR(value_of(scores, {0, 0}), -live[0], 1e-15);
  EXPECT_NEAR(value_of(scores, {0, 2}), -live[1], 1e-15);
}

TEST(OrthoMetric, ZeroFilterRanksBelowEveryNonzeroFilter) {
  Model m = Model::create(small_spec(), 6);
  // Make filters 1 and 2 of layer 0 exact duplicates (most redundant possible).
  ConvLayer& l = m.conv_layers[0];
  const std::size_t n = l.filter_size();
  for (std::size_t i = 0; i < n; ++i) {
    l.weights[2 * n + i] = l.weights[n + i];
    l.weights[i] = 0.0;
  }
  const auto scores = metric_scores(m, PruneMask::all_live(m), Metric::Ortho, {});
  EXPECT_LT(value_of(scores, {0, 0}), value_of(scores, {0, 1}));
  EXPECT_LT(value_of(scores, {0, 0}), value_of(scores, {1, 0}));
}

TEST(WeightsMetric, ZeroFilterBelowOnesFilter) {
  ModelSpec s = small_spec();
  s.kernel = 1;
  s.layers = 1;
  s.filters = 2;
  Model m = Model::create(s, 7);
  m.conv_layers[0].weights[0] = 0.0;
  m.conv_layers[0].weights[1] = 1.0;
  const auto sc = metric_scores(m, PruneMask::all_live(m), Metric::Weights, {});
  EXPECT_EQ(sc[0].value, 0.0);
  EXPECT_EQ(sc[1].value, 1.0);
  EXPECT_EQ(select_bottom(sc, 50), (std::vector<FilterId>{{0, 0}}));
}

TEST(ApozMetric, DeadReluFilterHasLowestImportance) {
  Model m = Model::create(small_spec(), 8);
  m.conv_layers[0].bias[1] = -1e6;
  const ProbeSet probe = random_probe(m.spec, 6, 9);
  MetricInputs in;
  in.probe = &probe;
  const auto sc = metric_scores(m, PruneMask::all_live(m), Metric::Apoz, in);
  EXPECT_EQ(value_of(sc, {0, 1}), -1.0);
  for (const auto& r : sc) EXPECT_GE(r.value, -1.0);
  EXPECT_EQ(select_bottom(sc, 20).front(), (FilterId{0, 1}));
  const auto act = metric_scores(m, PruneMask::all_live(m), Metric::Activations, in);
  EXPECT_EQ(value_of(act, {0, 1}), 0.0);
}

TEST(RandomMetric, DeterministicPerSeedAndIteration) {
  const Model m = Model::create(small_spec(), 10);
  const PruneMask mask = PruneMask::all_live(m);
  MetricInputs a;
  a.seed = 3;
  a.iteration = 1;
  MetricInputs b = a;
  b.iteration = 2;
  const auto s1 = metric_scores(m, mask, Metric::Random, a);
  const auto s2 = metric_scores(m, mask, Metric::Random, a);
  const auto s3 = metric_scores(m, mask, Metric::Random, b);
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i].value, s2[i].value);
  EXPECT_NE(s1[0].value, s3[0].value);
}

TEST(DataMetrics, MissingInputsAreConfigErrors) {
  const Model m = Model::create(small_spec(), 11);
  const PruneMask mask = PruneMask::all_live(m);
  for (Metric metric : {Metric::Activations, Metric::Apoz, Metric::Gradients, Metric::Taylor, Metric::Hessian,
                        Metric::Oracle})
    EXPECT_THROW(metric_scores(m, mask, metric, {}), ConfigError) << to_string(metric);
}

TEST(TaylorAndGradients, ProbeChunkSizeDoesNotMatter) {
  const Model m = Model::create(small_spec(), 12);
  const ProbeSet probe = random_probe(m.spec, 9, 13);
  for (Metric metric : {Metric::Taylor, Metric::Gradients}) {
    MetricInputs one;
    one.probe = &probe;
    one.batch_size = 9;
    MetricInputs chunked = one;
    chunked.batch_size = 1;
    const auto a = metric_scores(m, PruneMask::all_live(m), metric, one);
    const auto b = metric_scores(m, PruneMask::all_live(m), metric, chunked);
    if (metric == Metric::Taylor) {
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i].value, b[i].value, 1e-12 + 1e-9 * a[i].value);
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_GE(a[i].value, 0.0);
    }
  }
}

TEST(TaylorMetric, MatchesFiniteDifferenceOfActivationScaling) {
  // For a live filter, sum_s a * dl/da equals d l(x; alpha) / d alpha at alpha = 1,
  // where alpha scales the filter's post-relu output. Scaling the conv weights,
  // bias and nothing else by alpha scales the relu output by alpha (alpha > 0).
  const Model m = Model::create(small_spec(), 14);
  const ProbeSet probe = random_probe(m.spec, 1, 15);
  MetricInputs in;
  in.probe = &probe;
  const auto sc = metric_scores(m, PruneMask::all_live(m), Metric::Taylor, in);
  const PruneMask mask = PruneMask::all_live(m);
  for (FilterId id : {FilterId{0, 0}, FilterId{0, 2}, FilterId{1, 1}}) {
    auto loss_at = [&](double alpha) {
      Model t = m;
      ConvLayer& l = t.conv_layers[id.layer];
      const std::size_t n = l.filter_size();
      for (std::size_t i = 0; i < n; ++i) l.weights[id.filter * n + i] *= alpha;
      l.bias[id.filter] *= alpha;
      return cross_entropy(forward(t, mask, probe.inputs, Mode::Eval).logits, probe.labels);
    };
    const double h = 1e-6;
    const double d = (loss_at(1 + h) - loss_at(1 - h)) / (2 * h);
    const std::size_t pos = 25;
    EXPECT_NEAR(value_of(sc, id), std::abs(d) / pos, 1e-7);
  }
}

TEST(HessianMetric, MatchesGaussNewtonFromFiniteDifferenceJacobian) {
  const Model m = Model::create(small_spec(), 16);
  const PruneMask mask = PruneMask::all_live(m);
  const ProbeSet probe = random_probe(m.spec, 3, 17);
  MetricInputs in;
  in.probe = &probe;
  const auto sc = metric_scores(m, mask, Metric::Hessian, in);
  const std::size_t C = m.spec.num_classes;
  for (FilterId id : {FilterId{0, 1}, FilterId{1, 2}}) {
    const std::size_t n = m.conv_layers[id.layer].filter_size();
    double want = 0.0;
    for (std::size_t e = 0; e < probe.size(); ++e) {
      const Tensor x = slice_rows(probe.inputs, e, 1);
      const Tensor z = forward(m, mask, x, Mode::Eval).logits;
      std::vector<double> p(C);
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += (p[c] = std::exp(z[c]));
      for (double& v : p) v /= s;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = id.filter * n + i;
        Model up = m, down = m;
        const double h = 1e-6;
        up.conv_layers[id.layer].weights[idx] += h;
        down.conv_layers[id.layer].weights[idx] -= h;
        const Tensor zu = forward(up, mask, x, Mode::Eval).logits;
        const Tensor zd = forward(down, mask, x, Mode::Eval).logits;
        double sq = 0, lin = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const double jc = (zu[c] - zd[c]) / (2 * h);
          sq += p[c] * jc * jc;
          lin += p[c] * jc;
        }
        const double w = m.conv_layers[id.layer].weights[idx];
        want += 0.5 * w * w * (sq - lin * lin) / static_cast<double>(probe.size());
      }
    }
    EXPECT_NEAR(value_of(sc, id), want, 1e-7 + 1e-5 * want);
  }
}

TEST(Oracle, NullFilterHasZeroDrop) {
  Model m = Model::create(small_spec(), 18);
  ConvLayer& l = m.conv_layers[0];
  const std::size_t n = l.filter_size();
  for (std::size_t i = 0; i < n; ++i) l.weights[n + i] = 0.0;
  l.bias[1] = 0.0;
  const ProbeSet probe = random_probe(m.spec, 20, 19);
  EXPECT_EQ(value_of(oracle_scores(m, PruneMask::all_live(m), probe), {0, 1}), 0.0);
}

TEST(Oracle, DuplicateFiltersHaveEqualDrops) {
  ModelSpec s = small_spec();
  s.layers = 1;
  s.filters = 3;
  Model m = Model::create(s, 20);
  ConvLayer& l = m.conv_layers[0];
  const std::size_t n = l.filter_size();
  for (std::size_t i = 0; i < n; ++i) l.weights[n + i] = l.weights[i];
  l.bias[1] = l.bias[0];
  // FC reads channel 0 and channel 1 with identical weights.
  const std::size_t pos = 25;
  for (std::size_t c = 0; c < s.num_classes; ++c)
    for (std::size_t i = 0; i < pos; ++i) m.fc_weights.at(c, pos + i) = m.fc_weights.at(c, i);
  const ProbeSet probe = random_probe(s, 40, 21);
  const auto sc = oracle_scores(m, PruneMask::all_live(m), probe);
  EXPECT_EQ(value_of(sc, {0, 0}), value_of(sc, {0, 1}));
}

TEST(Oracle, ReproducibleByMaskingAndReevaluating) {
  const Model m = Model::create(small_spec(), 22);
  const ProbeSet probe = random_probe(m.spec, 30, 23);
  const PruneMask mask = PruneMask::all_live(m);
  const auto sc = oracle_scores(m, mask, probe, 7);
  const double base = evaluate(m, mask, probe.inputs, probe.labels).accuracy;
  for (const auto& r : sc) {
    PruneMask t = mask;
    t.set(r.id, false);
    ForwardOptions fo;
    fo.allow_empty_layers = true;
    EXPECT_EQ(r.value, base - evaluate(m, t, probe.inputs, probe.labels, 256, fo).accuracy);
  }
}

TEST(SelectBottom, TenLiveThirtyPercentPicksThree) {
  std::vector<std::pair<FilterId, double>> v;
  for (std::size_t i = 0; i < 5; ++i) v.push_back({{0, i}, 1.5 + static_cast<double>(i)});
  for (std::size_t i = 0; i < 5; ++i) v.push_back({{1, i}, 0.5 * static_cast<double>(i)});
  const auto sel = select_bottom(make_scores(v), 30);
  EXPECT_EQ(sel, (std::vector<FilterId>{{1, 0}, {1, 1}, {1, 2}}));
}

TEST(SelectBottom, TiesBrokenLexicographically) {
  std::vector<std::pair<FilterId, double>> v;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < 5; ++i) v.push_back({{l, i}, 0.25});
  const auto sel = select_bottom(make_scores(v), 30);
  EXPECT_EQ(sel, (std::vector<FilterId>{{0, 0}, {0, 1}, {0, 2}}));
}

TEST(SelectBottom, PermutationInvariant) {
  Rng rng(24);
  std::vector<std::pair<FilterId, double>> v;
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < 8; ++i) v.push_back({{l, i}, std::floor(rng.uniform() * 5)});
  const auto want = select_bottom(make_scores(v), 40);
  std::mt19937 g(3);
  for (int t = 0; t < 10; ++t) {
    std::shuffle(v.begin(), v.end(), g);
    EXPECT_EQ(select_bottom(make_scores(v), 40), want);
  }
}

TEST(SelectBottom, NeverEmptiesALayer) {
  // Layer 0 has the two lowest scores but only two filters.
  const auto sc = make_scores({{{0, 0}, -5}, {{0, 1}, -4}, {{1, 0}, 1}, {{1, 1}, 2}, {{1, 2}, 3}});
  const auto sel = select_bottom(sc, 40);
  EXPECT_EQ(sel, (std::vector<FilterId>{{0, 0}, {1, 0}}));
}

TEST(SelectBottom, Errors) {
  const auto sc = make_scores({{{0, 0}, 1}, {{0, 1}, 2}});
  EXPECT_THROW(select_bottom(sc, 0), ConfigError);
  EXPECT_THROW(select_bottom(sc, 100), ConfigError);
  auto bad = sc;
  bad[0].value = std::nan("");
  EXPECT_THROW(select_bottom(bad, 50), TrainingError);
  EXPECT_TRUE(select_bottom(sc, 10).empty());
}

TEST(ScoresCsv, HeaderAndRanks) {
  std::ostringstream os;
  write_scores_csv(os, make_scores({{{0, 0}, 3}, {{0, 1}, 1}}));
  EXPECT_EQ(os.str(), "metric,layer,filter,value,rank\nweights,0,0,3,2\nweights,0,1,1,1\n");
}
