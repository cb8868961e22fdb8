// SPDX-License-Identifier: Apache-2.0
#include "repr/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include "repr/errors.hpp"
#include "repr/rng.hpp"

namespace repr {

std::string to_string(Metric metric) {
  switch (metric) {
  case Metric::Random: return "random";
  case Metric::Activations: return "activations";
  case Metric::Apoz: return "apoz";
  case Metric::Gradients: return "gradients";
  case Metric::Taylor: return "taylor";
  case Metric::Hessian: return "hessian";
  case Metric::Weights: return "weights";
  case Metric::Oracle: return "oracle";
  case Metric::Ortho: return "ortho";
  }
  return "?";
}

const std::vector<Metric>& all_metrics() {
  static const std::vector<Metric> metrics{Metric::Random,  Metric::Activations, Metric::Apoz,
                                           Metric::Gradients, Metric::Taylor,    Metric::Hessian,
                                           Metric::Weights, Metric::Oracle,      Metric::Ortho};
  return metrics;
}

Metric parse_metric(const std::string& name) {
  for (Metric m : all_metrics())
    if (to_string(m) == name) return m;
  throw ConfigError("unknown metric '" + name + "'");
}

// ---------------------------------------------------------------------------
// Orthogonality
// ---------------------------------------------------------------------------

OrthoMatrix ortho_matrix(const Tensor& filter_rows) {
  if (filter_rows.rank() != 2 || filter_rows.dim(0) < 1) {
    throw DimensionError("ortho_matrix: need a [J, n] filter matrix with J >= 1, got " +
                         shape_string(filter_rows.shape()));
  }
  const RowNormalized norm = row_normalize(filter_rows);
  const std::size_t J = filter_rows.dim(0);
  OrthoMatrix out{Tensor({J, J}), norm.zero_rows};
  for (std::size_t i = 0; i < J; ++i) {
    for (std::size_t j = i; j < J; ++j) {
      double v;
      if (i == j) {
        v = norm.zero_rows[i] ? 1.0 : 0.0;
      } else {
        v = std::abs(dot(norm.rows.row(i), norm.rows.row(j)));
      }
      out.p.at(i, j) = v;
      out.p.at(j, i) = v;
    }
  }
  return out;
}

OrthoMatrix ortho_matrix(const ConvLayer& layer) { return ortho_matrix(filter_matrix(layer)); }

OrthoScores ortho_score(const Tensor& filter_rows) {
  const OrthoMatrix m = ortho_matrix(filter_rows);
  const std::size_t J = m.p.dim(0);
  OrthoScores out{std::vector<double>(J, 0.0), m.zero_filters};
  for (std::size_t i = 0; i < J; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < J; ++j) s += m.p.at(i, j);
    out.score[i] = s / static_cast<double>(J);
  }
  return out;
}

OrthoScores ortho_score(const ConvLayer& layer) { return ortho_score(filter_matrix(layer)); }

Tensor live_filter_rows(const ConvLayer& layer, const PruneMask& mask, std::size_t layer_index) {
  const Tensor all = filter_matrix(layer);
  std::vector<std::vector<double>> rows;
  for (std::size_t j = 0; j < layer.filters(); ++j) {
    if (!mask.is_live(layer_index, j)) continue;
    const auto r = all.row(j);
    rows.emplace_back(r.begin(), r.end());
  }
  return Tensor::from_rows(rows);
}

// ---------------------------------------------------------------------------
// Recorded statistics
// ---------------------------------------------------------------------------

GradActStats GradActStats::zeros(const Model& model) {
  GradActStats s;
  for (const auto& l : model.conv_layers) {
    s.grad_abs.emplace_back(l.filters(), 0.0);
    s.taylor.emplace_back(l.filters(), 0.0);
  }
  return s;
}

void GradActStats::clear() {
  for (auto& v : grad_abs) std::fill(v.begin(), v.end(), 0.0);
  for (auto& v : taylor) std::fill(v.begin(), v.end(), 0.0);
  steps = 0.0;
  examples = 0.0;
}

void GradActStats::accumulate(const Model& model, const PruneMask& mask, const ActivationCache& cache,
                              const BackwardResult& result) {
  if (result.activation_grads.size() != model.layer_count()) {
    throw ConfigError("GradActStats::accumulate needs activation gradients");
  }
  const std::size_t B = cache.logits.dim(0);
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const ConvLayer& layer = model.conv_layers[l];
    const std::size_t J = layer.filters(), n = layer.filter_size();
    const Tensor& gw = result.grads.layers[l].weights;
    const Tensor& act = cache.layers[l].post_activation;
    const Tensor& gact = result.activation_grads[l];
    const std::size_t pos = act.size() / (B * J);
    for (std::size_t j = 0; j < J; ++j) {
      if (!mask.is_live(l, j)) continue;
      double g = 0.0;
      for (std::size_t i = 0; i < n; ++i) g += std::abs(gw[j * n + i]);
      grad_abs[l][j] += g / static_cast<double>(n);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * J + j) * pos;
        double t = 0.0;
        for (std::size_t s = 0; s < pos; ++s) t += act[off + s] * gact[off + s];
        // The batch loss is a mean; scale back to the per-example loss.
        taylor[l][j] += std::abs(t * static_cast<double>(B) / static_cast<double>(pos));
      }
    }
  }
  steps += 1.0;
  examples += static_cast<double>(B);
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace {

const ProbeSet& need_probe(const MetricInputs& in, Metric m) {
  if (in.probe == nullptr || in.probe->size() == 0) {
    throw ConfigError("metric '" + to_string(m) + "' needs a non-empty probe set");
  }
  return *in.probe;
}

template <typename F>
std::vector<RankingScore> per_live_filter(const Model& model, const PruneMask& mask, Metric metric, F&& value) {
  std::vector<RankingScore> out;
  for (std::size_t l = 0; l < model.layer_count(); ++l)
    for (std::size_t j = 0; j < model.conv_layers[l].filters(); ++j)
      if (mask.is_live(l, j)) out.push_back({{l, j}, value(FilterId{l, j}), metric});
  return out;
}

// Forward passes over the probe in chunks; calls fn(cache, labels) per chunk.
template <typename F>
void for_probe_chunks(const Model& model, const PruneMask& mask, const ProbeSet& probe, std::size_t batch, F&& fn) {
  for (std::size_t first = 0; first < probe.size(); first += batch) {
    const std::size_t n = std::min(batch, probe.size() - first);
    const Tensor chunk = slice_rows(probe.inputs, first, n);
    auto fr = forward(model, mask, chunk, Mode::Eval);
    fn(fr.cache, std::span<const int>(probe.labels).subspan(first, n));
  }
}

GradActStats probe_statistics(const Model& model, const PruneMask& mask, const ProbeSet& probe, std::size_t batch) {
  GradActStats stats = GradActStats::zeros(model);
  for_probe_chunks(model, mask, probe, batch, [&](const ActivationCache& cache, std::span<const int> labels) {
    const auto br = backward(model, mask, cache, labels, {.keep_activation_grads = true});
    stats.accumulate(model, mask, cache, br);
  });
  return stats;
}

struct ActivationSummary {
  std::vector<std::vector<double>> l2_sum;
  std::vector<std::vector<double>> zero_count;
  std::vector<std::vector<double>> total_count;
  double examples = 0.0;
};

ActivationSummary activation_summary(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                     std::size_t batch) {
  ActivationSummary s;
  for (const auto& l : model.conv_layers) {
    s.l2_sum.emplace_back(l.filters(), 0.0);
    s.zero_count.emplace_back(l.filters(), 0.0);
    s.total_count.emplace_back(l.filters(), 0.0);
  }
  for_probe_chunks(model, mask, probe, batch, [&](const ActivationCache& cache, std::span<const int> labels) {
    const std::size_t B = labels.size();
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
      const Tensor& a = cache.layers[l].post_activation;
      const std::size_t J = a.dim(1), pos = a.dim(2) * a.dim(3);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < J; ++j) {
          const std::size_t off = (b * J + j) * pos;
          double ss = 0.0, zeros = 0.0;
          for (std::size_t i = 0; i < pos; ++i) {
            ss += a[off + i] * a[off + i];
            if (a[off + i] == 0.0) zeros += 1.0;
          }
          s.l2_sum[l][j] += std::sqrt(ss);
          s.zero_count[l][j] += zeros;
          s.total_count[l][j] += static_cast<double>(pos);
        }
      }
    }
    s.examples += static_cast<double>(B);
  });
  return s;
}

// Gauss-Newton diagonal of the per-example softmax cross-entropy:
// sum_y p_y * (dl_y/dw)^2, averaged over the probe.
std::vector<std::vector<double>> hessian_saliency(const Model& model, const PruneMask& mask, const ProbeSet& probe) {
  std::vector<Tensor> gn;
  for (const auto& l : model.conv_layers) gn.emplace_back(l.weights.shape());
  const std::size_t C = model.spec.num_classes;
  for (std::size_t e = 0; e < probe.size(); ++e) {
    const Tensor x = slice_rows(probe.inputs, e, 1);
    const auto fr = forward(model, mask, x, Mode::Eval);
    const auto z = fr.logits.row(0);
    const double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += (p[c] = std::exp(z[c] - mx));
    for (double& v : p) v /= s;
    for (std::size_t y = 0; y < C; ++y) {
      if (p[y] < 1e-12) continue;
      const int label = static_cast<int>(y);
      const auto br = backward(model, mask, fr.cache, std::span<const int>(&label, 1));
      for (std::size_t l = 0; l < model.layer_count(); ++l) {
        const Tensor& g = br.grads.layers[l].weights;
        for (std::size_t i = 0; i < g.size(); ++i) gn[l][i] += p[y] * g[i] * g[i];
      }
    }
  }
  std::vector<std::vector<double>> sal;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const ConvLayer& layer = model.conv_layers[l];
    const std::size_t n = layer.filter_size();
    sal.emplace_back(layer.filters(), 0.0);
    for (std::size_t j = 0; j < layer.filters(); ++j) {
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = layer.weights[j * n + i];
        v += 0.5 * w * w * gn[l][j * n + i] / static_cast<double>(probe.size());
      }
      sal[l][j] = v;
    }
  }
  return sal;
}

void check_finite(const std::vector<RankingScore>& scores) {
  for (const auto& s : scores) {
    if (!std::isfinite(s.value)) {
      throw TrainingError("metric '" + to_string(s.metric) + "' produced a non-finite value for filter (" +
                          std::to_string(s.id.layer) + ", " + std::to_string(s.id.filter) + ")");
    }
  }
}

} // namespace

std::vector<RankingScore> metric_scores(const Model& model, const PruneMask& mask, Metric metric,
                                        const MetricInputs& in) {
  mask.validate(model);
  std::vector<RankingScore> out;
  switch (metric) {
  case Metric::Weights:
    out = per_live_filter(model, mask, metric, [&](FilterId id) {
      const ConvLayer& l = model.conv_layers[id.layer];
      return l2_norm(filter_matrix(l).row(id.filter));
    });
    break;
  case Metric::Random: {
    Rng rng(in.seed, {static_cast<std::uint64_t>(Stream::RandomMetric), in.iteration});
    out = per_live_filter(model, mask, metric, [&](FilterId) { return rng.uniform(); });
    break;
  }
  case Metric::Ortho: {
    std::vector<std::vector<double>> score(model.layer_count());
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
      const OrthoScores os = ortho_score(live_filter_rows(model.conv_layers[l], mask, l));
      score[l].assign(model.conv_layers[l].filters(), 0.0);
      std::size_t k = 0;
      for (std::size_t j = 0; j < model.conv_layers[l].filters(); ++j)
        if (mask.is_live(l, j)) {
          // A zero filter scores 1/J, which could outrank a redundant one; pin it below every nonzero filter.
          score[l][j] = os.zero_filters[k] ? 1.0 : os.score[k];
          ++k;
        }
    }
    out = per_live_filter(model, mask, metric, [&](FilterId id) { return -score[id.layer][id.filter]; });
    break;
  }
  case Metric::Activations:
  case Metric::Apoz: {
    const auto s = activation_summary(model, mask, need_probe(in, metric), in.batch_size);
    out = per_live_filter(model, mask, metric, [&](FilterId id) {
      if (metric == Metric::Activations) return s.l2_sum[id.layer][id.filter] / s.examples;
      return -s.zero_count[id.layer][id.filter] / s.total_count[id.layer][id.filter];
    });
    break;
  }
  case Metric::Gradients:
  case Metric::Taylor: {
    GradActStats probe_stats;
    const GradActStats* stats = in.recorded;
    if (stats == nullptr || !stats->has_data()) {
      if (in.probe == nullptr || in.probe->size() == 0) {
        throw ConfigError("metric '" + to_string(metric) + "' needs recorded statistics or a probe set");
      }
      probe_stats = probe_statistics(model, mask, *in.probe, in.batch_size);
      stats = &probe_stats;
    }
    out = per_live_filter(model, mask, metric, [&](FilterId id) {
      return metric == Metric::Gradients ? stats->grad_mean(id) : stats->taylor_mean(id);
    });
    break;
  }
  case Metric::Hessian: {
    const auto sal = hessian_saliency(model, mask, need_probe(in, metric));
    out = per_live_filter(model, mask, metric, [&](FilterId id) { return sal[id.layer][id.filter]; });
    break;
  }
  case Metric::Oracle:
    out = oracle_scores(model, mask, need_probe(in, metric), std::max<std::size_t>(in.batch_size, 1));
    break;
  }
  check_finite(out);
  return out;
}

std::vector<RankingScore> oracle_scores(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                        std::size_t batch_size) {
  if (probe.size() == 0) throw ConfigError("oracle needs a non-empty probe set");
  mask.validate(model);
  const double base = evaluate(model, mask, probe.inputs, probe.labels, batch_size).accuracy;
  ForwardOptions opts;
  opts.allow_empty_layers = true;
  return per_live_filter(model, mask, Metric::Oracle, [&](FilterId id) {
    PruneMask trial = mask;
    trial.set(id, false);
    return base - evaluate(model, trial, probe.inputs, probe.labels, batch_size, opts).accuracy;
  });
}

namespace {
std::vector<std::size_t> ascending_order(const std::vector<RankingScore>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].value != scores[b].value) return scores[a].value < scores[b].value;
    return scores[a].id < scores[b].id;
  });
  return order;
}
} // namespace

std::vector<FilterId> select_bottom(const std::vector<RankingScore>& scores, double p_percent) {
  if (!(p_percent > 0.0 && p_percent < 100.0)) {
    throw ConfigError("p_percent must lie strictly between 0 and 100, got " + std::to_string(p_percent));
  }
  check_finite(scores);
  const std::size_t live = scores.size();
  const auto count = static_cast<std::size_t>(std::floor(p_percent / 100.0 * static_cast<double>(live)));
  if (count >= live && live > 0) {
    throw ConfigError("pruning " + std::to_string(p_percent) + "% would mask every live filter");
  }
  std::map<std::size_t, std::size_t> remaining;
  for (const auto& s : scores) ++remaining[s.id.layer];

  std::vector<FilterId> picked;
  for (std::size_t idx : ascending_order(scores)) {
    if (picked.size() == count) break;
    const FilterId id = scores[idx].id;
    if (remaining[id.layer] <= 1) continue;
    --remaining[id.layer];
    picked.push_back(id);
  }
  if (picked.size() < count) {
    throw ConfigError("cannot prune " + std::to_string(count) + " filters without emptying a layer");
  }
  return picked;
}

std::vector<std::size_t> importance_ranks(const std::vector<RankingScore>& scores) {
  std::vector<std::size_t> ranks(scores.size());
  const auto order = ascending_order(scores);
  for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = r + 1;
  return ranks;
}

void write_scores_csv(std::ostream& os, const std::vector<RankingScore>& scores) {
  const auto ranks = importance_ranks(scores);
  os << "metric,layer,filter,value,rank\n";
  const auto old = os.precision(17);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    os << to_string(scores[i].metric) << ',' << scores[i].id.layer << ',' << scores[i].id.filter << ','
       << scores[i].value << ',' << ranks[i] << '\n';
  }
  os.precision(old);
}

} // namespace repr
