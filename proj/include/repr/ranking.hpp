// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "repr/network.hpp"
#include "repr/tensor.hpp"

namespace repr {

/// Filter-importance metrics. Every metric follows one convention: a lower
/// importance value means the filter is dropped sooner.
enum class Metric { Random, Activations, Apoz, Gradients, Taylor, Hessian, Weights, Oracle, Ortho };

std::string to_string(Metric metric);
Metric parse_metric(const std::string& name);
const std::vector<Metric>& all_metrics();

struct RankingScore {
  FilterId id;
  double value = 0.0;
  Metric metric = Metric::Ortho;
};

/// Held-out examples used by data-driven metrics and the Oracle.
struct ProbeSet {
  Tensor inputs;          ///< [N, c, h, w]
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// Inter-filter orthogonality
// ---------------------------------------------------------------------------

struct OrthoMatrix {
  Tensor p;                       ///< [J, J] = |W_hat W_hat^T - I|
  std::vector<bool> zero_filters; ///< filters whose weights are all zero
};

/// P for a filter matrix [J, n] whose rows are normalized individually. A
/// zero row stays zero, which leaves 1 on its diagonal entry and 0 elsewhere
/// in its row and column; it is flagged in `zero_filters`.
OrthoMatrix ortho_matrix(const Tensor& filter_rows);
OrthoMatrix ortho_matrix(const ConvLayer& layer);

struct OrthoScores {
  std::vector<double> score; ///< row sum of P divided by J; higher = more redundant
  std::vector<bool> zero_filters;
};
OrthoScores ortho_score(const Tensor& filter_rows);
OrthoScores ortho_score(const ConvLayer& layer);

/// Rows of the layer's filter matrix that are live under `mask`.
Tensor live_filter_rows(const ConvLayer& layer, const PruneMask& mask, std::size_t layer_index);

// ---------------------------------------------------------------------------
// Recorded training statistics
// ---------------------------------------------------------------------------

/// Per-filter running means of gradient magnitude and Taylor saliency,
/// accumulated over training steps and reset at the start of every epoch.
struct GradActStats {
  std::vector<std::vector<double>> grad_abs;   ///< sum over steps of mean |dL/dw|
  std::vector<std::vector<double>> taylor;     ///< sum over examples of |mean_s a * dL/da|
  double steps = 0.0;
  double examples = 0.0;

  static GradActStats zeros(const Model& model);
  bool has_data() const { return steps > 0.0 && examples > 0.0; }
  void clear();

  /// Adds one step. `result` must carry activation gradients for the batch
  /// whose forward cache is `cache`.
  void accumulate(const Model& model, const PruneMask& mask, const ActivationCache& cache,
                  const BackwardResult& result);

  double grad_mean(FilterId id) const { return grad_abs[id.layer][id.filter] / steps; }
  double taylor_mean(FilterId id) const { return taylor[id.layer][id.filter] / examples; }
};

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct MetricInputs {
  const ProbeSet* probe = nullptr;
  const GradActStats* recorded = nullptr;
  std::uint64_t seed = 0;      ///< random metric
  std::uint64_t iteration = 0; ///< random metric
  std::size_t batch_size = 128;
};

/**
 * Importance of every live filter under `metric`.
 *
 *  - weights:     L2 norm of the flattened filter
 *  - activations: mean over probe examples of the L2 norm of the feature map
 *  - apoz:        minus the fraction of zero post-relu activations
 *  - gradients:   mean |dL/dw| over the filter's weights
 *  - taylor:      mean over examples of |spatial mean of a * dL/da|
 *  - hessian:     sum over the filter's weights of w^2 * H_ii / 2, with H_ii
 *                 the Gauss-Newton diagonal of the softmax cross-entropy
 *  - random:      seeded uniform draw
 *  - oracle:      accuracy drop on the probe when the filter is masked
 *  - ortho:       minus the orthogonality score within its layer
 *
 * Gradients and Taylor use `recorded` statistics when they hold data and
 * fall back to the probe otherwise. Throws ConfigError when a metric lacks
 * the data it needs.
 */
std::vector<RankingScore> metric_scores(const Model& model, const PruneMask& mask, Metric metric,
                                        const MetricInputs& inputs);

/// Greedy Oracle: base probe accuracy minus the accuracy with the filter
/// additionally masked, for every live filter.
std::vector<RankingScore> oracle_scores(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                        std::size_t batch_size = 256);

/**
 * Global bottom-p selection across all layers.
 *
 * Picks floor(p/100 * live) filters with the smallest importance, ties broken
 * by (layer, filter). A filter whose removal would leave its layer without
 * live filters is skipped in favour of the next candidate. Returns the
 * selection in ascending importance order.
 */
std::vector<FilterId> select_bottom(const std::vector<RankingScore>& scores, double p_percent);

/// 1-based rank of each score in ascending importance (tie-break by coordinate).
std::vector<std::size_t> importance_ranks(const std::vector<RankingScore>& scores);

/// CSV with columns metric,layer,filter,value,rank.
void write_scores_csv(std::ostream& os, const std::vector<RankingScore>& scores);

} // namespace repr
