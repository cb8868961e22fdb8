// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "repr/network.hpp"
#include "repr/ranking.hpp"
#include "repr/scheduler.hpp"

namespace repr {

enum class CorrelationMethod { Pearson, Cca };
std::string to_string(CorrelationMethod method);
CorrelationMethod parse_correlation_method(const std::string& name);

struct CorrelationOptions {
  CorrelationMethod method = CorrelationMethod::Pearson;
  /// Use the map before relu instead of after it.
  bool pre_activation = false;
  /// Relative singular-value cutoff for cca.
  double rank_tolerance = 1e-8;
  std::size_t batch_size = 128;
};

struct CorrelationReport {
  Tensor matrix;                          ///< [F, F] over every filter of every layer
  std::vector<FilterId> filters;          ///< row/column labels
  std::vector<std::size_t> layer_starts;  ///< first row of each layer
  std::vector<bool> constant;             ///< zero-variance signature; its coefficients are 0
  CorrelationMethod method = CorrelationMethod::Pearson;
  bool pre_activation = false;
};

/**
 * Filter-by-filter activation correlation over a probe set.
 *
 * pearson: each filter is summarized by its feature map averaged over space,
 * one value per probe example, and pairs are compared by Pearson correlation.
 *
 * cca: each filter contributes the [N, h*w] matrix of its feature maps; the
 * coefficient is the first canonical correlation between the two matrices,
 * computed from the singular vectors of the centred data truncated at
 * `rank_tolerance` relative to the largest singular value. It is only
 * informative when N exceeds h*w.
 *
 * Coefficients involving a constant filter are 0 and the filter is flagged.
 */
CorrelationReport activation_correlation(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                         const CorrelationOptions& options = {});

/// Heatmap grid: header row of "layer:filter" labels, one labelled row per filter.
void write_correlation_csv(std::ostream& os, const CorrelationReport& report);

/// Pearson correlation; 0 when either side has zero variance. Throws ConfigError for n < 2.
double pearson(std::span<const double> x, std::span<const double> y);
/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> x);
double spearman(std::span<const double> x, std::span<const double> y);

struct Agreement {
  double pearson = 0.0;
  double spearman = 0.0;
  std::size_t count = 0;
};

/// Pairs scores by filter coordinate; both lists must cover the same filters.
Agreement metric_agreement(const std::vector<RankingScore>& a, const std::vector<RankingScore>& b);

struct GapReport {
  std::vector<double> per_epoch; ///< train_acc - test_acc
  double tail_mean = 0.0;        ///< mean over the last `tail` epochs
};
GapReport generalization_gap(const std::vector<EpochRecord>& rows, std::size_t tail = 5);

} // namespace repr
