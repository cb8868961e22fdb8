// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "repr/config.hpp"
#include "repr/data.hpp"
#include "repr/scheduler.hpp"

namespace repr {

/// Loaded dataset with "train", "probe" and "test" splits, plus the
/// materialized views a run needs. Not copyable: `run.dataset` points into it.
struct PreparedData {
  Dataset dataset;
  RunData run;

  PreparedData() = default;
  PreparedData(const PreparedData&) = delete;
  PreparedData& operator=(const PreparedData&) = delete;
};

/**
 * Loads the configured files. The probe split is the last `probe_size`
 * examples of the training file, the train split the first `train_size` of
 * the remainder (all of it when 0), and the test split the first `test_size`
 * examples of the test file (all when 0).
 */
std::unique_ptr<PreparedData> prepare_data(const RunConfig& config);

/// Model spec with input geometry and class count taken from the data.
ModelSpec model_spec(const RunConfig& config, const Dataset& dataset);
Model initial_model(const RunConfig& config, const Dataset& dataset);
OptimizerState initial_optimizer(const RunConfig& config, const Model& model);
TrainOptions train_options(const RunConfig& config);

/// The baseline arm of a comparison: the same configuration without cycles.
RunConfig standard_arm(const RunConfig& config);

struct RunSummary {
  double final_test_acc = 0.0;
  double best_test_acc = 0.0;
  double final_train_acc = 0.0;
  double gap_tail_mean = 0.0; ///< train - test over the last 5 epochs
  double final_ortho_sum = 0.0;
};
RunSummary summarize(const MetricsLog& log);

/// Reads a metrics CSV written by write_metrics_csv.
std::vector<EpochRecord> read_metrics_csv(const std::string& path);

/// Subcommands. Each writes its artifacts under config.out_dir, prints a short
/// report to `out` and returns a process exit code.
int cmd_train(const RunConfig& config, std::ostream& out);
int cmd_compare(const RunConfig& config, std::ostream& out);
int cmd_oracle(const RunConfig& config, std::ostream& out);
int cmd_analyze(const RunConfig& config, std::ostream& out);

} // namespace repr
