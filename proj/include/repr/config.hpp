// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "repr/analysis.hpp"
#include "repr/network.hpp"
#include "repr/optim.hpp"
#include "repr/scheduler.hpp"

namespace repr {

/// Fully resolved run configuration.
struct RunConfig {
  ModelSpec model; ///< input geometry and class count are filled in from the data

  OptimizerRule optimizer = OptimizerRule::Momentum;
  OptimizerHyper hyper;
  LrSchedule lr;
  ReprSchedule repr;

  std::string data_format = "idx";
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<std::string> cifar_train, cifar_test;
  std::size_t train_size = 0; ///< 0 = everything not held out for the probe
  std::size_t probe_size = 500;
  std::size_t test_size = 0;  ///< 0 = the whole test file

  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  bool augment = false;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::size_t checkpoint_every = 0;
  std::string resume;     ///< checkpoint to continue training from
  std::string checkpoint; ///< checkpoint inspected by oracle / analyze
  std::string analyze_log; ///< metrics CSV whose generalization gap analyze reports
  CorrelationMethod correlation = CorrelationMethod::Pearson;
  bool correlation_pre_activation = false;

  /// Every key with its resolved textual value.
  std::map<std::string, std::string> values;
};

/// Known keys with their default values, in documentation order.
const std::vector<std::pair<std::string, std::string>>& config_defaults();

struct ConfigSources {
  std::optional<std::string> file;                         ///< key=value file
  std::optional<std::string> env_out_dir;                  ///< REPR_OUT_DIR
  std::vector<std::pair<std::string, std::string>> flags;  ///< command-line overrides
};

/**
 * Resolves defaults < file < environment < flags.
 *
 * The file holds one key=value per line; blank lines and text after '#' are
 * ignored. Relative data and checkpoint paths in the file are taken relative
 * to the file's directory. Unknown keys, malformed values and invariant
 * violations are all collected and reported together in one ConfigError.
 */
RunConfig parse_config(const ConfigSources& sources);

/// Throws ConfigError listing every data file that does not exist.
void check_files(const RunConfig& config);

/// key=value lines in the order of config_defaults().
std::string render_config(const RunConfig& config);

} // namespace repr
