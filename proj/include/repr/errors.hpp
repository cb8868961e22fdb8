// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace repr {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent configuration: bad mask, bad coordinates, missing inputs.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file on disk (dataset or checkpoint).
class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or otherwise cannot continue.
class TrainingError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace repr
