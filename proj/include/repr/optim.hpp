// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "repr/network.hpp"
#include "repr/tensor.hpp"

namespace repr {

enum class OptimizerRule { Sgd, Momentum, Adam };

std::string to_string(OptimizerRule rule);
OptimizerRule parse_optimizer_rule(const std::string& name);

struct OptimizerHyper {
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const OptimizerHyper&) const = default;
};

/// Auxiliary tensors for one parameter. `first` is the velocity (momentum)
/// or first moment (Adam), `second` the Adam second moment, and `steps` the
/// per-element Adam step counter. Unused tensors stay empty.
struct ParamSlot {
  Tensor first;
  Tensor second;
  Tensor steps;
  bool operator==(const ParamSlot&) const = default;
};

struct OptimizerState {
  OptimizerRule rule = OptimizerRule::Sgd;
  double lr = 0.01;
  OptimizerHyper hyper;
  std::vector<ParamSlot> slots; ///< parallel to parameters(model)

  static OptimizerState create(OptimizerRule rule, double lr, const OptimizerHyper& hyper, const Model& model);
  bool operator==(const OptimizerState&) const = default;
};

/**
 * Applies one update with learning rate `state.lr`.
 *
 * Elements that belong to masked filters are skipped entirely: their
 * parameters and auxiliary state stay bit-identical. This covers the filter's
 * own weights, bias and batch-norm parameters plus the downstream slices that
 * read its (zeroed) output channel.
 *
 * Adam keeps a step counter per element, so a slot reset by reset_slots
 * restarts its own bias correction while its neighbours continue.
 */
void step(OptimizerState& state, Model& model, const Gradients& grads, const PruneMask& mask);

/// Zeroes velocity/moments and step counters for every slice of the selected
/// filters (see filter_slices); everything else is left untouched.
void reset_slots(OptimizerState& state, const Model& model, const std::vector<FilterId>& selection,
                 bool include_downstream);

struct LrSchedule {
  enum class Kind { Fixed, Step, Cyclic };
  Kind kind = Kind::Fixed;
  double base = 0.01;
  /// (epoch, lr) pairs; the last milestone at or before the epoch wins.
  std::vector<std::pair<double, double>> milestones;
  double period = 50.0;
  double amplitude = 0.005;

  /// Throws ConfigError when some epoch would get a non-positive rate.
  void validate() const;
};

std::string to_string(LrSchedule::Kind kind);
LrSchedule::Kind parse_schedule_kind(const std::string& name);

/// Learning rate at a (possibly fractional) epoch. The cyclic schedule is a
/// triangular wave: base at the start of each period, base + amplitude at
/// mid-period.
double lr_at(const LrSchedule& schedule, double epoch);

} // namespace repr
