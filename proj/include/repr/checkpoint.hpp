// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "repr/network.hpp"
#include "repr/optim.hpp"
#include "repr/scheduler.hpp"

namespace repr {

/// Everything needed to continue a run bit-exactly.
struct Checkpoint {
  Model model;
  OptimizerState optimizer;
  CycleState cycle;
};

inline constexpr int kCheckpointVersion = 1;

/**
 * Container layout: an ASCII header
 *
 *   repr-checkpoint <version>
 *   meta <key> <value>            (scalars, model spec, cycle state, events)
 *   array <name> f64 <rank> <extents...>
 *   end
 *
 * followed by the arrays' values as little-endian IEEE-754 doubles, in
 * manifest order. The file is written to a temporary name and renamed.
 */
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);

/// Throws FormatError on a version mismatch, a malformed header, or a payload
/// whose length disagrees with the manifest (naming the array concerned).
Checkpoint load_checkpoint(const std::string& path);

} // namespace repr
