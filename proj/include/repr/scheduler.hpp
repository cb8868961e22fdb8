// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "repr/data.hpp"
#include "repr/network.hpp"
#include "repr/optim.hpp"
#include "repr/ranking.hpp"

namespace repr {

struct ReprSchedule {
  std::size_t s1 = 20; ///< epochs of full-network training per cycle
  std::size_t s2 = 10; ///< epochs of sub-network training per cycle
  std::size_t n = 3;   ///< number of cycles
  double p_percent = 30.0;
  Metric metric = Metric::Ortho;
  double reinit_scale = 0.1;
  bool reinit_next_layer_kernels = false;
  std::size_t staged_prune_batches = 1;
  double ortho_loss_lambda = 0.0;

  void validate() const;
  /// Epochs consumed by the n cycles.
  std::size_t cycle_epochs() const { return n * (s1 + s2); }
};

enum class Phase { Full, Sub };
std::string to_string(Phase phase);
Phase parse_phase(const std::string& name);

/// Event kinds: full, rank, prune, sub, reinit, degenerate_reinit, residual.
struct CycleEvent {
  std::size_t epoch = 0; ///< completed epochs when the event fired
  std::string kind;
  std::size_t iteration = 0;
  std::string detail;
  bool operator==(const CycleEvent&) const = default;
};

struct CycleState {
  Phase phase = Phase::Full;
  std::size_t iteration = 0;      ///< completed cycles
  std::size_t epoch_in_phase = 0;
  std::size_t next_epoch = 0;     ///< epochs completed so far
  PruneMask mask;
  std::vector<FilterId> dropped;  ///< selection of the current sub phase
  std::vector<std::vector<FilterId>> pending_chunks; ///< staged prune chunks not yet applied
  std::vector<CycleEvent> events;

  static CycleState initial(const Model& model, const ReprSchedule& schedule);
  bool operator==(const CycleState&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0; ///< 1-based
  Phase phase = Phase::Full;
  std::size_t iteration = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double train_loss = 0.0;
  double ortho_sum = 0.0;
  std::size_t live_filters = 0;
  double lr = 0.0;
};

struct MetricsLog {
  std::vector<EpochRecord> rows;
  std::vector<CycleEvent> events;
};

/// Header: epoch,phase,iteration,train_acc,test_acc,train_loss,ortho_sum,live_filters,lr
void write_metrics_csv(std::ostream& os, const std::vector<EpochRecord>& rows, bool header = true);
std::string format_metrics_row(const EpochRecord& row);
void write_events_csv(std::ostream& os, const std::vector<CycleEvent>& events);

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Sum over conv layers of every entry of |W_hat W_hat^T - I| (all filters).
double ortho_loss(const Model& model);

struct OrthoLossResult {
  double value = 0.0;
  Gradients grad; ///< only conv weights are nonzero
};
OrthoLossResult ortho_loss_with_grad(const Model& model);

/// Sum of per-filter orthogonality scores, each layer restricted to its live filters.
double ortho_sum(const Model& model, const PruneMask& mask);
double ortho_sum(const Model& model);

/// Splits a selection into `batches` consecutive chunks; the first
/// (size % batches) chunks hold one extra filter. Order is preserved.
std::vector<std::vector<FilterId>> staged_prune(const std::vector<FilterId>& selection, std::size_t batches);

struct ReinitOptions {
  double scale = 0.1;
  bool next_layer_kernels = false;
  std::uint64_t seed = 0;
  std::uint64_t iteration = 0;
};

struct ReinitRecord {
  FilterId id;
  bool degenerate = false;
  /// max over nonzero constraint rows of |<new, row>| / (|new| |row|)
  double max_normalized_dot = 0.0;
  std::size_t null_dim = 0;
};

/**
 * Re-draws the dropped filters orthogonally to the layer's current filter
 * bank. The bank holds the live filters and the dropped filters' frozen
 * pre-drop values, so the constraint is joint over both.
 *
 * Each new filter is a seeded Gaussian combination of the null-space basis,
 * orthogonalized against the filters already re-drawn in the same layer while
 * the null space has room, and scaled to `scale` times the mean norm of the
 * layer's live filters. When the null space is empty, the constraint set is
 * truncated to its leading independent directions (live filters first) and
 * the residual of the random draw against them is used instead; the record
 * is marked degenerate.
 *
 * Bias becomes 0 and batch norm is reset for the filter. With
 * `next_layer_kernels`, the consuming kernels of the next layer (or the fc
 * columns) are re-drawn at `scale` times their init std. Optimizer state is
 * not touched here.
 */
std::vector<ReinitRecord> reinit_filters(Model& model, const std::vector<FilterId>& dropped,
                                         const ReinitOptions& options);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  bool augment = false;
  LrSchedule lr;
  std::size_t eval_batch_size = 256;
};

/// Inputs of a run. Batches come from the dataset's "train" split.
struct RunData {
  const Dataset* dataset = nullptr;
  Subset test;
  ProbeSet probe;
};

/**
 * Drives the cycle: S1 epochs on the full network, rank and select the bottom
 * p%, S2 epochs on the sub-network, re-initialize the dropped filters and
 * reset their optimizer state, repeated n times; then plain training until
 * the epoch budget. Boundary actions run after the epoch that completes a
 * phase, so events carry the number of completed epochs.
 */
class ReprTrainer {
public:
  /// Called after every epoch's boundary actions with that epoch's row.
  using EpochHook = std::function<void(const EpochRecord& row, const ReprTrainer&)>;

  ReprTrainer(Model model, OptimizerState optimizer, ReprSchedule schedule, TrainOptions options);
  /// Continues from saved state; `cycle.next_epoch` epochs are treated as done.
  ReprTrainer(Model model, OptimizerState optimizer, ReprSchedule schedule, TrainOptions options,
              CycleState cycle);

  /// Trains until the epoch budget. Throws TrainingError on a non-finite loss.
  MetricsLog run(const RunData& data, const EpochHook& hook = {});

  const Model& model() const { return model_; }
  const OptimizerState& optimizer() const { return optimizer_; }
  const CycleState& cycle() const { return cycle_; }
  const ReprSchedule& schedule() const { return schedule_; }
  const TrainOptions& options() const { return options_; }

private:
  EpochRecord train_epoch(const RunData& data, std::size_t epoch);
  void boundary_actions(const RunData& data, std::size_t completed);
  void log_event(std::size_t epoch, std::string kind, std::string detail = {});
  bool needs_recorded_stats() const;

  Model model_;
  OptimizerState optimizer_;
  ReprSchedule schedule_;
  TrainOptions options_;
  CycleState cycle_;
  GradActStats stats_;
};

/// Convenience wrapper: trains `model` in place and returns its log.
MetricsLog run_repr(Model& model, OptimizerState& optimizer, const ReprSchedule& schedule,
                    const TrainOptions& options, const RunData& data);

} // namespace repr
