// SPDX-License-Identifier: Apache-2.0
#include "repr/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "repr/errors.hpp"
#include "repr/rng.hpp"

namespace repr {

void ReprSchedule::validate() const {
  if (s1 < 1) throw ConfigError("s1 must be >= 1");
  if (s2 < 1) throw ConfigError("s2 must be >= 1");
  if (!(p_percent > 0.0 && p_percent < 100.0)) throw ConfigError("p_percent must lie in (0, 100)");
  if (!(reinit_scale > 0.0)) throw ConfigError("reinit_scale must be positive");
  if (staged_prune_batches < 1) throw ConfigError("staged_prune_batches must be >= 1");
  if (!(ortho_loss_lambda >= 0.0)) throw ConfigError("ortho_loss_lambda must be >= 0");
}

std::string to_string(Phase phase) { return phase == Phase::Full ? "full" : "sub"; }

Phase parse_phase(const std::string& name) {
  if (name == "full") return Phase::Full;
  if (name == "sub") return Phase::Sub;
  throw ConfigError("unknown phase '" + name + "'");
}

CycleState CycleState::initial(const Model& model, const ReprSchedule& schedule) {
  CycleState c;
  c.mask = PruneMask::all_live(model);
  c.events.push_back({0, schedule.n > 0 ? "full" : "residual", 0, {}});
  return c;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace

std::string format_metrics_row(const EpochRecord& r) {
  std::ostringstream os;
  os << r.epoch << ',' << to_string(r.phase) << ',' << r.iteration << ',' << num(r.train_acc) << ','
     << num(r.test_acc) << ',' << num(r.train_loss) << ',' << num(r.ortho_sum) << ',' << r.live_filters << ','
     << num(r.lr);
  return os.str();
}

void write_metrics_csv(std::ostream& os, const std::vector<EpochRecord>& rows, bool header) {
  if (header) os << "epoch,phase,iteration,train_acc,test_acc,train_loss,ortho_sum,live_filters,lr\n";
  for (const auto& r : rows) os << format_metrics_row(r) << '\n';
}

void write_events_csv(std::ostream& os, const std::vector<CycleEvent>& events) {
  os << "epoch,event,iteration,detail\n";
  for (const auto& e : events) os << e.epoch << ',' << e.kind << ',' << e.iteration << ',' << e.detail << '\n';
}

// ---------------------------------------------------------------------------
// Orthogonality loss
// ---------------------------------------------------------------------------

double ortho_loss(const Model& model) {
  double total = 0.0;
  for (const auto& layer : model.conv_layers) {
    const OrthoMatrix m = ortho_matrix(layer);
    for (double v : m.p.data()) total += v;
  }
  return total;
}

OrthoLossResult ortho_loss_with_grad(const Model& model) {
  OrthoLossResult out{0.0, Gradients::zeros_like(model)};
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const ConvLayer& layer = model.conv_layers[l];
    const Tensor w = filter_matrix(layer);
    const RowNormalized rn = row_normalize(w);
    const Tensor g = matmul(rn.rows, transpose(rn.rows));
    const std::size_t J = w.dim(0);
    const std::size_t n = w.dim(1);
    // S holds sign(G - I) off the diagonal; the diagonal of G is 1 (or 0 for a
    // zero row) and contributes a constant.
    Tensor s({J, J});
    for (std::size_t i = 0; i < J; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        const double v = g.at(i, j) - (i == j ? 1.0 : 0.0);
        out.value += std::abs(i == j && !rn.zero_rows[i] ? 0.0 : v);
        if (i != j) s.at(i, j) = (v > 0.0) - (v < 0.0);
      }
    }
    const Tensor d_hat = matmul(s, rn.rows); // half of dL/dW_hat
    Tensor& gw = out.grad.layers[l].weights;
    for (std::size_t i = 0; i < J; ++i) {
      if (rn.zero_rows[i]) continue;
      const double norm = l2_norm(w.row(i));
      const auto h = rn.rows.row(i);
      double proj = 0.0;
      for (std::size_t k = 0; k < n; ++k) proj += h[k] * 2.0 * d_hat.at(i, k);
      for (std::size_t k = 0; k < n; ++k) gw[i * n + k] = (2.0 * d_hat.at(i, k) - h[k] * proj) / norm;
    }
  }
  return out;
}

double ortho_sum(const Model& model, const PruneMask& mask) {
  double total = 0.0;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const Tensor rows = live_filter_rows(model.conv_layers[l], mask, l);
    if (rows.dim(0) == 0) continue;
    for (double v : ortho_score(rows).score) total += v;
  }
  return total;
}

double ortho_sum(const Model& model) { return ortho_sum(model, PruneMask::all_live(model)); }

// ---------------------------------------------------------------------------
// Staged pruning
// ---------------------------------------------------------------------------

std::vector<std::vector<FilterId>> staged_prune(const std::vector<FilterId>& selection, std::size_t batches) {
  if (batches < 1) throw ConfigError("staged prune needs at least one batch");
  std::vector<std::vector<FilterId>> chunks(batches);
  const std::size_t base = selection.size() / batches;
  const std::size_t extra = selection.size() % batches;
  std::size_t next = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t count = base + (b < extra ? 1 : 0);
    chunks[b].assign(selection.begin() + static_cast<std::ptrdiff_t>(next),
                     selection.begin() + static_cast<std::ptrdiff_t>(next + count));
    next += count;
  }
  return chunks;
}

// ---------------------------------------------------------------------------
// Re-initialization
// ---------------------------------------------------------------------------

namespace {

double max_normalized_dot(std::span<const double> v, const Tensor& constraints) {
  const double vn = l2_norm(v);
  double worst = 0.0;
  if (vn == 0.0) return worst;
  for (std::size_t r = 0; r < constraints.dim(0); ++r) {
    const double cn = l2_norm(constraints.row(r));
    if (cn == 0.0) continue;
    worst = std::max(worst, std::abs(dot(v, constraints.row(r))) / (vn * cn));
  }
  return worst;
}

void reinit_layer(Model& model, std::size_t l, const std::vector<std::size_t>& dropped, const ReinitOptions& opt,
                  std::vector<ReinitRecord>& records) {
  ConvLayer& layer = model.conv_layers[l];
  const Tensor w = filter_matrix(layer);
  const std::size_t J = w.dim(0);
  const std::size_t n = w.dim(1);

  std::vector<bool> is_dropped(J, false);
  for (std::size_t f : dropped) is_dropped[f] = true;

  // Constraint rows: live filters first, then the dropped filters' current
  // (pre-drop) values.
  std::vector<std::size_t> order;
  for (std::size_t j = 0; j < J; ++j)
    if (!is_dropped[j]) order.push_back(j);
  const std::size_t live = order.size();
  for (std::size_t j = 0; j < J; ++j)
    if (is_dropped[j]) order.push_back(j);
  Tensor constraints({J, n});
  for (std::size_t r = 0; r < J; ++r) std::copy_n(w.row(order[r]).begin(), n, constraints.row(r).begin());

  double live_norm = 0.0;
  for (std::size_t r = 0; r < live; ++r) live_norm += l2_norm(constraints.row(r));
  if (live > 0) live_norm /= static_cast<double>(live);
  if (live_norm == 0.0) {
    for (std::size_t r = live; r < J; ++r) live_norm += l2_norm(constraints.row(r));
    live_norm /= static_cast<double>(J - live);
  }
  if (live_norm == 0.0) live_norm = 1.0;
  const double target = opt.scale * live_norm;

  const Tensor vectors = transpose(constraints);
  const double tol = default_null_tolerance(constraints);
  SpanBasis span = householder_span(vectors, tol > 0.0 ? tol : 1e-300, n);
  const bool degenerate = span.rank >= n;
  if (degenerate) {
    const std::size_t keep = n > dropped.size() ? n - dropped.size() : 0;
    span = householder_span(vectors, tol > 0.0 ? tol : 1e-300, keep);
  }
  const std::size_t free_dim = n - span.rank;

  std::vector<std::vector<double>> drawn;
  for (std::size_t f : dropped) {
    Rng rng(opt.seed, {static_cast<std::uint64_t>(Stream::Reinit), opt.iteration, l, f});
    std::vector<double> v(n, 0.0);
    for (std::size_t c = 0; c < free_dim; ++c) {
      const double coef = rng.normal();
      for (std::size_t k = 0; k < n; ++k) v[k] += coef * span.q.at(k, span.rank + c);
    }
    // Keep the new filters mutually orthogonal while the free space allows it.
    if (drawn.size() < free_dim) {
      for (int pass = 0; pass < 2; ++pass) {
        for (const auto& d : drawn) {
          const double a = dot(v, d);
          for (std::size_t k = 0; k < n; ++k) v[k] -= a * d[k];
        }
      }
    }
    const double norm = l2_norm(v);
    if (norm > 0.0) {
      for (double& x : v) x /= norm;
      drawn.push_back(v);
    }

    ReinitRecord rec;
    rec.id = {l, f};
    rec.degenerate = degenerate;
    rec.null_dim = degenerate ? 0 : free_dim;
    rec.max_normalized_dot = max_normalized_dot(v, constraints);
    records.push_back(rec);

    for (double& x : v) x *= target;
    set_filter_row(layer, f, v);
    layer.bias[f] = 0.0;
    if (layer.bn) layer.bn->reset_filter(f);
  }

  if (!opt.next_layer_kernels) return;
  for (std::size_t f : dropped) {
    Rng rng(opt.seed, {static_cast<std::uint64_t>(Stream::NextLayerReinit), opt.iteration, l, f});
    if (l + 1 < model.layer_count()) {
      ConvLayer& next = model.conv_layers[l + 1];
      const std::size_t kk = next.kernel() * next.kernel();
      const double std = opt.scale * std::sqrt(2.0 / static_cast<double>(next.filter_size()));
      for (std::size_t j = 0; j < next.filters(); ++j)
        for (std::size_t e = 0; e < kk; ++e) next.weights[(j * next.channels() + f) * kk + e] = rng.normal(0.0, std);
    } else {
      const std::size_t hw = model.out_height(l) * model.out_width(l);
      const std::size_t D = model.flattened_dim();
      for (std::size_t c = 0; c < model.spec.num_classes; ++c)
        for (std::size_t e = 0; e < hw; ++e) model.fc_weights[c * D + f * hw + e] = rng.normal(0.0, opt.scale * 0.01);
    }
  }
}

} // namespace

std::vector<ReinitRecord> reinit_filters(Model& model, const std::vector<FilterId>& dropped,
                                         const ReinitOptions& options) {
  std::vector<std::vector<std::size_t>> per_layer(model.layer_count());
  for (const FilterId& id : dropped) {
    if (id.layer >= model.layer_count() || id.filter >= model.conv_layers[id.layer].filters()) {
      throw ConfigError("reinit coordinate (" + std::to_string(id.layer) + ", " + std::to_string(id.filter) +
                        ") out of range");
    }
    per_layer[id.layer].push_back(id.filter);
  }
  std::vector<ReinitRecord> records;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    auto& fs = per_layer[l];
    if (fs.empty()) continue;
    std::sort(fs.begin(), fs.end());
    fs.erase(std::unique(fs.begin(), fs.end()), fs.end());
    reinit_layer(model, l, fs, options, records);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

ReprTrainer::ReprTrainer(Model model, OptimizerState optimizer, ReprSchedule schedule, TrainOptions options)
    : ReprTrainer(model, std::move(optimizer), schedule, std::move(options), CycleState::initial(model, schedule)) {}

ReprTrainer::ReprTrainer(Model model, OptimizerState optimizer, ReprSchedule schedule, TrainOptions options,
                         CycleState cycle)
    : model_(std::move(model)), optimizer_(std::move(optimizer)), schedule_(schedule), options_(std::move(options)),
      cycle_(std::move(cycle)) {
  schedule_.validate();
  options_.lr.validate();
  model_.check_consistency();
  cycle_.mask.validate(model_);
  if (options_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (options_.epochs < schedule_.cycle_epochs()) {
    throw ConfigError("epoch budget " + std::to_string(options_.epochs) + " is shorter than the " +
                      std::to_string(schedule_.cycle_epochs()) + " epochs the cycles need");
  }
  stats_ = GradActStats::zeros(model_);
}

bool ReprTrainer::needs_recorded_stats() const {
  return schedule_.n > 0 && (schedule_.metric == Metric::Gradients || schedule_.metric == Metric::Taylor);
}

void ReprTrainer::log_event(std::size_t epoch, std::string kind, std::string detail) {
  cycle_.events.push_back({epoch, std::move(kind), cycle_.iteration, std::move(detail)});
}

MetricsLog ReprTrainer::run(const RunData& data, const EpochHook& hook) {
  if (data.dataset == nullptr) throw ConfigError("run needs a dataset");
  MetricsLog log;
  while (cycle_.next_epoch < options_.epochs) {
    const std::size_t epoch = cycle_.next_epoch;
    log.rows.push_back(train_epoch(data, epoch));
    cycle_.next_epoch = epoch + 1;
    ++cycle_.epoch_in_phase;
    boundary_actions(data, epoch + 1);
    if (hook) hook(log.rows.back(), *this);
  }
  log.events = cycle_.events;
  return log;
}

EpochRecord ReprTrainer::train_epoch(const RunData& data, std::size_t epoch) {
  const auto batches = make_batches(*data.dataset, "train", options_.batch_size, options_.seed, epoch, options_.augment);
  const bool record = needs_recorded_stats();
  stats_.clear();

  EpochRecord row;
  row.epoch = epoch + 1;
  row.phase = cycle_.phase;
  row.iteration = cycle_.iteration;
  row.lr = lr_at(options_.lr, static_cast<double>(epoch));

  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t s = 0; s < batches.size(); ++s) {
    if (!cycle_.pending_chunks.empty()) {
      for (const FilterId& id : cycle_.pending_chunks.front()) cycle_.mask.set(id, false);
      cycle_.pending_chunks.erase(cycle_.pending_chunks.begin());
    }
    const Batch& b = batches[s];
    optimizer_.lr = lr_at(options_.lr, static_cast<double>(epoch) + static_cast<double>(s) / batches.size());

    ForwardOptions fo;
    fo.dropout_seed = derive_seed(options_.seed, {static_cast<std::uint64_t>(Stream::Dropout), epoch, s});
    ForwardResult fwd = forward(model_, cycle_.mask, b.images, Mode::Train, fo);
    BackwardResult bwd = backward(model_, cycle_.mask, fwd.cache, b.labels, {record});
    double objective = bwd.loss;
    if (schedule_.ortho_loss_lambda > 0.0) {
      const OrthoLossResult ol = ortho_loss_with_grad(model_);
      objective += schedule_.ortho_loss_lambda * ol.value;
      bwd.grads.add_scaled(ol.grad, schedule_.ortho_loss_lambda);
    }
    if (!std::isfinite(objective)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(s) +
                          " (lr " + num(optimizer_.lr) + ")");
    }
    if (record) stats_.accumulate(model_, cycle_.mask, fwd.cache, bwd);
    step(optimizer_, model_, bwd.grads, cycle_.mask);
    if (model_.spec.batch_norm) update_running_stats(model_, cycle_.mask, fwd.cache);

    loss_sum += bwd.loss * static_cast<double>(b.labels.size());
    correct += count_correct(fwd.logits, b.labels);
    seen += b.labels.size();
  }

  row.train_loss = loss_sum / static_cast<double>(seen);
  row.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
  row.test_acc = data.test.size() > 0
                     ? evaluate(model_, cycle_.mask, data.test.images, data.test.labels, options_.eval_batch_size).accuracy
                     : 0.0;
  row.ortho_sum = ortho_sum(model_, cycle_.mask);
  row.live_filters = cycle_.mask.live_count();
  return row;
}

void ReprTrainer::boundary_actions(const RunData& data, std::size_t completed) {
  const std::size_t cycle_len = schedule_.s1 + schedule_.s2;
  const std::size_t start = cycle_.iteration * cycle_len;
  if (cycle_.iteration >= schedule_.n) return;

  if (cycle_.phase == Phase::Full && completed == start + schedule_.s1) {
    MetricInputs in;
    in.probe = data.probe.size() > 0 ? &data.probe : nullptr;
    in.recorded = &stats_;
    in.seed = options_.seed;
    in.iteration = cycle_.iteration;
    const auto scores = metric_scores(model_, cycle_.mask, schedule_.metric, in);
    const auto selection = select_bottom(scores, schedule_.p_percent);
    log_event(completed, "rank", to_string(schedule_.metric));

    std::vector<std::size_t> per_layer(model_.layer_count(), 0);
    for (const auto& id : selection) ++per_layer[id.layer];
    std::string detail = "count=" + std::to_string(selection.size()) + ";per_layer=";
    for (std::size_t l = 0; l < per_layer.size(); ++l) detail += (l ? "/" : "") + std::to_string(per_layer[l]);
    log_event(completed, "prune", detail);

    cycle_.dropped = selection;
    cycle_.pending_chunks = staged_prune(selection, schedule_.staged_prune_batches);
    cycle_.phase = Phase::Sub;
    cycle_.epoch_in_phase = 0;
    log_event(completed, "sub");
    return;
  }

  if (cycle_.phase == Phase::Sub && completed == start + cycle_len) {
    for (const auto& chunk : cycle_.pending_chunks)
      for (const FilterId& id : chunk) cycle_.mask.set(id, false);
    cycle_.pending_chunks.clear();

    ReinitOptions ro;
    ro.scale = schedule_.reinit_scale;
    ro.next_layer_kernels = schedule_.reinit_next_layer_kernels;
    ro.seed = options_.seed;
    ro.iteration = cycle_.iteration;
    const auto records = reinit_filters(model_, cycle_.dropped, ro);
    reset_slots(optimizer_, model_, cycle_.dropped, schedule_.reinit_next_layer_kernels);

    double worst = 0.0;
    std::size_t degenerate = 0;
    for (const auto& r : records) {
      worst = std::max(worst, r.max_normalized_dot);
      if (r.degenerate) ++degenerate;
    }
    log_event(completed, "reinit",
              "count=" + std::to_string(records.size()) + ";degenerate=" + std::to_string(degenerate) +
                  ";max_dot=" + num(worst));
    for (const auto& r : records) {
      if (!r.degenerate) continue;
      log_event(completed, "degenerate_reinit",
                std::to_string(r.id.layer) + ":" + std::to_string(r.id.filter) + ";max_dot=" +
                    num(r.max_normalized_dot));
    }

    cycle_.mask = PruneMask::all_live(model_);
    cycle_.dropped.clear();
    cycle_.phase = Phase::Full;
    cycle_.epoch_in_phase = 0;
    ++cycle_.iteration;
    log_event(completed, cycle_.iteration < schedule_.n ? "full" : "residual");
  }
}

MetricsLog run_repr(Model& model, OptimizerState& optimizer, const ReprSchedule& schedule,
                    const TrainOptions& options, const RunData& data) {
  ReprTrainer trainer(model, optimizer, schedule, options);
  MetricsLog log = trainer.run(data);
  model = trainer.model();
  optimizer = trainer.optimizer();
  return log;
}

} // namespace repr
