// SPDX-License-Identifier: Apache-2.0
#include "repr/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "repr/errors.hpp"

namespace repr {

std::string to_string(OptimizerRule rule) {
  switch (rule) {
  case OptimizerRule::Sgd: return "sgd";
  case OptimizerRule::Momentum: return "momentum";
  case OptimizerRule::Adam: return "adam";
  }
  return "?";
}

OptimizerRule parse_optimizer_rule(const std::string& name) {
  if (name == "sgd") return OptimizerRule::Sgd;
  if (name == "momentum") return OptimizerRule::Momentum;
  if (name == "adam") return OptimizerRule::Adam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd, momentum or adam)");
}

OptimizerState OptimizerState::create(OptimizerRule rule, double lr, const OptimizerHyper& hyper,
                                      const Model& model) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  OptimizerState s;
  s.rule = rule;
  s.lr = lr;
  s.hyper = hyper;
  for (const Tensor* p : parameters(model)) {
    ParamSlot slot;
    if (rule != OptimizerRule::Sgd) slot.first = Tensor(p->shape());
    if (rule == OptimizerRule::Adam) {
      slot.second = Tensor(p->shape());
      slot.steps = Tensor(p->shape());
    }
    s.slots.push_back(std::move(slot));
  }
  return s;
}

namespace {

// frozen[param][element] for the current mask; empty vectors when nothing is frozen.
std::vector<std::vector<std::uint8_t>> frozen_elements(const Model& model, const PruneMask& mask,
                                                       const std::vector<Tensor*>& params) {
  std::vector<std::vector<std::uint8_t>> frozen(params.size());
  for (const FilterId& id : mask.dead_filters()) {
    for (const ParamSlice& s : filter_slices(model, id, true)) {
      auto& f = frozen[s.param];
      if (f.empty()) f.assign(params[s.param]->size(), 0);
      std::fill_n(f.begin() + static_cast<std::ptrdiff_t>(s.offset), s.length, std::uint8_t{1});
    }
  }
  return frozen;
}

} // namespace

void step(OptimizerState& state, Model& model, const Gradients& grads, const PruneMask& mask) {
  mask.validate(model);
  auto params = parameters(model);
  const auto gparams = parameters(grads);
  if (params.size() != state.slots.size() || gparams.size() != params.size()) {
    throw ConfigError("optimizer state does not match model parameters");
  }
  const auto frozen = frozen_elements(model, mask, params);
  const double lr = state.lr;
  const auto& h = state.hyper;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const Tensor& g = *gparams[p];
    ParamSlot& slot = state.slots[p];
    if (g.shape() != w.shape()) {
      throw ConfigError("gradient shape " + shape_string(g.shape()) + " does not match parameter " +
                        shape_string(w.shape()));
    }
    const auto& fz = frozen[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!fz.empty() && fz[i]) continue;
      switch (state.rule) {
      case OptimizerRule::Sgd:
        w[i] -= lr * g[i];
        break;
      case OptimizerRule::Momentum:
        slot.first[i] = h.momentum * slot.first[i] + g[i];
        w[i] -= lr * slot.first[i];
        break;
      case OptimizerRule::Adam: {
        slot.first[i] = h.beta1 * slot.first[i] + (1.0 - h.beta1) * g[i];
        slot.second[i] = h.beta2 * slot.second[i] + (1.0 - h.beta2) * g[i] * g[i];
        slot.steps[i] += 1.0;
        const double m_hat = slot.first[i] / (1.0 - std::pow(h.beta1, slot.steps[i]));
        const double v_hat = slot.second[i] / (1.0 - std::pow(h.beta2, slot.steps[i]));
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + h.epsilon);
        break;
      }
      }
    }
  }
}

void reset_slots(OptimizerState& state, const Model& model, const std::vector<FilterId>& selection,
                 bool include_downstream) {
  for (const FilterId& id : selection) {
    for (const ParamSlice& s : filter_slices(model, id, include_downstream)) {
      ParamSlot& slot = state.slots.at(s.param);
      for (Tensor* t : {&slot.first, &slot.second, &slot.steps}) {
        if (t->empty()) continue;
        std::fill_n(t->data().begin() + static_cast<std::ptrdiff_t>(s.offset), s.length, 0.0);
      }
    }
  }
}

std::string to_string(LrSchedule::Kind kind) {
  switch (kind) {
  case LrSchedule::Kind::Fixed: return "fixed";
  case LrSchedule::Kind::Step: return "step";
  case LrSchedule::Kind::Cyclic: return "cyclic";
  }
  return "?";
}

LrSchedule::Kind parse_schedule_kind(const std::string& name) {
  if (name == "fixed") return LrSchedule::Kind::Fixed;
  if (name == "step") return LrSchedule::Kind::Step;
  if (name == "cyclic") return LrSchedule::Kind::Cyclic;
  throw ConfigError("unknown lr schedule '" + name + "' (expected fixed, step or cyclic)");
}

void LrSchedule::validate() const {
  if (!(base > 0.0)) throw ConfigError("base learning rate must be positive");
  if (kind == Kind::Step) {
    for (const auto& [epoch, lr] : milestones) {
      if (!(lr > 0.0)) throw ConfigError("lr milestone at epoch " + std::to_string(epoch) + " is not positive");
      if (epoch < 0.0) throw ConfigError("lr milestone epochs must be >= 0");
    }
  }
  if (kind == Kind::Cyclic) {
    if (!(period > 0.0)) throw ConfigError("cyclic lr period must be positive");
    if (amplitude < 0.0) throw ConfigError("cyclic lr amplitude must be >= 0");
  }
}

double lr_at(const LrSchedule& schedule, double epoch) {
  switch (schedule.kind) {
  case LrSchedule::Kind::Fixed: return schedule.base;
  case LrSchedule::Kind::Step: {
    double lr = schedule.base;
    double best = -1.0;
    for (const auto& [at, value] : schedule.milestones) {
      if (at <= epoch && at >= best) {
        best = at;
        lr = value;
      }
    }
    return lr;
  }
  case LrSchedule::Kind::Cyclic: {
    const double x = epoch / schedule.period;
    const double frac = x - std::floor(x);
    const double tri = 1.0 - std::abs(2.0 * frac - 1.0);
    return schedule.base + schedule.amplitude * tri;
  }
  }
  return schedule.base;
}

} // namespace repr
