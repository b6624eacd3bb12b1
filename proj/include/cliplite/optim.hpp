#pragma once

// SGD with momentum, AdamW with decoupled weight decay, an optional LookAhead
// wrapper, and the linear-warmup + cosine-decay learning-rate schedule.

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cliplite/tensor.hpp"

namespace cliplite {

enum class OptimizerKind { sgd_momentum, adamw };

inline std::string_view optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adamw";
}

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  if (s == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + std::string(s) + "'");
}

struct LookAheadConfig {
  bool enabled = false;
  double alpha = 0.5;
  std::size_t k = 5;
};

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LookAheadConfig lookahead;

  void validate() const {
    if (lookahead.enabled) {
      if (!(lookahead.alpha > 0.0 && lookahead.alpha <= 1.0)) {
        throw std::invalid_argument("lookahead alpha must lie in (0, 1]");
      }
      if (lookahead.k < 1) throw std::invalid_argument("lookahead k must be >= 1");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (!(eps > 0.0)) throw std::invalid_argument("eps must be > 0");
  }
};

/// Per-parameter optimizer memory. `first` is the momentum buffer (sgd) or the
/// first moment (adamw); `second` is adamw's second moment; `slow` holds the
/// LookAhead slow weights.
struct OptimizerSlot {
  std::string name;
  Tensor first;
  Tensor second;
  Tensor slow;
};

struct OptimizerState {
  OptimizerConfig config;
  std::size_t step_count = 0;
  std::vector<OptimizerSlot> slots;

  explicit OptimizerState(OptimizerConfig cfg = {}) : config(cfg) { config.validate(); }
};

namespace detail {

inline void bind_slots(OptimizerState& state, std::span<const NamedParam> params) {
  if (state.slots.empty()) {
    for (const auto& p : params) {
      OptimizerSlot s;
      s.name = p.name;
      s.first = Tensor(p.tensor->shape);
      if (state.config.kind == OptimizerKind::adamw) s.second = Tensor(p.tensor->shape);
      if (state.config.lookahead.enabled) s.slow = *p.tensor, s.slow.grad.clear();
      state.slots.push_back(std::move(s));
    }
    return;
  }
  if (state.slots.size() != params.size()) {
    throw std::invalid_argument("optimizer: parameter count changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.slots[i].name != params[i].name || state.slots[i].first.shape != params[i].tensor->shape) {
      throw std::invalid_argument("optimizer: slot '" + state.slots[i].name +
                                  "' does not match parameter '" + params[i].name + "'");
    }
  }
}

}  // namespace detail

/// One optimizer update at learning rate `lr`. Gradients are read from each
/// parameter's grad buffer (missing buffers count as zero). A non-finite
/// gradient aborts before any parameter is touched.
inline void optimizer_step(OptimizerState& state, std::span<const NamedParam> params, double lr) {
  for (const auto& p : params) {
    if (!p.tensor->grad.empty() && p.tensor->grad.size() != p.tensor->size()) {
      throw ShapeError("optimizer: gradient shape mismatch for '" + p.name + "'");
    }
    for (double g : p.tensor->grad) {
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in '" + p.name + "'");
    }
  }
  detail::bind_slots(state, params);
  const OptimizerConfig& cfg = state.config;
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi].tensor;
    OptimizerSlot& slot = state.slots[pi];
    const bool has_grad = !p.grad.empty();
    if (cfg.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = (has_grad ? p.grad[i] : 0.0) + cfg.weight_decay * p.data[i];
        slot.first.data[i] = cfg.momentum * slot.first.data[i] + g;
        p.data[i] -= lr * slot.first.data[i];
      }
    } else {
      const double bc1 = 1.0 - std::pow(cfg.beta1, t);
      const double bc2 = 1.0 - std::pow(cfg.beta2, t);
      const double decay = params[pi].decay ? cfg.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = has_grad ? p.grad[i] : 0.0;
        double& m = slot.first.data[i];
        double& v = slot.second.data[i];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        p.data[i] -= lr * decay * p.data[i];
        p.data[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      }
    }
  }

  if (cfg.lookahead.enabled && state.step_count % cfg.lookahead.k == 0) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Tensor& fast = *params[pi].tensor;
      Tensor& slow = state.slots[pi].slow;
      for (std::size_t i = 0; i < fast.size(); ++i) {
        slow.data[i] += cfg.lookahead.alpha * (fast.data[i] - slow.data[i]);
        fast.data[i] = slow.data[i];
      }
    }
  }
}

inline void zero_grads(std::span<const NamedParam> params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

// ---------------------------------------------------------------------------

struct LrSchedule {
  double base_lr = 0.05;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;

  void validate() const {
    if (total_steps > 0 && warmup_steps >= total_steps) {
      throw std::invalid_argument("schedule: warmup_steps must be < total_steps");
    }
    if (base_lr < 0.0) throw std::invalid_argument("schedule: base_lr must be >= 0");
  }
};

/// Linear ramp 0 -> base_lr over the warmup, then half-cosine decay to 0 at total_steps.
inline double lr_at(const LrSchedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total " +
                            std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const std::size_t decay_steps = s.total_steps - s.warmup_steps;
  if (decay_steps == 0) return 0.0;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cliplite
