#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sylph/tensor.hpp"

namespace sylph {

template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool weight_decay = true;
};

template <std::floating_point T>
struct OptimizerState {
  T lr = T(0.01);
  T momentum = T(0.9);
  T weight_decay = T(1e-4);
  std::vector<std::vector<T>> velocity;  // one buffer per parameter, same order
};

enum class StepStatus { applied, rejected_nonfinite };

/// SGD with momentum and L2 weight decay:
///   v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
/// Parameters that received no gradient are left untouched. If any gradient
/// holds NaN/Inf the whole step is rejected and nothing changes.
template <std::floating_point T>
StepStatus sgd_step(std::vector<Parameter<T>>& params, OptimizerState<T>& state) {
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (T g : p.value.grad()) {
      if (!std::isfinite(g)) return StepStatus::rejected_nonfinite;
    }
  }
  if (state.velocity.size() != params.size()) {
    state.velocity.clear();
    for (const auto& p : params) state.velocity.emplace_back(p.value.numel(), T(0));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& v = state.velocity[i];
    if (v.size() != p.value.numel()) {
      throw std::logic_error("sgd_step: momentum buffer for " + p.name + " does not match parameter shape");
    }
    if (!p.value.has_grad()) continue;
    const T decay = p.weight_decay ? state.weight_decay : T(0);
    auto data = p.value.data();
    auto grad = p.value.grad();
    for (std::size_t k = 0; k < v.size(); ++k) {
      v[k] = state.momentum * v[k] + (grad[k] + decay * data[k]);
      data[k] -= state.lr * v[k];
    }
  }
  return StepStatus::applied;
}

template <std::floating_point T>
double global_grad_norm(const std::vector<Parameter<T>>& params) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (T g : p.value.grad()) ss += static_cast<double>(g) * g;
  }
  return std::sqrt(ss);
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <std::floating_point T>
double clip_gradients(std::vector<Parameter<T>>& params, double max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_gradients: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.value.has_grad()) continue;
      for (T& g : p.value.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

/// Step schedule: base_lr, multiplied by `factor` at each decay step, with an
/// optional linear warmup from warmup_factor * base_lr.
struct LrSchedule {
  double base_lr = 0.01;
  std::vector<int> decay_steps;
  double factor = 0.1;
  int warmup_steps = 0;
  double warmup_factor = 1.0 / 3.0;

  double at(int step) const {
    double lr = base_lr;
    for (int d : decay_steps) {
      if (step >= d) lr *= factor;
    }
    if (step < warmup_steps) {
      const double a = static_cast<double>(step) / warmup_steps;
      lr *= warmup_factor * (1.0 - a) + a;
    }
    return lr;
  }
};

}  // namespace sylph
