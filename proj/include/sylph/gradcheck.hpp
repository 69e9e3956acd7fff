#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "sylph/ops.hpp"

namespace sylph {

struct GradCheckResult {
  double max_relative_error = 0;
  bool finite = true;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return finite && max_relative_error < tolerance; }
};

struct GradCheckOptions {
  double epsilon = 1e-4;
  /// 0 checks every element; otherwise a fixed pseudo-random subset per input.
  std::size_t max_elements_per_input = 0;
  std::uint64_t seed = 7;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Only inputs with requires_grad are perturbed.
inline GradCheckResult grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                                  std::vector<Tensor<double>>& inputs, GradCheckOptions options = {}) {
  GradCheckResult result;
  for (auto& in : inputs) in.zero_grad();
  Tensor<double> out = fn(inputs);
  if (out.numel() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
  if (!std::isfinite(out.item())) {
    result.finite = false;
    result.max_relative_error = std::numeric_limits<double>::infinity();
    return result;
  }
  out.backward();

  std::mt19937_64 rng(options.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    if (!in.requires_grad()) continue;
    std::vector<double> analytic(in.numel(), 0.0);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());

    std::vector<std::size_t> elements(in.numel());
    for (std::size_t i = 0; i < elements.size(); ++i) elements[i] = i;
    if (options.max_elements_per_input && elements.size() > options.max_elements_per_input) {
      std::shuffle(elements.begin(), elements.end(), rng);
      elements.resize(options.max_elements_per_input);
      std::sort(elements.begin(), elements.end());
    }

    NoGradGuard no_grad;
    for (std::size_t i : elements) {
      double& x = in.data()[i];
      const double saved = x;
      x = saved + options.epsilon;
      const double fp = fn(inputs).item();
      x = saved - options.epsilon;
      const double fm = fn(inputs).item();
      x = saved;
      ++result.checked;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        result.finite = false;
        result.max_relative_error = std::numeric_limits<double>::infinity();
        result.worst_input = k;
        result.worst_element = i;
        return result;
      }
      const double numeric = (fp - fm) / (2 * options.epsilon);
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_input = k;
        result.worst_element = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return result;
}

/// Reduces a tensor to a scalar through a fixed pseudo-random projection, so
/// every output element contributes a distinct weight.
template <std::floating_point T>
Tensor<T> fixed_projection(const Tensor<T>& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  std::vector<T> weights(x.numel());
  for (auto& w : weights) w = static_cast<T>(static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0);
  return sum(mul(x, Tensor<T>(x.shape(), std::move(weights))));
}

}  // namespace sylph
