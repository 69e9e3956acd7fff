#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sylph/ops.hpp"

namespace sylph {

template <std::floating_point T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// log(1 + exp(x)) without overflow.
template <std::floating_point T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

/// Sigmoid focal loss summed over all elements and divided by the number of
/// positive targets (at least 1). Targets must be exactly 0 or 1.
template <std::floating_point T>
Tensor<T> focal_loss(const Tensor<T>& logits, const std::vector<T>& targets, FocalParams params = {}) {
  detail::require(targets.size() == logits.numel(), "focal_loss: " + std::to_string(targets.size()) +
                                                        " targets for " + std::to_string(logits.numel()) +
                                                        " logits");
  std::size_t positives = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == T(1)) {
      ++positives;
    } else if (targets[i] != T(0)) {
      throw std::invalid_argument("focal_loss: target at index " + std::to_string(i) + " is not binary");
    }
  }
  const T norm = static_cast<T>(std::max<std::size_t>(positives, 1));
  const T alpha = static_cast<T>(params.alpha), gamma = static_cast<T>(params.gamma);

  T total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const T x = logits.data()[i];
    const T p = sigmoid(x);
    if (targets[i] == T(1)) {
      total += alpha * std::pow(T(1) - p, gamma) * softplus(-x);
    } else {
      total += (T(1) - alpha) * std::pow(p, gamma) * softplus(x);
    }
  }
  return detail::make_result<T>(
      Shape{1}, {total / norm}, {logits}, [logits, targets, alpha, gamma, norm](Node<T>& self) {
        T* g = detail::grad_of(logits);
        const T scale_out = self.grad[0] / norm;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const T x = logits.data()[i];
          const T p = sigmoid(x);
          T d;
          if (targets[i] == T(1)) {
            // d/dx of alpha (1-p)^gamma * (-log p)
            d = alpha * std::pow(T(1) - p, gamma) * (-gamma * p * softplus(-x) - (T(1) - p));
          } else {
            // d/dx of (1-alpha) p^gamma * (-log(1-p))
            d = (T(1) - alpha) * std::pow(p, gamma) * (gamma * (T(1) - p) * softplus(x) + p);
          }
          g[i] += scale_out * d;
        }
      });
}

/// Mean binary cross-entropy with logits; targets may be soft values in [0, 1].
template <std::floating_point T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  detail::require(targets.size() == logits.numel() && !targets.empty(),
                  "bce_with_logits: target count does not match logits");
  T total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const T x = logits.data()[i];
    total += targets[i] * softplus(-x) + (T(1) - targets[i]) * softplus(x);
  }
  const T inv = T(1) / static_cast<T>(targets.size());
  return detail::make_result<T>(Shape{1}, {total * inv}, {logits}, [logits, targets, inv](Node<T>& self) {
    T* g = detail::grad_of(logits);
    for (std::size_t i = 0; i < targets.size(); ++i) {
      g[i] += self.grad[0] * inv * (sigmoid(logits.data()[i]) - targets[i]);
    }
  });
}

/// Mean (1 - IoU) between predicted and target boxes in (l, t, r, b)
/// distance form relative to a shared anchor point. Both P×4.
template <std::floating_point T>
Tensor<T> iou_loss_ltrb(const Tensor<T>& pred, const std::vector<T>& target) {
  detail::require(pred.rank() == 2 && pred.dim(1) == 4, "iou_loss_ltrb: predictions must be P×4, got " +
                                                            shape_str(pred.shape()));
  detail::require(target.size() == pred.numel() && !target.empty(), "iou_loss_ltrb: target count mismatch");
  const std::size_t P = pred.dim(0);
  T total = 0;
  for (std::size_t i = 0; i < P; ++i) {
    const T* p = pred.data().data() + 4 * i;
    const T* t = target.data() + 4 * i;
    const T ap = (p[0] + p[2]) * (p[1] + p[3]);
    const T ag = (t[0] + t[2]) * (t[1] + t[3]);
    const T iw = std::min(p[0], t[0]) + std::min(p[2], t[2]);
    const T ih = std::min(p[1], t[1]) + std::min(p[3], t[3]);
    const T inter = iw * ih;
    total += T(1) - inter / (ap + ag - inter);
  }
  const T inv = T(1) / static_cast<T>(P);
  return detail::make_result<T>(Shape{1}, {total * inv}, {pred}, [pred, target, P, inv](Node<T>& self) {
    T* g = detail::grad_of(pred);
    const T go = self.grad[0] * inv;
    for (std::size_t i = 0; i < P; ++i) {
      const T* p = pred.data().data() + 4 * i;
      const T* t = target.data() + 4 * i;
      const T ap = (p[0] + p[2]) * (p[1] + p[3]);
      const T ag = (t[0] + t[2]) * (t[1] + t[3]);
      const T iw = std::min(p[0], t[0]) + std::min(p[2], t[2]);
      const T ih = std::min(p[1], t[1]) + std::min(p[3], t[3]);
      const T inter = iw * ih;
      const T uni = ap + ag - inter;
      const T d_inter = (uni + inter) / (uni * uni);
      const T d_ap = -inter / (uni * uni);
      // horizontal sides (l, r) and vertical sides (t, b)
      for (int k : {0, 2}) {
        const T di = p[k] < t[k] ? ih : T(0);
        g[4 * i + k] -= go * (d_inter * di + d_ap * (p[1] + p[3]));
      }
      for (int k : {1, 3}) {
        const T di = p[k] < t[k] ? iw : T(0);
        g[4 * i + k] -= go * (d_inter * di + d_ap * (p[0] + p[2]));
      }
    }
  });
}

}  // namespace sylph
