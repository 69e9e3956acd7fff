#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sylph/tensor.hpp"

namespace sylph {

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (const auto* t : {&a, &b}) {
      if (T* g = detail::grad_of(*t)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (T* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = detail::grad_of(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (T* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b.data()[i];
    }
    if (T* g = detail::grad_of(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a.data()[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [a, factor](Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <std::floating_point T>
Tensor<T> add_constant(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [a](Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// a * s where s is a single-element tensor broadcast over a.
template <std::floating_point T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  detail::require(s.numel() == 1, "mul_scalar: scalar operand has shape " + shape_str(s.shape()));
  const T sv = s.data()[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  return detail::make_result<T>(a.shape(), std::move(out), {a, s}, [a, s, sv](Node<T>& self) {
    if (T* g = detail::grad_of(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * sv;
    }
    if (T* g = detail::grad_of(s)) {
      T acc = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * a.data()[i];
      g[0] += acc;
    }
  });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto saved = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [a, saved](Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (*saved)[i];
  });
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] < T(0) ? T(0) : a.data()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a}, [a](Node<T>& self) {
    T* g = detail::grad_of(a);
    // Subgradient at exactly zero is taken as zero.
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (a.data()[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return detail::make_result<T>(Shape{1}, {acc}, {a}, [a](Node<T>& self) {
    T* g = detail::grad_of(a);
    const T go = self.grad[0];
    for (std::size_t i = 0; i < a.numel(); ++i) g[i] += go;
  });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  detail::require(a.numel() > 0, "mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [a](Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Rows [begin, begin + count) along axis 0.
template <std::floating_point T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  detail::require(a.rank() >= 1 && begin + count <= a.dim(0),
                  "slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                      ") out of range for shape " + shape_str(a.shape()));
  const std::size_t row = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = count;
  std::vector<T> out(a.data().begin() + begin * row, a.data().begin() + (begin + count) * row);
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [a, begin, row](Node<T>& self) {
    T* g = detail::grad_of(a) + begin * row;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Stacks equally-shaped tensors along a new leading axis.
template <std::floating_point T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "stack: no inputs");
  const Shape& inner = parts.front().shape();
  const std::size_t row = parts.front().numel();
  std::vector<T> out;
  out.reserve(row * parts.size());
  for (const auto& p : parts) {
    detail::require_same_shape("stack", inner, p.shape());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return detail::make_result<T>(std::move(shape), std::move(out), parts, [parts, row](Node<T>& self) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (T* g = detail::grad_of(parts[k])) {
        for (std::size_t i = 0; i < row; ++i) g[i] += self.grad[k * row + i];
      }
    }
  });
}

/// Mean over axis 0: (K, ...) -> (...).
template <std::floating_point T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  detail::require(a.rank() >= 2 && a.dim(0) >= 1, "mean_rows: expected rank >= 2, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0);
  const std::size_t row = a.numel() / rows;
  std::vector<T> out(row, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < row; ++i) out[i] += a.data()[r * row + i];
  }
  const T inv = T(1) / static_cast<T>(rows);
  for (T& v : out) v *= inv;
  Shape shape(a.shape().begin() + 1, a.shape().end());
  return detail::make_result<T>(std::move(shape), std::move(out), {a}, [a, rows, row, inv](Node<T>& self) {
    T* g = detail::grad_of(a);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < row; ++i) g[r * row + i] += self.grad[i] * inv;
    }
  });
}

/// Gathers spatial locations from N×C×H×W into P×C; index = n·H·W + y·W + x.
template <std::floating_point T>
Tensor<T> gather_locations(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  detail::require(x.rank() == 4, "gather_locations: expected N×C×H×W, got " + shape_str(x.shape()));
  const std::size_t C = x.dim(1), HW = x.dim(2) * x.dim(3), total = x.dim(0) * HW;
  std::vector<T> out(index.size() * C);
  for (std::size_t p = 0; p < index.size(); ++p) {
    detail::require(index[p] < total, "gather_locations: index out of range");
    const std::size_t n = index[p] / HW, loc = index[p] % HW;
    for (std::size_t c = 0; c < C; ++c) out[p * C + c] = x.data()[(n * C + c) * HW + loc];
  }
  return detail::make_result<T>(Shape{index.size(), C}, std::move(out), {x}, [x, index, C, HW](Node<T>& self) {
    T* g = detail::grad_of(x);
    for (std::size_t p = 0; p < index.size(); ++p) {
      const std::size_t n = index[p] / HW, loc = index[p] % HW;
      for (std::size_t c = 0; c < C; ++c) g[(n * C + c) * HW + loc] += self.grad[p * C + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel;
  std::size_t stride, padding;
  std::size_t out_height, out_width;

  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t out_plane() const { return out_height * out_width; }
};

namespace detail {

template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* cols) {
  // cols: patch × (batch · out_plane), column index n·P + p.
  const std::size_t P = g.out_plane(), NP = g.batch * P;
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const std::size_t row = (c * g.kernel + ki) * g.kernel + kj;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const T* plane = x + (n * g.in_channels + c) * g.height * g.width;
          T* dst = cols + row * NP + n * P;
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const long iy = static_cast<long>(oy) * s - pad + static_cast<long>(ki);
            T* d = dst + oy * g.out_width;
            if (iy < 0 || iy >= H) {
              std::fill(d, d + g.out_width, T(0));
              continue;
            }
            const T* src = plane + iy * W;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const long ix = static_cast<long>(ox) * s - pad + static_cast<long>(kj);
              d[ox] = (ix < 0 || ix >= W) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const Conv2dGeometry& g, T* dx) {
  const std::size_t P = g.out_plane(), NP = g.batch * P;
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding), s = static_cast<long>(g.stride);
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const std::size_t row = (c * g.kernel + ki) * g.kernel + kj;
        for (std::size_t n = 0; n < g.batch; ++n) {
          T* plane = dx + (n * g.in_channels + c) * g.height * g.width;
          const T* src = cols + row * NP + n * P;
          for (std::size_t oy = 0; oy < g.out_height; ++oy) {
            const long iy = static_cast<long>(oy) * s - pad + static_cast<long>(ki);
            if (iy < 0 || iy >= H) continue;
            T* d = plane + iy * W;
            const T* sp = src + oy * g.out_width;
            for (std::size_t ox = 0; ox < g.out_width; ++ox) {
              const long ix = static_cast<long>(ox) * s - pad + static_cast<long>(kj);
              if (ix >= 0 && ix < W) d[ix] += sp[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

template <std::floating_point T>
Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t padding) {
  using detail::require;
  require(input.size() == 4, "conv2d: input must be N×Cin×H×W, got " + shape_str(input));
  require(kernel.size() == 4, "conv2d: kernel must be Cout×Cin×k×k, got " + shape_str(kernel));
  require(kernel[2] == kernel[3], "conv2d: kernel height " + std::to_string(kernel[2]) + " != kernel width " +
                                      std::to_string(kernel[3]));
  require(kernel[2] >= 1, "conv2d: kernel size must be >= 1");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(input[1] == kernel[1], "conv2d: input channels (dim 1) = " + std::to_string(input[1]) +
                                     " but kernel expects Cin = " + std::to_string(kernel[1]));
  Conv2dGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], stride, padding, 0, 0};
  require(g.height + 2 * padding >= g.kernel, "conv2d: padded height (dim 2) smaller than kernel");
  require(g.width + 2 * padding >= g.kernel, "conv2d: padded width (dim 3) smaller than kernel");
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
  return g;
}

/// 2-D cross-correlation. `bias` may be undefined.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  const Conv2dGeometry g = conv2d_geometry<T>(input.shape(), kernel.shape(), stride, padding);
  if (bias.defined()) {
    detail::require(bias.numel() == g.out_channels, "conv2d: bias has " + std::to_string(bias.numel()) +
                                                        " elements, expected Cout = " +
                                                        std::to_string(g.out_channels));
  }
  const std::size_t K = g.patch(), P = g.out_plane(), NP = g.batch * P, Co = g.out_channels;

  auto cols = std::make_shared<std::vector<T>>(K * NP);
  detail::im2col(input.data().data(), g, cols->data());

  std::vector<T> ymat(Co * NP);
  {
    detail::ConstMatrixMap<T> w(kernel.data().data(), Co, K);
    detail::ConstMatrixMap<T> c(cols->data(), K, NP);
    detail::MatrixMap<T> y(ymat.data(), Co, NP);
    y.noalias() = w * c;
  }
  std::vector<T> out(g.batch * Co * P);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < Co; ++co) {
      const T b = bias.defined() ? bias.data()[co] : T(0);
      const T* src = ymat.data() + co * NP + n * P;
      T* dst = out.data() + (n * Co + co) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }
  }

  const bool track = detail::any_requires_grad<T>({&input, &kernel, &bias});
  if (!track) cols.reset();
  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result<T>(
      Shape{g.batch, Co, g.out_height, g.out_width}, std::move(out), std::move(inputs),
      [input, kernel, bias, cols, g](Node<T>& self) {
        const std::size_t K = g.patch(), P = g.out_plane(), NP = g.batch * P, Co = g.out_channels;
        std::vector<T> dy(Co * NP);
        for (std::size_t n = 0; n < g.batch; ++n) {
          for (std::size_t co = 0; co < Co; ++co) {
            const T* src = self.grad.data() + (n * Co + co) * P;
            std::copy(src, src + P, dy.data() + co * NP + n * P);
          }
        }
        detail::ConstMatrixMap<T> dym(dy.data(), Co, NP);
        if (T* gb = detail::grad_of(bias)) {
          for (std::size_t co = 0; co < Co; ++co) gb[co] += std::accumulate(dy.data() + co * NP, dy.data() + (co + 1) * NP, T(0));
        }
        if (T* gw = detail::grad_of(kernel)) {
          detail::ConstMatrixMap<T> c(cols->data(), K, NP);
          detail::MatrixMap<T> gwm(gw, Co, K);
          gwm.noalias() += dym * c.transpose();
        }
        if (T* gx = detail::grad_of(input)) {
          std::vector<T> dcols(K * NP);
          detail::ConstMatrixMap<T> w(kernel.data().data(), Co, K);
          detail::MatrixMap<T> dc(dcols.data(), K, NP);
          dc.noalias() = w.transpose() * dym;
          detail::col2im(dcols.data(), g, gx);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

/// Group normalization over N×C×(spatial...) with per-channel affine.
template <std::floating_point T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  using detail::require;
  require(x.rank() >= 2, "group_norm: expected N×C×..., got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  require(groups >= 1 && C % groups == 0, "group_norm: channels (dim 1) = " + std::to_string(C) +
                                              " not divisible by groups = " + std::to_string(groups));
  require(gamma.numel() == C && beta.numel() == C, "group_norm: affine parameters must have C = " +
                                                       std::to_string(C) + " elements");
  require(eps > T(0), "group_norm: eps must be positive");
  const std::size_t S = x.numel() / (N * C), Cg = C / groups, M = Cg * S;

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(N * groups);
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (n * C + gi * Cg) * S;
      double s1 = 0, s2 = 0;
      for (std::size_t i = 0; i < M; ++i) s1 += x.data()[base + i];
      const double mu = s1 / static_cast<double>(M);
      for (std::size_t i = 0; i < M; ++i) {
        const double d = x.data()[base + i] - mu;
        s2 += d * d;
      }
      const double var = s2 / static_cast<double>(M);
      const T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      (*inv_std)[n * groups + gi] = is;
      for (std::size_t c = 0; c < Cg; ++c) {
        const std::size_t ch = gi * Cg + c;
        const T ga = gamma.data()[ch], be = beta.data()[ch];
        for (std::size_t s = 0; s < S; ++s) {
          const std::size_t idx = base + c * S + s;
          const T h = static_cast<T>((x.data()[idx] - mu) * is);
          (*xhat)[idx] = h;
          out[idx] = h * ga + be;
        }
      }
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, N, C, S, Cg, M, groups](Node<T>& self) {
        T* gg = detail::grad_of(gamma);
        T* gb = detail::grad_of(beta);
        T* gx = detail::grad_of(x);
        const T* dy = self.grad.data();
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (n * C + gi * Cg) * S;
            double sum_dh = 0, sum_dh_h = 0;
            for (std::size_t c = 0; c < Cg; ++c) {
              const std::size_t ch = gi * Cg + c;
              const T ga = gamma.data()[ch];
              T acc_g = 0, acc_b = 0;
              for (std::size_t s = 0; s < S; ++s) {
                const std::size_t idx = base + c * S + s;
                acc_g += dy[idx] * (*xhat)[idx];
                acc_b += dy[idx];
                const double dh = static_cast<double>(dy[idx]) * ga;
                sum_dh += dh;
                sum_dh_h += dh * (*xhat)[idx];
              }
              if (gg) gg[ch] += acc_g;
              if (gb) gb[ch] += acc_b;
            }
            if (!gx) continue;
            const double is = (*inv_std)[n * groups + gi];
            const double m = static_cast<double>(M);
            for (std::size_t c = 0; c < Cg; ++c) {
              const T ga = gamma.data()[gi * Cg + c];
              for (std::size_t s = 0; s < S; ++s) {
                const std::size_t idx = base + c * S + s;
                const double dh = static_cast<double>(dy[idx]) * ga;
                gx[idx] += static_cast<T>(is / m * (m * dh - sum_dh - (*xhat)[idx] * sum_dh_h));
              }
            }
          }
        }
      });
}

/// Per-channel spatial mean: N×C×H×W -> N×C.
template <std::floating_point T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expected N×C×H×W, got " + shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
  detail::require(S >= 1, "global_avg_pool: empty spatial extent");
  std::vector<T> out(NC);
  for (std::size_t i = 0; i < NC; ++i) {
    T acc = 0;
    for (std::size_t s = 0; s < S; ++s) acc += x.data()[i * S + s];
    out[i] = acc / static_cast<T>(S);
  }
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x}, [x, NC, S](Node<T>& self) {
    T* g = detail::grad_of(x);
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t i = 0; i < NC; ++i) {
      for (std::size_t s = 0; s < S; ++s) g[i * S + s] += self.grad[i] * inv;
    }
  });
}

/// w / max(||w||, eps) along the last axis (C or M×C).
template <std::floating_point T>
Tensor<T> l2_normalize(const Tensor<T>& w, T eps = T(1e-12)) {
  detail::require(w.rank() == 1 || w.rank() == 2, "l2_normalize: expected C or M×C, got " + shape_str(w.shape()));
  detail::require(eps > T(0), "l2_normalize: eps must be positive");
  const std::size_t C = w.shape().back(), rows = w.numel() / std::max<std::size_t>(C, 1);
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(w.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < C; ++c) ss += w.data()[r * C + c] * w.data()[r * C + c];
    const T denom = std::max(std::sqrt(ss), eps);
    (*norms)[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = w.data()[r * C + c] / denom;
  }
  auto saved = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(w.shape(), std::move(out), {w}, [w, norms, saved, rows, C, eps](Node<T>& self) {
    T* g = detail::grad_of(w);
    for (std::size_t r = 0; r < rows; ++r) {
      const T norm = (*norms)[r];
      const T* dy = self.grad.data() + r * C;
      if (norm > eps) {
        T dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += dy[c] * (*saved)[r * C + c];
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += (dy[c] - (*saved)[r * C + c] * dot) / norm;
      } else {
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += dy[c] / eps;
      }
    }
  });
}

/// Per-class 1×1 convolution with synthesized codes:
/// logits[n, m, loc] = sum_k weight[m, k] · feat[n, k, loc] + bias[m].
/// Each class row is evaluated with the same fixed-order loop, so a class's
/// logits never depend on which other classes are present.
template <std::floating_point T>
Tensor<T> code_classify(const Tensor<T>& feat, const Tensor<T>& weight, const Tensor<T>& bias) {
  using detail::require;
  require(feat.rank() == 4, "code_classify: features must be N×C×H×W, got " + shape_str(feat.shape()));
  require(weight.rank() == 2, "code_classify: weights must be M×C, got " + shape_str(weight.shape()));
  const std::size_t N = feat.dim(0), C = feat.dim(1), HW = feat.dim(2) * feat.dim(3), M = weight.dim(0);
  require(weight.dim(1) == C, "code_classify: code length " + std::to_string(weight.dim(1)) +
                                  " != feature channels " + std::to_string(C));
  require(bias.numel() == M, "code_classify: expected " + std::to_string(M) + " biases");
  std::vector<T> out(N * M * HW);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t m = 0; m < M; ++m) {
      T* dst = out.data() + (n * M + m) * HW;
      std::fill(dst, dst + HW, bias.data()[m]);
      for (std::size_t k = 0; k < C; ++k) {
        const T wk = weight.data()[m * C + k];
        const T* f = feat.data().data() + (n * C + k) * HW;
        for (std::size_t l = 0; l < HW; ++l) dst[l] += wk * f[l];
      }
    }
  }
  return detail::make_result<T>(
      Shape{N, M, feat.dim(2), feat.dim(3)}, std::move(out), {feat, weight, bias},
      [feat, weight, bias, N, C, HW, M](Node<T>& self) {
        T* gf = detail::grad_of(feat);
        T* gw = detail::grad_of(weight);
        T* gb = detail::grad_of(bias);
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t m = 0; m < M; ++m) {
            const T* dy = self.grad.data() + (n * M + m) * HW;
            if (gb) {
              T acc = 0;
              for (std::size_t l = 0; l < HW; ++l) acc += dy[l];
              gb[m] += acc;
            }
            for (std::size_t k = 0; k < C; ++k) {
              const T* f = feat.data().data() + (n * C + k) * HW;
              if (gw) {
                T acc = 0;
                for (std::size_t l = 0; l < HW; ++l) acc += dy[l] * f[l];
                gw[m * C + k] += acc;
              }
              if (gf) {
                const T wk = weight.data()[m * C + k];
                T* g = gf + (n * C + k) * HW;
                for (std::size_t l = 0; l < HW; ++l) g[l] += wk * dy[l];
              }
            }
          }
        }
      });
}

}  // namespace sylph
