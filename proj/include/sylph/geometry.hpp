#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "sylph/ops.hpp"

namespace sylph {

/// Axis-aligned box in image pixel coordinates, corners (x1, y1) and (x2, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
  friend bool operator==(const Box&, const Box&) = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace detail {

/// Four bilinear taps around (x, y); taps outside the H×W grid get weight 0.
struct BilinearTaps {
  std::size_t index[4];
  double weight[4];
  int count = 0;
};

inline BilinearTaps bilinear_taps(double x, double y, std::size_t H, std::size_t W) {
  BilinearTaps taps;
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const long xs[2] = {x0, x0 + 1};
  const long ys[2] = {y0, y0 + 1};
  const double wx[2] = {1.0 - ax, ax};
  const double wy[2] = {1.0 - ay, ay};
  for (int j = 0; j < 2; ++j) {
    for (int i = 0; i < 2; ++i) {
      const double w = wx[i] * wy[j];
      if (w == 0.0) continue;
      if (xs[i] < 0 || ys[j] < 0 || xs[i] >= static_cast<long>(W) || ys[j] >= static_cast<long>(H)) continue;
      taps.index[taps.count] = static_cast<std::size_t>(ys[j]) * W + static_cast<std::size_t>(xs[i]);
      taps.weight[taps.count] = w;
      ++taps.count;
    }
  }
  return taps;
}

}  // namespace detail

/// Bilinear interpolation of a C×H×W map at continuous (x, y); x indexes
/// columns. Returns one value per channel.
template <std::floating_point T>
std::vector<T> bilinear_sample(const Tensor<T>& map, double x, double y) {
  detail::require(map.rank() == 3, "bilinear_sample: expected C×H×W, got " + shape_str(map.shape()));
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  const auto taps = detail::bilinear_taps(x, y, H, W);
  std::vector<T> out(C, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    double acc = 0;
    for (int t = 0; t < taps.count; ++t) acc += taps.weight[t] * map.data()[c * H * W + taps.index[t]];
    out[c] = static_cast<T>(acc);
  }
  return out;
}

struct RoiAlignParams {
  std::size_t output_size = 7;
  std::size_t sampling_ratio = 2;
  double spatial_scale = 1.0 / 8.0;
  bool aligned = true;
};

struct Roi {
  std::size_t batch_index = 0;
  Box box;
};

/// ROI alignment: features N×C×H×W, one box per ROI in image coordinates ->
/// R×C×S×S. Each bin averages sampling_ratio² bilinear samples on a regular
/// grid; with `aligned` the box is shifted by half a feature pixel.
template <std::floating_point T>
Tensor<T> roi_align(const Tensor<T>& features, const std::vector<Roi>& rois, RoiAlignParams params = {}) {
  detail::require(features.rank() == 4, "roi_align: features must be N×C×H×W, got " + shape_str(features.shape()));
  detail::require(params.output_size >= 1 && params.sampling_ratio >= 1, "roi_align: invalid output geometry");
  const std::size_t N = features.dim(0), C = features.dim(1), H = features.dim(2), W = features.dim(3);
  const std::size_t S = params.output_size, R = params.sampling_ratio;
  const double offset = params.aligned ? 0.5 : 0.0;

  // Precompute taps for every (roi, bin, sample); shared by forward and backward.
  struct Sample {
    detail::BilinearTaps taps;
  };
  auto samples = std::make_shared<std::vector<Sample>>();
  samples->reserve(rois.size() * S * S * R * R);
  for (const Roi& roi : rois) {
    detail::require(roi.batch_index < N, "roi_align: batch index out of range");
    detail::require(roi.box.valid(), "roi_align: invalid box");
    const double x0 = roi.box.x1 * params.spatial_scale - offset;
    const double y0 = roi.box.y1 * params.spatial_scale - offset;
    double rw = roi.box.width() * params.spatial_scale;
    double rh = roi.box.height() * params.spatial_scale;
    if (!params.aligned) {
      rw = std::max(rw, 1.0);
      rh = std::max(rh, 1.0);
    }
    const double bw = rw / static_cast<double>(S), bh = rh / static_cast<double>(S);
    for (std::size_t py = 0; py < S; ++py) {
      for (std::size_t px = 0; px < S; ++px) {
        for (std::size_t iy = 0; iy < R; ++iy) {
          const double y = y0 + static_cast<double>(py) * bh + (static_cast<double>(iy) + 0.5) * bh / static_cast<double>(R);
          for (std::size_t ix = 0; ix < R; ++ix) {
            const double x =
                x0 + static_cast<double>(px) * bw + (static_cast<double>(ix) + 0.5) * bw / static_cast<double>(R);
            samples->push_back({detail::bilinear_taps(x, y, H, W)});
          }
        }
      }
    }
  }

  const std::size_t per_bin = R * R, plane = H * W;
  const double inv = 1.0 / static_cast<double>(per_bin);
  std::vector<T> out(rois.size() * C * S * S);
  for (std::size_t r = 0; r < rois.size(); ++r) {
    const T* fbase = features.data().data() + rois[r].batch_index * C * plane;
    for (std::size_t c = 0; c < C; ++c) {
      const T* f = fbase + c * plane;
      for (std::size_t b = 0; b < S * S; ++b) {
        double acc = 0;
        for (std::size_t k = 0; k < per_bin; ++k) {
          const auto& taps = (*samples)[(r * S * S + b) * per_bin + k].taps;
          for (int t = 0; t < taps.count; ++t) acc += taps.weight[t] * f[taps.index[t]];
        }
        out[(r * C + c) * S * S + b] = static_cast<T>(acc * inv);
      }
    }
  }
  return detail::make_result<T>(
      Shape{rois.size(), C, S, S}, std::move(out), {features},
      [features, rois, samples, C, S, per_bin, plane, inv](Node<T>& self) {
        T* g = detail::grad_of(features);
        for (std::size_t r = 0; r < rois.size(); ++r) {
          T* gbase = g + rois[r].batch_index * C * plane;
          for (std::size_t c = 0; c < C; ++c) {
            T* gc = gbase + c * plane;
            for (std::size_t b = 0; b < S * S; ++b) {
              const double go = self.grad[(r * C + c) * S * S + b] * inv;
              for (std::size_t k = 0; k < per_bin; ++k) {
                const auto& taps = (*samples)[(r * S * S + b) * per_bin + k].taps;
                for (int t = 0; t < taps.count; ++t) gc[taps.index[t]] += static_cast<T>(go * taps.weight[t]);
              }
            }
          }
        }
      });
}

}  // namespace sylph
