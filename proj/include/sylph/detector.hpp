#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <string>
#include <vector>

#include "sylph/checkpoint.hpp"
#include "sylph/geometry.hpp"
#include "sylph/image.hpp"
#include "sylph/losses.hpp"
#include "sylph/ops.hpp"
#include "sylph/rng.hpp"

namespace sylph {

struct DetectorConfig {
  std::size_t channels = 64;  // C, also the class-code length
  std::size_t gn_groups = 8;
  std::size_t tower_depth = 4;
  double prior_prob = 0.01;
  double box_scale = 8.0;  // ltrb = box_scale * exp(raw)
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  static constexpr std::size_t stride = 8;
  bool operator==(const DetectorConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = nlohmann::json{{"channels", c.channels},         {"gn_groups", c.gn_groups},
                     {"tower_depth", c.tower_depth},   {"prior_prob", c.prior_prob},
                     {"box_scale", c.box_scale},       {"focal_alpha", c.focal_alpha},
                     {"focal_gamma", c.focal_gamma}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
  if (j.contains("channels")) c.channels = j.at("channels").get<std::size_t>();
  if (j.contains("gn_groups")) c.gn_groups = j.at("gn_groups").get<std::size_t>();
  if (j.contains("tower_depth")) c.tower_depth = j.at("tower_depth").get<std::size_t>();
  if (j.contains("prior_prob")) c.prior_prob = j.at("prior_prob").get<double>();
  if (j.contains("box_scale")) c.box_scale = j.at("box_scale").get<double>();
  if (j.contains("focal_alpha")) c.focal_alpha = j.at("focal_alpha").get<double>();
  if (j.contains("focal_gamma")) c.focal_gamma = j.at("focal_gamma").get<double>();
}

/// Bias that makes sigmoid(b) equal the prior probability: -log((1 - pi) / pi).
inline double prior_bias(double prior_prob) { return -std::log((1.0 - prior_prob) / prior_prob); }

struct DecodeParams {
  double score_thresh = 0.05;
  double nms_iou = 0.6;
  std::size_t max_dets = 100;  // 0 keeps every per-class survivor
  bool use_centerness = true;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  bool operator==(const Detection&) const = default;
};

namespace detail {

template <std::floating_point T>
Tensor<T> normal_tensor(Shape shape, double std, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * std);
  return t;
}

template <std::floating_point T>
void add_conv(ParamStore<T>& store, const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k,
              double std, bool bias, Rng& rng) {
  store.add(prefix + ".weight", normal_tensor<T>({cout, cin, k, k}, std, rng));
  if (bias) store.add(prefix + ".bias", Tensor<T>({cout}, T(0)));
}

template <std::floating_point T>
void add_gn(ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  store.add(prefix + ".weight", Tensor<T>({c}, T(1)));
  store.add(prefix + ".bias", Tensor<T>({c}, T(0)));
}

template <std::floating_point T>
Tensor<T> maybe(const ParamStore<T>& store, const std::string& name) {
  return store.contains(name) ? store.at(name) : Tensor<T>();
}

}  // namespace detail

inline std::string code_weight_name(int class_id) { return "codes." + std::to_string(class_id) + ".weight"; }
inline std::string code_bias_name(int class_id) { return "codes." + std::to_string(class_id) + ".bias"; }

/// Backbone (three stride-2 conv+GN+ReLU stages), the two towers, and the
/// class-agnostic box and centerness heads.
template <std::floating_point T>
void init_detector(ParamStore<T>& store, const DetectorConfig& cfg, std::uint64_t seed) {
  detail::require(cfg.channels % cfg.gn_groups == 0 && 32 % cfg.gn_groups == 0,
                  "detector: channels must be divisible by gn_groups");
  Rng rng(derive_seed(seed, 0xde7ec7));
  const std::size_t widths[] = {3, 32, 64, cfg.channels};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string p = "backbone." + std::to_string(i);
    detail::add_conv(store, p, widths[i + 1], widths[i], 3, std::sqrt(2.0 / (widths[i] * 9.0)), false, rng);
    detail::add_gn(store, p + ".gn", widths[i + 1]);
  }
  for (const char* tower : {"cls_tower", "box_tower"}) {
    for (std::size_t i = 0; i < cfg.tower_depth; ++i) {
      const std::string p = std::string(tower) + "." + std::to_string(i);
      detail::add_conv(store, p, cfg.channels, cfg.channels, 3, 0.01, true, rng);
      detail::add_gn(store, p + ".gn", cfg.channels);
    }
  }
  detail::add_conv(store, "box_head", 4, cfg.channels, 1, 0.01, true, rng);
  detail::add_conv(store, "ctr_head", 1, cfg.channels, 1, 0.01, true, rng);
}

/// Directly trained base-class code: small random weight, prior bias.
template <std::floating_point T>
void init_code(ParamStore<T>& store, const DetectorConfig& cfg, int class_id, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xc0de, static_cast<std::uint64_t>(class_id)));
  store.add(code_weight_name(class_id), detail::normal_tensor<T>({cfg.channels}, 0.01, rng));
  store.add(code_bias_name(class_id), Tensor<T>({1}, static_cast<T>(prior_bias(cfg.prior_prob))));
}

/// Stacks images into a normalized N×3×H×W tensor: (v/255 - 0.5) / 0.25.
template <std::floating_point T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  detail::require(!images.empty(), "images_to_tensor: empty batch");
  const std::size_t H = images[0]->height, W = images[0]->width;
  Tensor<T> x({images.size(), 3, H, W});
  auto d = x.data();
  for (std::size_t n = 0; n < images.size(); ++n) {
    detail::require(images[n]->height == H && images[n]->width == W, "images_to_tensor: batch images differ in size");
    for (std::size_t p = 0; p < H * W; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        d[(n * 3 + c) * H * W + p] = static_cast<T>((images[n]->rgb[p * 3 + c] / 255.0 - 0.5) / 0.25);
  }
  return x;
}

template <std::floating_point T>
Tensor<T> conv_gn_relu(const ParamStore<T>& store, const std::string& prefix, const Tensor<T>& x, std::size_t stride,
                       std::size_t groups) {
  auto y = conv2d(x, store.at(prefix + ".weight"), detail::maybe(store, prefix + ".bias"), stride, 1);
  return relu(group_norm(y, groups, store.at(prefix + ".gn.weight"), store.at(prefix + ".gn.bias")));
}

/// N×3×H×W normalized images -> N×C×H/8×W/8 features.
template <std::floating_point T>
Tensor<T> extract_features(const ParamStore<T>& store, const DetectorConfig& cfg, const Tensor<T>& images) {
  detail::require(images.rank() == 4 && images.dim(1) == 3, "extract_features: expected N×3×H×W input, got " +
                                                                  shape_str(images.shape()));
  detail::require(images.dim(2) % DetectorConfig::stride == 0 && images.dim(3) % DetectorConfig::stride == 0,
                  "extract_features: image size " + std::to_string(images.dim(2)) + "x" +
                      std::to_string(images.dim(3)) + " is not divisible by 8");
  Tensor<T> x = images;
  for (std::size_t i = 0; i < 3; ++i) x = conv_gn_relu(store, "backbone." + std::to_string(i), x, 2, cfg.gn_groups);
  return x;
}

template <std::floating_point T>
Tensor<T> tower_forward(const ParamStore<T>& store, const DetectorConfig& cfg, const std::string& tower,
                        const Tensor<T>& features) {
  Tensor<T> x = features;
  for (std::size_t i = 0; i < cfg.tower_depth; ++i) {
    x = conv_gn_relu(store, tower + "." + std::to_string(i), x, 1, cfg.gn_groups);
  }
  return x;
}

template <std::floating_point T>
struct BoxOutputs {
  Tensor<T> ltrb_raw;    // N×4×h×w, distances are box_scale * exp(raw)
  Tensor<T> ctr_logits;  // N×1×h×w
};

template <std::floating_point T>
BoxOutputs<T> box_branch(const ParamStore<T>& store, const DetectorConfig& cfg, const Tensor<T>& features) {
  auto t = tower_forward(store, cfg, "box_tower", features);
  return {conv2d(t, store.at("box_head.weight"), store.at("box_head.bias"), 1, 0),
          conv2d(t, store.at("ctr_head.weight"), store.at("ctr_head.bias"), 1, 0)};
}

/// Stacked class codes as fed to the conditional classifier.
template <std::floating_point T>
struct CodeTensors {
  std::vector<int> class_ids;
  Tensor<T> weight;  // M×C
  Tensor<T> bias;    // M
};

/// Codes for `class_ids` taken from the directly trained `codes.*` parameters.
template <std::floating_point T>
CodeTensors<T> stored_codes(const ParamStore<T>& store, const std::vector<int>& class_ids) {
  detail::require(!class_ids.empty(), "stored_codes: no classes requested");
  std::vector<Tensor<T>> w, b;
  for (int c : class_ids) {
    w.push_back(store.at(code_weight_name(c)));
    b.push_back(store.at(code_bias_name(c)));
  }
  return {class_ids, stack(w), reshape(stack(b), Shape{class_ids.size()})};
}

/// Per-class 1×1 convolution with each class's code: N×C×h×w -> N×M×h×w.
template <std::floating_point T>
Tensor<T> conditional_classify(const Tensor<T>& cls_features, const CodeTensors<T>& codes) {
  if (codes.weight.defined() && codes.weight.rank() == 2 && codes.weight.dim(1) != cls_features.dim(1)) {
    detail::require(false, "conditional_classify: code for class " + std::to_string(codes.class_ids.at(0)) +
                               " has length " + std::to_string(codes.weight.dim(1)) + ", features have " +
                               std::to_string(cls_features.dim(1)) + " channels");
  }
  return code_classify(cls_features, codes.weight, codes.bias);
}

// ---------------------------------------------------------------- targets

struct LocationTarget {
  int gt = -1;  // index of the assigned box, -1 for negatives
  double l = 0, t = 0, r = 0, b = 0;
  double centerness = 0;
};

inline double location_coord(std::size_t index) {
  return static_cast<double>(index * DetectorConfig::stride + DetectorConfig::stride / 2);
}

/// Stride-8 grid centres: a location is positive when strictly inside a box;
/// among several containing boxes the smallest area wins (first on ties).
inline std::vector<LocationTarget> assign_targets(std::size_t h, std::size_t w, const std::vector<Box>& boxes) {
  std::vector<LocationTarget> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = location_coord(x), py = location_coord(y);
      auto& tgt = out[y * w + x];
      double best_area = 0;
      for (std::size_t k = 0; k < boxes.size(); ++k) {
        const Box& bx = boxes[k];
        if (!(px > bx.x1 && px < bx.x2 && py > bx.y1 && py < bx.y2)) continue;
        if (tgt.gt >= 0 && bx.area() >= best_area) continue;
        tgt.gt = static_cast<int>(k);
        best_area = bx.area();
        tgt.l = px - bx.x1;
        tgt.t = py - bx.y1;
        tgt.r = bx.x2 - px;
        tgt.b = bx.y2 - py;
      }
      if (tgt.gt >= 0) {
        tgt.centerness = std::sqrt((std::min(tgt.l, tgt.r) / std::max(tgt.l, tgt.r)) *
                                   (std::min(tgt.t, tgt.b) / std::max(tgt.t, tgt.b)));
      }
    }
  }
  return out;
}

/// Dense training targets for a batch against an ordered set of class
/// columns. Boxes of classes outside the columns are ignored entirely.
template <std::floating_point T>
struct BatchTargets {
  std::size_t batch = 0, columns = 0, h = 0, w = 0;
  std::vector<T> cls;                  // N×M×h×w binary
  std::vector<std::size_t> positives;  // n*h*w + loc
  std::vector<T> ltrb;                 // P×4
  std::vector<T> centerness;           // P
};

template <std::floating_point T>
BatchTargets<T> build_targets(const std::vector<std::vector<std::pair<int, Box>>>& gt, const std::vector<int>& columns,
                              std::size_t h, std::size_t w) {
  BatchTargets<T> out;
  out.batch = gt.size();
  out.columns = columns.size();
  out.h = h;
  out.w = w;
  out.cls.assign(out.batch * out.columns * h * w, T(0));
  std::map<int, std::size_t> column_of;
  for (std::size_t m = 0; m < columns.size(); ++m) column_of[columns[m]] = m;
  for (std::size_t n = 0; n < gt.size(); ++n) {
    std::vector<Box> boxes;
    std::vector<std::size_t> cols;
    for (const auto& [cls, box] : gt[n]) {
      auto it = column_of.find(cls);
      if (it == column_of.end()) continue;
      boxes.push_back(box);
      cols.push_back(it->second);
    }
    const auto targets = assign_targets(h, w, boxes);
    for (std::size_t loc = 0; loc < h * w; ++loc) {
      const auto& t = targets[loc];
      if (t.gt < 0) continue;
      out.cls[(n * out.columns + cols[static_cast<std::size_t>(t.gt)]) * h * w + loc] = T(1);
      out.positives.push_back(n * h * w + loc);
      for (double v : {t.l, t.t, t.r, t.b}) out.ltrb.push_back(static_cast<T>(v));
      out.centerness.push_back(static_cast<T>(t.centerness));
    }
  }
  return out;
}

template <std::floating_point T>
struct LossTerms {
  Tensor<T> total, cls, box, ctr;
  std::size_t num_positives = 0;
};

/// Focal classification loss normalised by the positive count, plus
/// 1 - IoU and centerness BCE averaged over positive locations.
template <std::floating_point T>
LossTerms<T> detector_loss(const DetectorConfig& cfg, const Tensor<T>& logits, const BoxOutputs<T>& box,
                           const BatchTargets<T>& targets) {
  LossTerms<T> out;
  out.num_positives = targets.positives.size();
  out.cls = focal_loss(logits, targets.cls, FocalParams{cfg.focal_alpha, cfg.focal_gamma});
  if (targets.positives.empty() || !box.ltrb_raw.defined()) {
    out.box = Tensor<T>::scalar(T(0));
    out.ctr = Tensor<T>::scalar(T(0));
  } else {
    auto raw = gather_locations(box.ltrb_raw, targets.positives);
    auto pred = scale(exp(raw), static_cast<T>(cfg.box_scale));
    out.box = iou_loss_ltrb(pred, targets.ltrb);
    out.ctr = bce_with_logits(gather_locations(box.ctr_logits, targets.positives), targets.centerness);
  }
  out.total = add(add(out.cls, out.box), out.ctr);
  return out;
}

// --------------------------------------------------------------- inference

/// Codebook-independent outputs for one image: classification-tower
/// features plus decoded boxes and centerness probabilities.
template <std::floating_point T>
struct ImageHeads {
  Tensor<T> cls_features;       // 1×C×h×w
  std::vector<Box> boxes;       // h*w, unclipped
  std::vector<double> ctr_prob;  // h*w
  std::size_t image_height = 0, image_width = 0;
};

template <std::floating_point T>
std::vector<ImageHeads<T>> compute_heads(const ParamStore<T>& store, const DetectorConfig& cfg,
                                         const std::vector<const Image*>& images, std::size_t batch = 8) {
  NoGradGuard guard;
  std::vector<ImageHeads<T>> out;
  for (std::size_t start = 0; start < images.size(); start += batch) {
    const std::size_t n = std::min(batch, images.size() - start);
    std::vector<const Image*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                    images.begin() + static_cast<std::ptrdiff_t>(start + n));
    auto feat = extract_features(store, cfg, images_to_tensor<T>(chunk));
    auto cls = tower_forward(store, cfg, "cls_tower", feat);
    auto box = box_branch(store, cfg, feat);
    const std::size_t C = cls.dim(1), h = cls.dim(2), w = cls.dim(3), HW = h * w;
    for (std::size_t i = 0; i < n; ++i) {
      ImageHeads<T> heads;
      heads.image_height = chunk[i]->height;
      heads.image_width = chunk[i]->width;
      heads.cls_features = Tensor<T>({1, C, h, w}, std::vector<T>(cls.data().begin() + static_cast<std::ptrdiff_t>(i * C * HW),
                                                                 cls.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * C * HW)));
      const T* raw = box.ltrb_raw.data().data() + i * 4 * HW;
      const T* ctr = box.ctr_logits.data().data() + i * HW;
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t loc = y * w + x;
          const double px = location_coord(x), py = location_coord(y);
          double d[4];
          for (std::size_t k = 0; k < 4; ++k) d[k] = cfg.box_scale * std::exp(static_cast<double>(raw[k * HW + loc]));
          heads.boxes.push_back(Box{px - d[0], py - d[1], px + d[2], py + d[3]});
          heads.ctr_prob.push_back(sigmoid(static_cast<double>(ctr[loc])));
        }
      }
      out.push_back(std::move(heads));
    }
  }
  return out;
}

inline Box clip_box(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
             std::clamp(b.y2, 0.0, height)};
}

/// Greedy suppression over candidates already sorted by descending score:
/// a candidate is dropped when its IoU with a kept one exceeds `iou_thresh`.
inline std::vector<std::size_t> greedy_nms(const std::vector<Box>& boxes, double iou_thresh) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    bool suppressed = false;
    for (std::size_t k : keep) {
      if (iou(boxes[k], boxes[i]) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) keep.push_back(i);
  }
  return keep;
}

/// Survivors for one class: candidates with p_cls above the threshold,
/// scored sqrt(p_cls * p_ctr), suppressed per class. Depends only on this
/// class's logits and the class-agnostic branches.
inline std::vector<Detection> decode_class(int class_id, const double* logits, const std::vector<Box>& boxes,
                                           const std::vector<double>& ctr_prob, double width, double height,
                                           const DecodeParams& params) {
  std::vector<Detection> cand;
  for (std::size_t loc = 0; loc < boxes.size(); ++loc) {
    const double p = sigmoid(logits[loc]);
    if (!(p > params.score_thresh)) continue;
    const double score = params.use_centerness ? std::sqrt(p * ctr_prob[loc]) : p;
    cand.push_back({clip_box(boxes[loc], width, height), class_id, score});
  }
  std::stable_sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Box> bx;
  for (const auto& d : cand) bx.push_back(d.box);
  std::vector<Detection> out;
  for (std::size_t i : greedy_nms(bx, params.nms_iou)) out.push_back(cand[i]);
  return out;
}

/// Merges per-class survivors and keeps the global top max_dets by score.
inline std::vector<Detection> merge_detections(std::vector<std::vector<Detection>> per_class, std::size_t max_dets) {
  std::vector<Detection> all;
  for (auto& v : per_class) all.insert(all.end(), v.begin(), v.end());
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (max_dets > 0 && all.size() > max_dets) all.resize(max_dets);
  return all;
}

/// logits: M×h×w for `class_ids` in order.
inline std::vector<Detection> decode_and_nms(const std::vector<int>& class_ids, const std::vector<double>& logits,
                                             const std::vector<Box>& boxes, const std::vector<double>& ctr_prob,
                                             double width, double height, const DecodeParams& params) {
  const std::size_t HW = boxes.size();
  detail::require(logits.size() == class_ids.size() * HW, "decode_and_nms: logits do not match class count");
  std::vector<std::vector<Detection>> per_class;
  for (std::size_t m = 0; m < class_ids.size(); ++m) {
    per_class.push_back(decode_class(class_ids[m], logits.data() + m * HW, boxes, ctr_prob, width, height, params));
  }
  return merge_detections(std::move(per_class), params.max_dets);
}

}  // namespace sylph
