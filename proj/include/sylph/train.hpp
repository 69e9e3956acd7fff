#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sylph/model.hpp"
#include "sylph/optim.hpp"

namespace sylph {

struct StageSchedule {
  double lr = 1e-2;
  int steps = 5000;
  std::vector<int> decay_steps{3333, 4444};
  int warmup_steps = 0;
  int batch = 8;
  bool operator==(const StageSchedule&) const = default;
};

struct MetaSchedule {
  double lr = 5e-4;
  int steps = 3000;
  std::vector<int> decay_steps{2000, 2600};
  int warmup_steps = 0;
  int episodes_per_step = 1;
  int n_way = 3;
  int k_shot = 5;
  bool operator==(const MetaSchedule&) const = default;
};

struct TrainConfig {
  StageSchedule pretrain;
  MetaSchedule meta;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool decay_scalars = false;
  std::optional<double> grad_clip_norm;
  int snapshot_every = 500;
  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  auto check = [](const std::vector<int>& d, int steps, const char* stage) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] <= 0 || d[i] >= steps || (i > 0 && d[i] <= d[i - 1])) {
        throw std::invalid_argument(std::string("train.") + stage +
                                    ".decay_steps must be strictly increasing and below steps");
      }
    }
  };
  check(c.pretrain.decay_steps, c.pretrain.steps, "pretrain");
  check(c.meta.decay_steps, c.meta.steps, "meta");
  if (c.pretrain.lr <= 0 || c.meta.lr <= 0) throw std::invalid_argument("train: learning rates must be positive");
  if (c.pretrain.batch < 1) throw std::invalid_argument("train.pretrain.batch must be >= 1");
  if (c.meta.n_way < 1 || c.meta.k_shot < 1) throw std::invalid_argument("train.meta: n_way and k_shot must be >= 1");
  if (c.grad_clip_norm && *c.grad_clip_norm <= 0) throw std::invalid_argument("train.grad_clip_norm must be > 0");
}

// ------------------------------------------------------------------ recipes

enum class Recipe { sylph, fa, joint };

inline Recipe parse_recipe(const std::string& s) {
  if (s == "sylph") return Recipe::sylph;
  if (s == "fa") return Recipe::fa;
  if (s == "joint") return Recipe::joint;
  throw std::invalid_argument("unknown recipe '" + s + "' (expected sylph, fa or joint)");
}
inline const char* to_string(Recipe r) {
  switch (r) {
    case Recipe::sylph:
      return "sylph";
    case Recipe::fa:
      return "fa";
    case Recipe::joint:
      return "joint";
  }
  return "?";
}

/// Parameters updated during meta-training.
inline std::function<bool(const std::string&)> meta_trainable(Recipe r) {
  if (r == Recipe::fa) return [](const std::string& n) { return n.rfind("hypernet.", 0) == 0; };
  return [](const std::string& n) { return n.rfind("hypernet.", 0) == 0 || n.rfind("cls_tower.", 0) == 0; };
}

/// Classes seen by both training stages.
inline std::vector<int> recipe_classes(Recipe r, const Dataset& data) {
  if (r == Recipe::joint) {
    std::vector<int> all = data.base_classes;
    all.insert(all.end(), data.novel_classes.begin(), data.novel_classes.end());
    std::sort(all.begin(), all.end());
    return all;
  }
  return data.base_classes;
}

// ------------------------------------------------------------------ logging

struct LogRow {
  int step = 0;
  double loss_total = 0, loss_cls = 0, loss_box = 0, loss_ctr = 0;
  double grad_norm = 0;
  double lr = 0;
  bool rejected = false;
};

inline nlohmann::json to_json_row(const LogRow& r) {
  nlohmann::json j{{"step", r.step},         {"loss_total", r.loss_total}, {"loss_cls", r.loss_cls},
                   {"loss_box", r.loss_box}, {"loss_ctr", r.loss_ctr},     {"grad_norm", r.grad_norm},
                   {"lr", r.lr}};
  if (r.rejected) j["rejected_nonfinite"] = true;
  return j;
}

/// Appends one JSON object per step to a jsonl file.
class JsonlLog {
 public:
  explicit JsonlLog(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + path);
  }
  void operator()(const LogRow& r) { out_ << to_json_row(r).dump() << "\n"; }

 private:
  std::ofstream out_;
};

struct StageResult {
  std::vector<LogRow> log;
  int rejected_steps = 0;
  double max_grad_norm = 0;
  bool grad_norm_finite = true;
  double seconds = 0;
};

/// Non-finite loss: training stops and the last good parameters are handed back.
class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int step, std::vector<NamedArray> snapshot)
      : std::runtime_error("training diverged at step " + std::to_string(step) + ": non-finite loss"),
        step_(step),
        snapshot_(std::move(snapshot)) {}
  int step() const { return step_; }
  const std::vector<NamedArray>& last_good() const { return snapshot_; }

 private:
  int step_;
  std::vector<NamedArray> snapshot_;
};

namespace detail {

template <std::floating_point T>
std::vector<Parameter<T>> select_parameters(ParamStore<T>& store, const std::function<bool(const std::string&)>& pred,
                                            bool decay_scalars) {
  std::vector<Parameter<T>> out;
  for (auto& [name, t] : store) {
    if (!pred(name)) continue;
    const bool scalar = name == "hypernet.g" || name == "hypernet.g_b";
    out.push_back({name, t, decay_scalars || !scalar});
  }
  return out;
}

template <std::floating_point T>
StepStatus optimizer_step(std::vector<Parameter<T>>& params, OptimizerState<T>& opt, const TrainConfig& cfg,
                          double& grad_norm) {
  grad_norm = global_grad_norm(params);
  if (cfg.grad_clip_norm && std::isfinite(grad_norm)) clip_gradients(params, *cfg.grad_clip_norm);
  return sgd_step(params, opt);
}

inline std::vector<std::pair<int, Box>> image_gt(const Split& split, std::size_t image) {
  std::vector<std::pair<int, Box>> out;
  for (const auto& a : split.annotations[image]) out.emplace_back(a.class_id, a.box);
  return out;
}

inline void finish_row(StageResult& res, LogRow& row, StepStatus status) {
  row.rejected = status == StepStatus::rejected_nonfinite;
  if (row.rejected) ++res.rejected_steps;
  if (!std::isfinite(row.grad_norm)) res.grad_norm_finite = false;
  else res.max_grad_norm = std::max(res.max_grad_norm, row.grad_norm);
}

}  // namespace detail

using LogSink = std::function<void(const LogRow&)>;

// ----------------------------------------------------------------- pretrain

struct PretrainOptions {
  std::vector<int> classes;  // classes with directly trained codes
  std::uint64_t seed = 0;
  std::function<bool(const std::string&)> trainable = [](const std::string& n) {
    return n.rfind("hypernet.", 0) != 0;
  };
};

/// Batch SGD over images containing the pretraining classes, with the full
/// detector loss. Annotations of other classes are ignored.
template <std::floating_point T>
StageResult pretrain(Model<T>& model, const Dataset& data, const TrainConfig& cfg, const PretrainOptions& opts,
                     const LogSink& sink = {}) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  detail::require(!opts.classes.empty(), "pretrain: no classes to train");
  for (int c : opts.classes) {
    if (!model.params.contains(code_weight_name(c))) init_code(model.params, model.detector, c, opts.seed);
  }
  const std::set<int> cls(opts.classes.begin(), opts.classes.end());
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    for (const auto& a : data.train.annotations[i]) {
      if (cls.count(a.class_id)) {
        pool.push_back(i);
        break;
      }
    }
  }
  detail::require(!pool.empty(), "pretrain: no training images contain the selected classes");

  auto params = detail::select_parameters(model.params, opts.trainable, cfg.decay_scalars);
  OptimizerState<T> opt{T(cfg.pretrain.lr), T(cfg.momentum), T(cfg.weight_decay), {}};
  LrSchedule sched{cfg.pretrain.lr, cfg.pretrain.decay_steps, 0.1, cfg.pretrain.warmup_steps};
  StageResult res;
  if (params.empty()) return res;  // nothing to update: parameters stay at their initial values

  Rng rng(derive_seed(opts.seed, 0x9e7a1));
  std::vector<std::size_t> order = pool;
  std::size_t cursor = order.size();
  auto snapshot = model.params.to_arrays();
  for (int step = 0; step < cfg.pretrain.steps; ++step) {
    std::vector<const Image*> batch;
    std::vector<std::vector<std::pair<int, Box>>> gt;
    for (int b = 0; b < cfg.pretrain.batch; ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      batch.push_back(&data.train.images[i]);
      gt.push_back(detail::image_gt(data.train, i));
    }
    model.params.zero_grad();
    auto feat = extract_features(model.params, model.detector, images_to_tensor<T>(batch));
    auto cls_feat = tower_forward(model.params, model.detector, "cls_tower", feat);
    auto logits = conditional_classify(cls_feat, stored_codes(model.params, opts.classes));
    auto box = box_branch(model.params, model.detector, feat);
    auto targets = build_targets<T>(gt, opts.classes, feat.dim(2), feat.dim(3));
    auto loss = detector_loss(model.detector, logits, box, targets);

    LogRow row{step, double(loss.total.item()), double(loss.cls.item()), double(loss.box.item()),
               double(loss.ctr.item()), 0, sched.at(step), false};
    if (!std::isfinite(row.loss_total)) throw TrainingDiverged(step, std::move(snapshot));
    loss.total.backward();
    opt.lr = static_cast<T>(row.lr);
    const auto status = detail::optimizer_step(params, opt, cfg, row.grad_norm);
    detail::finish_row(res, row, status);
    res.log.push_back(row);
    if (sink) sink(row);
    if (cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0) snapshot = model.params.to_arrays();
  }
  model.params.zero_grad();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ----------------------------------------------------------------- episodes

struct Episode {
  std::vector<int> classes;
  std::vector<std::vector<SupportShot>> support;  // per class, K shots
  std::vector<std::size_t> query_images;          // per class, train-split image index
};

/// N distinct classes drawn uniformly from `classes`; per class one query
/// image holding an instance of it and K support instances from other
/// images (with replacement only when fewer than K remain). Classes outside
/// the allowed set, or novel classes unless `allow_novel`, are rejected.
inline Episode sample_episode(const Dataset& data, const std::vector<int>& classes, int n_way, int k_shot, Rng& rng,
                              bool allow_novel = false) {
  std::vector<int> eligible;
  for (int c : classes) {
    if (!allow_novel && data.is_novel(c)) {
      throw std::invalid_argument("sample_episode: class " + std::to_string(c) + " is not a base class");
    }
    if (data.instances("train", c).size() >= 2) eligible.push_back(c);
  }
  if (eligible.size() < static_cast<std::size_t>(n_way)) {
    throw std::invalid_argument("sample_episode: need " + std::to_string(n_way) + " classes with >= 2 instances, have " +
                                std::to_string(eligible.size()));
  }
  rng.shuffle(eligible);
  eligible.resize(static_cast<std::size_t>(n_way));
  Episode ep;
  ep.classes = eligible;
  std::set<std::size_t> used_queries;
  for (int c : ep.classes) {
    const auto& refs = data.instances("train", c);
    std::vector<std::size_t> fresh;
    for (std::size_t i = 0; i < refs.size(); ++i)
      if (!used_queries.count(refs[i].image)) fresh.push_back(i);
    const std::size_t q = fresh.empty() ? rng.index(refs.size()) : fresh[rng.index(fresh.size())];
    const std::size_t query_image = refs[q].image;
    used_queries.insert(query_image);
    ep.query_images.push_back(query_image);

    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < refs.size(); ++i)
      if (refs[i].image != query_image) candidates.push_back(i);
    std::vector<std::size_t> picked;
    if (candidates.size() >= static_cast<std::size_t>(k_shot)) {
      rng.shuffle(candidates);
      picked.assign(candidates.begin(), candidates.begin() + k_shot);
    } else {
      for (int k = 0; k < k_shot; ++k) picked.push_back(candidates[rng.index(candidates.size())]);
    }
    std::vector<SupportShot> shots;
    for (std::size_t i : picked) shots.push_back({refs[i].image, data.annotation("train", refs[i]).box});
    ep.support.push_back(std::move(shots));
  }
  return ep;
}

template <std::floating_point T>
struct EpisodeLoss {
  Tensor<T> loss;
  CodeTensors<T> codes;
};

/// Transient enrollment of the episode classes followed by the focal
/// classification loss on the query images. `query_cls` supplies
/// classification features for given query images (either through the
/// trainable tower or from a cache).
template <std::floating_point T>
EpisodeLoss<T> episode_loss(const Model<T>& model, const Dataset& data, const Episode& ep, FeatureCache<T>& features,
                            const std::function<Tensor<T>(const std::vector<std::size_t>&)>& query_cls) {
  std::vector<std::size_t> support_images;
  std::vector<Roi> rois;
  for (const auto& shots : ep.support) {
    for (const auto& s : shots) {
      rois.push_back({support_images.size(), s.box});
      support_images.push_back(s.image);
    }
  }
  RoiAlignParams rp;
  rp.output_size = model.hypernet.roi_size;
  rp.sampling_ratio = model.hypernet.sampling_ratio;
  rp.spatial_scale = 1.0 / static_cast<double>(DetectorConfig::stride);
  const auto z = roi_align(features.gather("train", support_images), rois, rp);
  const auto shots = cph_forward(model.params, model.hypernet, z);

  std::vector<Tensor<T>> weights, biases;
  std::size_t offset = 0;
  for (const auto& s : ep.support) {
    ShotCodes<T> per{slice_rows(shots.weight, offset, s.size()),
                     shots.bias.defined() ? slice_rows(shots.bias, offset, s.size()) : Tensor<T>()};
    offset += s.size();
    auto [w, b] = cpm_aggregate(model.params, model.hypernet, per);
    weights.push_back(w);
    biases.push_back(b);
  }
  EpisodeLoss<T> out;
  out.codes = {ep.classes, stack(weights), reshape(stack(biases), Shape{ep.classes.size()})};
  const auto cls_feat = query_cls(ep.query_images);
  const auto logits = conditional_classify(cls_feat, out.codes);
  std::vector<std::vector<std::pair<int, Box>>> gt;
  for (std::size_t q : ep.query_images) gt.push_back(detail::image_gt(data.train, q));
  const auto targets = build_targets<T>(gt, ep.classes, cls_feat.dim(2), cls_feat.dim(3));
  out.loss = focal_loss(logits, targets.cls, FocalParams{model.detector.focal_alpha, model.detector.focal_gamma});
  return out;
}

struct MetaOptions {
  Recipe recipe = Recipe::sylph;
  std::vector<int> classes;  // defaults to recipe_classes()
  std::uint64_t seed = 0;
  std::function<bool(const std::string&)> trainable;  // defaults to meta_trainable(recipe)
};

/// Episodic meta-training: only the focal classification loss flows, and
/// only parameters matched by the recipe are updated. The backbone is
/// frozen in every recipe, so its maps are computed once per image.
template <std::floating_point T>
StageResult meta_train(Model<T>& model, const Dataset& data, const TrainConfig& cfg, const MetaOptions& opts,
                       const LogSink& sink = {}) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  if (!has_hypernet(model.params)) init_hypernet(model.params, model.hypernet, opts.seed);
  const auto pred = opts.trainable ? opts.trainable : meta_trainable(opts.recipe);
  auto params = detail::select_parameters(model.params, pred, cfg.decay_scalars);
  if (params.empty()) {
    throw std::invalid_argument(std::string("meta_train: recipe ") + to_string(opts.recipe) +
                                " matches no parameters");
  }
  const auto classes = opts.classes.empty() ? recipe_classes(opts.recipe, data) : opts.classes;
  const bool allow_novel = opts.recipe == Recipe::joint;
  const bool tower_trainable = pred("cls_tower.0.weight");

  FeatureCache<T> features(model, data);
  std::map<std::size_t, Tensor<T>> cls_cache;
  auto query_cls = [&](const std::vector<std::size_t>& images) {
    if (tower_trainable) return tower_forward(model.params, model.detector, "cls_tower", features.gather("train", images));
    std::vector<T> values;
    Shape shape;
    for (std::size_t i : images) {
      auto it = cls_cache.find(i);
      if (it == cls_cache.end()) {
        NoGradGuard guard;
        it = cls_cache.emplace(i, tower_forward(model.params, model.detector, "cls_tower", features.get("train", i))).first;
      }
      shape = it->second.shape();
      values.insert(values.end(), it->second.data().begin(), it->second.data().end());
    }
    shape[0] = images.size();
    return Tensor<T>(shape, std::move(values));
  };

  OptimizerState<T> opt{T(cfg.meta.lr), T(cfg.momentum), T(cfg.weight_decay), {}};
  LrSchedule sched{cfg.meta.lr, cfg.meta.decay_steps, 0.1, cfg.meta.warmup_steps};
  Rng rng(derive_seed(opts.seed, 0x3e7a));
  StageResult res;
  auto snapshot = model.params.to_arrays();
  for (int step = 0; step < cfg.meta.steps; ++step) {
    model.params.zero_grad();
    Tensor<T> total;
    for (int e = 0; e < cfg.meta.episodes_per_step; ++e) {
      const auto ep = sample_episode(data, classes, cfg.meta.n_way, cfg.meta.k_shot, rng, allow_novel);
      auto l = episode_loss<T>(model, data, ep, features, query_cls).loss;
      total = total.defined() ? add(total, l) : l;
    }
    if (cfg.meta.episodes_per_step > 1) total = scale(total, T(1) / static_cast<T>(cfg.meta.episodes_per_step));
    LogRow row{step, double(total.item()), double(total.item()), 0, 0, 0, sched.at(step), false};
    if (!std::isfinite(row.loss_total)) throw TrainingDiverged(step, std::move(snapshot));
    total.backward();
    opt.lr = static_cast<T>(row.lr);
    const auto status = detail::optimizer_step(params, opt, cfg, row.grad_norm);
    detail::finish_row(res, row, status);
    res.log.push_back(row);
    if (sink) sink(row);
    if (cfg.snapshot_every > 0 && (step + 1) % cfg.snapshot_every == 0) snapshot = model.params.to_arrays();
  }
  model.params.zero_grad();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace sylph
