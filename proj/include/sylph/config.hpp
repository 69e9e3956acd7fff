#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sylph/dataset.hpp"
#include "sylph/detector.hpp"
#include "sylph/hypernet.hpp"
#include "sylph/synth.hpp"
#include "sylph/train.hpp"

namespace sylph {

struct EvalConfig {
  double score_thresh = 0.05;
  double nms_iou = 0.6;
  std::size_t max_dets = 100;
  bool use_centerness = true;
  std::size_t runs = 5;
  std::size_t shots = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2};  // training seeds for multi-seed protocols

  DecodeParams decode() const { return {score_thresh, nms_iou, max_dets, use_centerness}; }
  bool operator==(const EvalConfig&) const = default;
};

struct PathsConfig {
  std::string data;
  bool operator==(const PathsConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  DetectorConfig detector;
  HypernetConfig hypernet;
  TrainConfig train;
  EvalConfig eval;
  PathsConfig paths;
  bool operator==(const RunConfig&) const = default;
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid config: ";
    for (std::size_t i = 0; i < p.size(); ++i) s += (i ? "; " : "") + p[i];
    return s;
  }
  std::vector<std::string> problems_;
};

inline nlohmann::json to_json_config(const RunConfig& c) {
  nlohmann::json train{
      {"pretrain",
       {{"lr", c.train.pretrain.lr},
        {"steps", c.train.pretrain.steps},
        {"decay_steps", c.train.pretrain.decay_steps},
        {"warmup_steps", c.train.pretrain.warmup_steps},
        {"batch", c.train.pretrain.batch}}},
      {"meta",
       {{"lr", c.train.meta.lr},
        {"steps", c.train.meta.steps},
        {"decay_steps", c.train.meta.decay_steps},
        {"warmup_steps", c.train.meta.warmup_steps},
        {"episodes_per_step", c.train.meta.episodes_per_step},
        {"n_way", c.train.meta.n_way},
        {"k_shot", c.train.meta.k_shot}}},
      {"momentum", c.train.momentum},
      {"weight_decay", c.train.weight_decay},
      {"decay_scalars", c.train.decay_scalars},
      {"grad_clip_norm", c.train.grad_clip_norm ? nlohmann::json(*c.train.grad_clip_norm) : nlohmann::json(nullptr)},
      {"snapshot_every", c.train.snapshot_every}};
  return {{"seed", c.seed},
          {"dataset", c.dataset},
          {"detector", c.detector},
          {"hypernet", c.hypernet},
          {"train", train},
          {"eval",
           {{"score_thresh", c.eval.score_thresh},
            {"nms_iou", c.eval.nms_iou},
            {"max_dets", c.eval.max_dets},
            {"use_centerness", c.eval.use_centerness},
            {"runs", c.eval.runs},
            {"shots", c.eval.shots},
            {"seeds", c.eval.seeds}}},
          {"paths", {{"data", c.paths.data}}}};
}

namespace detail {

/// Walks a config document against the schema implied by the defaults,
/// collecting every unknown key and every type or range problem.
class ConfigReader {
 public:
  std::vector<std::string> problems;

  void keys(const nlohmann::json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) {
      problems.push_back((path.empty() ? "<root>" : path) + ": expected an object");
      return;
    }
    for (const auto& [k, _] : obj.items()) {
      if (!allowed.count(k)) problems.push_back("unknown key " + (path.empty() ? k : path + "." + k));
    }
  }

  template <class V>
  void field(const nlohmann::json& obj, const std::string& path, const char* key, V& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    try {
      out = obj.at(key).get<V>();
    } catch (const std::exception& e) {
      problems.push_back(path + "." + key + ": " + e.what());
    }
  }

  void pair(const nlohmann::json& obj, const std::string& path, const char* key, int& a, int& b) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer()) {
      problems.push_back(path + "." + key + ": expected [int, int]");
      return;
    }
    a = v[0].get<int>();
    b = v[1].get<int>();
  }

  void check(bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  }
};

}  // namespace detail

/// Strict parse: fields absent from `j` keep their defaults; unknown keys
/// and invalid values are all reported together.
inline RunConfig parse_run_config(const nlohmann::json& j, RunConfig c = {}) {
  detail::ConfigReader r;
  r.keys(j, "", {"seed", "dataset", "detector", "hypernet", "train", "eval", "paths"});
  r.field(j, "", "seed", c.seed);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    r.keys(d, "dataset", {dataset_spec_keys().begin(), dataset_spec_keys().end()});
    r.field(d, "dataset", "n_classes", c.dataset.n_classes);
    r.field(d, "dataset", "zipf_exponent", c.dataset.zipf_exponent);
    r.field(d, "dataset", "base_class_count", c.dataset.base_class_count);
    r.pair(d, "dataset", "image_size", c.dataset.image_height, c.dataset.image_width);
    r.pair(d, "dataset", "objects_per_image", c.dataset.min_objects, c.dataset.max_objects);
    r.field(d, "dataset", "tail_instances", c.dataset.tail_instances);
    r.field(d, "dataset", "eval_instances_per_class", c.dataset.eval_instances_per_class);
    r.pair(d, "dataset", "glyph_size", c.dataset.min_glyph, c.dataset.max_glyph);
    r.field(d, "dataset", "seed", c.dataset.seed);
  }
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    r.keys(d, "detector", {"channels", "gn_groups", "tower_depth", "prior_prob", "box_scale", "focal_alpha", "focal_gamma"});
    r.field(d, "detector", "channels", c.detector.channels);
    r.field(d, "detector", "gn_groups", c.detector.gn_groups);
    r.field(d, "detector", "tower_depth", c.detector.tower_depth);
    r.field(d, "detector", "prior_prob", c.detector.prior_prob);
    r.field(d, "detector", "box_scale", c.detector.box_scale);
    r.field(d, "detector", "focal_alpha", c.detector.focal_alpha);
    r.field(d, "detector", "focal_gamma", c.detector.focal_gamma);
  }
  if (j.contains("hypernet")) {
    const auto& h = j.at("hypernet");
    r.keys(h, "hypernet", {"feature_channels", "code_channels", "shared_convs", "gn_groups", "use_bias", "use_l2",
                           "use_gn", "use_g", "prior_prob", "g_init", "g_b_init", "roi_size", "sampling_ratio"});
    r.field(h, "hypernet", "feature_channels", c.hypernet.feature_channels);
    r.field(h, "hypernet", "code_channels", c.hypernet.code_channels);
    r.field(h, "hypernet", "shared_convs", c.hypernet.shared_convs);
    r.field(h, "hypernet", "gn_groups", c.hypernet.gn_groups);
    r.field(h, "hypernet", "use_bias", c.hypernet.use_bias);
    r.field(h, "hypernet", "use_l2", c.hypernet.use_l2);
    r.field(h, "hypernet", "use_gn", c.hypernet.use_gn);
    r.field(h, "hypernet", "use_g", c.hypernet.use_g);
    r.field(h, "hypernet", "prior_prob", c.hypernet.prior_prob);
    r.field(h, "hypernet", "g_init", c.hypernet.g_init);
    r.field(h, "hypernet", "g_b_init", c.hypernet.g_b_init);
    r.field(h, "hypernet", "roi_size", c.hypernet.roi_size);
    r.field(h, "hypernet", "sampling_ratio", c.hypernet.sampling_ratio);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    r.keys(t, "train", {"pretrain", "meta", "momentum", "weight_decay", "decay_scalars", "grad_clip_norm",
                        "snapshot_every"});
    if (t.is_object() && t.contains("pretrain")) {
      const auto& p = t.at("pretrain");
      r.keys(p, "train.pretrain", {"lr", "steps", "decay_steps", "warmup_steps", "batch"});
      r.field(p, "train.pretrain", "lr", c.train.pretrain.lr);
      r.field(p, "train.pretrain", "steps", c.train.pretrain.steps);
      r.field(p, "train.pretrain", "decay_steps", c.train.pretrain.decay_steps);
      r.field(p, "train.pretrain", "warmup_steps", c.train.pretrain.warmup_steps);
      r.field(p, "train.pretrain", "batch", c.train.pretrain.batch);
    }
    if (t.is_object() && t.contains("meta")) {
      const auto& m = t.at("meta");
      r.keys(m, "train.meta", {"lr", "steps", "decay_steps", "warmup_steps", "episodes_per_step", "n_way", "k_shot"});
      r.field(m, "train.meta", "lr", c.train.meta.lr);
      r.field(m, "train.meta", "steps", c.train.meta.steps);
      r.field(m, "train.meta", "decay_steps", c.train.meta.decay_steps);
      r.field(m, "train.meta", "warmup_steps", c.train.meta.warmup_steps);
      r.field(m, "train.meta", "episodes_per_step", c.train.meta.episodes_per_step);
      r.field(m, "train.meta", "n_way", c.train.meta.n_way);
      r.field(m, "train.meta", "k_shot", c.train.meta.k_shot);
    }
    r.field(t, "train", "momentum", c.train.momentum);
    r.field(t, "train", "weight_decay", c.train.weight_decay);
    r.field(t, "train", "decay_scalars", c.train.decay_scalars);
    r.field(t, "train", "snapshot_every", c.train.snapshot_every);
    if (t.is_object() && t.contains("grad_clip_norm")) {
      if (t.at("grad_clip_norm").is_null()) c.train.grad_clip_norm.reset();
      else if (t.at("grad_clip_norm").is_number()) c.train.grad_clip_norm = t.at("grad_clip_norm").get<double>();
      else r.problems.push_back("train.grad_clip_norm: expected a number or null");
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    r.keys(e, "eval", {"score_thresh", "nms_iou", "max_dets", "use_centerness", "runs", "shots", "seeds"});
    r.field(e, "eval", "score_thresh", c.eval.score_thresh);
    r.field(e, "eval", "nms_iou", c.eval.nms_iou);
    r.field(e, "eval", "max_dets", c.eval.max_dets);
    r.field(e, "eval", "use_centerness", c.eval.use_centerness);
    r.field(e, "eval", "runs", c.eval.runs);
    r.field(e, "eval", "shots", c.eval.shots);
    r.field(e, "eval", "seeds", c.eval.seeds);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    r.keys(p, "paths", {"data"});
    r.field(p, "paths", "data", c.paths.data);
  }

  r.check(c.eval.score_thresh >= 0 && c.eval.score_thresh <= 1, "eval.score_thresh must lie in [0, 1]");
  r.check(c.eval.nms_iou >= 0 && c.eval.nms_iou <= 1, "eval.nms_iou must lie in [0, 1]");
  r.check(c.eval.runs >= 1, "eval.runs must be >= 1");
  r.check(c.eval.shots >= 1, "eval.shots must be >= 1");
  r.check(!c.eval.seeds.empty(), "eval.seeds must not be empty");
  r.check(c.detector.prior_prob > 0 && c.detector.prior_prob < 1, "detector.prior_prob must lie in (0, 1)");
  r.check(c.hypernet.prior_prob > 0 && c.hypernet.prior_prob < 1, "hypernet.prior_prob must lie in (0, 1)");
  r.check(c.hypernet.shared_convs <= 2, "hypernet.shared_convs must be 0, 1 or 2");
  r.check(c.hypernet.feature_channels == c.detector.channels,
          "hypernet.feature_channels must equal detector.channels (the hypernetwork reads backbone features)");
  r.check(c.hypernet.code_channels == c.detector.channels,
          "hypernet.code_channels must equal detector.channels (codes classify tower features)");
  try {
    validate(c.train);
  } catch (const std::exception& e) {
    r.problems.push_back(e.what());
  }
  try {
    validate(c.dataset);
  } catch (const std::exception& e) {
    r.problems.push_back(e.what());
  }
  if (!r.problems.empty()) throw ConfigError(r.problems);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path, e.byte > 0 ? e.byte - 1 : 0, std::string("malformed config: ") + e.what());
  }
  return parse_run_config(j);
}

/// SYLPH_SEED, when set, replaces the run seed.
inline void apply_seed_env(RunConfig& c) {
  if (const char* s = std::getenv("SYLPH_SEED"); s && *s) {
    try {
      c.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("SYLPH_SEED is not an unsigned integer: ") + s);
    }
  }
}

}  // namespace sylph
