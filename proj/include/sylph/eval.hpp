#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sylph/model.hpp"

namespace sylph {

/// Greedy matching within one (image, class): detections in the given
/// (descending score) order each take the highest-IoU unmatched ground
/// truth with IoU >= thresh.
inline std::vector<bool> match_predictions(const std::vector<Box>& detections, const std::vector<Box>& ground_truths,
                                           double iou_thresh) {
  std::vector<bool> tp(detections.size(), false);
  std::vector<bool> taken(ground_truths.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    double best = -1;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(detections[d], ground_truths[g]);
      if (v >= iou_thresh && v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= 0) {
      taken[best_g] = true;
      tp[d] = true;
    }
  }
  return tp;
}

/// 101-point interpolated AP. Empty when there is no ground truth.
inline std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t n_gt) {
  if (n_gt == 0) return std::nullopt;
  std::vector<double> precision(tp.size()), recall(tp.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(n_gt);
  }
  for (std::size_t i = tp.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double total = 0;
  std::size_t k = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    while (k < recall.size() && recall[k] < level - 1e-12) ++k;
    if (k < recall.size()) total += precision[k];
  }
  return total / 101.0;
}

inline const std::vector<double>& iou_thresholds() {
  static const std::vector<double> t = [] {
    std::vector<double> v;
    for (int i = 0; i < 10; ++i) v.push_back(0.5 + 0.05 * i);
    return v;
  }();
  return t;
}

struct ClassAp {
  double ap = 0;
  double ap50 = 0;
  std::size_t n_gt = 0;
};

struct EvalReport {
  double ap = 0, ap50 = 0;
  double ap_base = 0, ap_novel = 0;
  double ap50_base = 0, ap50_novel = 0;
  std::map<int, ClassAp> per_class;
  std::vector<std::string> warnings;
  std::size_t n_images = 0;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, a] : r.per_class) per[std::to_string(c)] = {{"ap", a.ap}, {"ap50", a.ap50}, {"n_gt", a.n_gt}};
  return {{"ap", r.ap},         {"ap50", r.ap50},           {"ap_base", r.ap_base}, {"ap_novel", r.ap_novel},
          {"ap50_base", r.ap50_base}, {"ap50_novel", r.ap50_novel}, {"per_class_ap", per},
          {"warnings", r.warnings}, {"n_images", r.n_images}};
}

/// Base/novel partition used for the per-split means.
struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;

  static ClassSplit of(const Dataset& d) { return {d.base_classes, d.novel_classes}; }
  std::vector<int> all() const {
    std::vector<int> v = base;
    v.insert(v.end(), novel.begin(), novel.end());
    std::sort(v.begin(), v.end());
    return v;
  }
};

/// Codebook-independent head outputs for every eval image, computed once.
template <std::floating_point T>
class EvalContext {
 public:
  EvalContext(const Model<T>& model, const Dataset& data, const std::string& split = "eval")
      : model_(model), data_(data), split_(split) {
    const auto& s = data.split(split);
    for (const auto& img : s.images) heads_.push_back(compute_heads<T>(model.params, model.detector, {&img}, 1).front());
  }

  const Dataset& data() const { return data_; }
  const std::string& split() const { return split_; }
  std::size_t size() const { return heads_.size(); }

  /// logits M×h×w for every image, one fixed-order loop per class.
  std::vector<double> logits(std::size_t image, const CodeBook& book, const std::vector<int>& ids) const {
    NoGradGuard guard;
    const auto codes = book.tensors<T>(ids, model_.detector.channels);
    const auto out = conditional_classify(heads_[image].cls_features, codes);
    return std::vector<double>(out.data().begin(), out.data().end());
  }

  /// Per-class survivors before the global cap.
  std::map<int, std::vector<Detection>> per_class_detections(std::size_t image, const CodeBook& book,
                                                             const std::vector<int>& ids,
                                                             const DecodeParams& params) const {
    std::map<int, std::vector<Detection>> out;
    if (ids.empty()) return out;
    const auto lg = logits(image, book, ids);
    const auto& h = heads_[image];
    const std::size_t HW = h.boxes.size();
    for (std::size_t m = 0; m < ids.size(); ++m) {
      out[ids[m]] = decode_class(ids[m], lg.data() + m * HW, h.boxes, h.ctr_prob, double(h.image_width),
                                 double(h.image_height), params);
    }
    return out;
  }

  std::vector<Detection> detect(std::size_t image, const CodeBook& book, const DecodeParams& params) const {
    const auto ids = book.class_ids();
    auto per = per_class_detections(image, book, ids, params);
    std::vector<std::vector<Detection>> lists;
    for (auto& [_, v] : per) lists.push_back(std::move(v));
    return merge_detections(std::move(lists), params.max_dets);
  }

 private:
  const Model<T>& model_;
  const Dataset& data_;
  std::string split_;
  std::vector<ImageHeads<T>> heads_;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// AP over `classes` (default: every class with eval ground truth) given
/// detections per image. Classes without a code are excluded with a warning.
inline EvalReport score_detections(const Dataset& data, const std::string& split_name,
                                   const std::vector<std::vector<Detection>>& detections, const CodeBook& book,
                                   const ClassSplit& split) {
  const auto& split_data = data.split(split_name);
  EvalReport rep;
  rep.n_images = split_data.size();
  std::map<int, std::size_t> n_gt;
  for (const auto& anns : split_data.annotations)
    for (const auto& a : anns) ++n_gt[a.class_id];
  const std::set<int> base(split.base.begin(), split.base.end());
  std::vector<double> ap_all, ap50_all, ap_b, ap50_b, ap_n, ap50_n;
  for (int c : split.all()) {
    if (!n_gt.count(c)) continue;
    if (!book.contains(c)) {
      rep.warnings.push_back("class " + std::to_string(c) + " is not enrolled; excluded from AP");
      continue;
    }
    struct Scored {
      double score;
      std::size_t image, rank;
    };
    std::vector<std::vector<bool>> tp_per_thresh(iou_thresholds().size());
    std::vector<Scored> order;
    std::vector<std::vector<std::vector<bool>>> image_tp(split_data.size());
    for (std::size_t i = 0; i < split_data.size(); ++i) {
      std::vector<Box> det_boxes, gt_boxes;
      std::vector<double> scores;
      for (const auto& d : detections[i])
        if (d.class_id == c) {
          det_boxes.push_back(d.box);
          scores.push_back(d.score);
        }
      for (const auto& a : split_data.annotations[i])
        if (a.class_id == c) gt_boxes.push_back(a.box);
      for (std::size_t t = 0; t < iou_thresholds().size(); ++t) {
        image_tp[i].push_back(match_predictions(det_boxes, gt_boxes, iou_thresholds()[t]));
      }
      for (std::size_t k = 0; k < scores.size(); ++k) order.push_back({scores[k], i, k});
    }
    std::stable_sort(order.begin(), order.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
    ClassAp ca;
    ca.n_gt = n_gt[c];
    double ap_sum = 0;
    for (std::size_t t = 0; t < iou_thresholds().size(); ++t) {
      std::vector<bool> tp;
      for (const auto& s : order) tp.push_back(image_tp[s.image][t][s.rank]);
      const double ap = *average_precision(tp, ca.n_gt);
      ap_sum += ap;
      if (t == 0) ca.ap50 = ap;
    }
    ca.ap = ap_sum / static_cast<double>(iou_thresholds().size());
    rep.per_class[c] = ca;
    ap_all.push_back(ca.ap);
    ap50_all.push_back(ca.ap50);
    (base.count(c) ? ap_b : ap_n).push_back(ca.ap);
    (base.count(c) ? ap50_b : ap50_n).push_back(ca.ap50);
  }
  rep.ap = detail::mean_of(ap_all);
  rep.ap50 = detail::mean_of(ap50_all);
  rep.ap_base = detail::mean_of(ap_b);
  rep.ap50_base = detail::mean_of(ap50_b);
  rep.ap_novel = detail::mean_of(ap_n);
  rep.ap50_novel = detail::mean_of(ap50_n);
  return rep;
}

/// One pass per image over the whole codebook, AP per split.
template <std::floating_point T>
EvalReport evaluate(const EvalContext<T>& ctx, const CodeBook& book, const DecodeParams& params,
                    const ClassSplit& split) {
  std::vector<std::vector<Detection>> dets;
  for (std::size_t i = 0; i < ctx.size(); ++i) dets.push_back(ctx.detect(i, book, params));
  return score_detections(ctx.data(), ctx.split(), dets, book, split);
}

template <std::floating_point T>
EvalReport evaluate(const Model<T>& model, const CodeBook& book, const Dataset& data, const DecodeParams& params) {
  EvalContext<T> ctx(model, data);
  return evaluate(ctx, book, params, ClassSplit::of(data));
}

// ------------------------------------------------------ incremental protocol

struct EnrollmentSchedule {
  std::vector<int> initial;               // enrolled before the first step
  std::vector<std::vector<int>> steps;    // classes enrolled at each step
  std::size_t shots = 10;
};

inline EnrollmentSchedule parse_schedule(const nlohmann::json& j, const Dataset& data) {
  EnrollmentSchedule s;
  auto ids = [&](const nlohmann::json& v) -> std::vector<int> {
    if (v.is_string()) {
      const auto name = v.get<std::string>();
      if (name == "base") return data.base_classes;
      if (name == "novel") return data.novel_classes;
      throw std::invalid_argument("schedule: unknown class group '" + name + "'");
    }
    return v.get<std::vector<int>>();
  };
  for (const auto& [key, _] : j.items()) {
    if (key != "initial" && key != "steps" && key != "shots") {
      throw std::invalid_argument("schedule: unknown key '" + key + "'");
    }
  }
  if (j.contains("initial")) s.initial = ids(j.at("initial"));
  if (!j.contains("steps")) throw std::invalid_argument("schedule: missing 'steps'");
  for (const auto& step : j.at("steps")) s.steps.push_back(ids(step));
  if (j.contains("shots")) s.shots = j.at("shots").get<std::size_t>();
  return s;
}

/// Rejects unknown or repeated class ids before anything is enrolled.
inline void validate_schedule(const EnrollmentSchedule& s, const Dataset& data) {
  std::set<int> seen;
  auto check = [&](int c) {
    if (c < 0 || c >= data.spec.n_classes) throw std::invalid_argument("schedule: unknown class " + std::to_string(c));
    if (!seen.insert(c).second) throw std::invalid_argument("schedule: class " + std::to_string(c) + " enrolled twice");
  };
  for (int c : s.initial) check(c);
  for (const auto& step : s.steps)
    for (int c : step) check(c);
  if (s.shots < 1) throw std::invalid_argument("schedule: shots must be >= 1");
}

struct IncrementalStep {
  std::vector<int> enrolled;        // cumulative
  EvalReport report;                // with the configured detection cap
  double forgetting = 0;            // mean over previously enrolled classes, uncapped AP
  std::map<int, double> uncapped_ap;
};

struct IncrementalRun {
  std::uint64_t seed = 0;
  std::vector<IncrementalStep> steps;
  CodeBook final_book;
};

struct IncrementalResult {
  std::vector<IncrementalRun> runs;
  std::vector<double> final_ap, final_ap_base, final_ap_novel, max_abs_forgetting;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0, 0};
  const double m = detail::mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Enrolls classes step by step, evaluating after each step. Forgetting is
/// measured on uncapped per-class AP: AP of every earlier class now minus
/// its AP at the step it was enrolled.
template <std::floating_point T>
IncrementalResult incremental_protocol(const Model<T>& model, const Dataset& data, const EnrollmentSchedule& schedule,
                                       std::size_t runs, std::uint64_t seed, const DecodeParams& params,
                                       std::vector<std::string>* warnings = nullptr) {
  validate_schedule(schedule, data);
  EvalContext<T> ctx(model, data);
  FeatureCache<T> features(model, data);
  DecodeParams uncapped = params;
  uncapped.max_dets = 0;
  IncrementalResult result;
  for (std::size_t r = 0; r < runs; ++r) {
    IncrementalRun run;
    run.seed = derive_seed(seed, 0x1bc, r);
    CodeBook book;
    std::map<int, double> ap_at_enrollment;
    std::vector<std::vector<int>> phases;
    if (!schedule.initial.empty()) phases.push_back(schedule.initial);
    phases.insert(phases.end(), schedule.steps.begin(), schedule.steps.end());
    for (const auto& phase : phases) {
      for (int c : phase) {
        auto support = sample_support(data, c, schedule.shots, run.seed);
        if (support.empty()) {
          if (warnings) warnings->push_back("class " + std::to_string(c) + " has no training instances; skipped");
          continue;
        }
        enroll(book, c, model, features, support);
      }
      IncrementalStep st;
      st.enrolled = book.class_ids();
      ClassSplit split{{}, {}};
      for (int c : st.enrolled) (data.is_novel(c) ? split.novel : split.base).push_back(c);
      st.report = evaluate(ctx, book, params, split);
      const auto unc = evaluate(ctx, book, uncapped, split);
      std::vector<double> deltas;
      for (const auto& [c, a] : unc.per_class) {
        st.uncapped_ap[c] = a.ap;
        if (!ap_at_enrollment.count(c)) {
          ap_at_enrollment[c] = a.ap;
        } else {
          deltas.push_back(a.ap - ap_at_enrollment[c]);
        }
      }
      st.forgetting = detail::mean_of(deltas);
      run.steps.push_back(std::move(st));
    }
    double max_forget = 0;
    for (const auto& st : run.steps) max_forget = std::max(max_forget, std::abs(st.forgetting));
    run.final_book = book;
    if (!run.steps.empty()) {
      result.final_ap.push_back(run.steps.back().report.ap);
      result.final_ap_base.push_back(run.steps.back().report.ap_base);
      result.final_ap_novel.push_back(run.steps.back().report.ap_novel);
    }
    result.max_abs_forgetting.push_back(max_forget);
    result.runs.push_back(std::move(run));
  }
  return result;
}

inline nlohmann::json to_json(const IncrementalResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& st : run.steps) {
      steps.push_back({{"enrolled", st.enrolled}, {"report", to_json(st.report)}, {"forgetting", st.forgetting}});
    }
    runs.push_back({{"seed", run.seed}, {"steps", steps}});
  }
  auto stat = [](const std::vector<double>& v) {
    const auto [m, s] = mean_std(v);
    return nlohmann::json{{"mean", m}, {"std", s}, {"values", v}};
  };
  return {{"runs", runs},
          {"seed_stats",
           {{"ap", stat(r.final_ap)},
            {"ap_base", stat(r.final_ap_base)},
            {"ap_novel", stat(r.final_ap_novel)},
            {"max_abs_forgetting", stat(r.max_abs_forgetting)}}}};
}

}  // namespace sylph
