#pragma once

#include <algorithm>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "sylph/config.hpp"
#include "sylph/eval.hpp"
#include "sylph/train.hpp"

namespace sylph {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct PretrainRun {
  Model<float> model;
  StageResult stage;
};

inline PretrainRun run_pretrain(const RunConfig& cfg, const Dataset& data, const std::vector<int>& classes,
                                std::uint64_t seed, const LogSink& sink = {}) {
  PretrainRun out;
  out.model = make_model<float>(cfg.detector, cfg.hypernet, classes, seed);
  PretrainOptions opts;
  opts.classes = classes;
  opts.seed = seed;
  out.stage = pretrain(out.model, data, cfg.train, opts, sink);
  return out;
}

struct MetaEvalRun {
  Model<float> model;
  StageResult stage;
  CodeBook book;
  EvalReport report;
};

/// Meta-trains a fresh hypernetwork of shape `hyper` on a copy of the
/// pretrained model, enrolls every class of `split` from K shots and
/// evaluates on the eval split.
inline MetaEvalRun run_meta_eval(const Model<float>& pretrained, const Dataset& data, const RunConfig& cfg,
                                 const HypernetConfig& hyper, Recipe recipe, const ClassSplit& split,
                                 std::uint64_t seed, const LogSink& sink = {}) {
  MetaEvalRun out;
  out.model = pretrained.clone();
  reset_hypernet(out.model, hyper, seed);
  MetaOptions opts;
  opts.recipe = recipe;
  opts.seed = seed;
  opts.classes = recipe == Recipe::joint ? split.all() : split.base;
  out.stage = meta_train(out.model, data, cfg.train, opts, sink);
  auto codes = generate_all_codes(out.model, data, split.all(), cfg.eval.shots, CodeMode::hypernet, seed);
  out.book = std::move(codes.book);
  EvalContext<float> ctx(out.model, data);
  out.report = evaluate(ctx, out.book, cfg.eval.decode(), split);
  out.report.warnings.insert(out.report.warnings.end(), codes.warnings.begin(), codes.warnings.end());
  return out;
}

// ------------------------------------------------------------- ablation grid

struct AblationRowResult {
  HypernetConfig hyper;
  std::vector<EvalReport> reports;  // per seed
  std::vector<double> max_grad_norm;
  std::vector<std::size_t> rejected_steps;
};

inline nlohmann::json grid_row_json(const HypernetConfig& h) {
  return {{"bias", h.use_bias}, {"gn", h.use_gn}, {"l2", h.use_l2}, {"g", h.use_g}, {"convs", h.shared_convs}};
}

/// Grid file rows: {"bias", "gn", "l2", "g", "convs"}; missing flags keep `base`.
inline std::vector<HypernetConfig> parse_grid(const nlohmann::json& j, const HypernetConfig& base) {
  const nlohmann::json* rows = &j;
  if (j.is_object()) {
    for (const auto& [k, _] : j.items())
      if (k != "rows") throw std::invalid_argument("grid: unknown key '" + k + "'");
    if (!j.contains("rows")) throw std::invalid_argument("grid: missing 'rows'");
    rows = &j.at("rows");
  }
  if (rows->is_string()) {
    if (rows->get<std::string>() == "default") return ablation_rows(base);
    throw std::invalid_argument("grid: rows must be an array or \"default\"");
  }
  if (!rows->is_array() || rows->empty()) throw std::invalid_argument("grid: rows must be a non-empty array");
  std::vector<HypernetConfig> out;
  for (const auto& r : *rows) {
    HypernetConfig h = base;
    for (const auto& [k, v] : r.items()) {
      if (k == "bias") h.use_bias = v.get<bool>();
      else if (k == "gn") h.use_gn = v.get<bool>();
      else if (k == "l2") h.use_l2 = v.get<bool>();
      else if (k == "g") h.use_g = v.get<bool>();
      else if (k == "convs") h.shared_convs = v.get<std::size_t>();
      else throw std::invalid_argument("grid: unknown row key '" + k + "'");
    }
    if (h.shared_convs > 2) throw std::invalid_argument("grid: convs must be 0, 1 or 2");
    out.push_back(h);
  }
  return out;
}

/// Every row is meta-trained from the same pretrained model with the same
/// seed set.
inline std::vector<AblationRowResult> ablation_grid(const Model<float>& pretrained, const Dataset& data,
                                                    const RunConfig& cfg, const std::vector<HypernetConfig>& rows,
                                                    const std::vector<std::uint64_t>& seeds,
                                                    const std::function<void(std::size_t, std::uint64_t)>& progress = {}) {
  std::vector<AblationRowResult> out;
  const auto split = ClassSplit::of(data);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    AblationRowResult row;
    row.hyper = rows[r];
    for (auto seed : seeds) {
      if (progress) progress(r, seed);
      auto run = run_meta_eval(pretrained, data, cfg, rows[r], Recipe::sylph, split, seed);
      row.reports.push_back(run.report);
      row.max_grad_norm.push_back(run.stage.max_grad_norm);
      row.rejected_steps.push_back(run.stage.rejected_steps);
    }
    out.push_back(std::move(row));
  }
  return out;
}

namespace detail {

template <class F>
std::vector<double> collect(const std::vector<EvalReport>& reports, F f) {
  std::vector<double> v;
  for (const auto& r : reports) v.push_back(f(r));
  return v;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v;
  return s.str();
}

}  // namespace detail

/// Columns: bias, GN, L2, g, #conv, AP, AP_novel, AP_base (means over seeds),
/// then AP50 means and standard deviations.
inline std::string ablation_csv(const std::vector<AblationRowResult>& rows) {
  std::ostringstream out;
  out << "bias,GN,L2,g,#conv,AP,AP_novel,AP_base,AP50,AP50_novel,AP50_base,AP_std,AP_novel_std,AP_base_std,"
         "max_grad_norm,seeds\n";
  auto flag = [](bool b) { return b ? "1" : "0"; };
  for (const auto& r : rows) {
    using detail::collect;
    const auto ap = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap; }));
    const auto apn = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap_novel; }));
    const auto apb = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap_base; }));
    const auto a50 = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap50; }));
    const auto a50n = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap50_novel; }));
    const auto a50b = mean_std(collect(r.reports, [](const EvalReport& e) { return e.ap50_base; }));
    const double gmax = r.max_grad_norm.empty() ? 0.0 : *std::max_element(r.max_grad_norm.begin(), r.max_grad_norm.end());
    out << flag(r.hyper.use_bias) << ',' << flag(r.hyper.use_gn) << ',' << flag(r.hyper.use_l2) << ','
        << flag(r.hyper.use_g) << ',' << r.hyper.shared_convs << ',' << detail::fmt(ap.first) << ','
        << detail::fmt(apn.first) << ',' << detail::fmt(apb.first) << ',' << detail::fmt(a50.first) << ','
        << detail::fmt(a50n.first) << ',' << detail::fmt(a50b.first) << ',' << detail::fmt(ap.second) << ','
        << detail::fmt(apn.second) << ',' << detail::fmt(apb.second) << ',' << detail::fmt(gmax) << ','
        << r.reports.size() << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const std::vector<AblationRowResult>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& e : r.reports) reports.push_back(to_json(e));
    out.push_back({{"row", grid_row_json(r.hyper)},
                   {"reports", reports},
                   {"max_grad_norm", r.max_grad_norm},
                   {"rejected_steps", r.rejected_steps}});
  }
  return out;
}

// ---------------------------------------------------------- base-count sweep

/// FNV-1a over the sorted class ids.
inline std::uint64_t class_set_checksum(std::vector<int> ids) {
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 1469598103934665603ULL;
  for (int id : ids) {
    for (int b = 0; b < 4; ++b) h = (h ^ ((static_cast<std::uint32_t>(id) >> (8 * b)) & 0xff)) * 1099511628211ULL;
  }
  return h;
}

/// The first `count` base classes in frequency order.
inline std::vector<int> base_subset(const Dataset& data, std::size_t count) {
  if (count > data.base_classes.size()) {
    throw std::invalid_argument("sweep: count " + std::to_string(count) + " exceeds the " +
                                std::to_string(data.base_classes.size()) + " available base classes");
  }
  std::vector<int> ranked = data.base_classes;
  const auto counts = data.class_counts("train");
  std::stable_sort(ranked.begin(), ranked.end(), [&](int a, int b) {
    const auto ca = counts.count(a) ? counts.at(a) : 0, cb = counts.count(b) ? counts.at(b) : 0;
    return ca != cb ? ca > cb : a < b;
  });
  ranked.resize(count);
  std::sort(ranked.begin(), ranked.end());
  return ranked;
}

struct SweepPoint {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::uint64_t novel_checksum = 0;
  std::vector<int> base;
  EvalReport report;
};

inline void validate_counts(const std::vector<std::size_t>& counts, const Dataset& data, int n_way) {
  if (counts.empty()) throw std::invalid_argument("sweep: no counts given");
  for (auto c : counts) {
    if (c > data.base_classes.size()) {
      throw std::invalid_argument("sweep: count " + std::to_string(c) + " exceeds the " +
                                  std::to_string(data.base_classes.size()) + " available base classes");
    }
    if (c < static_cast<std::size_t>(n_way)) {
      throw std::invalid_argument("sweep: count " + std::to_string(c) + " is below the episode way " +
                                  std::to_string(n_way));
    }
  }
}

/// For every count and seed: pretrain and meta-train on the base subset,
/// enroll subset and novel classes from K shots, evaluate.
inline std::vector<SweepPoint> base_count_sweep(const Dataset& data, const RunConfig& cfg,
                                                const std::vector<std::size_t>& counts,
                                                const std::vector<std::uint64_t>& seeds,
                                                const std::function<void(std::size_t, std::uint64_t)>& progress = {}) {
  validate_counts(counts, data, cfg.train.meta.n_way);
  std::vector<SweepPoint> out;
  for (auto count : counts) {
    const auto base = base_subset(data, count);
    for (auto seed : seeds) {
      if (progress) progress(count, seed);
      const ClassSplit split{base, data.novel_classes};
      auto pre = run_pretrain(cfg, data, base, seed);
      auto run = run_meta_eval(pre.model, data, cfg, cfg.hypernet, Recipe::sylph, split, seed);
      out.push_back({count, seed, class_set_checksum(data.novel_classes), base, run.report});
    }
  }
  return out;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::ostringstream out;
  out << "count,seed,novel_checksum,AP,AP_base,AP_novel,AP50,AP50_base,AP50_novel\n";
  for (const auto& p : points) {
    out << p.count << ',' << p.seed << ',' << p.novel_checksum << ',' << detail::fmt(p.report.ap) << ','
        << detail::fmt(p.report.ap_base) << ',' << detail::fmt(p.report.ap_novel) << ','
        << detail::fmt(p.report.ap50) << ',' << detail::fmt(p.report.ap50_base) << ','
        << detail::fmt(p.report.ap50_novel) << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const std::vector<SweepPoint>& points) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : points) {
    out.push_back({{"count", p.count},
                   {"seed", p.seed},
                   {"novel_checksum", p.novel_checksum},
                   {"base_classes", p.base},
                   {"report", to_json(p.report)}});
  }
  return out;
}

}  // namespace sylph
