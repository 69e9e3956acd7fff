#include <gtest/gtest.h>

#include "oracles.hpp"
#include "sylph/pipeline.hpp"
#include "sylph/synth.hpp"

using namespace sylph;

namespace {

std::vector<std::vector<double>> iou_matrix(const std::vector<Box>& d, const std::vector<Box>& g) {
  std::vector<std::vector<double>> m(d.size(), std::vector<double>(g.size()));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j) m[i][j] = iou(d[i], g[j]);
  return m;
}

Box random_box(Rng& rng) {
  const double x = rng.uniform(0, 20), y = rng.uniform(0, 20);
  return {x, y, x + rng.uniform(2, 12), y + rng.uniform(2, 12)};
}

RunConfig small_config() {
  RunConfig cfg;
  cfg.dataset.n_classes = 12;
  cfg.dataset.base_class_count = 8;
  cfg.dataset.image_height = cfg.dataset.image_width = 48;
  cfg.dataset.min_glyph = 12;
  cfg.dataset.max_glyph = 24;
  cfg.detector.channels = 8;
  cfg.detector.gn_groups = 2;
  cfg.detector.tower_depth = 1;
  cfg.hypernet.feature_channels = cfg.hypernet.code_channels = 8;
  cfg.hypernet.gn_groups = 2;
  cfg.train.pretrain.steps = 4;
  cfg.train.pretrain.decay_steps = {};
  cfg.train.pretrain.batch = 2;
  cfg.train.meta.steps = 3;
  cfg.train.meta.decay_steps = {};
  cfg.eval.shots = 3;
  return cfg;
}

struct Fixture {
  RunConfig cfg;
  Dataset data;
  Model<float> model;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x{small_config(), {}, {}};
    x.data = generate(x.cfg.dataset);
    x.model = make_model<float>(x.cfg.detector, x.cfg.hypernet, x.data.base_classes, 3);
    init_hypernet(x.model.params, x.model.hypernet, 3);
    return x;
  }();
  return f;
}

DecodeParams permissive(std::size_t cap = 100) {
  DecodeParams p;
  p.score_thresh = 0.0;
  p.max_dets = cap;
  return p;
}

CodeBook enroll_all(const std::vector<int>& classes, std::size_t shots, std::uint64_t seed) {
  const auto& f = fixture();
  FeatureCache<float> cache(f.model, f.data);
  CodeBook book;
  for (int c : classes) enroll(book, c, f.model, cache, sample_support(f.data, c, shots, seed));
  return book;
}

}  // namespace

// ------------------------------------------------------------------ matching

TEST(Match, ExactOverlapIsTruePositiveAtEveryThreshold) {
  const Box b{2, 2, 9, 7};
  for (double t : iou_thresholds()) EXPECT_EQ(match_predictions({b}, {b}, t), std::vector<bool>{true});
}

TEST(Match, SecondDetectionOnSameGroundTruthIsFalsePositive) {
  const Box g{0, 0, 10, 10};
  EXPECT_EQ(match_predictions({{0, 0, 10, 9}, {0, 0, 10, 10}}, {g}, 0.5), (std::vector<bool>{true, false}));
}

TEST(Match, CraftedThreeByTwoMatchesEnumeration) {
  const std::vector<Box> dets{{0, 0, 10, 10}, {1, 0, 11, 10}, {20, 20, 30, 30}};
  const std::vector<Box> gts{{0, 0, 10, 10}, {2, 0, 12, 10}};
  const auto got = match_predictions(dets, gts, 0.5);
  EXPECT_EQ(got, oracle::match_enumerate(iou_matrix(dets, gts), 0.5));
  EXPECT_EQ(got, (std::vector<bool>{true, true, false}));
}

TEST(Match, RandomCasesMatchEnumeration) {
  Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<Box> dets(1 + rng.index(5)), gts(1 + rng.index(4));
    for (auto& b : dets) b = random_box(rng);
    for (auto& b : gts) b = random_box(rng);
    const double thresh = iou_thresholds()[rng.index(10)] - 0.3;
    EXPECT_EQ(match_predictions(dets, gts, thresh), oracle::match_enumerate(iou_matrix(dets, gts), thresh))
        << "trial " << trial;
  }
}

// ------------------------------------------------------------------------ AP

TEST(AveragePrecision, Examples) {
  EXPECT_DOUBLE_EQ(*average_precision({true}, 1), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision({}, 1), 0.0);
  EXPECT_NEAR(*average_precision({true, false, true}, 2), (51.0 + 50.0 * 2.0 / 3.0) / 101.0, 1e-12);
  EXPECT_NEAR(*average_precision({true, false, true}, 2), 0.8350, 5e-5);
  EXPECT_FALSE(average_precision({false, false}, 0).has_value());
}

TEST(AveragePrecision, MatchesPointwiseCurveOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<bool> tp(rng.index(30));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) hits += tp[i] = rng.uniform() < 0.5;
    const std::size_t n_gt = hits + rng.index(5) + (hits == 0);
    EXPECT_NEAR(*average_precision(tp, n_gt), oracle::average_precision_pointwise(tp, n_gt), 1e-12)
        << "trial " << trial;
  }
}

TEST(AveragePrecision, BoundedAndMonotoneInAppendedHits) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<bool> tp(1 + rng.index(20));
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = rng.uniform() < 0.5;
    const std::size_t n_gt = tp.size() + 1;
    const double ap = *average_precision(tp, n_gt);
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
    auto more = tp;
    more.push_back(true);
    EXPECT_GE(*average_precision(more, n_gt), ap - 1e-12);
  }
}

// ------------------------------------------------------------------ evaluate

TEST(Evaluate, EmptyCodebookGivesZerosAndWarnings) {
  const auto& f = fixture();
  const auto rep = evaluate(f.model, CodeBook{}, f.data, f.cfg.eval.decode());
  EXPECT_EQ(rep.ap, 0.0);
  EXPECT_EQ(rep.ap50_novel, 0.0);
  EXPECT_TRUE(rep.per_class.empty());
  EXPECT_EQ(rep.warnings.size(), static_cast<std::size_t>(f.data.spec.n_classes));
}

TEST(Evaluate, RepeatedRunsGiveIdenticalReports) {
  const auto& f = fixture();
  const auto book = enroll_all(ClassSplit::of(f.data).all(), 3, 1);
  const auto a = evaluate(f.model, book, f.data, permissive());
  const auto b = evaluate(f.model, book, f.data, permissive());
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(a.per_class.size(), static_cast<std::size_t>(f.data.spec.n_classes));
}

TEST(Evaluate, ApIsUnweightedMeanOfClassAps) {
  const auto& f = fixture();
  const auto rep = evaluate(f.model, enroll_all(ClassSplit::of(f.data).all(), 3, 1), f.data, permissive());
  double sum = 0, base = 0;
  for (const auto& [c, a] : rep.per_class) {
    sum += a.ap;
    if (!f.data.is_novel(c)) base += a.ap;
  }
  EXPECT_NEAR(rep.ap, sum / rep.per_class.size(), 1e-12);
  EXPECT_NEAR(rep.ap_base, base / f.data.base_classes.size(), 1e-12);
}

TEST(Evaluate, BaseDetectionsIndependentOfNovelCodes) {
  const auto& f = fixture();
  EvalContext<float> ctx(f.model, f.data);
  const auto full = enroll_all(ClassSplit::of(f.data).all(), 3, 2);
  const auto base_only = enroll_all(f.data.base_classes, 3, 2);
  const auto uncapped = permissive(0);
  for (std::size_t i = 0; i < ctx.size(); i += 5) {
    const auto a = ctx.per_class_detections(i, base_only, base_only.class_ids(), uncapped);
    const auto b = ctx.per_class_detections(i, full, full.class_ids(), uncapped);
    for (int c : f.data.base_classes) EXPECT_EQ(a.at(c), b.at(c)) << "image " << i << " class " << c;
  }
}

TEST(Evaluate, SingleImageMatchesHandScoredReport) {
  const auto& f = fixture();
  std::vector<std::vector<Detection>> dets(f.data.eval.size());
  const auto& anns = f.data.eval.annotations[0];
  for (const auto& a : anns) dets[0].push_back({a.box, a.class_id, 0.9});
  CodeBook book = enroll_all(ClassSplit::of(f.data).all(), 1, 0);
  const auto rep = score_detections(f.data, "eval", dets, book, ClassSplit::of(f.data));
  const auto counts = f.data.class_counts("eval");
  for (const auto& a : anns) {
    const double expected = *average_precision({true}, counts.at(a.class_id));
    EXPECT_NEAR(rep.per_class.at(a.class_id).ap50, expected, 1e-12);
    EXPECT_NEAR(rep.per_class.at(a.class_id).ap, expected, 1e-12);
  }
}

// --------------------------------------------------------------- incremental

TEST(Incremental, EnrollmentLeavesCheckpointCodesAndDetectionsUntouched) {
  const auto& f = fixture();
  const auto hash_before = parameter_hash(f.model);
  FeatureCache<float> cache(f.model, f.data);
  EvalContext<float> ctx(f.model, f.data);
  const auto uncapped = permissive(0);
  CodeBook book;
  std::map<int, ClassCode> codes;
  std::map<std::pair<std::size_t, int>, std::vector<Detection>> lists;
  for (int c : {9, 2, 11, 0, 8, 5}) {
    enroll(book, c, f.model, cache, sample_support(f.data, c, 3, 7));
    EXPECT_EQ(parameter_hash(f.model), hash_before);
    for (const auto& [id, code] : codes) EXPECT_EQ(book.at(id), code) << id;
    codes.emplace(c, book.at(c));
    for (std::size_t i = 0; i < ctx.size(); i += 7) {
      const auto per = ctx.per_class_detections(i, book, book.class_ids(), uncapped);
      for (const auto& [id, list] : per) {
        auto [it, fresh] = lists.emplace(std::make_pair(i, id), list);
        if (!fresh) EXPECT_EQ(it->second, list) << "image " << i << " class " << id;
      }
    }
  }
}

TEST(Incremental, ForgettingIsZero) {
  const auto& f = fixture();
  EnrollmentSchedule s;
  s.initial = f.data.base_classes;
  for (int c : f.data.novel_classes) s.steps.push_back({c});
  s.shots = 3;
  const auto res = incremental_protocol(f.model, f.data, s, 2, 0, permissive());
  ASSERT_EQ(res.runs.size(), 2u);
  for (const auto& run : res.runs) {
    EXPECT_EQ(run.steps.size(), 1 + f.data.novel_classes.size());
    for (const auto& st : run.steps) EXPECT_EQ(st.forgetting, 0.0);
  }
  for (double m : res.max_abs_forgetting) EXPECT_EQ(m, 0.0);
  EXPECT_NE(res.runs[0].final_book, res.runs[1].final_book);
}

TEST(Incremental, OneClassScheduleEqualsBatchEnrollment) {
  const auto& f = fixture();
  const int c = f.data.novel_classes[1];
  EnrollmentSchedule s;
  s.steps = {{c}};
  s.shots = 3;
  const auto res = incremental_protocol(f.model, f.data, s, 1, 4, permissive());
  const auto book = enroll_all({c}, 3, res.runs[0].seed);
  EXPECT_EQ(res.runs[0].final_book, book);
  EvalContext<float> ctx(f.model, f.data);
  const auto direct = evaluate(ctx, book, permissive(), ClassSplit{{}, {c}});
  EXPECT_EQ(to_json(res.runs[0].steps[0].report).dump(), to_json(direct).dump());
}

TEST(Incremental, PermutedScheduleGivesIdenticalFinalReport) {
  const auto& f = fixture();
  EnrollmentSchedule a;
  a.initial = f.data.base_classes;
  a.steps = {{f.data.novel_classes[0]}, {f.data.novel_classes[1], f.data.novel_classes[2]}, {f.data.novel_classes[3]}};
  a.shots = 3;
  EnrollmentSchedule b = a;
  b.initial = {};
  b.steps = {{f.data.novel_classes[3], f.data.novel_classes[1]}, f.data.base_classes,
             {f.data.novel_classes[2], f.data.novel_classes[0]}};
  std::reverse(b.steps[1].begin(), b.steps[1].end());
  const auto ra = incremental_protocol(f.model, f.data, a, 2, 11, permissive());
  const auto rb = incremental_protocol(f.model, f.data, b, 2, 11, permissive());
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(ra.runs[r].final_book, rb.runs[r].final_book);
    EXPECT_EQ(to_json(ra.runs[r].steps.back().report).dump(), to_json(rb.runs[r].steps.back().report).dump());
  }
}

TEST(Incremental, BadSchedulesRejectedUpfront) {
  const auto& f = fixture();
  EnrollmentSchedule s;
  s.steps = {{0}, {99}};
  EXPECT_THROW(incremental_protocol(f.model, f.data, s, 1, 0, permissive()), std::invalid_argument);
  s.steps = {{0, 1}, {1}};
  EXPECT_THROW(incremental_protocol(f.model, f.data, s, 1, 0, permissive()), std::invalid_argument);
  s.steps = {{0}};
  s.shots = 0;
  EXPECT_THROW(incremental_protocol(f.model, f.data, s, 1, 0, permissive()), std::invalid_argument);
}

TEST(Incremental, ScheduleParsing) {
  const auto& f = fixture();
  const auto s = parse_schedule(nlohmann::json::parse(R"({"initial": "base", "steps": ["novel", [3]], "shots": 5})"),
                                f.data);
  EXPECT_EQ(s.initial, f.data.base_classes);
  ASSERT_EQ(s.steps.size(), 2u);
  EXPECT_EQ(s.steps[0], f.data.novel_classes);
  EXPECT_EQ(s.steps[1], std::vector<int>{3});
  EXPECT_EQ(s.shots, 5u);
  EXPECT_THROW(parse_schedule(nlohmann::json::parse(R"({"steps": [[1]], "order": 2})"), f.data),
               std::invalid_argument);
  EXPECT_THROW(parse_schedule(nlohmann::json::parse(R"({"initial": "rare"})"), f.data), std::invalid_argument);
}

TEST(Incremental, ReportCarriesMeanAndStd) {
  const auto& f = fixture();
  EnrollmentSchedule s;
  s.steps = {f.data.base_classes, f.data.novel_classes};
  s.shots = 2;
  const auto j = to_json(incremental_protocol(f.model, f.data, s, 3, 0, permissive()));
  EXPECT_EQ(j.at("runs").size(), 3u);
  EXPECT_EQ(j.at("seed_stats").at("ap_novel").at("values").size(), 3u);
  const auto [m, sd] = mean_std({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(m, 2.0);
  EXPECT_DOUBLE_EQ(sd, 1.0);
}

// ------------------------------------------------------------ ablation grid

TEST(Ablation, DefaultGridHasNineRowsAndParses) {
  const HypernetConfig base = fixture().cfg.hypernet;
  EXPECT_EQ(parse_grid(nlohmann::json::parse(R"({"rows": "default"})"), base).size(), 9u);
  const auto rows = parse_grid(nlohmann::json::parse(R"([{"bias": false, "convs": 0}, {}])"), base);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].use_bias);
  EXPECT_EQ(rows[0].shared_convs, 0u);
  EXPECT_EQ(rows[1].use_bias, base.use_bias);
  EXPECT_THROW(parse_grid(nlohmann::json::parse(R"([{"dropout": true}])"), base), std::invalid_argument);
  EXPECT_THROW(parse_grid(nlohmann::json::parse(R"([{"convs": 5}])"), base), std::invalid_argument);
  EXPECT_THROW(parse_grid(nlohmann::json::parse("[]"), base), std::invalid_argument);
}

TEST(Ablation, SingleRowIsPlainMetaTrainAndEvaluate) {
  const auto& f = fixture();
  const auto grid = ablation_grid(f.model, f.data, f.cfg, {f.cfg.hypernet}, {3});
  const auto direct =
      run_meta_eval(f.model, f.data, f.cfg, f.cfg.hypernet, Recipe::sylph, ClassSplit::of(f.data), 3);
  ASSERT_EQ(grid.size(), 1u);
  EXPECT_EQ(to_json(grid[0].reports[0]).dump(), to_json(direct.report).dump());
  EXPECT_EQ(grid[0].max_grad_norm[0], direct.stage.max_grad_norm);
}

TEST(Ablation, IdenticalRowsGiveIdenticalResultsAndCsv) {
  const auto& f = fixture();
  auto once = f.cfg.hypernet;
  once.use_bias = once.use_l2 = once.use_g = false;
  once.shared_convs = 0;
  const auto grid = ablation_grid(f.model, f.data, f.cfg, {once, once}, {0, 1});
  EXPECT_EQ(to_json(std::vector{grid[0]}).at(0).at("reports").dump(),
            to_json(std::vector{grid[1]}).at(0).at("reports").dump());
  const auto csv = ablation_csv(grid);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "bias,GN,L2,g,#conv,AP,AP_novel,AP_base,AP50,AP50_novel,AP50_base,AP_std,AP_novel_std,AP_base_std,"
            "max_grad_norm,seeds");
  std::istringstream lines(csv);
  std::string header, row1, row2, extra;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  EXPECT_FALSE(std::getline(lines, extra));
  EXPECT_EQ(row1, row2);
  EXPECT_EQ(row1.substr(0, 10), "0,1,0,0,0,");
}

// ----------------------------------------------------------------- base sweep

TEST(Sweep, CountsValidated) {
  const auto& f = fixture();
  EXPECT_THROW(validate_counts({}, f.data, 3), std::invalid_argument);
  EXPECT_THROW(validate_counts({9}, f.data, 3), std::invalid_argument);
  EXPECT_THROW(validate_counts({2}, f.data, 3), std::invalid_argument);
  EXPECT_NO_THROW(validate_counts({3, 8}, f.data, 3));
  try {
    base_count_sweep(f.data, f.cfg, {4, 40}, {0});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("40"), std::string::npos);
  }
}

TEST(Sweep, SubsetsAreMostFrequentBaseClasses) {
  const auto& f = fixture();
  const auto counts = f.data.class_counts("train");
  const auto sub = base_subset(f.data, 4);
  ASSERT_EQ(sub.size(), 4u);
  std::size_t weakest_in = SIZE_MAX, strongest_out = 0;
  for (int c : f.data.base_classes) {
    const bool in = std::count(sub.begin(), sub.end(), c) > 0;
    (in ? weakest_in : strongest_out) =
        in ? std::min(weakest_in, counts.at(c)) : std::max(strongest_out, counts.at(c));
  }
  EXPECT_GE(weakest_in, strongest_out);
  EXPECT_EQ(base_subset(f.data, 8), f.data.base_classes);
}

TEST(Sweep, NovelSetFixedAndFullCountEqualsStandardPipeline) {
  const auto& f = fixture();
  const auto pts = base_count_sweep(f.data, f.cfg, {4, 8}, {2});
  ASSERT_EQ(pts.size(), 2u);
  EXPECT_EQ(pts[0].novel_checksum, pts[1].novel_checksum);
  EXPECT_EQ(pts[0].novel_checksum, class_set_checksum(f.data.novel_classes));
  EXPECT_NE(class_set_checksum({1, 2}), class_set_checksum({1, 3}));
  EXPECT_EQ(class_set_checksum({3, 1}), class_set_checksum({1, 3}));
  for (const auto& p : pts) {
    EXPECT_EQ(p.report.per_class.size(), p.count + f.data.novel_classes.size());
  }
  const auto pre = run_pretrain(f.cfg, f.data, f.data.base_classes, 2);
  const auto std_run =
      run_meta_eval(pre.model, f.data, f.cfg, f.cfg.hypernet, Recipe::sylph, ClassSplit::of(f.data), 2);
  EXPECT_EQ(to_json(pts[1].report).dump(), to_json(std_run.report).dump());
  const auto csv = sweep_csv(pts);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "count,seed,novel_checksum,AP,AP_base,AP_novel,AP50,AP50_base,AP50_novel");
}
