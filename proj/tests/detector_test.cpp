#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "sylph/detector.hpp"
#include "sylph/gradcheck.hpp"
#include "sylph/hypernet.hpp"

using namespace sylph;

namespace {

DetectorConfig small_config() {
  DetectorConfig c;
  c.channels = 8;
  c.gn_groups = 2;
  c.tower_depth = 1;
  return c;
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Image img(h, w);
  Rng rng(seed);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(rng.integer(0, 255));
  return img;
}

CodeTensors<float> codes_of(const std::vector<int>& ids, const std::vector<std::vector<float>>& w,
                            const std::vector<float>& b) {
  std::vector<float> flat;
  for (const auto& row : w) flat.insert(flat.end(), row.begin(), row.end());
  return {ids, Tensor<float>({ids.size(), w.front().size()}, flat), Tensor<float>({ids.size()}, b)};
}

std::vector<Detection> nms_oracle(std::vector<Detection> cand, double thr) {
  // Exhaustive: a candidate survives iff no higher-scored survivor overlaps it.
  std::stable_sort(cand.begin(), cand.end(), [](auto& a, auto& b) { return a.score > b.score; });
  std::vector<bool> alive(cand.size(), true);
  for (std::size_t i = 0; i < cand.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (alive[j] && iou(cand[i].box, cand[j].box) > thr) alive[i] = false;
  std::vector<Detection> out;
  for (std::size_t i = 0; i < cand.size(); ++i)
    if (alive[i]) out.push_back(cand[i]);
  return out;
}

double inv_sigmoid(double p) { return std::log(p / (1 - p)); }

}  // namespace

TEST(Backbone, StrideEightOutputShape) {
  ParamStore<float> store;
  DetectorConfig cfg;
  init_detector(store, cfg, 1);
  const auto img = random_image(96, 96, 3);
  const auto f = extract_features(store, cfg, images_to_tensor<float>({&img}));
  EXPECT_EQ(f.shape(), (Shape{1, 64, 12, 12}));
}

TEST(Backbone, IdenticalImagesGiveIdenticalFeatures) {
  ParamStore<float> store;
  const auto cfg = small_config();
  init_detector(store, cfg, 1);
  const auto a = random_image(32, 40, 9), b = a;
  const auto fa = extract_features(store, cfg, images_to_tensor<float>({&a}));
  const auto fb = extract_features(store, cfg, images_to_tensor<float>({&b}));
  EXPECT_TRUE(std::equal(fa.data().begin(), fa.data().end(), fb.data().begin()));
}

TEST(Backbone, ZeroImageIsFinite) {
  ParamStore<float> store;
  const auto cfg = small_config();
  init_detector(store, cfg, 1);
  const Image zero(32, 32);
  const auto f = extract_features(store, cfg, images_to_tensor<float>({&zero}));
  for (float v : f.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(Backbone, RejectsSizesNotDivisibleByStride) {
  ParamStore<float> store;
  const auto cfg = small_config();
  init_detector(store, cfg, 1);
  const Image img(30, 32);
  EXPECT_THROW(extract_features(store, cfg, images_to_tensor<float>({&img})), std::invalid_argument);
}

TEST(Backbone, ParameterNamesFollowTheCheckpointLayout) {
  ParamStore<float> store;
  DetectorConfig cfg;
  init_detector(store, cfg, 1);
  init_code(store, cfg, 5, 1);
  for (const auto& [name, _] : store) {
    const bool ok = name.rfind("backbone.", 0) == 0 || name.rfind("cls_tower.", 0) == 0 ||
                    name.rfind("box_tower.", 0) == 0 || name.rfind("box_head.", 0) == 0 ||
                    name.rfind("ctr_head.", 0) == 0 || name.rfind("codes.", 0) == 0;
    EXPECT_TRUE(ok) << name;
  }
  EXPECT_TRUE(store.contains("codes.5.weight"));
  EXPECT_TRUE(store.contains("codes.5.bias"));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(store.contains("cls_tower." + std::to_string(i) + ".weight"));
    EXPECT_TRUE(store.contains("box_tower." + std::to_string(i) + ".weight"));
  }
}

TEST(ConditionalClassify, PriorCodeGivesPriorLogit) {
  const std::size_t C = 6;
  Rng rng(2);
  Tensor<float> feat({1, C, 3, 3}, std::vector<float>(C * 9));
  for (auto& v : feat.data()) v = static_cast<float>(rng.uniform(-2, 2));
  const float bp = static_cast<float>(prior_bias(0.01));
  const auto logits = conditional_classify(feat, codes_of({0}, {std::vector<float>(C, 0.f)}, {bp}));
  for (float v : logits.data()) {
    EXPECT_NEAR(v, -4.59512, 1e-5);
    EXPECT_NEAR(sigmoid(double(v)), 0.01, 1e-6);
  }
}

TEST(ConditionalClassify, DotProductWithCode) {
  const std::size_t C = 4;
  std::vector<float> f(C * 4, 0.f);
  for (std::size_t loc = 0; loc < 4; ++loc) f[loc] = 2.f;  // channel 0 = 2 everywhere
  Tensor<float> feat({1, C, 2, 2}, f);
  const float g = 1.75f;
  const auto logits = conditional_classify(feat, codes_of({3}, {{g, 0, 0, 0}}, {0.f}));
  for (float v : logits.data()) EXPECT_FLOAT_EQ(v, 2 * g);
}

TEST(ConditionalClassify, AddingAClassLeavesExistingMapsBitIdentical) {
  const std::size_t C = 16;
  Rng rng(4);
  Tensor<float> feat({2, C, 5, 7}, std::vector<float>(2 * C * 35));
  for (auto& v : feat.data()) v = static_cast<float>(rng.normal());
  std::vector<std::vector<float>> w(3, std::vector<float>(C));
  for (auto& row : w)
    for (auto& v : row) v = static_cast<float>(rng.normal());
  const auto one = conditional_classify(feat, codes_of({1}, {w[0]}, {0.3f}));
  const auto three = conditional_classify(feat, codes_of({1, 7, 9}, w, {0.3f, -1.f, 2.f}));
  const std::size_t HW = 35;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      ASSERT_EQ(one.data()[n * HW + i], three.data()[n * 3 * HW + i]);
    }
}

TEST(ConditionalClassify, CodeLengthMismatchNamesTheClass) {
  Tensor<float> feat({1, 4, 2, 2}, 0.f);
  try {
    conditional_classify(feat, codes_of({12}, {{1, 2, 3}}, {0.f}));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("class 12"), std::string::npos) << e.what();
  }
  CodeBook book;
  book.insert(21, ClassCode{{1, 2, 3}, 0}, CodeSource::hypernet);
  try {
    book.tensors<float>({21}, 4);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("class 21"), std::string::npos) << e.what();
  }
}

TEST(AssignTargets, CentreLocationHasUnitCenterness) {
  // Location (1,1) sits at pixel (12,12).
  const auto t = assign_targets(3, 3, {Box{4, 6, 20, 18}});
  const auto& c = t[1 * 3 + 1];
  ASSERT_EQ(c.gt, 0);
  EXPECT_DOUBLE_EQ(c.l, 8);
  EXPECT_DOUBLE_EQ(c.r, 8);
  EXPECT_DOUBLE_EQ(c.t, 6);
  EXPECT_DOUBLE_EQ(c.b, 6);
  EXPECT_DOUBLE_EQ(c.centerness, 1.0);
}

TEST(AssignTargets, OutsideEveryBoxIsNegative) {
  const auto t = assign_targets(4, 4, {Box{0, 0, 10, 10}});
  EXPECT_EQ(t[0].gt, 0);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_EQ(t[i].gt, -1) << i;
  for (const auto& x : assign_targets(2, 2, {})) EXPECT_EQ(x.gt, -1);
}

TEST(AssignTargets, SmallestContainingBoxWinsAgainstEnumerationOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<Box> boxes;
    const int n = static_cast<int>(rng.integer(1, 4));
    for (int k = 0; k < n; ++k) {
      const double x1 = rng.uniform(0, 40), y1 = rng.uniform(0, 40);
      boxes.push_back({x1, y1, x1 + rng.uniform(4, 40), y1 + rng.uniform(4, 40)});
    }
    const auto t = assign_targets(6, 6, boxes);
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const double px = location_coord(x), py = location_coord(y);
        int best = -1;
        double best_area = 0;
        for (int k = 0; k < n; ++k) {
          const auto& b = boxes[static_cast<std::size_t>(k)];
          if (!(px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2)) continue;
          if (best < 0 || b.area() < best_area) {
            best = k;
            best_area = b.area();
          }
        }
        const auto& got = t[y * 6 + x];
        ASSERT_EQ(got.gt, best);
        if (best >= 0) {
          const auto& b = boxes[static_cast<std::size_t>(best)];
          EXPECT_DOUBLE_EQ(got.l, px - b.x1);
          EXPECT_DOUBLE_EQ(got.b, b.y2 - py);
          const double want = std::sqrt(std::min(got.l, got.r) / std::max(got.l, got.r) *
                                        (std::min(got.t, got.b) / std::max(got.t, got.b)));
          EXPECT_NEAR(got.centerness, want, 1e-12);
        }
      }
  }
}

TEST(DetectorLoss, PerfectPredictionHasNearZeroLoss) {
  DetectorConfig cfg;
  // 16×16 image, 2×2 grid: only location (0,0) at (4,4) lies inside the box.
  const auto targets = build_targets<double>({{{0, Box{0, 0, 8, 8}}}}, {0}, 2, 2);
  ASSERT_EQ(targets.positives.size(), 1u);
  std::vector<double> logits(4, -40.0);
  logits[0] = 40.0;
  std::vector<double> raw(16, 0.0);
  for (int k = 0; k < 4; ++k) raw[static_cast<std::size_t>(k) * 4] = std::log(4.0 / cfg.box_scale);
  std::vector<double> ctr(4, 40.0);
  const auto loss = detector_loss(cfg, Tensor<double>({1, 1, 2, 2}, logits),
                                  BoxOutputs<double>{Tensor<double>({1, 4, 2, 2}, raw), Tensor<double>({1, 1, 2, 2}, ctr)},
                                  targets);
  EXPECT_LT(loss.total.item(), 1e-9);
}

TEST(DetectorLoss, NoPositivesMeansZeroBoxAndCenterness) {
  DetectorConfig cfg;
  const auto targets = build_targets<double>({{}}, {0}, 2, 2);
  Rng rng(3);
  const auto loss = detector_loss(cfg, Tensor<double>({1, 1, 2, 2}, oracle::random_values(rng, 4)),
                                  BoxOutputs<double>{Tensor<double>({1, 4, 2, 2}, oracle::random_values(rng, 16)),
                                                     Tensor<double>({1, 1, 2, 2}, oracle::random_values(rng, 4))},
                                  targets);
  EXPECT_EQ(loss.box.item(), 0.0);
  EXPECT_EQ(loss.ctr.item(), 0.0);
  EXPECT_GT(loss.cls.item(), 0.0);
}

TEST(DetectorLoss, HalfIouGivesHalfBoxLoss) {
  DetectorConfig cfg;
  const auto targets = build_targets<double>({{{0, Box{0, 0, 8, 8}}}}, {0}, 2, 2);
  std::vector<double> raw(16, 0.0);
  const double d[4] = {4, 4, 4, 12};  // l, t, r, b: predicted box 8×16 covering the 8×8 target
  for (int k = 0; k < 4; ++k) raw[static_cast<std::size_t>(k) * 4] = std::log(d[k] / cfg.box_scale);
  const auto loss = detector_loss(cfg, Tensor<double>({1, 1, 2, 2}, 0.0),
                                  BoxOutputs<double>{Tensor<double>({1, 4, 2, 2}, raw), Tensor<double>({1, 1, 2, 2}, 0.0)},
                                  targets);
  EXPECT_NEAR(loss.box.item(), 0.5, 1e-12);
}

TEST(DetectorLoss, GradCheckOnOneImageMicroBatch) {
  ParamStore<double> store;
  const auto cfg = small_config();
  init_detector(store, cfg, 11);
  init_code(store, cfg, 0, 11);
  init_code(store, cfg, 1, 11);
  Image img = random_image(24, 24, 5);
  const auto x = images_to_tensor<double>({&img});
  const auto targets = build_targets<double>({{{0, Box{2, 2, 20, 14}}, {1, Box{10, 6, 23, 23}}}}, {0, 1}, 3, 3);
  ASSERT_GT(targets.positives.size(), 1u);
  std::vector<Tensor<double>> inputs;
  for (const char* name : {"cls_tower.0.weight", "box_tower.0.weight", "box_head.weight", "box_head.bias",
                           "ctr_head.weight", "codes.0.weight", "codes.1.bias"}) {
    inputs.push_back(store.at(name));
  }
  auto fn = [&](const std::vector<Tensor<double>>&) {
    auto feat = extract_features(store, cfg, x);
    auto logits = conditional_classify(tower_forward(store, cfg, "cls_tower", feat), stored_codes(store, {0, 1}));
    return detector_loss(cfg, logits, box_branch(store, cfg, feat), targets).total;
  };
  GradCheckOptions opts;
  opts.max_elements_per_input = 24;
  opts.epsilon = 1e-6;
  const auto r = grad_check(fn, inputs, opts);
  EXPECT_TRUE(r.passed(1e-3)) << r.max_relative_error << " input " << r.worst_input;
}

TEST(DecodeAndNms, IdenticalBoxesSameClassKeepOne) {
  const std::vector<Box> boxes{{10, 10, 30, 30}, {10, 10, 30, 30}};
  const std::vector<double> ctr{1.0, 1.0};
  DecodeParams p;
  const auto dets = decode_and_nms({4}, {inv_sigmoid(0.81), inv_sigmoid(0.64)}, boxes, ctr, 96, 96, p);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_NEAR(dets[0].score, 0.9, 1e-12);
}

TEST(DecodeAndNms, IdenticalBoxesDifferentClassesBothSurvive) {
  const std::vector<Box> boxes{{10, 10, 30, 30}};
  const auto dets = decode_and_nms({1, 2}, {inv_sigmoid(0.81), inv_sigmoid(0.64)}, boxes, {1.0}, 96, 96, {});
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].class_id, 1);
  EXPECT_EQ(dets[1].class_id, 2);
}

TEST(DecodeAndNms, GlobalCapKeepsHighestScores) {
  std::vector<Box> boxes;
  std::vector<double> logits, ctr;
  Rng rng(6);
  std::vector<double> scores;
  for (int i = 0; i < 150; ++i) {
    const double x = (i % 15) * 40.0, y = (i / 15) * 40.0;  // disjoint boxes
    boxes.push_back({x, y, x + 20, y + 20});
    const double p = rng.uniform(0.1, 0.99);
    logits.push_back(inv_sigmoid(p));
    ctr.push_back(1.0);
    scores.push_back(std::sqrt(p));
  }
  DecodeParams params;
  const auto dets = decode_and_nms({0}, logits, boxes, ctr, 1000, 1000, params);
  ASSERT_EQ(dets.size(), 100u);
  std::sort(scores.rbegin(), scores.rend());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_NEAR(dets[i].score, scores[i], 1e-12);
}

TEST(DecodeAndNms, HandBuiltCaseMatchesExhaustiveOracle) {
  // Chain A-B-C: A suppresses B, B would suppress C but B is gone, so C survives.
  const std::vector<Box> boxes{{0, 0, 10, 10}, {2, 0, 12, 10}, {5, 0, 15, 10}};
  const std::vector<double> p{0.9, 0.8, 0.7};
  std::vector<double> logits;
  for (double v : p) logits.push_back(inv_sigmoid(v));
  const std::vector<double> ctr{1, 1, 1};
  DecodeParams params;
  params.nms_iou = 0.5;
  const auto dets = decode_and_nms({0}, logits, boxes, ctr, 100, 100, params);
  std::vector<Detection> cand;
  for (std::size_t i = 0; i < 3; ++i) cand.push_back({boxes[i], 0, std::sqrt(p[i])});
  EXPECT_EQ(dets, nms_oracle(cand, 0.5));
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[1].box, boxes[2]);
}

TEST(DecodeAndNms, RandomCasesMatchExhaustiveOracle) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = static_cast<std::size_t>(rng.integer(1, 12));
    std::vector<Box> boxes;
    std::vector<double> logits, ctr;
    std::vector<Detection> cand;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
      boxes.push_back({x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)});
      const double p = rng.uniform(0.06, 0.99), c = rng.uniform(0.05, 1.0);
      logits.push_back(inv_sigmoid(p));
      ctr.push_back(c);
      cand.push_back({clip_box(boxes.back(), 48, 48), 0, std::sqrt(p * c)});
    }
    DecodeParams params;
    params.score_thresh = 0.05;
    const auto dets = decode_and_nms({0}, logits, boxes, ctr, 48, 48, params);
    const auto want = nms_oracle(cand, params.nms_iou);
    ASSERT_EQ(dets.size(), want.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
      EXPECT_EQ(dets[i].box, want[i].box);
      EXPECT_NEAR(dets[i].score, want[i].score, 1e-12);
    }
  }
}

TEST(DecodeAndNms, BoxesAreClippedToTheImage) {
  const auto dets = decode_and_nms({0}, {3.0}, {Box{-5, -3, 120, 40}}, {0.9}, 96, 96, {});
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].box, (Box{0, 0, 96, 40}));
  EXPECT_GE(dets[0].score, 0.0);
  EXPECT_LE(dets[0].score, 1.0);
}

TEST(DecodeAndNms, PerClassSurvivorsIgnoreOtherClasses) {
  Rng rng(31);
  const std::size_t HW = 30;
  std::vector<Box> boxes;
  std::vector<double> ctr;
  for (std::size_t i = 0; i < HW; ++i) {
    const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
    boxes.push_back({x, y, x + rng.uniform(8, 30), y + rng.uniform(8, 30)});
    ctr.push_back(rng.uniform(0.2, 1));
  }
  const std::vector<double> mine = oracle::random_values(rng, HW, -3, 3);
  DecodeParams uncapped;
  uncapped.max_dets = 0;
  const auto alone = decode_and_nms({5}, mine, boxes, ctr, 96, 96, uncapped);
  const std::vector<double> before = oracle::random_values(rng, HW, -3, 3), after = oracle::random_values(rng, HW, -3, 3);
  std::vector<double> with_others;
  for (const std::vector<double>* part : {&before, &mine, &after})
    for (double v : *part) with_others.push_back(v);
  const auto merged = decode_and_nms({2, 5, 9}, with_others, boxes, ctr, 96, 96, uncapped);
  std::vector<Detection> only5;
  for (const auto& d : merged)
    if (d.class_id == 5) only5.push_back(d);
  EXPECT_EQ(only5, alone);
}
