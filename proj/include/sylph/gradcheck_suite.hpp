#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sylph/geometry.hpp"
#include "sylph/gradcheck.hpp"
#include "sylph/hypernet.hpp"
#include "sylph/losses.hpp"
#include "sylph/synth.hpp"
#include "sylph/train.hpp"

namespace sylph {

/// One named finite-difference check in 64-bit mode.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult()> run;
};

namespace detail {

inline Tensor<double> random_input(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v), true);
}

inline DatasetSpec gradcheck_dataset() {
  DatasetSpec spec;
  spec.n_classes = 12;
  spec.base_class_count = 8;
  spec.image_height = spec.image_width = 48;
  spec.min_glyph = 12;
  spec.max_glyph = 24;
  return spec;
}

inline DetectorConfig gradcheck_detector() {
  DetectorConfig d;
  d.channels = 8;
  d.gn_groups = 2;
  d.tower_depth = 1;
  return d;
}

inline HypernetConfig gradcheck_hypernet() {
  HypernetConfig h;
  h.feature_channels = h.code_channels = 8;
  h.gn_groups = 2;
  return h;
}

}  // namespace detail

/// Every differentiable op plus the composed detector and episode losses.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using TD = Tensor<double>;
  using detail::random_input;
  std::vector<GradCheckCase> cases;

  cases.push_back({"conv2d", [] {
                     Rng rng(4);
                     std::vector<TD> in{random_input(rng, {2, 2, 5, 5}), random_input(rng, {3, 2, 3, 3}),
                                        random_input(rng, {3})};
                     return grad_check([](const auto& v) { return fixed_projection(conv2d(v[0], v[1], v[2], 2, 1)); },
                                       in);
                   }});
  cases.push_back({"group_norm", [] {
                     Rng rng(7);
                     std::vector<TD> in{random_input(rng, {2, 4, 3, 3}), random_input(rng, {4}, 0.5, 1.5),
                                        random_input(rng, {4})};
                     return grad_check([](const auto& v) { return fixed_projection(group_norm(v[0], 2, v[1], v[2])); },
                                       in);
                   }});
  cases.push_back({"relu", [] {
                     Rng rng(21);
                     std::vector<double> vals(30);
                     for (auto& v : vals) {
                       do v = rng.uniform(-1, 1);
                       while (std::abs(v) <= 1e-3);
                     }
                     std::vector<TD> in{TD({30}, vals, true)};
                     return grad_check([](const auto& v) { return fixed_projection(relu(v[0])); }, in);
                   }});
  cases.push_back({"l2_normalize", [] {
                     Rng rng(9);
                     std::vector<TD> in{random_input(rng, {3, 5})};
                     return grad_check([](const auto& v) { return fixed_projection(l2_normalize(v[0])); }, in);
                   }});
  cases.push_back({"global_avg_pool", [] {
                     Rng rng(17);
                     std::vector<TD> in{random_input(rng, {2, 3, 4, 4})};
                     return grad_check([](const auto& v) { return fixed_projection(global_avg_pool(v[0])); }, in);
                   }});
  cases.push_back({"elementwise", [] {
                     Rng rng(22);
                     std::vector<TD> in{random_input(rng, {4, 3}), random_input(rng, {1}, 0.5, 2),
                                        random_input(rng, {2, 3, 2, 2}), random_input(rng, {4, 3})};
                     return grad_check(
                         [](const auto& v) {
                           auto rows = stack(std::vector<TD>{mean_rows(slice_rows(v[0], 0, 2)),
                                                             mean_rows(slice_rows(v[0], 2, 2))});
                           auto scaled = mul_scalar(exp(scale(rows, 0.5)), v[1]);
                           auto gathered = gather_locations(v[2], {0, 3, 5, 7});
                           auto prod = sub(mul(v[0], v[3]), v[0]);
                           return add(add(fixed_projection(scaled), fixed_projection(add_constant(gathered, 1.0))),
                                      add(mean(prod), sum(reshape(v[3], {12}))));
                         },
                         in);
                   }});
  cases.push_back({"code_classify", [] {
                     Rng rng(23);
                     std::vector<TD> in{random_input(rng, {2, 4, 3, 3}), random_input(rng, {3, 4}),
                                        random_input(rng, {3})};
                     return grad_check(
                         [](const auto& v) { return fixed_projection(code_classify(v[0], v[1], v[2])); }, in);
                   }});
  cases.push_back({"focal_loss", [] {
                     Rng rng(11);
                     std::vector<TD> in{random_input(rng, {40}, -5, 5)};
                     std::vector<double> t(40, 0.0);
                     for (std::size_t i = 0; i < 40; i += 7) t[i] = 1.0;
                     return grad_check([&](const auto& v) { return focal_loss(v[0], t); }, in);
                   }});
  cases.push_back({"bce_with_logits", [] {
                     Rng rng(12);
                     std::vector<TD> in{random_input(rng, {10}, -3, 3)};
                     std::vector<double> t(10);
                     for (auto& x : t) x = rng.uniform();
                     return grad_check([&](const auto& v) { return bce_with_logits(v[0], t); }, in);
                   }});
  cases.push_back({"iou_loss", [] {
                     Rng rng(13);
                     std::vector<TD> in{random_input(rng, {6, 4}, 0.5, 3)};
                     std::vector<double> t(24);
                     for (auto& x : t) x = rng.uniform(0.5, 3);
                     return grad_check([&](const auto& v) { return iou_loss_ltrb(v[0], t); }, in);
                   }});
  cases.push_back({"roi_align", [] {
                     Rng rng(6);
                     std::vector<TD> in{random_input(rng, {2, 2, 5, 6})};
                     const std::vector<Roi> rois{{0, Box{3, 5, 30, 33}}, {1, Box{12, 1, 44, 20}}};
                     return grad_check([&](const auto& x) { return fixed_projection(roi_align(x[0], rois)); }, in);
                   }});
  cases.push_back({"code_predictor_head", [] {
                     const auto cfg = detail::gradcheck_hypernet();
                     ParamStore<double> store;
                     init_hypernet(store, cfg, 5);
                     Rng rng(4);
                     std::vector<TD> in{random_input(rng, {2, 8, 7, 7}), store.at("hypernet.shared.0.weight"),
                                        store.at("hypernet.bias_head.weight")};
                     GradCheckOptions o;
                     o.max_elements_per_input = 40;
                     o.epsilon = 1e-6;
                     return grad_check(
                         [&](const auto& x) {
                           const auto s = cph_forward(store, cfg, x[0]);
                           return add(fixed_projection(s.weight), fixed_projection(s.bias, 5));
                         },
                         in, o);
                   }});
  cases.push_back({"code_process_module", [] {
                     const auto cfg = detail::gradcheck_hypernet();
                     ParamStore<double> store;
                     init_hypernet(store, cfg, 1);
                     store.at("hypernet.g").data()[0] = 1.7;
                     Rng rng(13);
                     std::vector<TD> in{random_input(rng, {4, 8}, -2, 2), random_input(rng, {4, 1}, -2, 2),
                                        store.at("hypernet.g"), store.at("hypernet.g_b")};
                     return grad_check(
                         [&](const auto& x) {
                           const auto [w, b] = cpm_aggregate(store, cfg, ShotCodes<double>{x[0], x[1]});
                           return add(fixed_projection(w), scale(b, 0.7));
                         },
                         in);
                   }});
  cases.push_back({"detector_loss", [] {
                     ParamStore<double> store;
                     auto cfg = detail::gradcheck_detector();
                     init_detector(store, cfg, 11);
                     init_code(store, cfg, 0, 11);
                     init_code(store, cfg, 1, 11);
                     Image img(24, 24);
                     Rng rng(5);
                     for (auto& p : img.rgb) p = static_cast<std::uint8_t>(rng.integer(0, 255));
                     const auto x = images_to_tensor<double>({&img});
                     const auto targets =
                         build_targets<double>({{{0, Box{2, 2, 20, 14}}, {1, Box{10, 6, 23, 23}}}}, {0, 1}, 3, 3);
                     std::vector<TD> in;
                     for (const char* name : {"cls_tower.0.weight", "box_tower.0.weight", "box_head.weight",
                                              "box_head.bias", "ctr_head.weight", "codes.0.weight", "codes.1.bias"}) {
                       in.push_back(store.at(name));
                     }
                     GradCheckOptions o;
                     o.max_elements_per_input = 24;
                     o.epsilon = 1e-6;
                     return grad_check(
                         [&](const auto&) {
                           auto feat = extract_features(store, cfg, x);
                           auto logits = conditional_classify(tower_forward(store, cfg, "cls_tower", feat),
                                                              stored_codes(store, {0, 1}));
                           return detector_loss(cfg, logits, box_branch(store, cfg, feat), targets).total;
                         },
                         in, o);
                   }});
  cases.push_back({"episode_loss", [] {
                     const Dataset data = generate(detail::gradcheck_dataset());
                     auto m = make_model<double>(detail::gradcheck_detector(), detail::gradcheck_hypernet(),
                                                 data.base_classes, 4);
                     init_hypernet(m.params, m.hypernet, 4);
                     m.params.at("hypernet.g").data()[0] = 2.0;
                     Rng rng(7);
                     const auto ep = sample_episode(data, data.base_classes, 2, 2, rng);
                     FeatureCache<double> cache(m, data);
                     auto query = [&](const std::vector<std::size_t>& images) {
                       return tower_forward(m.params, m.detector, "cls_tower", cache.gather("train", images));
                     };
                     std::vector<TD> in;
                     for (const char* name : {"hypernet.shared.0.weight", "hypernet.shared.1.gn.weight",
                                              "hypernet.weight_head.weight", "hypernet.bias_head.weight", "hypernet.g",
                                              "hypernet.g_b", "cls_tower.0.weight"}) {
                       in.push_back(m.params.at(name));
                     }
                     GradCheckOptions o;
                     o.max_elements_per_input = 16;
                     o.epsilon = 1e-6;
                     return grad_check(
                         [&](const auto&) { return episode_loss<double>(m, data, ep, cache, query).loss; }, in, o);
                   }});
  return cases;
}

/// Runs one named case, or every case for "all".
inline std::vector<std::pair<std::string, GradCheckResult>> run_gradchecks(const std::string& op) {
  std::vector<std::pair<std::string, GradCheckResult>> out;
  std::vector<std::string> names;
  for (auto& c : gradcheck_cases()) {
    names.push_back(c.name);
    if (op == "all" || op == c.name) out.emplace_back(c.name, c.run());
  }
  if (out.empty()) {
    std::string list;
    for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
    throw std::invalid_argument("gradcheck: unknown op '" + op + "' (known: " + list + ", all)");
  }
  return out;
}

}  // namespace sylph
