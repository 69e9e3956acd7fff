#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "sylph/checkpoint.hpp"
#include "sylph/detector.hpp"
#include "sylph/geometry.hpp"
#include "sylph/ops.hpp"

namespace sylph {

struct HypernetConfig {
  std::size_t feature_channels = 64;  // d_f, the backbone width
  std::size_t code_channels = 64;     // C, the classifier feature width
  std::size_t shared_convs = 2;
  std::size_t gn_groups = 8;
  bool use_bias = true;
  bool use_l2 = true;
  bool use_gn = true;
  bool use_g = true;
  double prior_prob = 0.01;
  double g_init = 1.0;
  double g_b_init = 1.0;
  std::size_t roi_size = 7;
  std::size_t sampling_ratio = 2;

  bool operator==(const HypernetConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const HypernetConfig& c) {
  j = nlohmann::json{{"feature_channels", c.feature_channels},
                     {"code_channels", c.code_channels},
                     {"shared_convs", c.shared_convs},
                     {"gn_groups", c.gn_groups},
                     {"use_bias", c.use_bias},
                     {"use_l2", c.use_l2},
                     {"use_gn", c.use_gn},
                     {"use_g", c.use_g},
                     {"prior_prob", c.prior_prob},
                     {"g_init", c.g_init},
                     {"g_b_init", c.g_b_init},
                     {"roi_size", c.roi_size},
                     {"sampling_ratio", c.sampling_ratio}};
}

inline void from_json(const nlohmann::json& j, HypernetConfig& c) {
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("feature_channels", c.feature_channels);
  get("code_channels", c.code_channels);
  get("shared_convs", c.shared_convs);
  get("gn_groups", c.gn_groups);
  get("use_bias", c.use_bias);
  get("use_l2", c.use_l2);
  get("use_gn", c.use_gn);
  get("use_g", c.use_g);
  get("prior_prob", c.prior_prob);
  get("g_init", c.g_init);
  get("g_b_init", c.g_b_init);
  get("roi_size", c.roi_size);
  get("sampling_ratio", c.sampling_ratio);
}

/// The nine modelling-choice rows, baseline first (no bias, GN, L2 or g and
/// no shared convs), ending with the full configuration variants.
inline std::vector<HypernetConfig> ablation_rows(const HypernetConfig& base = {}) {
  struct Flags {
    bool bias, gn, l2, g;
    std::size_t convs;
  };
  const Flags rows[] = {{false, false, false, false, 0}, {true, false, false, false, 0}, {true, true, false, true, 0},
                        {true, false, true, true, 0},    {true, true, true, true, 0},     {true, true, true, true, 1},
                        {true, true, true, true, 2},     {true, true, true, false, 2},    {false, true, true, false, 2}};
  std::vector<HypernetConfig> out;
  for (const auto& r : rows) {
    HypernetConfig c = base;
    c.use_bias = r.bias;
    c.use_gn = r.gn;
    c.use_l2 = r.l2;
    c.use_g = r.g;
    c.shared_convs = r.convs;
    out.push_back(c);
  }
  return out;
}

inline HypernetConfig baseline_hypernet(const HypernetConfig& base = {}) { return ablation_rows(base).front(); }

template <std::floating_point T>
void init_hypernet(ParamStore<T>& store, const HypernetConfig& cfg, std::uint64_t seed) {
  detail::require(cfg.feature_channels % cfg.gn_groups == 0 && cfg.code_channels % cfg.gn_groups == 0,
                  "hypernet: channel counts must be divisible by gn_groups");
  Rng rng(derive_seed(seed, 0x4b7e2));
  const std::size_t df = cfg.feature_channels;
  for (std::size_t i = 0; i < cfg.shared_convs; ++i) {
    const std::string p = "hypernet.shared." + std::to_string(i);
    detail::add_conv(store, p, df, df, 3, std::sqrt(2.0 / (df * 9.0)), true, rng);
    if (cfg.use_gn) detail::add_gn(store, p + ".gn", df);
  }
  detail::add_conv(store, "hypernet.weight_head", cfg.code_channels, df, 3, 0.01, true, rng);
  if (cfg.use_gn) detail::add_gn(store, "hypernet.weight_gn", cfg.code_channels);
  if (cfg.use_bias) {
    detail::add_conv(store, "hypernet.bias_head", 1, df, 3, 0.01, true, rng);
    store.add("hypernet.g_b", Tensor<T>({1}, static_cast<T>(cfg.g_b_init)));
  }
  if (cfg.use_g) store.add("hypernet.g", Tensor<T>({1}, static_cast<T>(cfg.g_init)));
}

inline bool has_hypernet(const auto& store) { return store.contains("hypernet.weight_head.weight"); }

template <std::floating_point T>
void erase_hypernet(ParamStore<T>& store) {
  std::vector<std::string> names;
  for (const auto& [name, _] : store)
    if (name.rfind("hypernet.", 0) == 0) names.push_back(name);
  for (const auto& n : names) store.erase(n);
}

/// Per-shot raw predictions of the code predictor head.
template <std::floating_point T>
struct ShotCodes {
  Tensor<T> weight;  // K×C
  Tensor<T> bias;    // K×1, undefined when bias prediction is off
};

/// Code predictor head: shared 3×3 conv(+GN)+ReLU layers, then parallel
/// weight and bias heads, each collapsed by global average pooling.
template <std::floating_point T>
ShotCodes<T> cph_forward(const ParamStore<T>& store, const HypernetConfig& cfg, const Tensor<T>& z) {
  detail::require(z.rank() == 4 && z.dim(1) == cfg.feature_channels,
                  "cph_forward: expected K×" + std::to_string(cfg.feature_channels) + "×h×w ROI features, got " +
                      shape_str(z.shape()));
  Tensor<T> x = z;
  for (std::size_t i = 0; i < cfg.shared_convs; ++i) {
    const std::string p = "hypernet.shared." + std::to_string(i);
    x = conv2d(x, store.at(p + ".weight"), store.at(p + ".bias"), 1, 1);
    if (cfg.use_gn) x = group_norm(x, cfg.gn_groups, store.at(p + ".gn.weight"), store.at(p + ".gn.bias"));
    x = relu(x);
  }
  ShotCodes<T> out;
  auto w = conv2d(x, store.at("hypernet.weight_head.weight"), store.at("hypernet.weight_head.bias"), 1, 1);
  if (cfg.use_gn) w = group_norm(w, cfg.gn_groups, store.at("hypernet.weight_gn.weight"), store.at("hypernet.weight_gn.bias"));
  out.weight = global_avg_pool(w);
  if (cfg.use_bias) {
    out.bias = global_avg_pool(conv2d(x, store.at("hypernet.bias_head.weight"), store.at("hypernet.bias_head.bias"), 1, 1));
  }
  return out;
}

/// Code process module: mean over shots, optional L2 normalisation and
/// learnable scale g, bias g_b * b + b_p (b_p alone without bias prediction).
template <std::floating_point T>
std::pair<Tensor<T>, Tensor<T>> cpm_aggregate(const ParamStore<T>& store, const HypernetConfig& cfg,
                                              const ShotCodes<T>& shots) {
  detail::require(shots.weight.defined() && shots.weight.dim(0) >= 1, "cpm_aggregate: need at least one shot");
  Tensor<T> w = reshape(mean_rows(shots.weight), Shape{shots.weight.dim(1)});
  if (cfg.use_l2) w = l2_normalize(w);
  if (cfg.use_g) w = mul_scalar(w, store.at("hypernet.g"));
  const T bp = static_cast<T>(prior_bias(cfg.prior_prob));
  Tensor<T> b;
  if (cfg.use_bias) {
    b = add_constant(mul_scalar(reshape(mean_rows(shots.bias), Shape{1}), store.at("hypernet.g_b")), bp);
  } else {
    b = Tensor<T>({1}, bp);
  }
  return {w, b};
}

// ---------------------------------------------------------------- codebook

struct ClassCode {
  std::vector<float> weight;
  float bias = 0;
  bool operator==(const ClassCode&) const = default;
};

enum class CodeSource { pretrained, hypernet };

inline const char* to_string(CodeSource s) { return s == CodeSource::pretrained ? "pretrained" : "hypernet"; }

/// Ordered class-id -> code registry. Inserting never touches other entries.
class CodeBook {
 public:
  struct Entry {
    ClassCode code;
    CodeSource source;
  };

  void insert(int class_id, ClassCode code, CodeSource source, bool overwrite = false) {
    if (!overwrite && entries_.count(class_id)) {
      throw std::invalid_argument("codebook: class " + std::to_string(class_id) + " is already enrolled");
    }
    entries_[class_id] = Entry{std::move(code), source};
  }
  bool contains(int class_id) const { return entries_.count(class_id) != 0; }
  const ClassCode& at(int class_id) const {
    auto it = entries_.find(class_id);
    if (it == entries_.end()) throw std::out_of_range("codebook: class " + std::to_string(class_id) + " not enrolled");
    return it->second.code;
  }
  CodeSource source(int class_id) const { return entries_.at(class_id).source; }
  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : entries_) ids.push_back(id);
    return ids;
  }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool operator==(const CodeBook& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (const auto& [id, e] : entries_) {
      auto it = o.entries_.find(id);
      if (it == o.entries_.end() || !(it->second.code == e.code) || it->second.source != e.source) return false;
    }
    return true;
  }

  /// Stacked codes for `ids`; a code whose length differs from `channels` is
  /// rejected naming the class.
  template <std::floating_point T>
  CodeTensors<T> tensors(const std::vector<int>& ids, std::size_t channels) const {
    CodeTensors<T> out;
    out.class_ids = ids;
    std::vector<T> w, b;
    for (int id : ids) {
      const auto& code = at(id);
      if (code.weight.size() != channels) {
        throw std::invalid_argument("conditional_classify: code for class " + std::to_string(id) + " has length " +
                                    std::to_string(code.weight.size()) + ", features have " +
                                    std::to_string(channels) + " channels");
      }
      w.insert(w.end(), code.weight.begin(), code.weight.end());
      b.push_back(static_cast<T>(code.bias));
    }
    out.weight = Tensor<T>({ids.size(), channels}, std::move(w));
    out.bias = Tensor<T>({ids.size()}, std::move(b));
    return out;
  }

  std::vector<NamedArray> to_arrays() const {
    std::vector<NamedArray> out;
    for (const auto& [id, e] : entries_) {
      out.push_back({code_bias_name(id), {1}, {e.code.bias}});
      out.push_back({code_weight_name(id), {e.code.weight.size()}, e.code.weight});
    }
    return out;
  }

  nlohmann::json provenance() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, e] : entries_) j[std::to_string(id)] = to_string(e.source);
    return j;
  }

  static CodeBook from_arrays(const std::vector<NamedArray>& arrays, const nlohmann::json& provenance,
                              const std::string& path) {
    std::map<int, ClassCode> codes;
    std::map<int, int> seen;
    for (const auto& a : arrays) {
      if (a.name.rfind("codes.", 0) != 0) continue;
      const auto dot = a.name.find('.', 6);
      if (dot == std::string::npos) throw FormatError(path, 0, "bad code record name " + a.name);
      const int id = std::stoi(a.name.substr(6, dot - 6));
      const std::string field = a.name.substr(dot + 1);
      if (field == "weight") {
        codes[id].weight = a.values;
        seen[id] |= 1;
      } else if (field == "bias") {
        if (a.values.size() != 1) throw FormatError(path, 0, "code bias " + a.name + " must be a scalar");
        codes[id].bias = a.values[0];
        seen[id] |= 2;
      }
    }
    CodeBook book;
    for (auto& [id, code] : codes) {
      if (seen[id] != 3) throw FormatError(path, 0, "class " + std::to_string(id) + " lacks a weight or bias record");
      CodeSource src = CodeSource::hypernet;
      const auto key = std::to_string(id);
      if (provenance.contains(key) && provenance.at(key) == "pretrained") src = CodeSource::pretrained;
      book.insert(id, std::move(code), src);
    }
    return book;
  }

 private:
  std::map<int, Entry> entries_;
};

/// Codes go to the container at `path`, provenance to the JSON sidecar `path`.json.
inline std::string provenance_path(const std::string& path) { return path + ".json"; }

inline void save_codebook(const std::string& path, const CodeBook& book) {
  const auto provenance_file = provenance_path(path);
  write_container(path, book.to_arrays());
  std::ofstream out(provenance_file, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + provenance_file);
  out << book.provenance().dump(2) << "\n";
}

inline CodeBook load_codebook(const std::string& path) {
  const auto provenance_file = provenance_path(path);
  auto arrays = read_container(path);
  nlohmann::json prov = nlohmann::json::object();
  std::ifstream in(provenance_file);
  if (in) {
    try {
      prov = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(provenance_file, e.byte > 0 ? e.byte - 1 : 0, e.what());
    }
  }
  return CodeBook::from_arrays(arrays, prov, path);
}

template <std::floating_point T>
ClassCode to_class_code(const Tensor<T>& w, const Tensor<T>& b) {
  ClassCode code;
  for (T v : w.data()) code.weight.push_back(static_cast<float>(v));
  code.bias = static_cast<float>(b.item());
  return code;
}

}  // namespace sylph
