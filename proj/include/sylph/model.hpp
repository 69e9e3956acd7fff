#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "sylph/dataset.hpp"
#include "sylph/detector.hpp"
#include "sylph/hypernet.hpp"

namespace sylph {

/// Detector and hypernetwork parameters in one name-ordered store, plus the
/// configuration needed to run them.
template <std::floating_point T>
struct Model {
  DetectorConfig detector;
  HypernetConfig hypernet;
  ParamStore<T> params;

  Model clone() const {
    Model m;
    m.detector = detector;
    m.hypernet = hypernet;
    for (const auto& [name, t] : params) m.params.add(name, t.detach());
    return m;
  }
};

template <std::floating_point T>
Model<T> make_model(const DetectorConfig& det, const HypernetConfig& hyper, const std::vector<int>& code_classes,
                    std::uint64_t seed) {
  Model<T> m;
  m.detector = det;
  m.hypernet = hyper;
  init_detector(m.params, det, seed);
  for (int c : code_classes) init_code(m.params, det, c, seed);
  return m;
}

/// Replaces any hypernetwork parameters with freshly initialised ones for `cfg`.
template <std::floating_point T>
void reset_hypernet(Model<T>& m, const HypernetConfig& cfg, std::uint64_t seed) {
  erase_hypernet(m.params);
  m.hypernet = cfg;
  init_hypernet(m.params, cfg, seed);
}

template <std::floating_point T>
std::vector<int> stored_code_classes(const Model<T>& m) {
  std::vector<int> ids;
  for (const auto& [name, _] : m.params) {
    if (name.rfind("codes.", 0) == 0 && name.size() > 7 && name.substr(name.size() - 7) == ".weight") {
      ids.push_back(std::stoi(name.substr(6, name.size() - 13)));
    }
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Order-independent digest of every parameter's bytes.
template <std::floating_point T>
std::uint64_t parameter_hash(const Model<T>& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
  };
  for (const auto& [name, t] : m.params) {
    mix(name.data(), name.size());
    mix(t.data().data(), t.numel() * sizeof(T));
  }
  return h;
}

// ------------------------------------------------------------- checkpoints

inline std::string metadata_path(const std::string& checkpoint) { return checkpoint + ".json"; }

template <std::floating_point T>
void save_model(const std::string& path, const Model<T>& m, nlohmann::json metadata = nlohmann::json::object()) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  write_container(path, m.params.to_arrays());
  metadata["detector"] = m.detector;
  metadata["hypernet"] = m.hypernet;
  metadata["has_hypernet"] = has_hypernet(m.params);
  std::ofstream out(metadata_path(path), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + metadata_path(path));
  out << metadata.dump(2) << "\n";
}

inline nlohmann::json read_metadata(const std::string& path) {
  std::ifstream in(metadata_path(path));
  if (!in) throw FormatError(metadata_path(path), 0, "missing checkpoint metadata");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(metadata_path(path), e.byte > 0 ? e.byte - 1 : 0, e.what());
  }
}

/// Rebuilds the parameter layout from the metadata and fills it from the
/// container; tensors missing from the file are an error.
template <std::floating_point T>
Model<T> load_model(const std::string& path, nlohmann::json* metadata_out = nullptr) {
  const auto meta = read_metadata(path);
  const auto arrays = read_container(path);
  Model<T> m;
  m.detector = meta.at("detector").get<DetectorConfig>();
  m.hypernet = meta.at("hypernet").get<HypernetConfig>();
  init_detector(m.params, m.detector, 0);
  if (meta.value("has_hypernet", false)) init_hypernet(m.params, m.hypernet, 0);
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& [name, a] : by_name) {
    if (name.rfind("codes.", 0) == 0 && name.substr(name.size() - 7) == ".weight") {
      const int id = std::stoi(name.substr(6, name.size() - 13));
      init_code(m.params, m.detector, id, 0);
    }
  }
  for (const auto& [name, _] : m.params) {
    if (!by_name.count(name)) throw FormatError(path, 0, "checkpoint lacks tensor " + name);
  }
  m.params.load_arrays(arrays);
  if (metadata_out) *metadata_out = meta;
  return m;
}

// ------------------------------------------------------------- enrollment

/// Backbone feature maps per training or eval image, computed one image at a
/// time so a map never depends on which other images were processed.
template <std::floating_point T>
class FeatureCache {
 public:
  FeatureCache(const Model<T>& model, const Dataset& data) : model_(model), data_(data) {}

  const Tensor<T>& get(const std::string& split, std::size_t image) {
    auto key = std::make_pair(split, image);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    NoGradGuard guard;
    const Image* img = &data_.split(split).images.at(image);
    auto f = extract_features(model_.params, model_.detector, images_to_tensor<T>({img}));
    return cache_.emplace(key, std::move(f)).first->second;
  }

  /// Stacks cached maps for `images` into an S×C×h×w tensor.
  Tensor<T> gather(const std::string& split, const std::vector<std::size_t>& images) {
    std::vector<T> values;
    Shape shape;
    for (std::size_t i : images) {
      const auto& f = get(split, i);
      shape = f.shape();
      values.insert(values.end(), f.data().begin(), f.data().end());
    }
    shape[0] = images.size();
    return Tensor<T>(shape, std::move(values));
  }

 private:
  const Model<T>& model_;
  const Dataset& data_;
  std::map<std::pair<std::string, std::size_t>, Tensor<T>> cache_;
};

struct SupportShot {
  std::size_t image = 0;  // index into the train split
  Box box;
  bool operator==(const SupportShot&) const = default;
};

/// Runs the hypernetwork on K support shots of one class. Parameters are
/// only read.
template <std::floating_point T>
ClassCode enroll_code(const Model<T>& model, FeatureCache<T>& features, const std::vector<SupportShot>& support,
                      const std::string& split = "train") {
  if (support.empty()) throw std::invalid_argument("enroll: empty support set");
  if (!has_hypernet(model.params)) throw std::invalid_argument("enroll: checkpoint has no hypernetwork parameters");
  NoGradGuard guard;
  std::vector<std::size_t> images;
  std::vector<Roi> rois;
  for (std::size_t k = 0; k < support.size(); ++k) {
    images.push_back(support[k].image);
    rois.push_back({k, support[k].box});
  }
  const auto feats = features.gather(split, images);
  RoiAlignParams rp;
  rp.output_size = model.hypernet.roi_size;
  rp.sampling_ratio = model.hypernet.sampling_ratio;
  rp.spatial_scale = 1.0 / static_cast<double>(DetectorConfig::stride);
  const auto z = roi_align(feats, rois, rp);
  const auto shots = cph_forward(model.params, model.hypernet, z);
  const auto [w, b] = cpm_aggregate(model.params, model.hypernet, shots);
  return to_class_code(w, b);
}

template <std::floating_point T>
void enroll(CodeBook& book, int class_id, const Model<T>& model, FeatureCache<T>& features,
            const std::vector<SupportShot>& support, bool overwrite = false) {
  if (!overwrite && book.contains(class_id)) {
    throw std::invalid_argument("enroll: class " + std::to_string(class_id) + " is already enrolled");
  }
  book.insert(class_id, enroll_code(model, features, support), CodeSource::hypernet, overwrite);
}

/// min(K, available) distinct training instances of `class_id`, drawn with a
/// stream derived from (seed, class id) so the draw ignores enrollment order.
inline std::vector<SupportShot> sample_support(const Dataset& data, int class_id, std::size_t shots,
                                               std::uint64_t seed) {
  const auto& refs = data.instances("train", class_id);
  std::vector<std::size_t> order(refs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5407, static_cast<std::uint64_t>(class_id)));
  rng.shuffle(order);
  order.resize(std::min(shots, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<SupportShot> out;
  for (std::size_t i : order) out.push_back({refs[i].image, data.annotation("train", refs[i]).box});
  return out;
}

enum class CodeMode { hypernet, pretrained };

struct CodeGenResult {
  CodeBook book;
  std::vector<std::string> warnings;
};

template <std::floating_point T>
CodeGenResult generate_all_codes(const Model<T>& model, const Dataset& data, const std::vector<int>& classes,
                                 std::size_t shots, CodeMode mode, std::uint64_t seed,
                                 FeatureCache<T>* shared_cache = nullptr) {
  CodeGenResult out;
  if (mode == CodeMode::pretrained) {
    for (int c : classes) {
      if (!model.params.contains(code_weight_name(c))) {
        throw std::invalid_argument("pretrained codes exist only for directly trained classes; class " +
                                    std::to_string(c) + " has none");
      }
      out.book.insert(c, to_class_code(model.params.at(code_weight_name(c)), model.params.at(code_bias_name(c))),
                      CodeSource::pretrained);
    }
    return out;
  }
  FeatureCache<T> local(model, data);
  FeatureCache<T>& cache = shared_cache ? *shared_cache : local;
  for (int c : classes) {
    auto support = sample_support(data, c, shots, seed);
    if (support.empty()) {
      out.warnings.push_back("class " + std::to_string(c) + " has no training instances; skipped");
      continue;
    }
    enroll(out.book, c, model, cache, support);
  }
  return out;
}

}  // namespace sylph
