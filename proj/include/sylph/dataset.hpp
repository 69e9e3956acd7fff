#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sylph/geometry.hpp"
#include "sylph/image.hpp"

namespace sylph {

struct DatasetSpec {
  int n_classes = 40;
  double zipf_exponent = 1.0;
  int base_class_count = 30;
  int image_height = 96;
  int image_width = 96;
  int min_objects = 1;
  int max_objects = 3;
  /// Training instances of the first tail class; the head follows the Zipf curve from there.
  int tail_instances = 10;
  int eval_instances_per_class = 8;
  int min_glyph = 20;
  int max_glyph = 36;
  std::uint64_t seed = 0;

  bool operator==(const DatasetSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"n_classes", s.n_classes},
                     {"zipf_exponent", s.zipf_exponent},
                     {"base_class_count", s.base_class_count},
                     {"image_size", {s.image_height, s.image_width}},
                     {"objects_per_image", {s.min_objects, s.max_objects}},
                     {"tail_instances", s.tail_instances},
                     {"eval_instances_per_class", s.eval_instances_per_class},
                     {"glyph_size", {s.min_glyph, s.max_glyph}},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  auto pair = [&](const char* key, int& a, int& b) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string("dataset.") + key + " must be [a, b]");
    a = v[0].get<int>();
    b = v[1].get<int>();
  };
  if (j.contains("n_classes")) s.n_classes = j.at("n_classes").get<int>();
  if (j.contains("zipf_exponent")) s.zipf_exponent = j.at("zipf_exponent").get<double>();
  if (j.contains("base_class_count")) s.base_class_count = j.at("base_class_count").get<int>();
  pair("image_size", s.image_height, s.image_width);
  pair("objects_per_image", s.min_objects, s.max_objects);
  if (j.contains("tail_instances")) s.tail_instances = j.at("tail_instances").get<int>();
  if (j.contains("eval_instances_per_class")) s.eval_instances_per_class = j.at("eval_instances_per_class").get<int>();
  pair("glyph_size", s.min_glyph, s.max_glyph);
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
}

inline const std::vector<std::string>& dataset_spec_keys() {
  static const std::vector<std::string> keys{"n_classes",     "zipf_exponent",    "base_class_count",
                                             "image_size",    "objects_per_image", "tail_instances",
                                             "eval_instances_per_class", "glyph_size", "seed"};
  return keys;
}

struct Annotation {
  std::uint64_t image_id = 0;
  int class_id = 0;
  Box box;
  bool operator==(const Annotation&) const = default;
};

struct Split {
  std::string name;
  std::vector<std::uint64_t> ids;
  std::vector<Image> images;
  std::vector<std::vector<Annotation>> annotations;  // per image, painter's order

  std::size_t size() const { return images.size(); }
};

/// One annotated object: image index within its split plus annotation index.
struct InstanceRef {
  std::size_t image = 0;
  std::size_t annotation = 0;
  bool operator==(const InstanceRef&) const = default;
};

/// Images and annotations of both splits, indexed by class. Reads of
/// novel-class instance lists are counted so training code can prove it
/// never touched them.
class Dataset {
 public:
  DatasetSpec spec;
  std::vector<int> base_classes;
  std::vector<int> novel_classes;
  Split train;
  Split eval;

  void build_index() {
    novel_set_ = std::set<int>(novel_classes.begin(), novel_classes.end());
    index_.clear();
    for (const Split* s : {&train, &eval}) {
      auto& by_class = index_[s->name];
      for (std::size_t i = 0; i < s->size(); ++i) {
        for (std::size_t a = 0; a < s->annotations[i].size(); ++a) {
          by_class[s->annotations[i][a].class_id].push_back({i, a});
        }
      }
    }
  }

  const Split& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "eval") return eval;
    throw std::invalid_argument("unknown split " + name);
  }

  bool is_novel(int class_id) const { return novel_set_.count(class_id) != 0; }

  const std::vector<InstanceRef>& instances(const std::string& split_name, int class_id) const {
    if (is_novel(class_id)) novel_reads_->fetch_add(1);
    static const std::vector<InstanceRef> none;
    auto s = index_.find(split_name);
    if (s == index_.end()) return none;
    auto it = s->second.find(class_id);
    return it == s->second.end() ? none : it->second;
  }

  const Annotation& annotation(const std::string& split_name, const InstanceRef& ref) const {
    return split(split_name).annotations.at(ref.image).at(ref.annotation);
  }

  /// Instance counts per class without touching the tripwire.
  std::map<int, std::size_t> class_counts(const std::string& split_name) const {
    std::map<int, std::size_t> out;
    for (int c = 0; c < spec.n_classes; ++c) out[c] = 0;
    auto s = index_.find(split_name);
    if (s != index_.end()) {
      for (const auto& [c, refs] : s->second) out[c] = refs.size();
    }
    return out;
  }

  std::size_t novel_reads() const { return novel_reads_->load(); }
  void reset_novel_reads() { novel_reads_->store(0); }

 private:
  std::map<std::string, std::map<int, std::vector<InstanceRef>>> index_;
  std::set<int> novel_set_;
  std::shared_ptr<std::atomic<std::size_t>> novel_reads_ = std::make_shared<std::atomic<std::size_t>>(0);
};

// ------------------------------------------------------------ on-disk form

inline nlohmann::json annotation_json(const Annotation& a) {
  return {{"image_id", a.image_id},
          {"class_id", a.class_id},
          {"box", {static_cast<long>(a.box.x1), static_cast<long>(a.box.y1), static_cast<long>(a.box.x2),
                   static_cast<long>(a.box.y2)}}};
}

namespace detail {

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, 0, "cannot open file");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::vector<Annotation> parse_jsonl(const std::string& path, const std::string& text) {
  std::vector<Annotation> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    if (!line.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path, start + (e.byte > 0 ? e.byte - 1 : 0), std::string("malformed record: ") + e.what());
      }
      try {
        Annotation a;
        a.image_id = j.at("image_id").get<std::uint64_t>();
        a.class_id = j.at("class_id").get<int>();
        const auto& b = j.at("box");
        if (!b.is_array() || b.size() != 4) throw std::invalid_argument("box must have 4 coordinates");
        a.box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!(a.box.x1 < a.box.x2 && a.box.y1 < a.box.y2)) throw std::invalid_argument("degenerate box");
        out.push_back(a);
      } catch (const FormatError&) {
        throw;
      } catch (const std::exception& e) {
        throw FormatError(path, start, std::string("malformed record: ") + e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

}  // namespace detail

inline nlohmann::json dataset_manifest(const Dataset& ds, const nlohmann::json& class_table) {
  nlohmann::json counts;
  for (const char* split : {"train", "eval"}) {
    nlohmann::json per;
    for (const auto& [c, n] : ds.class_counts(split)) per[std::to_string(c)] = n;
    counts[split] = per;
  }
  return {{"format", "sylph-glyphs"},
          {"version", 1},
          {"spec", ds.spec},
          {"classes", class_table},
          {"base_classes", ds.base_classes},
          {"novel_classes", ds.novel_classes},
          {"images", {{"train", ds.train.size()}, {"eval", ds.eval.size()}}},
          {"instance_counts", counts}};
}

inline void write_dataset(const std::string& dir, const Dataset& ds, const nlohmann::json& class_table) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "annotations");
  for (const Split* s : {&ds.train, &ds.eval}) {
    const auto img_dir = fs::path(dir) / "images" / s->name;
    fs::create_directories(img_dir);
    std::string jsonl;
    for (std::size_t i = 0; i < s->size(); ++i) {
      write_ppm((img_dir / (std::to_string(s->ids[i]) + ".ppm")).string(), s->images[i]);
      for (const auto& a : s->annotations[i]) jsonl += annotation_json(a).dump() + "\n";
    }
    std::ofstream out(fs::path(dir) / "annotations" / (s->name + ".jsonl"), std::ios::binary | std::ios::trunc);
    out << jsonl;
  }
  std::ofstream man(fs::path(dir) / "manifest.json", std::ios::binary | std::ios::trunc);
  man << dataset_manifest(ds, class_table).dump(2) << "\n";
}

/// Reads a dataset directory. Every image referenced by the annotation
/// stream or present under images/{split} is loaded; counts are checked
/// against the manifest.
inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  const std::string manifest_text = detail::read_text(manifest_path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(manifest_path, e.byte > 0 ? e.byte - 1 : 0, std::string("malformed manifest: ") + e.what());
  }
  Dataset ds;
  try {
    ds.spec = manifest.at("spec").get<DatasetSpec>();
    ds.base_classes = manifest.at("base_classes").get<std::vector<int>>();
    ds.novel_classes = manifest.at("novel_classes").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path, 0, std::string("manifest missing fields: ") + e.what());
  }

  for (Split* s : {&ds.train, &ds.eval}) {
    s->name = (s == &ds.train) ? "train" : "eval";
    const std::string ann_path = (fs::path(dir) / "annotations" / (s->name + ".jsonl")).string();
    const auto anns = detail::parse_jsonl(ann_path, detail::read_text(ann_path));

    const std::size_t n_images = manifest.at("images").at(s->name).get<std::size_t>();
    std::map<std::uint64_t, std::vector<Annotation>> by_image;
    const auto img_dir = fs::path(dir) / "images" / s->name;
    if (fs::exists(img_dir)) {
      for (const auto& entry : fs::directory_iterator(img_dir)) {
        if (entry.path().extension() != ".ppm") continue;
        by_image[std::stoull(entry.path().stem().string())];
      }
    }
    for (const auto& a : anns) by_image[a.image_id].push_back(a);
    if (by_image.size() != n_images) {
      throw FormatError(ann_path, 0,
                        "split " + s->name + " has " + std::to_string(by_image.size()) +
                            " images, manifest says " + std::to_string(n_images));
    }
    for (auto& [id, list] : by_image) {
      const std::string img_path = (img_dir / (std::to_string(id) + ".ppm")).string();
      Image img = read_ppm(img_path);
      for (const auto& a : list) {
        if (a.box.x1 < 0 || a.box.y1 < 0 || a.box.x2 > static_cast<double>(img.width) ||
            a.box.y2 > static_cast<double>(img.height)) {
          throw FormatError(ann_path, 0, "annotation for image " + std::to_string(id) + " lies outside the image");
        }
      }
      s->ids.push_back(id);
      s->images.push_back(std::move(img));
      s->annotations.push_back(std::move(list));
    }
  }
  ds.build_index();

  const auto& expected = manifest.at("instance_counts");
  for (const char* split : {"train", "eval"}) {
    for (const auto& [c, n] : ds.class_counts(split)) {
      const auto key = std::to_string(c);
      const std::size_t want = expected.at(split).contains(key) ? expected.at(split).at(key).get<std::size_t>() : 0;
      if (want != n) {
        throw FormatError(manifest_path, 0,
                          "class " + key + " has " + std::to_string(n) + " " + split + " instances, manifest says " +
                              std::to_string(want));
      }
    }
  }
  return ds;
}

}  // namespace sylph
