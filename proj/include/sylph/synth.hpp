#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "sylph/dataset.hpp"
#include "sylph/rng.hpp"

namespace sylph {

enum class GlyphShape { rect, ellipse, triangle, diamond, plus };
enum class GlyphPattern { solid, h_stripes, v_stripes, checker };
enum class HueBand { red, green, blue, yellow };

inline constexpr int kShapeCount = 5, kPatternCount = 4, kHueCount = 4;
inline constexpr int kAppearanceCount = kShapeCount * kPatternCount * kHueCount;

inline const char* to_string(GlyphShape s) {
  static const char* names[] = {"rect", "ellipse", "triangle", "diamond", "plus"};
  return names[static_cast<int>(s)];
}
inline const char* to_string(GlyphPattern p) {
  static const char* names[] = {"solid", "h_stripes", "v_stripes", "checker"};
  return names[static_cast<int>(p)];
}
inline const char* to_string(HueBand h) {
  static const char* names[] = {"red", "green", "blue", "yellow"};
  return names[static_cast<int>(h)];
}

struct Appearance {
  GlyphShape shape;
  GlyphPattern pattern;
  HueBand hue;
};

/// Class ids are spread over the appearance combinations with a stride
/// coprime to their count, so neighbouring ids differ in several attributes.
inline Appearance class_appearance(int class_id) {
  if (class_id < 0 || class_id >= kAppearanceCount) {
    throw std::invalid_argument("class id " + std::to_string(class_id) + " has no glyph appearance");
  }
  const int combo = (class_id * 37) % kAppearanceCount;
  return {static_cast<GlyphShape>(combo % kShapeCount),
          static_cast<GlyphPattern>((combo / kShapeCount) % kPatternCount),
          static_cast<HueBand>(combo / (kShapeCount * kPatternCount))};
}

struct Placement {
  int x = 0, y = 0, w = 1, h = 1;
};

/// A rendered glyph patch in image coordinates.
struct Glyph {
  int class_id = 0;
  Placement placement;
  std::vector<std::uint8_t> mask;  // h*w, 1 = object pixel
  std::vector<std::uint8_t> rgb;   // h*w*3
  Box box;                         // tight bounds of the mask, exclusive x2/y2
};

namespace detail {

inline bool shape_covers(GlyphShape shape, double u, double v) {
  const double cx = std::abs(2 * u - 1), cy = std::abs(2 * v - 1);
  switch (shape) {
    case GlyphShape::rect:
      return true;
    case GlyphShape::ellipse:
      return cx * cx + cy * cy <= 1.0;
    case GlyphShape::triangle:
      return cx <= v;
    case GlyphShape::diamond:
      return cx + cy <= 1.0;
    case GlyphShape::plus:
      return cx <= 1.0 / 3.0 || cy <= 1.0 / 3.0;
  }
  return false;
}

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(std::fmod(h, 360.0) + 360.0, 360.0);
  const double c = v * s, x = c * (1 - std::abs(std::fmod(h / 60.0, 2.0) - 1)), m = v - c;
  double r = 0, g = 0, b = 0;
  if (h < 60) r = c, g = x;
  else if (h < 120) r = x, g = c;
  else if (h < 180) g = c, b = x;
  else if (h < 240) g = x, b = c;
  else if (h < 300) r = x, b = c;
  else r = c, b = x;
  return {(r + m) * 255, (g + m) * 255, (b + m) * 255};
}

inline Box mask_bounds(const std::vector<std::uint8_t>& mask, int w, int h, int ox, int oy) {
  int x1 = w, y1 = h, x2 = -1, y2 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[static_cast<std::size_t>(y * w + x)]) {
        x1 = std::min(x1, x), x2 = std::max(x2, x);
        y1 = std::min(y1, y), y2 = std::max(y2, y);
      }
  if (x2 < 0) return Box{};
  return Box{double(ox + x1), double(oy + y1), double(ox + x2 + 1), double(oy + y2 + 1)};
}

}  // namespace detail

/// Draws one glyph of `class_id` filling `placement`. Style jitter (exact
/// hue, saturation, stripe phase) comes from `style_seed`.
inline Glyph render(int class_id, const Placement& placement, std::uint64_t style_seed) {
  if (placement.w < 1 || placement.h < 1) throw std::invalid_argument("render: empty placement");
  const Appearance look = class_appearance(class_id);
  Rng rng(style_seed);
  static const double base_hue[] = {0.0, 120.0, 235.0, 55.0};
  const auto color = detail::hsv_to_rgb(base_hue[static_cast<int>(look.hue)] + rng.uniform(-12, 12),
                                        rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0));
  const int period = 6, phase = static_cast<int>(rng.integer(0, period - 1));

  Glyph g;
  g.class_id = class_id;
  g.placement = placement;
  const int w = placement.w, h = placement.h;
  g.mask.assign(static_cast<std::size_t>(w * h), 0);
  g.rgb.assign(static_cast<std::size_t>(w * h * 3), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w, v = (y + 0.5) / h;
      if (!detail::shape_covers(look.shape, u, v)) continue;
      bool dark = false;
      switch (look.pattern) {
        case GlyphPattern::solid:
          break;
        case GlyphPattern::h_stripes:
          dark = ((y + phase) / (period / 2)) % 2 == 1;
          break;
        case GlyphPattern::v_stripes:
          dark = ((x + phase) / (period / 2)) % 2 == 1;
          break;
        case GlyphPattern::checker:
          dark = (((x + phase) / (period / 2)) + ((y + phase) / (period / 2))) % 2 == 1;
          break;
      }
      const std::size_t i = static_cast<std::size_t>(y * w + x);
      g.mask[i] = 1;
      for (int ch = 0; ch < 3; ++ch) {
        const double value = dark ? 0.45 * color[ch] : color[ch];
        g.rgb[i * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(value, 0.0, 255.0)));
      }
    }
  }
  g.box = detail::mask_bounds(g.mask, w, h, placement.x, placement.y);
  return g;
}

/// Pixel ownership of a composed image: -1 for background, else the index of
/// the glyph visible at that pixel.
struct Composition {
  Image image;
  std::vector<int> owner;
  std::vector<Glyph> glyphs;
  std::vector<Box> visible_boxes;
};

inline void fill_background(Image& img, Rng& rng) {
  const int level = static_cast<int>(rng.integer(90, 150));
  for (std::size_t p = 0; p < img.height * img.width; ++p) {
    const int v = std::clamp(level + static_cast<int>(rng.integer(-8, 8)), 0, 255);
    for (int ch = 0; ch < 3; ++ch) img.rgb[p * 3 + ch] = static_cast<std::uint8_t>(v);
  }
}

/// Paints glyphs in order; later glyphs occlude earlier ones.
inline Composition compose(Image background, const std::vector<Glyph>& glyphs) {
  Composition out;
  out.image = std::move(background);
  const int W = static_cast<int>(out.image.width), H = static_cast<int>(out.image.height);
  out.owner.assign(static_cast<std::size_t>(W * H), -1);
  for (std::size_t k = 0; k < glyphs.size(); ++k) {
    const Glyph& g = glyphs[k];
    for (int y = 0; y < g.placement.h; ++y)
      for (int x = 0; x < g.placement.w; ++x) {
        const int ix = g.placement.x + x, iy = g.placement.y + y;
        const std::size_t i = static_cast<std::size_t>(y * g.placement.w + x);
        if (!g.mask[i] || ix < 0 || iy < 0 || ix >= W || iy >= H) continue;
        std::copy_n(g.rgb.data() + i * 3, 3, out.image.pixel(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)));
        out.owner[static_cast<std::size_t>(iy * W + ix)] = static_cast<int>(k);
      }
  }
  out.glyphs = glyphs;
  for (std::size_t k = 0; k < glyphs.size(); ++k) {
    std::vector<std::uint8_t> vis(static_cast<std::size_t>(W * H));
    for (std::size_t p = 0; p < vis.size(); ++p) vis[p] = out.owner[p] == static_cast<int>(k);
    out.visible_boxes.push_back(detail::mask_bounds(vis, W, H, 0, 0));
  }
  return out;
}

/// Per-class training instance counts: count(rank) = tail * ((base + 1) / rank)^s,
/// rank 1 being the most frequent class (class id 0).
inline std::vector<int> zipf_counts(const DatasetSpec& spec) {
  std::vector<int> counts(static_cast<std::size_t>(spec.n_classes));
  for (int c = 0; c < spec.n_classes; ++c) {
    const double rank = c + 1;
    const double n = spec.tail_instances * std::pow((spec.base_class_count + 1) / rank, spec.zipf_exponent);
    counts[static_cast<std::size_t>(c)] = std::max(1, static_cast<int>(std::lround(n)));
  }
  return counts;
}

inline void validate(const DatasetSpec& spec) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("dataset spec: " + msg);
  };
  require(spec.base_class_count >= 1, "base_class_count must be >= 1");
  require(spec.n_classes >= spec.base_class_count + 1, "n_classes must exceed base_class_count");
  require(spec.n_classes <= kAppearanceCount, "at most " + std::to_string(kAppearanceCount) + " glyph classes exist");
  require(spec.zipf_exponent >= 0, "zipf_exponent must be >= 0");
  require(spec.min_objects >= 1 && spec.max_objects >= spec.min_objects, "objects_per_image must be 1 <= a <= b");
  require(spec.tail_instances >= 1, "tail_instances must be >= 1");
  require(spec.eval_instances_per_class >= 1, "eval_instances_per_class must be >= 1");
  require(spec.min_glyph >= 4 && spec.max_glyph >= spec.min_glyph, "glyph_size must be 4 <= a <= b");
  require(spec.image_height >= 8 && spec.image_width >= 8, "image_size must be at least 8x8");
  require(spec.max_glyph <= spec.image_height && spec.max_glyph <= spec.image_width,
          "image too small to place requested objects: glyphs up to " + std::to_string(spec.max_glyph) +
              " px do not fit a " + std::to_string(spec.image_height) + "x" + std::to_string(spec.image_width) +
              " image");
}

namespace detail {

/// Groups a pool of instances into images of distinct classes, drawing each
/// image's classes without replacement weighted by remaining instances.
inline std::vector<std::vector<int>> pack_instances(std::vector<int> remaining, const std::vector<int>& classes,
                                                    const DatasetSpec& spec, Rng& rng) {
  std::vector<std::vector<int>> images;
  auto left = [&] {
    long total = 0;
    for (int r : remaining) total += r;
    return total;
  };
  while (left() > 0) {
    std::size_t k = static_cast<std::size_t>(rng.integer(spec.min_objects, spec.max_objects));
    std::vector<std::size_t> avail;
    for (std::size_t i = 0; i < remaining.size(); ++i)
      if (remaining[i] > 0) avail.push_back(i);
    k = std::min(k, avail.size());
    std::vector<int> picked;
    for (std::size_t j = 0; j < k; ++j) {
      long total = 0;
      for (std::size_t i : avail) total += remaining[i];
      long r = static_cast<long>(rng.index(static_cast<std::size_t>(total)));
      std::size_t chosen = 0;
      for (std::size_t a = 0; a < avail.size(); ++a) {
        r -= remaining[avail[a]];
        if (r < 0) {
          chosen = a;
          break;
        }
      }
      picked.push_back(classes[avail[chosen]]);
      --remaining[avail[chosen]];
      avail.erase(avail.begin() + static_cast<std::ptrdiff_t>(chosen));
    }
    images.push_back(std::move(picked));
  }
  return images;
}

inline constexpr int kPlacementAttempts = 100;
inline constexpr double kMaxOcclusion = 0.5;

/// Renders one image with the given classes. Each placement is resampled
/// until no glyph loses more than half of its pixels to later ones.
inline Composition render_image(const DatasetSpec& spec, const std::vector<int>& classes, std::uint64_t image_seed) {
  Rng rng(image_seed);
  Image bg(static_cast<std::size_t>(spec.image_height), static_cast<std::size_t>(spec.image_width));
  fill_background(bg, rng);
  const int W = spec.image_width, H = spec.image_height;
  std::vector<Glyph> glyphs;
  std::vector<int> owner(static_cast<std::size_t>(W * H), -1);
  std::vector<long> full_area;
  for (int cls : classes) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      Placement p;
      p.w = static_cast<int>(rng.integer(spec.min_glyph, spec.max_glyph));
      p.h = static_cast<int>(rng.integer(spec.min_glyph, spec.max_glyph));
      p.x = static_cast<int>(rng.integer(0, W - p.w));
      p.y = static_cast<int>(rng.integer(0, H - p.h));
      Glyph g = render(cls, p, rng.next());
      std::vector<long> covered(glyphs.size(), 0);
      for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
          if (!g.mask[static_cast<std::size_t>(y * p.w + x)]) continue;
          const int o = owner[static_cast<std::size_t>((p.y + y) * W + p.x + x)];
          if (o >= 0) ++covered[static_cast<std::size_t>(o)];
        }
      bool ok = true;
      for (std::size_t j = 0; j < glyphs.size() && ok; ++j) {
        long visible = 0;
        for (int o : owner) visible += (o == static_cast<int>(j));
        ok = static_cast<double>(visible - covered[j]) >= (1.0 - kMaxOcclusion) * static_cast<double>(full_area[j]);
      }
      if (!ok) continue;
      for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x)
          if (g.mask[static_cast<std::size_t>(y * p.w + x)])
            owner[static_cast<std::size_t>((p.y + y) * W + p.x + x)] = static_cast<int>(glyphs.size());
      long area = 0;
      for (auto m : g.mask) area += m;
      full_area.push_back(area);
      glyphs.push_back(std::move(g));
      placed = true;
    }
    if (!placed) {
      throw std::invalid_argument("image too small to place requested objects: could not place " +
                                  std::to_string(classes.size()) + " glyphs in a " + std::to_string(H) + "x" +
                                  std::to_string(W) + " image within " + std::to_string(kPlacementAttempts) +
                                  " attempts");
    }
  }
  return compose(std::move(bg), glyphs);
}

}  // namespace detail

inline nlohmann::json class_table(const DatasetSpec& spec) {
  nlohmann::json table = nlohmann::json::array();
  for (int c = 0; c < spec.n_classes; ++c) {
    const auto a = class_appearance(c);
    table.push_back({{"id", c},
                     {"rank", c + 1},
                     {"shape", to_string(a.shape)},
                     {"pattern", to_string(a.pattern)},
                     {"hue", to_string(a.hue)},
                     {"split", c < spec.base_class_count ? "base" : "novel"}});
  }
  return table;
}

/// Builds the whole dataset in memory. Pure function of the spec: each
/// image is rendered from its own stream derived from (seed, image id).
inline Dataset generate(const DatasetSpec& spec) {
  validate(spec);
  Dataset ds;
  ds.spec = spec;
  for (int c = 0; c < spec.n_classes; ++c) (c < spec.base_class_count ? ds.base_classes : ds.novel_classes).push_back(c);

  const auto counts = zipf_counts(spec);
  auto pool = [&](const std::vector<int>& classes, auto count_of) {
    std::vector<int> rem;
    for (int c : classes) rem.push_back(count_of(c));
    return rem;
  };
  Rng pack_rng(derive_seed(spec.seed, 0x7061636bULL));
  std::vector<std::vector<int>> train_layout = detail::pack_instances(
      pool(ds.base_classes, [&](int c) { return counts[static_cast<std::size_t>(c)]; }), ds.base_classes, spec,
      pack_rng);
  const auto novel_layout = detail::pack_instances(
      pool(ds.novel_classes, [&](int c) { return counts[static_cast<std::size_t>(c)]; }), ds.novel_classes, spec,
      pack_rng);
  train_layout.insert(train_layout.end(), novel_layout.begin(), novel_layout.end());
  std::vector<int> all(static_cast<std::size_t>(spec.n_classes));
  for (int c = 0; c < spec.n_classes; ++c) all[static_cast<std::size_t>(c)] = c;
  auto eval_layout = detail::pack_instances(
      pool(all, [&](int) { return spec.eval_instances_per_class; }), all, spec, pack_rng);

  std::uint64_t next_id = 0;
  for (auto [split, layout] : {std::pair{&ds.train, &train_layout}, std::pair{&ds.eval, &eval_layout}}) {
    split->name = (split == &ds.train) ? "train" : "eval";
    for (const auto& classes : *layout) {
      const std::uint64_t id = next_id++;
      auto comp = detail::render_image(spec, classes, derive_seed(spec.seed, id, 1));
      std::vector<Annotation> anns;
      for (std::size_t k = 0; k < comp.glyphs.size(); ++k) anns.push_back({id, comp.glyphs[k].class_id, comp.visible_boxes[k]});
      split->ids.push_back(id);
      split->images.push_back(std::move(comp.image));
      split->annotations.push_back(std::move(anns));
    }
  }
  ds.build_index();
  return ds;
}

inline void generate_to(const DatasetSpec& spec, const std::string& dir) {
  const Dataset ds = generate(spec);
  write_dataset(dir, ds, class_table(spec));
}

}  // namespace sylph
