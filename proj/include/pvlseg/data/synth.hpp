#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "pvlseg/core/rng.hpp"
#include "pvlseg/data/captions.hpp"

namespace pvlseg {

enum class ShapeKind { Circle, Rectangle, Triangle };

inline std::string shape_noun(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Triangle: return "triangle";
  }
  return "circle";
}

// The word extract_attributes is expected to read off a mask of this shape.
inline std::string shape_descriptor(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "round";
    case ShapeKind::Rectangle: return "rectangular";
    case ShapeKind::Triangle: return "triangular";
  }
  return "round";
}

enum class SizeClass { Small, Medium, Large };

struct ShiftParams {
  double noise_mult = 3.0;
  double gamma = 0.6;
  bool invert = false;
};

struct SynthOptions {
  std::size_t size = 64;
  std::size_t max_objects = 3;
  double p_multiple = 0.15;  // target class appears as two instances
  double noise_sigma = 0.04;
  double gradient_amp = 0.15;
  std::string class_word = "lesion";
  bool ood = false;
  ShiftParams shift;
};

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  SizeClass size = SizeClass::Medium;
  double cy = 0, cx = 0;
  double r = 0;      // radius of the equal-area disk
  double aspect = 1;  // rectangles
  double angle = 0;   // triangles
  double intensity = 0.8;
  bool bright = true;
  bool target = false;

  // Radius of a disk enclosing the shape.
  double extent() const {
    switch (shape) {
      case ShapeKind::Circle: return r;
      case ShapeKind::Rectangle: {
        const double a = std::sqrt(std::numbers::pi / 4 * aspect) * r, b = std::sqrt(std::numbers::pi / 4 / aspect) * r;
        return std::hypot(a, b);
      }
      case ShapeKind::Triangle: return r * std::sqrt(4 * std::numbers::pi / (3 * std::sqrt(3.0)));
    }
    return r;
  }

  bool covers(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    switch (shape) {
      case ShapeKind::Circle: return dy * dy + dx * dx <= r * r;
      case ShapeKind::Rectangle: {
        const double a = std::sqrt(std::numbers::pi / 4 * aspect) * r, b = std::sqrt(std::numbers::pi / 4 / aspect) * r;
        return std::abs(dx) <= a && std::abs(dy) <= b;
      }
      case ShapeKind::Triangle: {
        const double big_r = extent();
        double vy[3], vx[3];
        for (int k = 0; k < 3; ++k) {
          vy[k] = big_r * std::sin(angle + 2 * std::numbers::pi * k / 3);
          vx[k] = big_r * std::cos(angle + 2 * std::numbers::pi * k / 3);
        }
        bool neg = false, pos = false;
        for (int k = 0; k < 3; ++k) {
          const int j = (k + 1) % 3;
          const double cross = (vx[j] - vx[k]) * (dy - vy[k]) - (vy[j] - vy[k]) * (dx - vx[k]);
          neg |= cross < 0;
          pos |= cross > 0;
        }
        return !(neg && pos);
      }
    }
    return false;
  }

  Mask render(std::size_t n) const {
    Mask m(n, n);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) m(y, x) = covers(static_cast<double>(y), static_cast<double>(x));
    return m;
  }
};

struct Scene {
  Image<double> image;
  std::vector<SceneObject> objects;
  std::vector<Mask> object_masks;
  Mask target_mask;
  ShapeKind target_shape = ShapeKind::Circle;
  std::string planted_location;
  std::string planted_number;
  std::string planted_brightness;

  // Union of every object of the given shape.
  Mask mask_of(ShapeKind s) const {
    Mask m(image.h, image.w);
    for (std::size_t i = 0; i < objects.size(); ++i)
      if (objects[i].shape == s)
        for (std::size_t k = 0; k < m.size(); ++k) m.px[k] |= object_masks[i].px[k];
    return m;
  }
};

namespace detail {

inline double sample_radius(Rng& rng, SizeClass s) {
  switch (s) {
    case SizeClass::Small: return rng.uniform(6.5, 8.0);
    case SizeClass::Medium: return rng.uniform(8.5, 10.5);
    case SizeClass::Large: return rng.uniform(11.0, 13.0);
  }
  return 8.0;
}

inline SceneObject sample_object(Rng& rng, ShapeKind shape, bool bright) {
  SceneObject o;
  o.shape = shape;
  o.size = static_cast<SizeClass>(rng.below(3));
  o.r = sample_radius(rng, o.size);
  o.aspect = std::exp(rng.uniform(std::log(0.8), std::log(1.25)));
  o.angle = rng.uniform(0.0, 2 * std::numbers::pi);
  o.bright = bright;
  o.intensity = bright ? rng.uniform(0.68, 0.92) : rng.uniform(0.05, 0.28);
  return o;
}

// Distance from a coordinate to the nearest internal third boundary.
inline double grid_margin(double c, std::size_t n) {
  const double t = 3.0 * (c + 0.5) / static_cast<double>(n);
  const double frac = t - std::floor(t);
  return std::min(frac, 1.0 - frac) * static_cast<double>(n) / 3.0;
}

}  // namespace detail

// One scene: the target class (one or two instances) plus up to two
// distractors of other shapes, all non-overlapping and inside the canvas.
inline Scene generate_scene(Rng& rng, const SynthOptions& opt) {
  const std::size_t n = opt.size;
  const double nd = static_cast<double>(n);
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw NumericError("synth: could not place objects on the canvas");
    Scene sc;
    sc.target_shape = static_cast<ShapeKind>(rng.below(3));
    const bool multiple = rng.uniform() < opt.p_multiple;
    const bool target_bright = rng.uniform() < 0.5;
    const std::size_t n_target = multiple ? 2 : 1;
    const std::size_t n_distract = rng.below(std::min<std::size_t>(3, opt.max_objects - n_target + 1));

    std::vector<SceneObject> objs;
    for (std::size_t i = 0; i < n_target; ++i) {
      auto o = detail::sample_object(rng, sc.target_shape, target_bright);
      if (multiple) {
        o.size = SizeClass::Small;
        o.r = detail::sample_radius(rng, o.size);
      }
      o.target = true;
      objs.push_back(o);
    }
    for (std::size_t i = 0; i < n_distract; ++i) {
      const auto other = static_cast<ShapeKind>((static_cast<std::size_t>(sc.target_shape) + 1 + rng.below(2)) % 3);
      objs.push_back(detail::sample_object(rng, other, rng.uniform() < 0.5));
    }

    bool placed = true;
    for (std::size_t i = 0; i < objs.size() && placed; ++i) {
      placed = false;
      const double e = objs[i].extent();
      for (int tries = 0; tries < 200 && !placed; ++tries) {
        objs[i].cy = rng.uniform(e + 1, nd - 2 - e);
        objs[i].cx = rng.uniform(e + 1, nd - 2 - e);
        placed = true;
        for (std::size_t j = 0; j < i && placed; ++j)
          placed = std::hypot(objs[i].cy - objs[j].cy, objs[i].cx - objs[j].cx) >= e + objs[j].extent() + 4.0;
      }
    }
    if (!placed) continue;

    // Keep the target centroid clear of the location grid lines so the
    // planted location survives pixelation.
    double ty = 0, tx = 0, wsum = 0;
    for (std::size_t i = 0; i < n_target; ++i) {
      const double w = objs[i].r * objs[i].r;  // area weight
      ty += w * objs[i].cy;
      tx += w * objs[i].cx;
      wsum += w;
    }
    ty /= wsum;
    tx /= wsum;
    if (detail::grid_margin(ty, n) < 1.5 || detail::grid_margin(tx, n) < 1.5) continue;

    sc.objects = objs;
    sc.target_mask = Mask(n, n);
    bool ok = true;
    for (const auto& o : objs) {
      Mask m = o.render(n);
      ok &= count(m) >= 20 && count_components(m) == 1;
      if (o.target)
        for (std::size_t k = 0; k < m.size(); ++k) sc.target_mask.px[k] |= m.px[k];
      sc.object_masks.push_back(std::move(m));
    }
    if (!ok || count_components(sc.target_mask) != n_target) continue;
    sc.planted_location = location_word(ty, tx, n, n);
    sc.planted_number = multiple ? "multiple" : "single";
    sc.planted_brightness = target_bright ? "bright" : "dark";

    // Background: base level, linear gradient, then objects and noise.
    const double base = rng.uniform(0.4, 0.55);
    const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
    Image<double> img(n, n);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        img(y, x) = base + opt.gradient_amp * (std::cos(theta) * (static_cast<double>(x) / nd - 0.5) +
                                               std::sin(theta) * (static_cast<double>(y) / nd - 0.5));
    for (std::size_t i = 0; i < objs.size(); ++i)
      for (std::size_t k = 0; k < img.size(); ++k)
        if (sc.object_masks[i].px[k]) img.px[k] = objs[i].intensity;
    const double sigma = opt.noise_sigma * (opt.ood ? opt.shift.noise_mult : 1.0);
    std::vector<double> noise(img.size());
    rng.fill_normal(std::span<double>(noise), 0.0, sigma);
    for (std::size_t k = 0; k < img.size(); ++k) {
      double v = std::clamp(img.px[k] + noise[k], 0.0, 1.0);
      if (opt.ood) {
        v = std::pow(v, opt.shift.gamma);
        if (opt.shift.invert) v = 1.0 - v;
      }
      img.px[k] = v;
    }
    // The stored image is 8-bit; quantise now so in-memory and on-disk
    // scenes are identical.
    for (auto& v : img.px) v = std::round(v * 255.0) / 255.0;
    sc.image = std::move(img);
    return sc;
  }
}

struct CorpusOptions {
  std::uint64_t seed = 0;
  std::size_t n_train = 200;
  std::size_t n_test = 50;
  bool ood = false;
  PromptStyle extra_style = PromptStyle::Original;  // added to test splits
  SynthOptions synth;
};

struct PromptRow {
  std::size_t id = 0;
  std::string split, style, text;
};

inline std::string image_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", id);
  return buf;
}

// Writes images/, masks/ and prompts.tsv under `dir`. Every image gets a
// seed derived from (seed, id), so corpora are reproducible per image.
inline std::vector<PromptRow> generate_corpus(const std::string& dir, const CorpusOptions& opt) {
  namespace fs = std::filesystem;
  if (opt.n_train < 1 || opt.n_test < 1) throw ArgumentError("generate_corpus: split sizes must be >= 1");
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "masks", ec);
  if (ec || !fs::is_directory(fs::path(dir) / "masks")) throw IoError("cannot create dataset directory " + dir);

  struct Split {
    std::string name;
    std::size_t count;
    bool ood;
  };
  std::vector<Split> splits{{"train", opt.n_train, false}, {"test", opt.n_test, false}};
  if (opt.ood) splits.push_back({"test_ood", opt.n_test, true});

  const Rng root(opt.seed);
  std::vector<PromptRow> rows;
  std::size_t id = 0;
  for (const auto& sp : splits)
    for (std::size_t i = 0; i < sp.count; ++i, ++id) {
      Rng rng = root.derive(id);
      SynthOptions so = opt.synth;
      so.ood = sp.ood;
      const Scene sc = generate_scene(rng, so);
      write_pgm((fs::path(dir) / "images" / (image_stem(id) + ".pgm")).string(), to_bytes(sc.image));
      write_mask((fs::path(dir) / "masks" / (image_stem(id) + ".pgm")).string(), sc.target_mask);
      CaptionRecord rec = extract_attributes(sc.target_mask, sc.image, so.class_word);
      rec.id = id;
      rows.push_back({id, sp.name, "original", fill_template(rec, PromptStyle::Original)});
      if (sp.name != "train" && opt.extra_style != PromptStyle::Original)
        rows.push_back({id, sp.name, style_name(opt.extra_style), fill_template(rec, opt.extra_style)});
    }

  std::ofstream f(fs::path(dir) / "prompts.tsv", std::ios::binary);
  if (!f) throw IoError("cannot write " + dir + "/prompts.tsv");
  f << "id\tsplit\tstyle\ttext\n";
  for (const auto& r : rows) f << image_stem(r.id) << '\t' << r.split << '\t' << r.style << '\t' << r.text << '\n';
  return rows;
}

}  // namespace pvlseg
