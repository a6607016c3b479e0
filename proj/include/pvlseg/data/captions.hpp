#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pvlseg/data/image.hpp"
#include "pvlseg/eval/metrics.hpp"

namespace pvlseg {

enum class PromptStyle { Original, Underdescriptive, Overdescriptive, Contradictory, MissingLocation };

inline const std::array<PromptStyle, 5>& all_prompt_styles() {
  static const std::array<PromptStyle, 5> s{PromptStyle::Original, PromptStyle::Underdescriptive,
                                            PromptStyle::Overdescriptive, PromptStyle::Contradictory,
                                            PromptStyle::MissingLocation};
  return s;
}

inline std::string style_name(PromptStyle s) {
  switch (s) {
    case PromptStyle::Original: return "original";
    case PromptStyle::Underdescriptive: return "underdescriptive";
    case PromptStyle::Overdescriptive: return "overdescriptive";
    case PromptStyle::Contradictory: return "contradictory";
    case PromptStyle::MissingLocation: return "missing_location";
  }
  return "original";
}

inline PromptStyle parse_style(const std::string& name) {
  for (auto s : all_prompt_styles())
    if (style_name(s) == name) return s;
  throw ConfigError("unknown prompt style '" + name + "'");
}

// Circularity 4*pi*A / L^2 with L the 0.5-isocontour length. Measured on
// the pixel grid: radius-10 disk 0.8816, 20x20 square 0.8089; the cut is
// their midpoint.
inline constexpr double kRoundCircularity = 0.8453;
// A component filling this much of its bounding box has four corners there.
inline constexpr double kRectangularFill = 0.9;

struct CaptionRecord {
  std::size_t id = 0;
  bool normal = false;
  std::string class_word = "lesion";
  std::string location;    // upper-left | upper-right | lower-left | lower-right | center | left | right
  std::string number;      // single | multiple
  std::string shape;       // round | rectangular | triangular
  std::string brightness;  // bright | dark
  PromptStyle style = PromptStyle::Original;
  std::string text;
};

// Marching-squares contour length of the mask's 0.5 level set (outside the
// canvas counts as background).
inline double contour_length(const Mask& m) {
  auto at = [&](long y, long x) -> int {
    if (y < 0 || x < 0 || y >= static_cast<long>(m.h) || x >= static_cast<long>(m.w)) return 0;
    return m(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) ? 1 : 0;
  };
  double len = 0;
  for (long y = -1; y < static_cast<long>(m.h); ++y)
    for (long x = -1; x < static_cast<long>(m.w); ++x) {
      const int a = at(y, x), b = at(y, x + 1), c = at(y + 1, x + 1), d = at(y + 1, x);
      const int k = a + b + c + d;
      if (k == 1 || k == 3) len += std::numbers::sqrt2 / 2;
      else if (k == 2) len += a == c ? std::numbers::sqrt2 : 1.0;
    }
  return len;
}

inline double circularity(const Mask& m) {
  const double l = contour_length(m);
  return l > 0 ? 4.0 * std::numbers::pi * static_cast<double>(count(m)) / (l * l) : 0.0;
}

// 4-connected component labels (0 = background, 1..n).
inline std::vector<int> label_components(const Mask& m, int* n_out = nullptr) {
  std::vector<int> lab(m.size(), 0);
  int n = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m.px[s] || lab[s]) continue;
    lab[s] = ++n;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / m.w, x = i % m.w;
      auto visit = [&](std::size_t j) {
        if (m.px[j] && !lab[j]) {
          lab[j] = n;
          stack.push_back(j);
        }
      };
      if (y > 0) visit(i - m.w);
      if (y + 1 < m.h) visit(i + m.w);
      if (x > 0) visit(i - 1);
      if (x + 1 < m.w) visit(i + 1);
    }
  }
  if (n_out) *n_out = n;
  return lab;
}

inline std::size_t count_components(const Mask& m) {
  int n = 0;
  label_components(m, &n);
  return static_cast<std::size_t>(n);
}

// 3x3 grid of thirds collapsed onto seven words; the middle column of the
// top and bottom rows reads as "center".
inline std::string location_word(double cy, double cx, std::size_t h, std::size_t w) {
  auto third = [](double c, std::size_t n) {
    return std::clamp(static_cast<int>(std::floor(3.0 * (c + 0.5) / static_cast<double>(n))), 0, 2);
  };
  const int r = third(cy, h), c = third(cx, w);
  if (c == 1) return "center";
  if (r == 1) return c == 0 ? "left" : "right";
  return std::string(r == 0 ? "upper-" : "lower-") + (c == 0 ? "left" : "right");
}

inline std::string shape_word_for(const Mask& component) {
  std::size_t y0 = component.h, y1 = 0, x0 = component.w, x1 = 0;
  for (std::size_t y = 0; y < component.h; ++y)
    for (std::size_t x = 0; x < component.w; ++x)
      if (component(y, x)) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  const double fill = static_cast<double>(count(component)) / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
  if (fill >= kRectangularFill) return "rectangular";
  return circularity(component) > kRoundCircularity ? "round" : "triangular";
}

// Caption attributes read off a target mask and its image.
inline CaptionRecord extract_attributes(const Mask& mask, const Image<double>& image,
                                        const std::string& class_word = "lesion") {
  if (!mask.same_shape(image)) throw DimensionError("extract_attributes: mask and image shapes differ");
  CaptionRecord r;
  r.class_word = class_word;
  const std::size_t area = count(mask);
  if (area == 0) {
    r.normal = true;
    return r;
  }
  double sy = 0, sx = 0;
  for (std::size_t y = 0; y < mask.h; ++y)
    for (std::size_t x = 0; x < mask.w; ++x)
      if (mask(y, x)) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
      }
  r.location = location_word(sy / static_cast<double>(area), sx / static_cast<double>(area), mask.h, mask.w);

  int n = 0;
  const auto lab = label_components(mask, &n);
  r.number = n == 1 ? "single" : "multiple";
  std::vector<std::size_t> sizes(static_cast<std::size_t>(n) + 1, 0);
  for (int l : lab) ++sizes[static_cast<std::size_t>(l)];
  const int largest = static_cast<int>(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  Mask comp(mask.h, mask.w);
  for (std::size_t i = 0; i < lab.size(); ++i) comp.px[i] = lab[i] == largest;
  r.shape = shape_word_for(comp);

  const Mask ring_outer = dilate(mask, 3.0);
  double fg = 0, bg = 0;
  std::size_t nbg = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask.px[i]) fg += image.px[i];
    else if (ring_outer.px[i]) {
      bg += image.px[i];
      ++nbg;
    }
  }
  fg /= static_cast<double>(area);
  bg = nbg ? bg / static_cast<double>(nbg) : 0.5;
  r.brightness = fg > bg ? "bright" : "dark";
  return r;
}

namespace detail {

struct Template {
  const char* head;
  const char* loc;
  const char* tail;
};

inline std::string substitute(std::string s, const CaptionRecord& r) {
  const std::string cls = r.number == "multiple" ? r.class_word + "s" : r.class_word;
  const std::string count = r.number == "multiple" ? "multiple" : "one single";
  const std::pair<const char*, std::string> keys[] = {
      {"{n}", count}, {"{b}", r.brightness}, {"{s}", r.shape}, {"{c}", cls}, {"{l}", r.location}};
  for (const auto& [k, v] : keys)
    for (std::size_t p; (p = s.find(k)) != std::string::npos;) s.replace(p, std::string(k).size(), v);
  return s;
}

// Three lesion templates per style; location clause kept separate so it can
// be dropped.
inline const Template kLesion[3] = {
    {"{n} {b} {s} {c}", ", located in {l} of the image", ""},
    {"{n} {s} {c} with {b} appearance", " in the {l} region", ""},
    {"the image shows {n} {b} {s} {c}", " at the {l}", ""},
};
inline const char* kOverdescriptive[3] = {
    ", with a clearly defined margin and uniform {b} intensity throughout",
    ", sharply separated from the surrounding background texture",
    ", its {s} outline distinct and its {b} interior homogeneous",
};
inline const char* kContradictory[3] = {
    " but no {c} appears anywhere in the image",
    ", yet the image appears completely normal without any {c}",
    " although the {c} is not actually present",
};
inline const char* kUnder[3] = {"{c} present.", "{c} visible.", "there is a {c}."};
inline const char* kNormal[2] = {"no {c} is visible, the image appears normal", "normal image without any {c}"};
inline const char* kNormalUnder[2] = {"no {c}.", "normal image."};

}  // namespace detail

// Deterministic caption for a record; templates cycle with the image id.
inline std::string fill_template(const CaptionRecord& r, PromptStyle style) {
  using namespace detail;
  if (r.normal) {
    const std::size_t k = r.id % 2;
    switch (style) {
      case PromptStyle::Underdescriptive: return substitute(kNormalUnder[k], r);
      case PromptStyle::Overdescriptive:
        return substitute(std::string(kNormal[k]) + ", with uniform background texture and no focal abnormality", r);
      case PromptStyle::Contradictory:
        return substitute(std::string("a {c} is present, but ") + kNormal[k], r);
      default: return substitute(kNormal[k], r);
    }
  }
  const std::size_t k = r.id % 3;
  const Template& t = kLesion[k];
  switch (style) {
    case PromptStyle::Original: return substitute(std::string(t.head) + t.loc + t.tail, r);
    case PromptStyle::MissingLocation: return substitute(std::string(t.head) + t.tail, r);
    case PromptStyle::Underdescriptive: return substitute(kUnder[k], r);
    case PromptStyle::Overdescriptive:
      return substitute(std::string(t.head) + t.loc + t.tail + kOverdescriptive[k], r);
    case PromptStyle::Contradictory:
      return substitute(std::string(t.head) + t.loc + t.tail + kContradictory[k], r);
  }
  return {};
}

}  // namespace pvlseg
