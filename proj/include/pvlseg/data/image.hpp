#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "pvlseg/core/errors.hpp"

namespace pvlseg {

// Dense row-major 2-D grid.
template <class V>
struct Image {
  std::size_t h = 0, w = 0;
  std::vector<V> px;

  Image() = default;
  Image(std::size_t h_, std::size_t w_, V fill = V{}) : h(h_), w(w_), px(h_ * w_, fill) {}

  V& operator()(std::size_t y, std::size_t x) { return px[y * w + x]; }
  const V& operator()(std::size_t y, std::size_t x) const { return px[y * w + x]; }
  std::size_t size() const { return px.size(); }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
  template <class U>
  bool same_shape(const Image<U>& o) const {
    return h == o.h && w == o.w;
  }
};

using Mask = Image<std::uint8_t>;  // 0 / 1

inline std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.px.begin(), m.px.end(), [](std::uint8_t v) { return v != 0; }));
}

// Binary 8-bit PGM (P5).
inline void write_pgm(const std::string& path, const Image<std::uint8_t>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P5\n" << img.w << ' ' << img.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (!f) throw IoError("short write to " + path);
}

inline Image<std::uint8_t> read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  auto token = [&]() {
    std::string t;
    char c;
    while (f.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(f, skip);
      } else if (!std::isspace(static_cast<unsigned char>(c))) {
        t.push_back(c);
        break;
      }
    }
    while (f.get(c) && !std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    return t;
  };
  if (token() != "P5") throw InputError(path + ": not a binary PGM (P5)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw InputError(path + ": malformed PGM header");
  }
  if (maxval != 255 || w == 0 || h == 0) throw InputError(path + ": only 8-bit PGM with maxval 255 is supported");
  Image<std::uint8_t> img(h, w);
  f.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.px.size())) throw InputError(path + ": truncated pixel data");
  return img;
}

inline Image<std::uint8_t> to_bytes(const Image<double>& img, double lo = 0.0, double hi = 1.0) {
  Image<std::uint8_t> out(img.h, img.w);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < img.size(); ++i)
    out.px[i] = static_cast<std::uint8_t>(std::lround(std::clamp((img.px[i] - lo) / span, 0.0, 1.0) * 255.0));
  return out;
}

inline Image<double> from_bytes(const Image<std::uint8_t>& img) {
  Image<double> out(img.h, img.w);
  for (std::size_t i = 0; i < img.size(); ++i) out.px[i] = img.px[i] / 255.0;
  return out;
}

// {0,255} on disk <-> {0,1} in memory.
inline void write_mask(const std::string& path, const Mask& m) {
  Image<std::uint8_t> out(m.h, m.w);
  for (std::size_t i = 0; i < m.size(); ++i) out.px[i] = m.px[i] ? 255 : 0;
  write_pgm(path, out);
}

inline Mask read_mask(const std::string& path) {
  Mask m = read_pgm(path);
  for (auto& v : m.px) {
    if (v != 0 && v != 255) throw InputError(path + ": mask values must be 0 or 255");
    v = v ? 1 : 0;
  }
  return m;
}

}  // namespace pvlseg
