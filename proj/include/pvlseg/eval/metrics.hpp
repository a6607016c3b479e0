#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "pvlseg/data/image.hpp"

namespace pvlseg {

enum class BrierRegion { ForegroundBand, Full };

// Dice similarity in percent; two empty masks agree perfectly.
inline double dsc(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw DimensionError("dsc: mask shapes differ");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    np += pred.px[i] != 0;
    ng += gt.px[i] != 0;
    inter += pred.px[i] && gt.px[i];
  }
  if (np + ng == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

inline double iou(const Mask& a, const Mask& b) {
  if (!a.same_shape(b)) throw DimensionError("iou: mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.px[i] && b.px[i];
    uni += a.px[i] || b.px[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Foreground pixels with a 4-neighbour outside the mask (the canvas border
// counts as outside).
inline Mask boundary(const Mask& m) {
  Mask b(m.h, m.w);
  for (std::size_t y = 0; y < m.h; ++y)
    for (std::size_t x = 0; x < m.w; ++x) {
      if (!m(y, x)) continue;
      const bool interior = y > 0 && x > 0 && y + 1 < m.h && x + 1 < m.w && m(y - 1, x) && m(y + 1, x) &&
                            m(y, x - 1) && m(y, x + 1);
      b(y, x) = !interior;
    }
  return b;
}

namespace detail {

// Exact 1-D squared distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (std::isfinite(f[q])) {
      first = q;
      break;
    }
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    double s;
    while (true) {
      const double p = static_cast<double>(v[k]);
      const double qd = static_cast<double>(q);
      s = ((f[q] + qd * qd) - (f[v[k]] + p * p)) / (2.0 * qd - 2.0 * p);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace detail

// Squared Euclidean distance from every pixel to the nearest set pixel of
// `features` (+inf when there is none).
inline Image<double> squared_distance_transform(const Mask& features) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Image<double> g(features.h, features.w);
  for (std::size_t i = 0; i < g.size(); ++i) g.px[i] = features.px[i] ? 0.0 : kInf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  std::vector<double> col_in(features.h), col_out(features.h), row_out(features.w);
  for (std::size_t x = 0; x < g.w; ++x) {
    for (std::size_t y = 0; y < g.h; ++y) col_in[y] = g(y, x);
    detail::edt_1d(col_in.data(), col_out.data(), g.h, v, z);
    for (std::size_t y = 0; y < g.h; ++y) g(y, x) = col_out[y];
  }
  for (std::size_t y = 0; y < g.h; ++y) {
    detail::edt_1d(&g.px[y * g.w], row_out.data(), g.w, v, z);
    std::copy(row_out.begin(), row_out.end(), g.px.begin() + static_cast<std::ptrdiff_t>(y * g.w));
  }
  return g;
}

// Normalised surface distance in percent: mean of the two directed fractions
// of boundary pixels lying within `tol_px` of the other mask's boundary.
inline double nsd(const Mask& pred, const Mask& gt, double tol_px = 2.0) {
  if (!pred.same_shape(gt)) throw DimensionError("nsd: mask shapes differ");
  if (tol_px < 0) throw ArgumentError("nsd: tolerance must be >= 0");
  const Mask bp = boundary(pred), bg = boundary(gt);
  const std::size_t np = count(bp), ng = count(bg);
  if (np == 0 && ng == 0) return 100.0;
  if (np == 0 || ng == 0) return 0.0;
  const double tol2 = tol_px * tol_px;
  auto within = [&](const Mask& from, const Mask& to) {
    const Image<double> d2 = squared_distance_transform(to);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < from.size(); ++i) ok += from.px[i] && d2.px[i] <= tol2 + 1e-9;
    return static_cast<double>(ok);
  };
  return 100.0 * 0.5 * (within(bp, bg) / static_cast<double>(np) + within(bg, bp) / static_cast<double>(ng));
}

// Ground truth dilated by a Euclidean disk of `radius` pixels.
inline Mask dilate(const Mask& m, double radius) {
  const Image<double> d2 = squared_distance_transform(m);
  Mask out(m.h, m.w);
  for (std::size_t i = 0; i < m.size(); ++i) out.px[i] = d2.px[i] <= radius * radius + 1e-9;
  return out;
}

inline Mask brier_region(const Mask& gt, BrierRegion region, double band_px) {
  return region == BrierRegion::Full ? Mask(gt.h, gt.w, 1) : dilate(gt, band_px);
}

// 100 * mean squared error between probability and truth over the region.
inline double brier(const Image<double>& prob, const Mask& gt, BrierRegion region = BrierRegion::ForegroundBand,
                    double band_px = 5.0) {
  if (!prob.same_shape(gt)) throw DimensionError("brier: probability and mask shapes differ");
  const Mask r = brier_region(gt, region, band_px);
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    if (!r.px[i]) continue;
    const double e = prob.px[i] - (gt.px[i] ? 1.0 : 0.0);
    acc += e * e;
    ++n;
  }
  if (n == 0) throw EvaluationError("brier: evaluation region is empty");
  return 100.0 * acc / static_cast<double>(n);
}

// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw EvaluationError("spearman: correlation undefined for a constant input");
  return sxy / std::sqrt(sxx * syy);
}

// Spearman rank correlation in percent.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw DimensionError("spearman: inputs differ in length");
  if (x.size() < 2) throw EvaluationError("spearman: need at least two values");
  return 100.0 * pearson(average_ranks(x), average_ranks(y));
}

// Collects (uncertainty, error) pixel pairs across a dataset, then correlates
// them pooled per pixel or averaged per image.
class UncertaintyErrorPool {
 public:
  explicit UncertaintyErrorPool(BrierRegion region = BrierRegion::ForegroundBand, double band_px = 5.0)
      : region_(region), band_px_(band_px) {}

  void add(const Image<double>& entropy, const Mask& pred, const Mask& gt) {
    if (!entropy.same_shape(gt) || !pred.same_shape(gt)) throw DimensionError("spearman: map shapes differ");
    const Mask r = brier_region(gt, region_, band_px_);
    std::vector<double> u, e;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (!r.px[i]) continue;
      u.push_back(entropy.px[i]);
      e.push_back((pred.px[i] != 0) != (gt.px[i] != 0) ? 1.0 : 0.0);
    }
    unc_.insert(unc_.end(), u.begin(), u.end());
    err_.insert(err_.end(), e.begin(), e.end());
    per_image_.emplace_back(std::move(u), std::move(e));
  }

  double pooled() const { return spearman(unc_, err_); }

  // Mean over images whose correlation is defined.
  double per_image_mean() const {
    double acc = 0;
    std::size_t n = 0;
    for (const auto& [u, e] : per_image_) {
      try {
        acc += spearman(u, e);
        ++n;
      } catch (const EvaluationError&) {
      }
    }
    if (n == 0) throw EvaluationError("spearman: undefined for every image");
    return acc / static_cast<double>(n);
  }

  std::size_t pixels() const { return unc_.size(); }

 private:
  BrierRegion region_;
  double band_px_;
  std::vector<double> unc_, err_;
  std::vector<std::pair<std::vector<double>, std::vector<double>>> per_image_;
};

inline double harmonic_mean(double a, double b) {
  if (!(a > 0) || !(b > 0)) throw ArgumentError("harmonic_mean: inputs must be > 0");
  return 2.0 * a * b / (a + b);
}

// Natural-log binary entropy with 0 ln 0 := 0.
inline double binary_entropy(double p) {
  double h = 0;
  if (p > 0 && p < 1) h = -p * std::log(p) - (1 - p) * std::log1p(-p);
  return h;
}

}  // namespace pvlseg
