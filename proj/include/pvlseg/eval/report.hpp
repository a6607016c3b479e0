#pragma once

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pvlseg/data/dataset.hpp"
#include "pvlseg/eval/inference.hpp"
#include "pvlseg/eval/metrics.hpp"

namespace pvlseg {

enum class SpearmanPooling { Pixel, Image };

struct EvalOptions {
  std::size_t mc_samples = 30;
  std::uint64_t seed = 0;
  Mode mode = Mode::InferSample;
  double nsd_tol = 2.0;
  BrierRegion brier_region = BrierRegion::ForegroundBand;
  double brier_band = 5.0;
  SpearmanPooling spearman = SpearmanPooling::Pixel;
  std::size_t batch = 25;  // images per mc_infer call
};

struct SampleMetrics {
  std::string id;
  double dsc = 0, nsd = 0, brier = 0;
  double mean_entropy = 0;
};

struct SplitMetrics {
  std::string split, style;
  std::vector<SampleMetrics> samples;
  double dsc = 0, nsd = 0, brier = 0;
  std::optional<double> spearman;  // empty when undefined (constant maps)
};

// Runs mc_infer over `data` in chunks and scores every sample. Pass seeds are
// shared by all chunks; the chunk size only changes float rounding.
template <class T>
SplitMetrics evaluate_split(const PvlSegModel<T>& model, const std::vector<Sample>& data, const EvalOptions& opt,
                            const std::string& split = "", const std::string& style = "original") {
  if (data.empty()) throw InputError("evaluate: split '" + split + "' has no samples");
  SplitMetrics out{split, style, {}, 0, 0, 0, std::nullopt};
  UncertaintyErrorPool pool(opt.brier_region, opt.brier_band);
  for (std::size_t lo = 0; lo < data.size(); lo += opt.batch) {
    const std::size_t hi = std::min(data.size(), lo + opt.batch);
    std::vector<const Image<double>*> imgs;
    std::vector<std::string> texts;
    for (std::size_t i = lo; i < hi; ++i) {
      imgs.push_back(&data[i].image);
      texts.push_back(data[i].text);
    }
    const auto res = mc_infer(model, imgs, texts, opt.mc_samples, opt.seed, opt.mode);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& u = res[i - lo];
      const Mask& gt = data[i].mask;
      SampleMetrics s;
      s.id = data[i].id;
      s.dsc = dsc(u.pred, gt);
      s.nsd = nsd(u.pred, gt, opt.nsd_tol);
      s.brier = brier(u.mean_prob, gt, opt.brier_region, opt.brier_band);
      double e = 0;
      for (double v : u.entropy.px) e += v;
      s.mean_entropy = e / static_cast<double>(u.entropy.size());
      pool.add(u.entropy, u.pred, gt);
      out.samples.push_back(s);
    }
  }
  for (const auto& s : out.samples) {
    out.dsc += s.dsc;
    out.nsd += s.nsd;
    out.brier += s.brier;
  }
  const double n = static_cast<double>(out.samples.size());
  out.dsc /= n;
  out.nsd /= n;
  out.brier /= n;
  try {
    out.spearman = opt.spearman == SpearmanPooling::Pixel ? pool.pooled() : pool.per_image_mean();
  } catch (const EvaluationError&) {
  }
  return out;
}

struct HarmonicRow {
  std::string id_split, ood_split;
  double dsc = 0, nsd = 0;
};

struct MetricReport {
  std::uint64_t config_hash = 0;
  std::size_t mc_samples = 0;
  std::vector<SplitMetrics> splits;
  std::vector<HarmonicRow> harmonic;

  const SplitMetrics* find(const std::string& split, const std::string& style = "original") const {
    for (const auto& s : splits)
      if (s.split == split && s.style == style) return &s;
    return nullptr;
  }

  // HM for every (x, x_ood) pair present with the same style.
  void add_harmonic_pairs() {
    harmonic.clear();
    for (const auto& a : splits) {
      const auto* b = find(a.split + "_ood", a.style);
      if (!b || !(a.dsc > 0) || !(b->dsc > 0) || !(a.nsd > 0) || !(b->nsd > 0)) continue;
      const std::string tag = a.style == "original" ? "" : "/" + a.style;
      harmonic.push_back({a.split + tag, b->split + tag,
                          harmonic_mean(a.dsc, b->dsc), harmonic_mean(a.nsd, b->nsd)});
    }
  }
};

inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// key: value lines, per sample then per split.
inline std::string report_text(const MetricReport& r) {
  std::ostringstream o;
  o << "config_hash: " << hash_hex(r.config_hash) << "\n";
  o << "mc_samples: " << r.mc_samples << "\n";
  for (const auto& s : r.splits) {
    const std::string key = s.split + "/" + s.style;
    for (const auto& m : s.samples) {
      o << "\n[sample " << key << "/" << m.id << "]\n";
      o << "dsc: " << fmt(m.dsc) << "\nnsd: " << fmt(m.nsd) << "\nbrier: " << fmt(m.brier)
        << "\nmean_entropy: " << fmt(m.mean_entropy, 6) << "\n";
    }
  }
  for (const auto& s : r.splits) {
    o << "\n[split " << s.split << "/" << s.style << "]\n";
    o << "samples: " << s.samples.size() << "\n";
    o << "dsc: " << fmt(s.dsc) << "\nnsd: " << fmt(s.nsd) << "\nbrier: " << fmt(s.brier) << "\n";
    o << "spearman: " << (s.spearman ? fmt(*s.spearman) : "undefined") << "\n";
  }
  for (const auto& h : r.harmonic) {
    o << "\n[harmonic " << h.id_split << " " << h.ood_split << "]\n";
    o << "dsc: " << fmt(h.dsc) << "\nnsd: " << fmt(h.nsd) << "\n";
  }
  return o.str();
}

inline std::string report_tsv(const MetricReport& r) {
  std::ostringstream o;
  o << "config_hash\tsplit\tstyle\tn\tdsc\tnsd\tbrier\tspearman\n";
  for (const auto& s : r.splits)
    o << hash_hex(r.config_hash) << '\t' << s.split << '\t' << s.style << '\t' << s.samples.size() << '\t'
      << fmt(s.dsc) << '\t' << fmt(s.nsd) << '\t' << fmt(s.brier) << '\t' << (s.spearman ? fmt(*s.spearman) : "nan")
      << '\n';
  for (const auto& h : r.harmonic)
    o << hash_hex(r.config_hash) << "\tHM(" << h.id_split << "," << h.ood_split << ")\t-\t-\t" << fmt(h.dsc) << '\t'
      << fmt(h.nsd) << "\t-\t-\n";
  return o.str();
}

}  // namespace pvlseg
