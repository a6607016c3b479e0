#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pvlseg/core/rng.hpp"
#include "pvlseg/core/tensor.hpp"

namespace pvlseg {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_checked = 0;
};

// Relative error with a floor on the denominator, so gradients that are
// numerically zero compare on an absolute scale.
inline double gradient_rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central-difference check of d loss / d input for every listed input.
// `loss` must rebuild the graph from the current input values on each call.
// With max_entries > 0, that many entries per input are sampled with `rng`.
inline GradCheckReport check_gradients(const std::function<Tensor<double>()>& loss,
                                       std::vector<Tensor<double>> inputs, double h = 1e-5,
                                       std::size_t max_entries = 0, Rng* rng = nullptr,
                                       double floor = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tensor<double> l = loss();
    l.backward();
  }
  GradCheckReport rep;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> picks;
    if (max_entries == 0 || max_entries >= t.numel() || rng == nullptr) {
      picks.resize(t.numel());
      for (std::size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    } else {
      for (std::size_t i = 0; i < max_entries; ++i) picks.push_back(rng->below(t.numel()));
    }
    for (std::size_t i : picks) {
      double& v = t.values()[i];
      const double saved = v;
      double fp = 0, fm = 0;
      {
        NoGradGuard ng;
        v = saved + h;
        fp = loss().item();
        v = saved - h;
        fm = loss().item();
      }
      v = saved;
      const double numeric = (fp - fm) / (2 * h);
      rep.max_rel_error = std::max(rep.max_rel_error, gradient_rel_error(analytic[i], numeric, floor));
      rep.max_abs_error = std::max(rep.max_abs_error, std::abs(analytic[i] - numeric));
      ++rep.entries_checked;
    }
  }
  return rep;
}

}  // namespace pvlseg
