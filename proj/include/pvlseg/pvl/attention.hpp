#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pvlseg/core/ops.hpp"
#include "pvlseg/core/rng.hpp"
#include "pvlseg/core/tensor.hpp"

namespace pvlseg {

// How the score uncertainty enters the attention weights.
//   Difference: softmax(S_mu - beta * S_sigma)
//   Scaling:    softmax(S_mu) / (1 + beta * S_sigma), rows left unnormalized
//   None:       softmax(S_mu)
enum class ConfidenceMechanism { Difference, Scaling, None };

enum class Mode { TrainSampleOnce, InferSample, InferMean };

inline bool samples_values(Mode m) { return m != Mode::InferMean; }

inline constexpr double kDefaultBeta = 2.35;
inline constexpr double kScoreVarianceFloor = 1e-12;

// One probabilistic cross-attention instance. W_K and W_V are column-split:
// the first D_a columns give the mean, the last D_a the pre-softplus
// variance ("log-variance") head.
template <class T>
struct PvlAttentionParams {
  Tensor<T> w_q;         // [D_s, D_a]
  Tensor<T> w_k;         // [D_s, 2 D_a]
  Tensor<T> w_v;         // [D_s, 2 D_a]
  Tensor<T> w_out;       // [D_a, D_s]
  Tensor<T> gate_logit;  // scalar; g = sigmoid(gate_logit)
  T beta = T(kDefaultBeta);
  ConfidenceMechanism mechanism = ConfidenceMechanism::Difference;

  std::size_t shared_dim() const { return w_q.dim(0); }
  std::size_t attn_dim() const { return w_q.dim(1); }

  static PvlAttentionParams init(std::size_t d_s, std::size_t d_a, Rng& rng, T gate_logit0 = T(0),
                                 T beta = T(kDefaultBeta),
                                 ConfidenceMechanism mech = ConfidenceMechanism::Difference) {
    auto mat = [&](std::size_t r, std::size_t c, double stddev) {
      std::vector<T> v(r * c);
      rng.fill_normal(std::span<T>(v), 0.0, stddev);
      return Tensor<T>::from({r, c}, std::move(v), true);
    };
    PvlAttentionParams p;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d_s));
    p.w_q = mat(d_s, d_a, in_std);
    p.w_k = mat(d_s, 2 * d_a, in_std);
    p.w_v = mat(d_s, 2 * d_a, in_std);
    p.w_out = mat(d_a, d_s, 1.0 / std::sqrt(static_cast<double>(d_a)));
    p.gate_logit = Tensor<T>::scalar(gate_logit0, true);
    p.beta = beta;
    p.mechanism = mech;
    p.validate();
    return p;
  }

  void validate() const {
    const std::size_t ds = w_q.dim(0), da = w_q.dim(1);
    if (da < 1) throw ConfigError("attn_pvl: attention dim must be >= 1");
    if (w_k.shape() != Shape{ds, 2 * da} || w_v.shape() != Shape{ds, 2 * da} || w_out.shape() != Shape{da, ds}) {
      throw DimensionError("attn_pvl: projection shapes inconsistent with W_Q " + shape_str(w_q.shape()));
    }
    if (gate_logit.numel() != 1) throw DimensionError("attn_pvl: gate logit must be a scalar");
    if (!(beta >= T(0))) throw ConfigError("attn_pvl: beta must be nonnegative");
  }

  // Gate and beta each count as one stored scalar.
  std::size_t parameter_count() const {
    return w_q.numel() + w_k.numel() + w_v.numel() + w_out.numel() + 2;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const {
    return {{"w_q", w_q}, {"w_k", w_k}, {"w_v", w_v}, {"w_out", w_out}, {"gate_logit", gate_logit}};
  }
};

template <class T>
struct AttentionDiagnostics {
  Tensor<T> score_mean;      // S_mu [B, T_q, T_k]
  Tensor<T> score_std;       // S_sigma [B, T_q, T_k]
  Tensor<T> attention;       // A [B, T_q, T_k]
  Tensor<T> value_variance;  // mean over channels of V_sigma^2, [B, T_k]
};

template <class T>
struct AttentionResult {
  Tensor<T> y;
  AttentionDiagnostics<T> diag;
};

namespace detail {

template <class T>
void require_finite(const Tensor<T>& t, const char* stage) {
  if (!all_finite(t)) throw NumericError(std::string("attn_pvl: non-finite values at stage '") + stage + "'");
}

// Additive mask [B, 1, T_k]: 0 for valid keys, a large negative for padding.
template <class T>
Tensor<T> key_mask_bias(const std::vector<std::uint8_t>& valid, std::size_t b, std::size_t tk) {
  if (valid.size() != b * tk) throw DimensionError("attn_pvl: key mask must be [B, T_k]");
  std::vector<T> v(b * tk);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = valid[i] ? T(0) : T(-1e9);
  return Tensor<T>::from({b, 1, tk}, std::move(v));
}

}  // namespace detail

// Attention weights from score mean and score std under one mechanism.
template <class T>
Tensor<T> attention_weights(const Tensor<T>& s_mu, const Tensor<T>& s_std, T beta, ConfidenceMechanism mech) {
  using namespace ops;
  switch (mech) {
    case ConfidenceMechanism::Difference:
      return softmax_lastdim(sub(s_mu, scale(s_std, beta)));
    case ConfidenceMechanism::Scaling:
      return div(softmax_lastdim(s_mu), add_scalar(scale(s_std, beta), T(1)));
    case ConfidenceMechanism::None:
      break;
  }
  return softmax_lastdim(s_mu);
}

// Y = Attn_PVL(X, Z). X [B, T_q, D_s] are queries, Z [B, T_k, D_s] context.
// `key_valid`, when given, is a [B, T_k] 0/1 mask excluding padded keys.
template <class T>
AttentionResult<T> attn_pvl(const PvlAttentionParams<T>& p, const Tensor<T>& x, const Tensor<T>& z, Rng& rng,
                            Mode mode, const std::vector<std::uint8_t>* key_valid = nullptr) {
  using namespace ops;
  const std::size_t ds = p.shared_dim(), da = p.attn_dim();
  if (x.rank() != 3 || z.rank() != 3 || x.dim(2) != ds || z.dim(2) != ds || x.dim(0) != z.dim(0)) {
    throw DimensionError("attn_pvl: X " + shape_str(x.shape()) + " and Z " + shape_str(z.shape()) +
                         " must be [B,T,D_s] with D_s=" + std::to_string(ds));
  }
  if (x.dim(1) < 1 || z.dim(1) < 1) throw DimensionError("attn_pvl: empty token sequence");
  const std::size_t b = x.dim(0), tk = z.dim(1);

  Tensor<T> q = matmul(x, p.w_q);
  pvlseg::detail::require_finite(q, "query projection");
  Tensor<T> k = matmul(z, p.w_k);
  Tensor<T> v = matmul(z, p.w_v);
  pvlseg::detail::require_finite(k, "key projection");
  pvlseg::detail::require_finite(v, "value projection");
  Tensor<T> k_mu = slice(k, -1, 0, da);
  Tensor<T> k_var = softplus(slice(k, -1, da, da));
  Tensor<T> v_mu = slice(v, -1, 0, da);
  Tensor<T> v_var = softplus(slice(v, -1, da, da));

  const T inv_da = T(1) / static_cast<T>(da);
  Tensor<T> s_mu = scale(matmul(q, k_mu, true), T(1) / std::sqrt(static_cast<T>(da)));
  Tensor<T> s_var = scale(matmul(square(q), k_var, true), inv_da);
  Tensor<T> s_std = sqrt(add_scalar(s_var, T(kScoreVarianceFloor)));
  pvlseg::detail::require_finite(s_mu, "score mean");
  pvlseg::detail::require_finite(s_std, "score std");

  Tensor<T> logits_mu = s_mu;
  if (key_valid) logits_mu = add(s_mu, pvlseg::detail::key_mask_bias<T>(*key_valid, b, tk));
  Tensor<T> a = attention_weights(logits_mu, s_std, p.beta, p.mechanism);
  pvlseg::detail::require_finite(a, "attention weights");

  Tensor<T> values = v_mu;
  if (samples_values(mode)) {
    Tensor<T> eps = randn<T>(v_mu.shape(), rng);
    values = add(v_mu, mul(eps, sqrt(v_var)));
  }
  pvlseg::detail::require_finite(values, "value sampling");

  Tensor<T> o = matmul(a, values);
  Tensor<T> o_proj = matmul(o, p.w_out);
  pvlseg::detail::require_finite(o_proj, "output projection");
  Tensor<T> g = sigmoid(p.gate_logit);
  Tensor<T> y = add(mul(o_proj, g), mul(x, add_scalar(neg(g), T(1))));
  pvlseg::detail::require_finite(y, "gated residual");

  AttentionDiagnostics<T> diag;
  diag.score_mean = s_mu;
  diag.score_std = s_std;
  diag.attention = a;
  {
    NoGradGuard ng;
    diag.value_variance = mean_axis(v_var, -1);
  }
  return {std::move(y), std::move(diag)};
}

// Per-element sample mean and unbiased variance of Y over n stochastic
// passes; pass i draws from rng.derive(i).
template <class T>
std::pair<Tensor<T>, Tensor<T>> mc_moments(const PvlAttentionParams<T>& p, const Tensor<T>& x, const Tensor<T>& z,
                                           const Rng& rng, std::size_t n) {
  if (n < 2) throw ArgumentError("mc_moments: need at least 2 passes, got " + std::to_string(n));
  NoGradGuard ng;
  std::vector<double> mean, m2;
  for (std::size_t i = 0; i < n; ++i) {
    Rng pass_rng = rng.derive(i);
    const auto y = attn_pvl(p, x, z, pass_rng, Mode::InferSample).y;
    if (i == 0) {
      mean.assign(y.numel(), 0.0);
      m2.assign(y.numel(), 0.0);
    }
    const double cnt = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < y.numel(); ++j) {
      const double val = static_cast<double>(y.values()[j]);
      const double delta = val - mean[j];
      mean[j] += delta / cnt;
      m2[j] += delta * (val - mean[j]);
    }
  }
  std::vector<T> mv(mean.size()), vv(mean.size());
  for (std::size_t j = 0; j < mean.size(); ++j) {
    mv[j] = static_cast<T>(mean[j]);
    vv[j] = static_cast<T>(m2[j] / static_cast<double>(n - 1));
  }
  return {Tensor<T>::from(x.shape(), std::move(mv)), Tensor<T>::from(x.shape(), std::move(vv))};
}

}  // namespace pvlseg
