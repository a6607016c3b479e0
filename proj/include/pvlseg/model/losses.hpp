#pragma once

#include <string>

#include "pvlseg/core/ops.hpp"

namespace pvlseg {

enum class ContrastivePooling { Average, Cls };

struct LossConfig {
  double lambda_seg = 0.5;
  double lambda_softcon = 0.1;
  double tau = 0.2;
  double dice_smooth = 1.0;
  ContrastivePooling pooling = ContrastivePooling::Average;
  double logit_scale_init = 2.659;  // ln(1/0.07)

  void validate() const {
    if (!(tau > 0)) throw ConfigError("loss: tau must be > 0");
    if (lambda_seg < 0 || lambda_softcon < 0) throw ConfigError("loss: lambda weights must be >= 0");
    if (dice_smooth < 0) throw ConfigError("loss: dice smoothing must be >= 0");
  }
};

// 0.5 * soft Dice (per sample, batch mean) + 0.5 * mean logit-space BCE.
template <class T>
Tensor<T> dice_bce(const Tensor<T>& logits, const Tensor<T>& target, T smooth = T(1)) {
  using namespace ops;
  if (logits.shape() != target.shape() || logits.rank() != 3) {
    throw DimensionError("dice_bce: logits " + shape_str(logits.shape()) + " vs mask " + shape_str(target.shape()));
  }
  const std::size_t b = logits.dim(0);
  const Tensor<T> p = sigmoid(logits);
  const Tensor<T> flat_p = reshape(p, {b, p.numel() / b});
  const Tensor<T> flat_y = reshape(target, {b, p.numel() / b});
  const Tensor<T> inter = sum_axis(mul(flat_p, flat_y), -1);
  const Tensor<T> denom = add_scalar(add(sum_axis(flat_p, -1), sum_axis(flat_y, -1)), smooth);
  const Tensor<T> dice = mean(add_scalar(neg(div(add_scalar(scale(inter, T(2)), smooth), denom)), T(1)));
  // softplus(m) - y*m == -[y log sigmoid(m) + (1-y) log(1 - sigmoid(m))]
  const Tensor<T> bce = mean(sub(softplus(logits), mul(target, logits)));
  return add(scale(dice, T(0.5)), scale(bce, T(0.5)));
}

// -(1/B) sum_ij G_ij log softmax(P_i)_j
template <class T>
Tensor<T> soft_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets) {
  using namespace ops;
  return scale(sum(mul(targets, log_softmax_lastdim(logits))), T(-1) / static_cast<T>(logits.dim(0)));
}

// Soft targets G = softmax(p_t p_t^T / tau); differentiable in p_t.
template <class T>
Tensor<T> text_similarity_targets(const Tensor<T>& p_t, T tau) {
  return ops::softmax_lastdim(ops::scale(ops::matmul(p_t, p_t, true), T(1) / tau));
}

// Symmetric soft contrastive loss between pooled image tokens and [EOS]
// text features. vision_tokens [B, 1+P, D] (token 0 = [CLS]); text_eos [B, D].
template <class T>
Tensor<T> soft_contrastive(const Tensor<T>& vision_tokens, const Tensor<T>& text_eos, const Tensor<T>& logit_scale,
                           const LossConfig& cfg) {
  using namespace ops;
  if (vision_tokens.rank() != 3 || text_eos.rank() != 2 || vision_tokens.dim(0) != text_eos.dim(0) ||
      vision_tokens.dim(2) != text_eos.dim(1)) {
    throw DimensionError("soft_contrastive: vision " + shape_str(vision_tokens.shape()) + " vs text " +
                         shape_str(text_eos.shape()));
  }
  const std::size_t b = vision_tokens.dim(0), d = vision_tokens.dim(2);
  Tensor<T> pooled = cfg.pooling == ContrastivePooling::Average
                         ? mean_axis(slice(vision_tokens, 1, 1, vision_tokens.dim(1) - 1), 1)
                         : reshape(slice(vision_tokens, 1, 0, 1), {b, d});
  const Tensor<T> p_v = l2_normalize_lastdim(pooled);
  const Tensor<T> p_t = l2_normalize_lastdim(text_eos);
  const Tensor<T> p_vt = mul(matmul(p_v, p_t, true), exp(logit_scale));  // image i vs text j
  const Tensor<T> p_tv = transpose_last2(p_vt);
  const Tensor<T> g = text_similarity_targets(p_t, static_cast<T>(cfg.tau));
  const Tensor<T> g_t = transpose_last2(g);
  return scale(add(soft_cross_entropy(p_tv, g), soft_cross_entropy(p_vt, g_t)), T(0.5));
}

template <class T>
Tensor<T> total_loss(const Tensor<T>& seg, const Tensor<T>& con, const LossConfig& cfg) {
  using namespace ops;
  return add(scale(seg, static_cast<T>(cfg.lambda_seg)), scale(con, static_cast<T>(cfg.lambda_softcon)));
}

}  // namespace pvlseg
