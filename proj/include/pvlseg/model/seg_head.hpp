#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pvlseg/core/ops.hpp"
#include "pvlseg/model/encoder.hpp"

namespace pvlseg {

struct SegHeadConfig {
  std::size_t upscale_blocks = 2;  // U
  std::size_t min_channels = 32;
  std::size_t out_h = 64;
  std::size_t out_w = 64;
};

// psi: U x (nearest 2x -> 3x3 conv halving channels, floored -> GELU).
// phi: two-layer MLP from the text width to psi's output channels.
template <class T>
struct SegHeadParams {
  SegHeadConfig cfg;
  std::vector<Tensor<T>> conv_w;  // [C_out, C_in*9]
  std::vector<Tensor<T>> conv_b;  // [C_out]
  Linear<T> mlp1, mlp2;

  static std::vector<std::size_t> channel_plan(std::size_t in_ch, const SegHeadConfig& cfg) {
    std::vector<std::size_t> ch{in_ch};
    for (std::size_t i = 0; i < cfg.upscale_blocks; ++i) ch.push_back(std::max(ch.back() / 2, cfg.min_channels));
    return ch;
  }

  static SegHeadParams init(std::size_t vision_dim, std::size_t text_dim, const SegHeadConfig& cfg, Rng& rng) {
    SegHeadParams p;
    p.cfg = cfg;
    const auto ch = channel_plan(vision_dim, cfg);
    for (std::size_t i = 0; i + 1 < ch.size(); ++i) {
      const std::size_t fan_in = ch[i] * 9;
      std::vector<T> w(ch[i + 1] * fan_in);
      rng.fill_normal(std::span<T>(w), 0.0, std::sqrt(2.0 / double(fan_in)));
      p.conv_w.push_back(Tensor<T>::from({ch[i + 1], fan_in}, std::move(w), true));
      p.conv_b.push_back(Tensor<T>::zeros({ch[i + 1]}, true));
    }
    p.mlp1 = Linear<T>::init(text_dim, text_dim, rng, 1.0 / std::sqrt(double(text_dim)));
    p.mlp2 = Linear<T>::init(text_dim, ch.back(), rng, 1.0 / std::sqrt(double(text_dim)));
    return p;
  }

  std::size_t out_channels() const { return mlp2.w.dim(1); }

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      out.emplace_back("psi" + std::to_string(i + 1) + ".w", conv_w[i]);
      out.emplace_back("psi" + std::to_string(i + 1) + ".b", conv_b[i]);
    }
    append_named(out, "phi1.", mlp1.named_tensors());
    append_named(out, "phi2.", mlp2.named_tensors());
    return out;
  }
};

// Upscaled patch features V~ [B, C, h, w] from patch tokens [B, P, D_v].
template <class T>
Tensor<T> upscale_patches(const SegHeadParams<T>& p, const Tensor<T>& patches) {
  using namespace ops;
  const std::size_t b = patches.dim(0), n = patches.dim(1), d = patches.dim(2);
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ConfigError("seg_logits: patch count " + std::to_string(n) + " is not a square grid");
  Tensor<T> x = reshape(transpose_last2(l2_normalize_lastdim(patches)), {b, d, side, side});
  for (std::size_t i = 0; i < p.conv_w.size(); ++i) x = gelu(conv3x3(nearest_upsample2x(x), p.conv_w[i], p.conv_b[i]));
  return x;
}

// Text mask embedding t~ [B, C] from the [EOS] features [B, D_t].
template <class T>
Tensor<T> text_mask_embedding(const SegHeadParams<T>& p, const Tensor<T>& text_eos) {
  using namespace ops;
  return p.mlp2(gelu(p.mlp1(l2_normalize_lastdim(text_eos))));
}

// Pixel-text dot product upsampled to full resolution: logits [B, H, W].
template <class T>
Tensor<T> pixel_text_logits(const SegHeadParams<T>& p, const Tensor<T>& v_tilde, const Tensor<T>& t_tilde) {
  using namespace ops;
  const std::size_t b = v_tilde.dim(0), c = v_tilde.dim(1), h = v_tilde.dim(2), w = v_tilde.dim(3);
  if (t_tilde.shape() != Shape{b, c}) {
    throw DimensionError("seg_logits: text embedding " + shape_str(t_tilde.shape()) + " does not match features " +
                         shape_str(v_tilde.shape()));
  }
  Tensor<T> dots = matmul(reshape(t_tilde, {b, 1, c}), reshape(v_tilde, {b, c, h * w}));  // [B,1,hw]
  Tensor<T> up = bilinear_upsample(reshape(dots, {b, 1, h, w}), p.cfg.out_h, p.cfg.out_w);
  return reshape(up, {b, p.cfg.out_h, p.cfg.out_w});
}

template <class T>
Tensor<T> seg_logits(const SegHeadParams<T>& p, const Tensor<T>& patches, const Tensor<T>& text_eos) {
  return pixel_text_logits(p, upscale_patches(p, patches), text_mask_embedding(p, text_eos));
}

template <class T>
Tensor<T> mask_probability(const Tensor<T>& logits) {
  return ops::sigmoid(logits);
}

}  // namespace pvlseg
