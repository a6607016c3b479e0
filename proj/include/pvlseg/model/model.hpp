#pragma once

#include <string>
#include <vector>

#include "pvlseg/data/image.hpp"
#include "pvlseg/model/encoder.hpp"
#include "pvlseg/model/losses.hpp"
#include "pvlseg/model/seg_head.hpp"

namespace pvlseg {

struct ModelConfig {
  EncoderConfig encoder;
  bool adapters = true;
  std::size_t adapter_depth = 0;  // 0: default coverage for the encoder depth
  std::size_t shared_dim = 64;
  std::size_t attn_dim = 0;  // 0: same as shared_dim
  InteractionOrder order = InteractionOrder::VisionFirst;
  AdapterInit adapter_init;
  std::size_t upscale_blocks = 2;
  double logit_scale_init = 2.659;

  std::size_t resolved_adapter_depth() const {
    return adapter_depth ? adapter_depth : default_depth_limit(encoder.vision_depth);
  }
  std::size_t resolved_attn_dim() const { return attn_dim ? attn_dim : shared_dim; }

  void validate() const {
    encoder.validate();
    if (adapters) {
      if (encoder.vision_depth != encoder.text_depth)
        throw ConfigError("model: adapters need equal vision and text depth");
      if (resolved_adapter_depth() > encoder.vision_depth)
        throw ConfigError("model: adapter_depth exceeds encoder depth");
      if (shared_dim == 0) throw ConfigError("model: shared_dim must be >= 1");
    }
    if (upscale_blocks > 4) throw ConfigError("model: upscale_blocks must be <= 4");
  }
};

template <class T>
struct PvlSegModel {
  ModelConfig cfg;
  Vocabulary vocab;
  DualEncoder<T> encoder;
  AdapterStack<T> adapters;
  SegHeadParams<T> head;
  Tensor<T> logit_scale;

  static PvlSegModel init(ModelConfig cfg, Vocabulary vocab, Rng& rng) {
    cfg.encoder.vocab_size = vocab.size();
    cfg.validate();
    PvlSegModel m;
    m.cfg = cfg;
    m.vocab = std::move(vocab);
    Rng enc_rng = rng.derive(1), ad_rng = rng.derive(2), head_rng = rng.derive(3);
    m.encoder = DualEncoder<T>::init(cfg.encoder, enc_rng);
    if (cfg.adapters) {
      m.adapters = build_adapter_stack<T>(cfg.encoder.vision_depth, cfg.resolved_adapter_depth(), cfg.encoder.vision_dim,
                                          cfg.encoder.text_dim, cfg.shared_dim, cfg.resolved_attn_dim(), cfg.order,
                                          ad_rng, cfg.adapter_init);
    }
    SegHeadConfig hc;
    hc.upscale_blocks = cfg.upscale_blocks;
    hc.out_h = cfg.encoder.image_h;
    hc.out_w = cfg.encoder.image_w;
    m.head = SegHeadParams<T>::init(cfg.encoder.vision_dim, cfg.encoder.text_dim, hc, head_rng);
    m.logit_scale = Tensor<T>::scalar(static_cast<T>(cfg.logit_scale_init), true);
    return m;
  }

  // Every trainable tensor under a stable name.
  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    append_named(out, "encoder.", encoder.named_tensors());
    append_named(out, "", adapters.named_tensors());
    append_named(out, "head.", head.named_tensors());
    out.emplace_back("logit_scale", logit_scale);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> p;
    for (auto& [n, t] : named_tensors()) p.push_back(t);
    return p;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_tensors()) n += t.numel();
    return n;
  }
};

// Prompt batch: [EOS]-terminated ids, trimmed to the longest prompt.
inline TokenBatch encode_prompts(const Vocabulary& vocab, const std::vector<std::string>& texts, std::size_t max_len,
                                 std::size_t* unknown = nullptr) {
  TokenBatch t{texts.size(), max_len, {}};
  std::size_t unk_total = 0;
  for (const auto& s : texts) {
    std::size_t unk = 0;
    auto ids = vocab.encode(s, max_len, &unk);
    unk_total += unk;
    t.ids.insert(t.ids.end(), ids.begin(), ids.end());
  }
  if (unknown) *unknown = unk_total;
  return t.trimmed();
}

// Gray images in [0,1] -> standardised [B, C, H, W] with the gray level
// replicated across channels.
template <class T>
Tensor<T> image_batch(const std::vector<const Image<double>*>& images, std::size_t channels) {
  const std::size_t b = images.size(), h = images.front()->h, w = images.front()->w;
  std::vector<T> v(b * channels * h * w);
  for (std::size_t i = 0; i < b; ++i) {
    if (images[i]->h != h || images[i]->w != w) throw DimensionError("image_batch: images differ in size");
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t k = 0; k < h * w; ++k)
        v[(i * channels + c) * h * w + k] = static_cast<T>((images[i]->px[k] - 0.5) / 0.25);
  }
  return Tensor<T>::from({b, channels, h, w}, std::move(v));
}

template <class T>
Tensor<T> mask_batch(const std::vector<const Mask*>& masks) {
  const std::size_t b = masks.size(), h = masks.front()->h, w = masks.front()->w;
  std::vector<T> v(b * h * w);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < h * w; ++k) v[i * h * w + k] = masks[i]->px[k] ? T(1) : T(0);
  return Tensor<T>::from({b, h, w}, std::move(v));
}

template <class T>
struct ForwardResult {
  Tensor<T> logits;  // [B, H, W]
  JointOutput<T> joint;
};

template <class T>
ForwardResult<T> forward(const PvlSegModel<T>& m, const Tensor<T>& images, const TokenBatch& tokens, Rng& rng,
                         Mode mode) {
  JointOutput<T> joint = joint_forward(m.encoder, m.adapters, images, tokens, rng, mode);
  Tensor<T> logits = seg_logits(m.head, joint.patches(), joint.text_eos());
  return {logits, std::move(joint)};
}

template <class T>
struct LossTerms {
  Tensor<T> seg, con, total;
};

template <class T>
LossTerms<T> compute_loss(const PvlSegModel<T>& m, const ForwardResult<T>& fr, const Tensor<T>& masks,
                          const LossConfig& lc) {
  LossTerms<T> l;
  l.seg = dice_bce(fr.logits, masks, static_cast<T>(lc.dice_smooth));
  l.con = lc.lambda_softcon > 0 ? soft_contrastive(fr.joint.vision, fr.joint.text_eos(), m.logit_scale, lc)
                                : Tensor<T>::scalar(T(0));
  l.total = total_loss(l.seg, l.con, lc);
  return l;
}

}  // namespace pvlseg
