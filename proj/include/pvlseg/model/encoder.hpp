#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pvlseg/core/ops.hpp"
#include "pvlseg/model/vocabulary.hpp"
#include "pvlseg/pvl/adapter.hpp"

namespace pvlseg {

struct EncoderConfig {
  std::size_t image_h = 64;
  std::size_t image_w = 64;
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t vision_dim = 128;
  std::size_t text_dim = 128;
  std::size_t joint_dim = 128;
  std::size_t vision_depth = 6;
  std::size_t text_depth = 6;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 0;
  std::size_t max_prompt_len = 32;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t num_patches() const { return grid_h() * grid_w(); }

  void validate() const {
    if (patch == 0 || image_h % patch || image_w % patch)
      throw ConfigError("encoder: image size must be divisible by the patch size");
    if (max_prompt_len < 2) throw ConfigError("encoder: max prompt length must be >= 2 (room for [EOS])");
    if (heads == 0 || vision_dim % heads || text_dim % heads)
      throw ConfigError("encoder: embed dims must be divisible by the head count");
    if (vision_dim != joint_dim || text_dim != joint_dim)
      throw ConfigError("encoder: vision and text widths must equal the joint dim");
    if (vision_depth == 0 || text_depth == 0) throw ConfigError("encoder: depth must be >= 1");
    if (vocab_size < 3) throw ConfigError("encoder: vocabulary must include the reserved tokens");
  }
};

template <class T>
struct Linear {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, double stddev) {
    std::vector<T> v(in * out);
    rng.fill_normal(std::span<T>(v), 0.0, stddev);
    return {Tensor<T>::from({in, out}, std::move(v), true), Tensor<T>::zeros({out}, true)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::add(ops::matmul(x, w), b); }
  NamedTensors<T> named_tensors() const { return {{"w", w}, {"b", b}}; }
};

template <class T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  static LayerNormParams init(std::size_t d) { return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)}; }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
  NamedTensors<T> named_tensors() const { return {{"gamma", gamma}, {"beta", beta}}; }
};

// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
template <class T>
struct BlockParams {
  LayerNormParams<T> ln1, ln2;
  Linear<T> qkv, proj, fc1, fc2;

  static BlockParams init(std::size_t d, std::size_t ffn_mult, Rng& rng) {
    constexpr double kStd = 0.02;
    return {LayerNormParams<T>::init(d), LayerNormParams<T>::init(d), Linear<T>::init(d, 3 * d, rng, kStd),
            Linear<T>::init(d, d, rng, kStd), Linear<T>::init(d, ffn_mult * d, rng, kStd),
            Linear<T>::init(ffn_mult * d, d, rng, kStd)};
  }

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    append_named(out, "ln1.", ln1.named_tensors());
    append_named(out, "ln2.", ln2.named_tensors());
    append_named(out, "qkv.", qkv.named_tensors());
    append_named(out, "proj.", proj.named_tensors());
    append_named(out, "fc1.", fc1.named_tensors());
    append_named(out, "fc2.", fc2.named_tensors());
    return out;
  }
};

// `attn_bias` is an optional additive [T, T] score bias (causal mask).
template <class T>
Tensor<T> transformer_block(const BlockParams<T>& p, const Tensor<T>& x, std::size_t heads,
                            const Tensor<T>* attn_bias = nullptr) {
  using namespace ops;
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  Tensor<T> qkv = p.qkv(p.ln1(x));
  Tensor<T> split = permute(reshape(qkv, {b, t, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3,B,H,T,dh]
  Tensor<T> q = reshape(slice(split, 0, 0, 1), {b, heads, t, dh});
  Tensor<T> k = reshape(slice(split, 0, 1, 1), {b, heads, t, dh});
  Tensor<T> v = reshape(slice(split, 0, 2, 1), {b, heads, t, dh});
  Tensor<T> scores = scale(matmul(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
  if (attn_bias) scores = add(scores, *attn_bias);
  Tensor<T> ctx = matmul(softmax_lastdim(scores), v);                     // [B,H,T,dh]
  Tensor<T> merged = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d});      // [B,T,D]
  Tensor<T> h = add(x, p.proj(merged));
  return add(h, p.fc2(gelu(p.fc1(p.ln2(h)))));
}

template <class T>
struct VisionEncoderParams {
  Linear<T> patch_embed;  // [C*p*p, D_v]
  Tensor<T> cls;          // [D_v]
  Tensor<T> pos;          // [P+1, D_v]
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> ln_post;

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    append_named(out, "patch_embed.", patch_embed.named_tensors());
    out.emplace_back("cls", cls);
    out.emplace_back("pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      append_named(out, "block" + std::to_string(i + 1) + ".", blocks[i].named_tensors());
    append_named(out, "ln_post.", ln_post.named_tensors());
    return out;
  }
};

template <class T>
struct TextEncoderParams {
  Tensor<T> token_embed;  // [V, D_t]
  Tensor<T> pos;          // [L, D_t]
  std::vector<BlockParams<T>> blocks;
  LayerNormParams<T> ln_final;

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out{{"token_embed", token_embed}, {"pos", pos}};
    for (std::size_t i = 0; i < blocks.size(); ++i)
      append_named(out, "block" + std::to_string(i + 1) + ".", blocks[i].named_tensors());
    append_named(out, "ln_final.", ln_final.named_tensors());
    return out;
  }
};

template <class T>
struct DualEncoder {
  EncoderConfig cfg;
  VisionEncoderParams<T> vision;
  TextEncoderParams<T> text;

  static DualEncoder init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    constexpr double kStd = 0.02;
    // Word embeddings start well above the positional scale so prompts are
    // distinct at init; at 0.02 the soft-contrastive term collapses them.
    constexpr double kTokenStd = 0.1;
    auto normal = [&](Shape s, double stddev) {
      std::vector<T> v(shape_numel(s));
      rng.fill_normal(std::span<T>(v), 0.0, stddev);
      return Tensor<T>::from(std::move(s), std::move(v), true);
    };
    DualEncoder e;
    e.cfg = cfg;
    const std::size_t patch_in = cfg.channels * cfg.patch * cfg.patch;
    e.vision.patch_embed = Linear<T>::init(patch_in, cfg.vision_dim, rng, 1.0 / std::sqrt(double(patch_in)));
    e.vision.cls = normal({cfg.vision_dim}, kStd);
    e.vision.pos = normal({cfg.num_patches() + 1, cfg.vision_dim}, kStd);
    // Patch rows start from a 2D sin-cos grid (still trainable); with a
    // random start the patches barely tell apart where they are in 540 steps.
    {
      const std::size_t gh = cfg.grid_h(), gw = cfg.grid_w(), d = cfg.vision_dim, q = d / 4;
      auto& v = e.vision.pos.values();
      for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x)
          for (std::size_t k = 0; k < q; ++k) {
            const double f = 1.0 / std::pow(100.0, double(k) / double(q));
            T* row = &v[(1 + y * gw + x) * d];
            row[k] = static_cast<T>(std::sin(double(y) * f));
            row[q + k] = static_cast<T>(std::cos(double(y) * f));
            row[2 * q + k] = static_cast<T>(std::sin(double(x) * f));
            row[3 * q + k] = static_cast<T>(std::cos(double(x) * f));
          }
    }
    for (std::size_t i = 0; i < cfg.vision_depth; ++i)
      e.vision.blocks.push_back(BlockParams<T>::init(cfg.vision_dim, cfg.ffn_mult, rng));
    e.vision.ln_post = LayerNormParams<T>::init(cfg.vision_dim);
    e.text.token_embed = normal({cfg.vocab_size, cfg.text_dim}, kTokenStd);
    e.text.pos = normal({cfg.max_prompt_len, cfg.text_dim}, kStd);
    for (std::size_t i = 0; i < cfg.text_depth; ++i)
      e.text.blocks.push_back(BlockParams<T>::init(cfg.text_dim, cfg.ffn_mult, rng));
    e.text.ln_final = LayerNormParams<T>::init(cfg.text_dim);
    return e;
  }

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    append_named(out, "vision.", vision.named_tensors());
    append_named(out, "text.", text.named_tensors());
    return out;
  }
};

// Prompt ids for a batch: row-major [batch, len].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::size_t> ids;

  // Position of the single [EOS] in every row.
  std::vector<std::size_t> eos_positions() const {
    std::vector<std::size_t> pos(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t count = 0;
      for (std::size_t i = 0; i < len; ++i) {
        if (ids[b * len + i] == Vocabulary::kEos) {
          pos[b] = i;
          ++count;
        }
      }
      if (count != 1) {
        throw InputError("text encoder: prompt row " + std::to_string(b) + " has " + std::to_string(count) +
                         " [EOS] tokens, expected exactly one");
      }
    }
    return pos;
  }

  // 1 up to and including [EOS], 0 for padding after it.
  std::vector<std::uint8_t> valid_mask() const {
    const auto eos = eos_positions();
    std::vector<std::uint8_t> m(batch * len, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i <= eos[b]; ++i) m[b * len + i] = 1;
    return m;
  }

  // Drops trailing columns that are padding in every row.
  TokenBatch trimmed() const {
    std::size_t keep = 1;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < len; ++i)
        if (ids[b * len + i] != Vocabulary::kPad) keep = std::max(keep, i + 1);
    TokenBatch out{batch, keep, {}};
    out.ids.reserve(batch * keep);
    for (std::size_t b = 0; b < batch; ++b)
      out.ids.insert(out.ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(b * len),
                     ids.begin() + static_cast<std::ptrdiff_t>(b * len + keep));
    return out;
  }
};

// [B,C,H,W] pixels -> [B, P, C*p*p] patch vectors (row-major patch grid).
template <class T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t patch) {
  const std::size_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t gh = h / patch, gw = w / patch, pd = c * patch * patch;
  std::vector<T> out(b * gh * gw * pd);
  const T* src = images.values().data();
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        T* dst = out.data() + ((n * gh + py) * gw + px) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < patch; ++y)
            for (std::size_t x = 0; x < patch; ++x)
              *dst++ = src[((n * c + ch) * h + py * patch + y) * w + px * patch + x];
      }
  return Tensor<T>::from({b, gh * gw, pd}, std::move(out));
}

template <class T>
Tensor<T> causal_bias(std::size_t len) {
  std::vector<T> v(len * len, T(0));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) v[i * len + j] = T(-1e9);
  return Tensor<T>::from({len, len}, std::move(v));
}

template <class T>
Tensor<T> embed_image(const DualEncoder<T>& enc, const Tensor<T>& images) {
  using namespace ops;
  const auto& cfg = enc.cfg;
  if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image_h ||
      images.dim(3) != cfg.image_w) {
    throw DimensionError("encode_image: expected [B," + std::to_string(cfg.channels) + "," +
                         std::to_string(cfg.image_h) + "," + std::to_string(cfg.image_w) + "], got " +
                         shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0);
  Tensor<T> patches = enc.vision.patch_embed(patchify(images, cfg.patch));
  Tensor<T> cls = add(Tensor<T>::zeros({b, 1, cfg.vision_dim}), enc.vision.cls);
  return add(concat<T>({cls, patches}, 1), enc.vision.pos);
}

template <class T>
Tensor<T> embed_text(const DualEncoder<T>& enc, const TokenBatch& tokens) {
  using namespace ops;
  if (tokens.len > enc.cfg.max_prompt_len || tokens.len == 0)
    throw DimensionError("encode_text: prompt length " + std::to_string(tokens.len) + " exceeds the configured max");
  for (std::size_t id : tokens.ids)
    if (id >= enc.cfg.vocab_size) throw InputError("encode_text: token id " + std::to_string(id) + " >= vocab size");
  Tensor<T> tok = gather_rows(enc.text.token_embed, tokens.ids, {tokens.batch, tokens.len});
  return add(tok, slice(enc.text.pos, 0, 0, tokens.len));
}

template <class T>
struct JointOutput {
  Tensor<T> vision;  // Z_v [B, P+1, D_v]; token 0 is [CLS]
  Tensor<T> text;    // Z_t [B, L, D_t]
  std::vector<std::size_t> eos;

  Tensor<T> patches() const { return ops::slice(vision, 1, 1, vision.dim(1) - 1); }
  Tensor<T> text_eos() const { return ops::take_positions(text, eos); }
};

// Runs both encoders block by block so an adapter after block n sees the
// layer-n tokens of both modalities.
template <class T>
JointOutput<T> joint_forward(const DualEncoder<T>& enc, const AdapterStack<T>& adapters, const Tensor<T>& images,
                             const TokenBatch& tokens, Rng& rng, Mode mode) {
  const auto& cfg = enc.cfg;
  if (!adapters.empty()) {
    if (enc.vision.blocks.size() != enc.text.blocks.size())
      throw ConfigError("joint_forward: adapters need equal vision and text depth");
    adapters.validate(enc.vision.blocks.size());
  }
  if (images.dim(0) != tokens.batch) throw DimensionError("joint_forward: image and prompt batch sizes differ");
  const auto eos = tokens.eos_positions();
  const auto valid = tokens.valid_mask();
  const Tensor<T> mask = causal_bias<T>(tokens.len);

  Tensor<T> v = embed_image(enc, images);
  Tensor<T> t = embed_text(enc, tokens);
  const std::size_t depth = std::max(enc.vision.blocks.size(), enc.text.blocks.size());
  for (std::size_t n = 1; n <= depth; ++n) {
    if (n <= enc.vision.blocks.size()) v = transformer_block(enc.vision.blocks[n - 1], v, cfg.heads);
    if (n <= enc.text.blocks.size()) t = transformer_block(enc.text.blocks[n - 1], t, cfg.heads, &mask);
    if (const auto* layer = adapters.layer_after(n)) {
      auto fused = adapter_fuse(*layer, adapters.order, v, t, rng, mode, &valid);
      v = fused.vision;
      t = fused.text;
    }
  }
  return {enc.vision.ln_post(v), enc.text.ln_final(t), eos};
}

// Vision tower alone (no fusion): Z_v [B, P+1, D_v].
template <class T>
Tensor<T> encode_image(const DualEncoder<T>& enc, const Tensor<T>& images) {
  Tensor<T> v = embed_image(enc, images);
  for (const auto& blk : enc.vision.blocks) v = transformer_block(blk, v, enc.cfg.heads);
  return enc.vision.ln_post(v);
}

// Text tower alone (no fusion): Z_t [B, L, D_t], causally masked.
template <class T>
Tensor<T> encode_text(const DualEncoder<T>& enc, const TokenBatch& tokens) {
  tokens.eos_positions();
  const Tensor<T> mask = causal_bias<T>(tokens.len);
  Tensor<T> t = embed_text(enc, tokens);
  for (const auto& blk : enc.text.blocks) t = transformer_block(blk, t, enc.cfg.heads, &mask);
  return enc.text.ln_final(t);
}

}  // namespace pvlseg
