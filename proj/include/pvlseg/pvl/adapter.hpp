#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pvlseg/pvl/attention.hpp"

namespace pvlseg {

enum class InteractionOrder { VisionFirst, TextFirst, OneWay };

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
void append_named(NamedTensors<T>& out, const std::string& prefix, const NamedTensors<T>& items) {
  for (const auto& [name, t] : items) out.emplace_back(prefix + name, t);
}

struct AdapterInit {
  double proj_std = 0.02;
  double up_scale = 0.1;  // up-projections start at proj_std * up_scale
  double gate_logit = 0.0;
  double beta = kDefaultBeta;
  ConfidenceMechanism mechanism = ConfidenceMechanism::Difference;
};

// One fusion layer: down-projections into the shared space, two Attn_PVL
// instances (vision queries over text, text queries over vision) and
// up-projections back onto the residual streams.
template <class T>
struct AdapterLayer {
  Tensor<T> down_v;  // [D_v, D_s]
  Tensor<T> down_t;  // [D_t, D_s]
  Tensor<T> up_v;    // [D_s, D_v]
  Tensor<T> up_t;    // [D_s, D_t]
  PvlAttentionParams<T> attn_v2t;
  PvlAttentionParams<T> attn_t2v;

  static AdapterLayer init(std::size_t d_v, std::size_t d_t, std::size_t d_s, std::size_t d_a, Rng& rng,
                           const AdapterInit& opt = {}) {
    auto mat = [&](std::size_t r, std::size_t c, double stddev) {
      std::vector<T> v(r * c);
      rng.fill_normal(std::span<T>(v), 0.0, stddev);
      return Tensor<T>::from({r, c}, std::move(v), true);
    };
    AdapterLayer l;
    l.down_v = mat(d_v, d_s, opt.proj_std);
    l.down_t = mat(d_t, d_s, opt.proj_std);
    l.up_v = mat(d_s, d_v, opt.proj_std * opt.up_scale);
    l.up_t = mat(d_s, d_t, opt.proj_std * opt.up_scale);
    l.attn_v2t = PvlAttentionParams<T>::init(d_s, d_a, rng, T(opt.gate_logit), T(opt.beta), opt.mechanism);
    l.attn_t2v = PvlAttentionParams<T>::init(d_s, d_a, rng, T(opt.gate_logit), T(opt.beta), opt.mechanism);
    return l;
  }

  std::size_t vision_dim() const { return down_v.dim(0); }
  std::size_t text_dim() const { return down_t.dim(0); }
  std::size_t shared_dim() const { return down_v.dim(1); }

  std::size_t parameter_count() const {
    return down_v.numel() + down_t.numel() + up_v.numel() + up_t.numel() + attn_v2t.parameter_count() +
           attn_t2v.parameter_count();
  }

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out{{"down_v", down_v}, {"down_t", down_t}, {"up_v", up_v}, {"up_t", up_t}};
    append_named(out, "attn_v2t.", attn_v2t.named_tensors());
    append_named(out, "attn_t2v.", attn_t2v.named_tensors());
    return out;
  }
};

// Adapters keyed by the (1-based) encoder block they follow.
template <class T>
struct AdapterStack {
  std::vector<std::size_t> after_block;
  std::vector<AdapterLayer<T>> layers;
  InteractionOrder order = InteractionOrder::VisionFirst;

  bool empty() const { return layers.empty(); }

  const AdapterLayer<T>* layer_after(std::size_t block) const {
    for (std::size_t i = 0; i < after_block.size(); ++i)
      if (after_block[i] == block) return &layers[i];
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  NamedTensors<T> named_tensors() const {
    NamedTensors<T> out;
    for (std::size_t i = 0; i < layers.size(); ++i)
      append_named(out, "adapter" + std::to_string(after_block[i]) + ".", layers[i].named_tensors());
    return out;
  }

  void validate(std::size_t encoder_depth) const {
    if (after_block.size() != layers.size()) throw ConfigError("adapter stack: schedule/layer count mismatch");
    for (std::size_t b : after_block)
      if (b < 1 || b > encoder_depth) throw ConfigError("adapter stack: layer index beyond encoder depth");
    for (const auto& l : layers)
      if (l.shared_dim() != layers.front().shared_dim()) throw ConfigError("adapter stack: D_s differs across layers");
  }
};

// Blocks after which an adapter runs: {1..depth_limit}.
inline std::vector<std::size_t> place_adapters(std::size_t encoder_depth, std::size_t depth_limit) {
  if (depth_limit < 1 || depth_limit > encoder_depth) {
    throw ArgumentError("place_adapters: depth_limit " + std::to_string(depth_limit) + " outside [1, " +
                        std::to_string(encoder_depth) + "]");
  }
  std::vector<std::size_t> s(depth_limit);
  for (std::size_t i = 0; i < depth_limit; ++i) s[i] = i + 1;
  return s;
}

// Default coverage keeps the 10-of-12 ratio: adapters stop short of the
// final block(s).
inline std::size_t default_depth_limit(std::size_t encoder_depth) {
  const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(encoder_depth) * 10.0 / 12.0));
  return std::clamp<std::size_t>(n, 1, encoder_depth);
}

template <class T>
AdapterStack<T> build_adapter_stack(std::size_t encoder_depth, std::size_t depth_limit, std::size_t d_v,
                                    std::size_t d_t, std::size_t d_s, std::size_t d_a, InteractionOrder order,
                                    Rng& rng, const AdapterInit& opt = {}) {
  AdapterStack<T> s;
  s.order = order;
  s.after_block = place_adapters(encoder_depth, depth_limit);
  for (std::size_t i = 0; i < s.after_block.size(); ++i)
    s.layers.push_back(AdapterLayer<T>::init(d_v, d_t, d_s, d_a, rng, opt));
  return s;
}

template <class T>
struct FusedTokens {
  Tensor<T> vision;
  Tensor<T> text;
};

// One bidirectional fusion step on full token sequences V [B,T_v,D_v] and
// T [B,T_t,D_t]. `text_valid` ([B,T_t], optional) masks padded text keys.
template <class T>
FusedTokens<T> adapter_fuse(const AdapterLayer<T>& layer, InteractionOrder order, const Tensor<T>& vis,
                            const Tensor<T>& txt, Rng& rng, Mode mode,
                            const std::vector<std::uint8_t>* text_valid = nullptr) {
  using namespace ops;
  if (vis.rank() != 3 || txt.rank() != 3 || vis.dim(2) != layer.vision_dim() || txt.dim(2) != layer.text_dim() ||
      vis.dim(0) != txt.dim(0)) {
    throw DimensionError("adapter_fuse: tokens " + shape_str(vis.shape()) + " / " + shape_str(txt.shape()) +
                         " do not match adapter dims " + std::to_string(layer.vision_dim()) + "/" +
                         std::to_string(layer.text_dim()));
  }
  Tensor<T> v = matmul(vis, layer.down_v);
  Tensor<T> t = matmul(txt, layer.down_t);
  Tensor<T> v2, t2;
  switch (order) {
    case InteractionOrder::VisionFirst:
      v2 = attn_pvl(layer.attn_v2t, v, t, rng, mode, text_valid).y;
      t2 = attn_pvl(layer.attn_t2v, t, v2, rng, mode).y;
      break;
    case InteractionOrder::TextFirst:
      t2 = attn_pvl(layer.attn_t2v, t, v, rng, mode).y;
      v2 = attn_pvl(layer.attn_v2t, v, t2, rng, mode, text_valid).y;
      break;
    case InteractionOrder::OneWay:
      v2 = attn_pvl(layer.attn_v2t, v, t, rng, mode, text_valid).y;
      t2 = t;
      break;
  }
  return {add(vis, matmul(v2, layer.up_v)), add(txt, matmul(t2, layer.up_t))};
}

}  // namespace pvlseg
