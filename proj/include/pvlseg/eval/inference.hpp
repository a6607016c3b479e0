#pragma once

#include <string>
#include <vector>

#include "pvlseg/data/image.hpp"
#include "pvlseg/eval/metrics.hpp"
#include "pvlseg/model/model.hpp"

namespace pvlseg {

struct UncertaintyResult {
  Image<double> mean_prob;
  Image<double> entropy;
  Mask pred;
  std::size_t n_samples = 0;
};

// n forward passes per input with fresh noise each pass; pass i draws from
// Rng(seed).derive(i). Inputs are processed together as one batch.
template <class T>
std::vector<UncertaintyResult> mc_infer(const PvlSegModel<T>& model, const std::vector<const Image<double>*>& images,
                                        const std::vector<std::string>& prompts, std::size_t n, std::uint64_t seed,
                                        Mode mode = Mode::InferSample) {
  if (n < 1) throw ArgumentError("mc_infer: need at least one pass");
  if (images.size() != prompts.size() || images.empty())
    throw DimensionError("mc_infer: need one prompt per image");
  NoGradGuard ng;
  const Tensor<T> x = image_batch<T>(images, model.cfg.encoder.channels);
  const TokenBatch tok = encode_prompts(model.vocab, prompts, model.cfg.encoder.max_prompt_len);
  const std::size_t b = images.size(), h = model.cfg.encoder.image_h, w = model.cfg.encoder.image_w;
  std::vector<double> acc(b * h * w, 0.0);
  const Rng root(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = root.derive(i);
    const auto fr = forward(model, x, tok, r, mode);
    const auto& logits = fr.logits.values();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += ops::sigmoid_scalar(static_cast<double>(logits[k]));
  }
  std::vector<UncertaintyResult> out(b);
  for (std::size_t s = 0; s < b; ++s) {
    auto& u = out[s];
    u.n_samples = n;
    u.mean_prob = Image<double>(h, w);
    u.entropy = Image<double>(h, w);
    u.pred = Mask(h, w);
    for (std::size_t k = 0; k < h * w; ++k) {
      const double p = acc[s * h * w + k] / static_cast<double>(n);
      u.mean_prob.px[k] = p;
      u.entropy.px[k] = binary_entropy(p);
      u.pred.px[k] = p >= 0.5;
    }
  }
  return out;
}

}  // namespace pvlseg
