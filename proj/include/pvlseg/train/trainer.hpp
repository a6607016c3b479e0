#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "pvlseg/data/dataset.hpp"
#include "pvlseg/model/model.hpp"
#include "pvlseg/train/optim.hpp"

namespace pvlseg {

struct TrainConfig {
  std::size_t epochs = 60;
  double lr = 3e-4;
  std::size_t batch = 24;
  AdamConfig adam;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  bool sample_values = true;  // false: noise-free forward during training
  LossConfig loss;
  std::size_t max_steps = 0;  // 0: full schedule (tests cap it)

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("train: lr must be >= 0");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    loss.validate();
  }
};

struct LossLogEntry {
  std::size_t step = 0;
  double lr = 0, seg = 0, con = 0, total = 0, grad_norm = 0;
};

struct TrainResult {
  std::vector<LossLogEntry> log;
  std::size_t steps = 0;
};

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Seeded Fisher-Yates order for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng(seed).derive(epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

template <class T>
struct Batch {
  Tensor<T> images, masks;
  TokenBatch tokens;
};

template <class T>
Batch<T> make_batch(const PvlSegModel<T>& model, const std::vector<Sample>& data,
                    const std::vector<std::size_t>& idx) {
  std::vector<const Image<double>*> imgs;
  std::vector<const Mask*> masks;
  std::vector<std::string> texts;
  for (std::size_t i : idx) {
    imgs.push_back(&data[i].image);
    masks.push_back(&data[i].mask);
    texts.push_back(data[i].text);
  }
  return {image_batch<T>(imgs, model.cfg.encoder.channels), mask_batch<T>(masks),
          encode_prompts(model.vocab, texts, model.cfg.encoder.max_prompt_len)};
}

// One forward/backward on a batch; returns the loss terms (graph attached).
template <class T>
LossTerms<T> loss_and_backward(const PvlSegModel<T>& model, const Batch<T>& b, Rng& noise, Mode mode,
                               const LossConfig& lc) {
  auto fr = forward(model, b.images, b.tokens, noise, mode);
  auto terms = compute_loss(model, fr, b.masks, lc);
  terms.total.backward();
  return terms;
}

// Adam with cosine-annealed learning rate over shuffled mini-batches.
// `on_step` sees every log entry; the optimiser state lives in `opt`.
template <class T>
TrainResult train(PvlSegModel<T>& model, Adam<T>& opt, const std::vector<Sample>& data, const TrainConfig& cfg,
                  const std::function<void(const LossLogEntry&)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw InputError("train: dataset is empty");
  const std::size_t per_epoch = steps_per_epoch(data.size(), cfg.batch);
  std::size_t total = cfg.epochs * per_epoch;
  if (cfg.max_steps) total = std::min(total, cfg.max_steps);
  const Mode mode = cfg.sample_values ? Mode::TrainSampleOnce : Mode::InferMean;
  auto params = model.parameters();

  TrainResult res;
  double last_finite = std::nan("");
  std::size_t step = 0;
  for (std::size_t epoch = 0; step < total; ++epoch) {
    const auto order = epoch_order(data.size(), cfg.seed, epoch);
    for (std::size_t s = 0; s < per_epoch && step < total; ++s, ++step) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s * cfg.batch),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(data.size(), (s + 1) * cfg.batch)));
      const Batch<T> b = make_batch(model, data, idx);
      Rng noise = Rng(cfg.seed).derive(1'000'000 + step);
      opt.zero_grad();
      LossTerms<T> terms;
      try {
        terms = loss_and_backward(model, b, noise, mode, cfg.loss);
      } catch (const NumericError& e) {
        std::ostringstream msg;
        msg << "train: " << e.what() << " at step " << step << " (last finite loss " << last_finite << ")";
        throw NumericError(msg.str());
      }
      const double loss = static_cast<double>(terms.total.item());
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at step " << step << " (last finite loss " << last_finite << ")";
        throw NumericError(msg.str());
      }
      last_finite = loss;
      const double gn = clip_grad_norm(params, cfg.clip_norm);
      const double lr = cosine_lr(step, total, cfg.lr);
      opt.step(lr);
      LossLogEntry e{step, lr, static_cast<double>(terms.seg.item()), static_cast<double>(terms.con.item()), loss, gn};
      res.log.push_back(e);
      if (on_step) on_step(e);
    }
  }
  res.steps = step;
  return res;
}

template <class T>
Adam<T> make_optimizer(const PvlSegModel<T>& model, const TrainConfig& cfg) {
  return Adam<T>(model.parameters(), cfg.adam);
}

}  // namespace pvlseg
