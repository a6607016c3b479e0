#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "pvlseg/data/synth.hpp"
#include "pvlseg/eval/inference.hpp"
#include "pvlseg/train/checkpoint.hpp"
#include "pvlseg/train/trainer.hpp"

using namespace pvlseg;
using D = double;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.image_h = c.encoder.image_w = 16;
  c.encoder.patch = 4;
  c.encoder.vision_dim = c.encoder.text_dim = c.encoder.joint_dim = 8;
  c.encoder.vision_depth = c.encoder.text_depth = 2;
  c.encoder.heads = 2;
  c.encoder.ffn_mult = 2;
  c.encoder.max_prompt_len = 8;
  c.shared_dim = 8;
  c.upscale_blocks = 1;
  return c;
}

// Bright or dark square on a noisy background; the prompt names its brightness.
std::vector<Sample> toy_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = image_stem(i);
    s.split = "train";
    s.style = "original";
    s.image = Image<double>(16, 16);
    s.mask = Mask(16, 16);
    const bool bright = rng.uniform() < 0.5;
    const std::size_t y0 = rng.below(10), x0 = rng.below(10), e = 3 + rng.below(4);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) {
        const bool in = y >= y0 && y < y0 + e && x >= x0 && x < x0 + e;
        s.mask(y, x) = in;
        s.image(y, x) = (in ? (bright ? 0.85 : 0.15) : 0.5) + 0.03 * rng.normal();
      }
    s.text = bright ? "one bright square lesion" : "one dark square lesion";
    out.push_back(std::move(s));
  }
  return out;
}

Vocabulary toy_vocab() { return Vocabulary::build({"one bright dark square lesion"}); }

template <class T>
PvlSegModel<T> tiny_model(std::uint64_t seed, ModelConfig cfg = tiny_config()) {
  Rng rng(seed);
  return PvlSegModel<T>::init(cfg, toy_vocab(), rng);
}

template <class T>
std::vector<std::vector<T>> snapshot(const PvlSegModel<T>& m) {
  std::vector<std::vector<T>> v;
  for (auto& p : m.parameters()) v.push_back(p.values());
  return v;
}

TrainConfig short_run(std::size_t steps) {
  TrainConfig tc;
  tc.epochs = 100;
  tc.batch = 4;
  tc.lr = 1e-3;
  tc.max_steps = steps;
  tc.seed = 11;
  return tc;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pvlseg_" + name)).string();
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(CosineLr, Examples) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 3e-4), 3e-4);
  EXPECT_NEAR(cosine_lr(50, 100, 3e-4), 1.5e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(25, 100, 1.0), 0.5 * (1 + std::sqrt(0.5)), 1e-15);
  EXPECT_NEAR(cosine_lr(100, 100, 3e-4), 0.0, 1e-20);
  EXPECT_THROW(cosine_lr(101, 100, 3e-4), ArgumentError);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LE(cosine_lr(s, 100, 1.0), cosine_lr(s - 1, 100, 1.0));
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  auto w = Tensor<D>::from({3}, {1.0, -2.0, 0.5}, true);
  Adam<D> opt({w}, AdamConfig{});
  auto g = w.grad();
  g[0] = 0.3;
  g[1] = -4.0;
  g[2] = 1e-3;
  opt.step(0.01);
  // m̂ = g, v̂ = g² after bias correction
  EXPECT_NEAR(w.values()[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(w.values()[1], -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w.values()[2], 0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  auto w = Tensor<D>::from({1}, {0.0}, true);
  Adam<D> opt({w}, AdamConfig{});
  w.grad()[0] = 1.0;
  opt.step(0.1);
  opt.zero_grad();
  w.grad()[0] = -0.5;
  opt.step(0.1);
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * -0.5, v = 0.999 * 0.001 * 1.0 + 0.001 * 0.25;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  EXPECT_NEAR(w.values()[0], -0.1 / (1 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  auto a = Tensor<D>::from({2}, {0, 0}, true);
  auto b = Tensor<D>::from({1}, {0}, true);
  a.grad()[0] = 3;
  a.grad()[1] = 0;
  b.grad()[0] = 4;
  std::vector<Tensor<D>> ps{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
  EXPECT_NEAR(clip_grad_norm(ps, 10.0), 1.0, 1e-12);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-12);
}

TEST(EpochOrder, IsSeededPermutation) {
  auto a = epoch_order(50, 3, 0), b = epoch_order(50, 3, 0), c = epoch_order(50, 3, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto s = a;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(s[i], i);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  auto m = tiny_model<float>(1);
  const auto before = snapshot(m);
  auto tc = short_run(4);
  tc.lr = 0;
  auto opt = make_optimizer(m, tc);
  const auto res = train(m, opt, toy_samples(10, 2), tc);
  EXPECT_EQ(res.steps, 4u);
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(opt.steps(), 4u);
}

TEST(Train, SmallStepDescendsOnAtLeast95Of100Trials) {
  const auto data = toy_samples(8, 5);
  LossConfig lc;
  int descended = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto m = tiny_model<D>(100 + static_cast<std::uint64_t>(trial));
    std::vector<std::size_t> idx;
    Rng pick(static_cast<std::uint64_t>(trial));
    for (int k = 0; k < 4; ++k) idx.push_back(pick.below(data.size()));
    const auto b = make_batch(m, data, idx);
    Adam<D> opt(m.parameters(), AdamConfig{});
    Rng r0(7);
    const double l0 = loss_and_backward(m, b, r0, Mode::InferMean, lc).total.item();
    opt.step(1e-5);
    NoGradGuard ng;
    Rng r1(7);
    const double l1 = compute_loss(m, forward(m, b.images, b.tokens, r1, Mode::InferMean), b.masks, lc).total.item();
    descended += l1 < l0;
  }
  EXPECT_GE(descended, 95);
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  const auto data = toy_samples(10, 3);
  auto run = [&] {
    auto m = tiny_model<float>(4);
    auto tc = short_run(5);
    auto opt = make_optimizer(m, tc);
    const auto res = train(m, opt, data, tc);
    std::vector<double> losses;
    for (const auto& e : res.log) losses.push_back(e.total);
    return std::make_pair(snapshot(m), losses);
  };
  const auto a = run(), b = run();
  for (std::size_t i = 0; i < a.first.size(); ++i) EXPECT_EQ(a.first[i], b.first[i]) << "parameter " << i;
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, LossFallsOnToyTask) {
  auto m = tiny_model<float>(9);
  auto tc = short_run(60);
  tc.lr = 3e-3;
  auto opt = make_optimizer(m, tc);
  const auto res = train(m, opt, toy_samples(16, 4), tc);
  double first = 0, last = 0;
  for (int i = 0; i < 8; ++i) first += res.log[static_cast<std::size_t>(i)].seg;
  for (std::size_t i = res.log.size() - 8; i < res.log.size(); ++i) last += res.log[i].seg;
  EXPECT_LT(last, 0.8 * first);
  for (std::size_t i = 1; i < res.log.size(); ++i) EXPECT_LE(res.log[i].lr, res.log[i - 1].lr);
}

TEST(Train, EveryParameterReceivesGradient) {
  auto m = tiny_model<D>(2);
  const auto data = toy_samples(4, 8);
  const auto b = make_batch(m, data, {0, 1, 2, 3});
  Rng r(1);
  loss_and_backward(m, b, r, Mode::TrainSampleOnce, LossConfig{});
  for (auto& [name, t] : m.named_tensors()) {
    ASSERT_TRUE(t.has_grad()) << name;
    double s = 0;
    for (double g : t.node().grad) s += std::abs(g);
    EXPECT_GT(s, 0.0) << name;
    for (double g : t.node().grad) ASSERT_TRUE(std::isfinite(g)) << name;
  }
}

TEST(Train, NonFiniteLossReportsStep) {
  auto m = tiny_model<float>(3);
  m.head.mlp2.w.values()[0] = std::nanf("");
  auto tc = short_run(3);
  auto opt = make_optimizer(m, tc);
  try {
    train(m, opt, toy_samples(6, 1), tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsEmptyDataAndBadConfig) {
  auto m = tiny_model<float>(3);
  auto tc = short_run(1);
  auto opt = make_optimizer(m, tc);
  EXPECT_THROW(train(m, opt, {}, tc), InputError);
  tc.batch = 0;
  EXPECT_THROW(train(m, opt, toy_samples(2, 1), tc), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = tiny_model<float>(5);
  auto tc = short_run(3);
  auto opt = make_optimizer(m, tc);
  train(m, opt, toy_samples(8, 2), tc);
  const std::string path = temp_path("ck_roundtrip.bin"), path2 = temp_path("ck_roundtrip2.bin");
  write_checkpoint(path, make_checkpoint(m, &opt, "seed=1\n", 0xfeedbeefULL));

  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.config_hash, 0xfeedbeefULL);
  EXPECT_EQ(ck.at("meta.config").as_text(), "seed=1\n");
  auto m2 = tiny_model<float>(99);
  Adam<float> opt2(m2.parameters(), AdamConfig{});
  EXPECT_EQ(vocabulary_from(ck).tokens(), m.vocab.tokens());
  restore(ck, m2, &opt2);
  EXPECT_EQ(snapshot(m2), snapshot(m));
  EXPECT_EQ(opt2.steps(), opt.steps());
  EXPECT_EQ(opt2.first_moments(), opt.first_moments());
  EXPECT_EQ(opt2.second_moments(), opt.second_moments());

  write_checkpoint(path2, make_checkpoint(m2, &opt2, "seed=1\n", 0xfeedbeefULL));
  EXPECT_EQ(file_bytes(path), file_bytes(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(Checkpoint, RejectsCorruptOrMismatchedFiles) {
  auto m = tiny_model<float>(5);
  const std::string path = temp_path("ck_bad.bin");
  write_checkpoint(path, make_checkpoint<float>(m, nullptr, "", 1));
  auto bytes = file_bytes(path);

  {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(read_checkpoint(path), InputError);
  {
    std::ofstream f(path, std::ios::binary);
    std::string b = bytes;
    b[0] = 'X';
    f << b;
  }
  EXPECT_THROW(read_checkpoint(path), InputError);
  {
    std::ofstream f(path, std::ios::binary);
    f << bytes;
  }
  auto cfg = tiny_config();
  cfg.shared_dim = 4;
  Rng rng(1);
  auto other = PvlSegModel<float>::init(cfg, toy_vocab(), rng);
  EXPECT_THROW(restore(read_checkpoint(path), other), InputError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_checkpoint(path), IoError);
}

TEST(McInfer, SinglePassMeanModeMatchesForward) {
  auto m = tiny_model<D>(6);
  const auto data = toy_samples(3, 2);
  std::vector<const Image<double>*> imgs{&data[0].image, &data[1].image, &data[2].image};
  std::vector<std::string> texts{data[0].text, data[1].text, data[2].text};
  const auto res = mc_infer(m, imgs, texts, 1, 0, Mode::InferMean);
  NoGradGuard ng;
  Rng r(123);
  const auto fr = forward(m, image_batch<D>(imgs, 3), encode_prompts(m.vocab, texts, 8), r, Mode::InferMean);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < 256; ++k)
      EXPECT_NEAR(res[s].mean_prob.px[k], ops::sigmoid_scalar(fr.logits.values()[s * 256 + k]), 1e-12);
}

TEST(McInfer, SampledPassesAreSeededAndBounded) {
  auto m = tiny_model<float>(6);
  const auto data = toy_samples(2, 2);
  std::vector<const Image<double>*> imgs{&data[0].image, &data[1].image};
  std::vector<std::string> texts{data[0].text, data[1].text};
  const auto a = mc_infer(m, imgs, texts, 5, 42), b = mc_infer(m, imgs, texts, 5, 42),
             c = mc_infer(m, imgs, texts, 5, 43);
  bool differs = false;
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(a[s].mean_prob.px, b[s].mean_prob.px);
    EXPECT_EQ(a[s].n_samples, 5u);
    differs |= a[s].mean_prob.px != c[s].mean_prob.px;
    for (std::size_t k = 0; k < 256; ++k) {
      const double p = a[s].mean_prob.px[k];
      EXPECT_GE(a[s].entropy.px[k], 0.0);
      EXPECT_LE(a[s].entropy.px[k], std::log(2.0) + 1e-12);
      EXPECT_EQ(a[s].pred.px[k], p >= 0.5 ? 1 : 0);
    }
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(mc_infer(m, imgs, texts, 0, 1), ArgumentError);
  EXPECT_THROW(mc_infer(m, imgs, {texts[0]}, 1, 1), DimensionError);
}
