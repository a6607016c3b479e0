#include <array>
#include <fstream>
#include <gtest/gtest.h>

#include <cmath>

#include "pvlseg/core/gradcheck.hpp"
#include "pvlseg/model/encoder.hpp"

using namespace pvlseg;
using D = double;

namespace {

Tensor<D> random_tensor(Shape s, Rng& rng, double std = 1.0, bool grad = false) {
  std::vector<D> v(shape_numel(s));
  rng.fill_normal(std::span<D>(v), 0.0, std);
  return Tensor<D>::from(std::move(s), std::move(v), grad);
}

void expect_same(const Tensor<D>& a, const Tensor<D>& b) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.values()[i], b.values()[i]) << "index " << i;
}

void expect_close(const Tensor<D>& a, const Tensor<D>& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_NEAR(a.values()[i], b.values()[i], tol) << "index " << i;
}

EncoderConfig small_config() {
  EncoderConfig c;
  c.image_h = c.image_w = 16;
  c.patch = 8;
  c.vision_dim = c.text_dim = c.joint_dim = 16;
  c.vision_depth = c.text_depth = 3;
  c.heads = 2;
  c.ffn_mult = 2;
  c.vocab_size = 10;
  c.max_prompt_len = 6;
  return c;
}

TokenBatch prompts(std::vector<std::vector<std::size_t>> rows) {
  TokenBatch t{rows.size(), rows.front().size(), {}};
  for (auto& r : rows) t.ids.insert(t.ids.end(), r.begin(), r.end());
  return t;
}

AdapterInit strong_init() {
  AdapterInit a;
  a.proj_std = 0.3;
  a.up_scale = 1.0;
  return a;
}

}  // namespace

// ---------------------------------------------------------------- adapter

TEST(AdapterFuse, ZeroUpProjectionIsPureResidual) {
  Rng rng(3);
  auto layer = AdapterLayer<D>::init(6, 5, 4, 4, rng, strong_init());
  layer.up_v = Tensor<D>::zeros({4, 6}, true);
  layer.up_t = Tensor<D>::zeros({4, 5}, true);
  auto v = random_tensor({2, 7, 6}, rng), t = random_tensor({2, 3, 5}, rng);
  for (auto order : {InteractionOrder::VisionFirst, InteractionOrder::TextFirst, InteractionOrder::OneWay}) {
    Rng r(1);
    auto out = adapter_fuse(layer, order, v, t, r, Mode::TrainSampleOnce);
    expect_same(out.vision, v);
    expect_same(out.text, t);
  }
}

TEST(AdapterFuse, OneWayTextPathIsAttentionFree) {
  Rng rng(4);
  auto layer = AdapterLayer<D>::init(6, 5, 4, 4, rng, strong_init());
  auto v = random_tensor({2, 7, 6}, rng), t = random_tensor({2, 3, 5}, rng);
  Rng r(9);
  auto out = adapter_fuse(layer, InteractionOrder::OneWay, v, t, r, Mode::InferSample);
  auto expected = ops::add(t, ops::matmul(ops::matmul(t, layer.down_t), layer.up_t));
  expect_close(out.text, expected, 1e-12);
}

TEST(AdapterFuse, TextDownProjectionReachesVisionLossUnderVisionFirst) {
  Rng rng(5);
  auto layer = AdapterLayer<D>::init(4, 3, 3, 3, rng, strong_init());
  auto v = random_tensor({1, 4, 4}, rng), t = random_tensor({1, 3, 3}, rng);
  auto loss_fn = [&] {
    Rng r(11);  // frozen noise
    auto out = adapter_fuse(layer, InteractionOrder::VisionFirst, v, t, r, Mode::TrainSampleOnce);
    return ops::sum(ops::square(out.vision));
  };
  auto loss = loss_fn();
  loss.backward();
  double gnorm = 0;
  for (D g : layer.down_t.grad()) gnorm += g * g;
  EXPECT_GT(std::sqrt(gnorm), 1e-6);
  auto report = check_gradients(loss_fn, {layer.down_t});
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(AdapterFuse, RejectsMismatchedDims) {
  Rng rng(6);
  auto layer = AdapterLayer<D>::init(6, 5, 4, 4, rng);
  auto v = random_tensor({2, 7, 5}, rng), t = random_tensor({2, 3, 5}, rng);
  EXPECT_THROW(adapter_fuse(layer, InteractionOrder::VisionFirst, v, t, rng, Mode::InferMean), DimensionError);
}

TEST(PlaceAdapters, Coverage) {
  EXPECT_EQ(place_adapters(6, 6), (std::vector<std::size_t>{1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(place_adapters(6, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(place_adapters(6, default_depth_limit(6)), (std::vector<std::size_t>{1, 2, 3, 4, 5}));
  EXPECT_EQ(default_depth_limit(12), 10u);
  EXPECT_THROW(place_adapters(6, 0), ArgumentError);
  EXPECT_THROW(place_adapters(6, 7), ArgumentError);
}

TEST(AdapterStack, ParameterCountMatchesFormula) {
  for (auto [dv, dt, ds, n] : {std::array<std::size_t, 4>{16, 12, 8, 3}, {128, 128, 64, 5}, {7, 9, 5, 1}}) {
    Rng rng(1);
    const std::size_t da = ds;
    auto stack = build_adapter_stack<D>(6, n, dv, dt, ds, da, InteractionOrder::VisionFirst, rng);
    const std::size_t per = dv * ds + dt * ds + ds * dv + ds * dt +
                            2 * (ds * da + 2 * ds * da + 2 * ds * da + da * ds + 2);
    EXPECT_EQ(stack.parameter_count(), n * per);
    std::size_t counted = 0;
    for (const auto& [name, t] : stack.named_tensors()) counted += t.numel();
    // beta is a fixed scalar per attention, not a trainable tensor
    EXPECT_EQ(counted, n * (per - 2));
  }
}

TEST(AdapterStack, ZeroUpProjectionsMakeStackIdentity) {
  auto cfg = small_config();
  Rng rng(2);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto stack = build_adapter_stack<D>(3, 3, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng, strong_init());
  for (auto& l : stack.layers) {
    l.up_v = Tensor<D>::zeros(l.up_v.shape(), true);
    l.up_t = Tensor<D>::zeros(l.up_t.shape(), true);
  }
  auto img = random_tensor({2, 3, 16, 16}, rng);
  auto tok = prompts({{3, 4, 1, 0, 0, 0}, {5, 1, 0, 0, 0, 0}});
  Rng r(0);
  auto joint = joint_forward(enc, stack, img, tok, r, Mode::TrainSampleOnce);
  expect_same(joint.vision, encode_image(enc, img));
  expect_same(joint.text, encode_text(enc, tok));
}

TEST(AdapterStack, ValidateRejectsBadSchedules) {
  Rng rng(2);
  auto stack = build_adapter_stack<D>(6, 5, 8, 8, 4, 4, InteractionOrder::VisionFirst, rng);
  EXPECT_THROW(stack.validate(4), ConfigError);
  stack.layers.push_back(AdapterLayer<D>::init(8, 8, 6, 6, rng));
  stack.after_block.push_back(6);
  EXPECT_THROW(stack.validate(6), ConfigError);
}

// ---------------------------------------------------------------- encoder

TEST(Vocabulary, ReservedRowsAndEncoding) {
  auto v = Vocabulary::build({"A round lesion, upper-left.", "square lesion"});
  EXPECT_EQ(v.token(0), "[PAD]");
  EXPECT_EQ(v.token(1), "[EOS]");
  EXPECT_EQ(v.token(2), "[UNK]");
  EXPECT_EQ(tokenize("A round lesion, upper-left."),
            (std::vector<std::string>{"a", "round", "lesion", "upper-left"}));
  std::size_t unk = 0;
  auto ids = v.encode("round zebra lesion", 5, &unk);
  EXPECT_EQ(unk, 1u);
  EXPECT_EQ(ids, (std::vector<std::size_t>{v.id("round"), Vocabulary::kUnk, v.id("lesion"), Vocabulary::kEos, 0}));
  auto trunc = v.encode("a round lesion square", 3);
  EXPECT_EQ(trunc, (std::vector<std::size_t>{v.id("a"), v.id("round"), Vocabulary::kEos}));
}

TEST(Vocabulary, FileRoundTrip) {
  auto v = Vocabulary::build({"small dark circle", "large bright square"});
  const std::string path = ::testing::TempDir() + "/vocab.txt";
  v.save(path);
  auto w = Vocabulary::load(path);
  EXPECT_EQ(v.tokens(), w.tokens());
  {
    std::ofstream f(path);
    f << "hello\n";
  }
  EXPECT_THROW(Vocabulary::load(path), InputError);
}

TEST(Encoder, ShapeContracts) {
  auto cfg = small_config();
  Rng rng(7);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto img = random_tensor({3, 3, 16, 16}, rng);
  auto tok = prompts({{3, 1, 0, 0, 0, 0}, {4, 5, 6, 1, 0, 0}, {1, 0, 0, 0, 0, 0}});
  EXPECT_EQ(encode_image(enc, img).shape(), (Shape{3, 5, 16}));
  EXPECT_EQ(encode_text(enc, tok).shape(), (Shape{3, 6, 16}));
  auto stack = build_adapter_stack<D>(3, 2, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng);
  auto j = joint_forward(enc, stack, img, tok, rng, Mode::InferMean);
  EXPECT_EQ(j.patches().shape(), (Shape{3, 4, 16}));
  EXPECT_EQ(j.text_eos().shape(), (Shape{3, 16}));
  EXPECT_EQ(j.eos, (std::vector<std::size_t>{1, 3, 0}));
  EXPECT_THROW(encode_image(enc, random_tensor({1, 3, 8, 16}, rng)), DimensionError);
}

TEST(Encoder, EmptyScheduleMatchesIndependentEncodersAndIgnoresText) {
  auto cfg = small_config();
  Rng rng(8);
  auto enc = DualEncoder<D>::init(cfg, rng);
  AdapterStack<D> none;
  auto img = random_tensor({2, 3, 16, 16}, rng);
  auto tok_a = prompts({{3, 4, 1, 0, 0, 0}, {5, 1, 0, 0, 0, 0}});
  auto tok_b = prompts({{5, 1, 0, 0, 0, 0}, {3, 4, 1, 0, 0, 0}});
  Rng r(1);
  auto ja = joint_forward(enc, none, img, tok_a, r, Mode::TrainSampleOnce);
  auto jb = joint_forward(enc, none, img, tok_b, r, Mode::TrainSampleOnce);
  expect_same(ja.vision, encode_image(enc, img));
  expect_same(ja.text, encode_text(enc, tok_a));
  expect_same(ja.vision, jb.vision);
}

TEST(Encoder, PaddingAfterEosDoesNotChangeEosEmbedding) {
  auto cfg = small_config();
  Rng rng(9);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto stack = build_adapter_stack<D>(3, 3, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng, strong_init());
  auto img = random_tensor({1, 3, 16, 16}, rng);
  // Rows differ only after [EOS]; also compare against a shorter batch.
  auto a = prompts({{3, 4, 1, 0, 0, 0}});
  auto b = prompts({{3, 4, 1, 7, 8, 9}});
  auto c = prompts({{3, 4, 1}});
  Rng r(0);
  auto ja = joint_forward(enc, stack, img, a, r, Mode::InferMean);
  auto jb = joint_forward(enc, stack, img, b, r, Mode::InferMean);
  auto jc = joint_forward(enc, stack, img, c, r, Mode::InferMean);
  expect_close(ja.text_eos(), jb.text_eos(), 1e-12);
  expect_close(ja.text_eos(), jc.text_eos(), 1e-12);
  expect_close(ja.vision, jb.vision, 1e-12);
  EXPECT_EQ(a.trimmed().len, 3u);
}

TEST(Encoder, DeterministicAndBatchPermutationEquivariant) {
  auto cfg = small_config();
  Rng rng(10);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto stack = build_adapter_stack<D>(3, 2, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng, strong_init());
  auto x0 = random_tensor({1, 3, 16, 16}, rng), x1 = random_tensor({1, 3, 16, 16}, rng);
  auto img = ops::concat<D>({x0, x1, x0}, 0);
  auto perm_img = ops::concat<D>({x1, x0, x0}, 0);
  auto tok = prompts({{3, 1, 0, 0}, {4, 5, 1, 0}, {3, 1, 0, 0}});
  auto perm_tok = prompts({{4, 5, 1, 0}, {3, 1, 0, 0}, {3, 1, 0, 0}});
  Rng r(0);
  auto j = joint_forward(enc, stack, img, tok, r, Mode::InferMean);
  auto jp = joint_forward(enc, stack, perm_img, perm_tok, r, Mode::InferMean);
  auto row = [](const Tensor<D>& t, std::size_t i) { return ops::slice(t, 0, i, 1); };
  // identical inputs in rows 0 and 2
  expect_close(row(j.vision, 0), row(j.vision, 2), 1e-12);
  expect_close(row(j.text_eos(), 0), row(j.text_eos(), 2), 1e-12);
  // permutation (0 1 2) -> (1 0 2)
  expect_close(row(jp.vision, 0), row(j.vision, 1), 1e-12);
  expect_close(row(jp.vision, 1), row(j.vision, 0), 1e-12);
  expect_close(row(jp.text_eos(), 0), row(j.text_eos(), 1), 1e-12);
  // pure function in infer-mean mode
  auto again = joint_forward(enc, stack, img, tok, r, Mode::InferMean);
  expect_same(again.vision, j.vision);
}

TEST(Encoder, OneWayVisionLossStillTrainsTextDownProjection) {
  auto cfg = small_config();
  Rng rng(12);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto stack = build_adapter_stack<D>(3, 2, 16, 16, 8, 8, InteractionOrder::OneWay, rng, strong_init());
  auto img = random_tensor({1, 3, 16, 16}, rng);
  auto tok = prompts({{3, 4, 1, 0}});
  Rng r(0);
  auto j = joint_forward(enc, stack, img, tok, r, Mode::InferMean);
  ops::sum(ops::square(j.patches())).backward();
  double gnorm = 0;
  for (D g : stack.layers[0].down_t.grad()) gnorm += g * g;
  EXPECT_GT(std::sqrt(gnorm), 1e-8);
}

TEST(Encoder, InputErrors) {
  auto cfg = small_config();
  Rng rng(13);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto img = random_tensor({1, 3, 16, 16}, rng);
  EXPECT_THROW(encode_text(enc, prompts({{3, 4, 0, 0}})), InputError);
  EXPECT_THROW(encode_text(enc, prompts({{1, 4, 1, 0}})), InputError);
  EXPECT_THROW(encode_text(enc, prompts({{12, 1, 0, 0}})), InputError);

  enc.text.blocks.pop_back();
  auto stack = build_adapter_stack<D>(2, 2, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng);
  EXPECT_THROW(joint_forward(enc, stack, img, prompts({{3, 1}}), rng, Mode::InferMean), ConfigError);
  AdapterStack<D> none;
  EXPECT_NO_THROW(joint_forward(enc, none, img, prompts({{3, 1}}), rng, Mode::InferMean));

  auto bad = small_config();
  bad.image_w = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.max_prompt_len = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Encoder, GradientsReachPositionalEmbeddings) {
  auto cfg = small_config();
  cfg.vision_depth = cfg.text_depth = 1;
  Rng rng(14);
  auto enc = DualEncoder<D>::init(cfg, rng);
  auto stack = build_adapter_stack<D>(1, 1, 16, 16, 8, 8, InteractionOrder::VisionFirst, rng, strong_init());
  auto img = random_tensor({1, 3, 16, 16}, rng);
  auto tok = prompts({{3, 4, 1}});
  auto loss_fn = [&] {
    Rng r(5);
    auto j = joint_forward(enc, stack, img, tok, r, Mode::TrainSampleOnce);
    return ops::add(ops::sum(ops::square(j.patches())), ops::sum(ops::square(j.text_eos())));
  };
  auto report = check_gradients(loss_fn, {enc.vision.pos, enc.text.pos, enc.vision.cls}, 1e-5, 40, &rng);
  EXPECT_LT(report.max_rel_error, 1e-4);
}
