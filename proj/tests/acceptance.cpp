// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance [--work DIR] [--reuse] [N ...]
//
// With no criterion numbers every criterion runs. --reuse keeps trained
// checkpoints in DIR whose config hash matches instead of retraining.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pvlseg/cli/commands.hpp"
#include "pvlseg/core/gradcheck.hpp"

using namespace pvlseg;
namespace fs = std::filesystem;
using Td = Tensor<double>;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string work_dir;
bool reuse = false;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string f2(double v) { return fmt(v, 2); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Td rand_tensor(const Shape& s, Rng& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td::from(s, v, grad);
}

// Contracts an op output with fixed random weights so every output entry
// contributes a distinct slope.
Td probe_loss(const Td& y) {
  Rng r(99);
  return ops::sum(ops::mul(y, rand_tensor(y.shape(), r, -1, 1, false)));
}

// ------------------------------------------------------------ criterion 1

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  auto check = [&](const std::string& name, const std::function<Td()>& f, std::vector<Td> in) {
    const auto rep = check_gradients(f, std::move(in), 1e-5);
    ++checks;
    if (rep.max_rel_error > worst || !std::isfinite(rep.max_rel_error)) {
      worst = std::isfinite(rep.max_rel_error) ? rep.max_rel_error : std::numeric_limits<double>::infinity();
      worst_name = name;
    }
  };

  Rng rng(1);
  for (const Shape& s : std::vector<Shape>{{3, 4}, {2, 3, 5}}) {
    auto a = rand_tensor(s, rng), b = rand_tensor(s, rng), pos = rand_tensor(s, rng, 0.5, 2.0);
    auto bias = rand_tensor({s.back()}, rng), gamma = rand_tensor({s.back()}, rng);
    check("add", [&] { return probe_loss(ops::add(a, bias)); }, {a, bias});
    check("sub", [&] { return probe_loss(ops::sub(a, b)); }, {a, b});
    check("mul", [&] { return probe_loss(ops::mul(a, b)); }, {a, b});
    check("div", [&] { return probe_loss(ops::div(a, pos)); }, {a, pos});
    check("scale", [&] { return probe_loss(ops::scale(a, 1.7)); }, {a});
    check("add_scalar", [&] { return probe_loss(ops::add_scalar(a, 0.3)); }, {a});
    check("neg", [&] { return probe_loss(ops::neg(a)); }, {a});
    check("exp", [&] { return probe_loss(ops::exp(a)); }, {a});
    check("log", [&] { return probe_loss(ops::log(pos)); }, {pos});
    check("sqrt", [&] { return probe_loss(ops::sqrt(pos)); }, {pos});
    check("square", [&] { return probe_loss(ops::square(a)); }, {a});
    check("sigmoid", [&] { return probe_loss(ops::sigmoid(a)); }, {a});
    check("softplus", [&] { return probe_loss(ops::softplus(a)); }, {a});
    check("gelu", [&] { return probe_loss(ops::gelu(a)); }, {a});
    check("softmax", [&] { return probe_loss(ops::softmax_lastdim(a)); }, {a});
    check("log_softmax", [&] { return probe_loss(ops::log_softmax_lastdim(a)); }, {a});
    check("l2_normalize", [&] { return probe_loss(ops::l2_normalize_lastdim(a)); }, {a});
    check("layer_norm", [&] { return probe_loss(ops::layer_norm(a, gamma, bias)); }, {a, gamma, bias});
    check("sum", [&] { return ops::sum(ops::square(a)); }, {a});
    check("mean", [&] { return ops::mean(ops::square(a)); }, {a});
    check("sum_axis", [&] { return probe_loss(ops::sum_axis(a, 0)); }, {a});
    check("mean_axis", [&] { return probe_loss(ops::mean_axis(a, -1, true)); }, {a});
    check("transpose", [&] { return probe_loss(ops::transpose_last2(a)); }, {a});
    check("concat", [&] { return probe_loss(ops::concat<double>({a, b}, -1)); }, {a, b});
    check("slice", [&] { return probe_loss(ops::slice(a, 1, 1, 2)); }, {a});
    check("reshape", [&] { return probe_loss(ops::reshape(a, {a.numel()})); }, {a});
  }
  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({4, 5}, rng), c = rand_tensor({2, 5, 4}, rng);
    check("matmul", [&] { return probe_loss(ops::matmul(a, b)); }, {a, b});
    check("matmul_bt", [&] { return probe_loss(ops::matmul(a, c, true)); }, {a, c});
    auto table = rand_tensor({6, 3}, rng);
    check("gather_rows", [&] { return probe_loss(ops::gather_rows(table, {1, 4, 1, 0}, {2, 2})); }, {table});
    auto seq = rand_tensor({2, 4, 3}, rng);
    check("take_positions", [&] { return probe_loss(ops::take_positions(seq, {3, 1})); }, {seq});
    check("permute", [&] { return probe_loss(ops::permute(seq, {2, 0, 1})); }, {seq});
  }
  for (const Shape& s : std::vector<Shape>{{1, 2, 3, 3}, {2, 1, 4, 2}}) {
    auto x = rand_tensor(s, rng);
    check("bilinear_upsample", [&] { return probe_loss(ops::bilinear_upsample(x, s[2] * 2 + 1, s[3] * 3)); }, {x});
    check("nearest_upsample2x", [&] { return probe_loss(ops::nearest_upsample2x(x)); }, {x});
    auto w = rand_tensor({3, s[1] * 9}, rng), b = rand_tensor({3}, rng);
    check("conv3x3", [&] { return probe_loss(ops::conv3x3(x, w, b)); }, {x, w, b});
  }
  // Probabilistic attention with frozen epsilon, both confidence mechanisms.
  for (auto mech : {ConfidenceMechanism::Difference, ConfidenceMechanism::Scaling}) {
    Rng init(3);
    auto p = PvlAttentionParams<double>::init(4, 3, init, 0.2, 2.35, mech);
    auto x = rand_tensor({2, 3, 4}, rng), z = rand_tensor({2, 5, 4}, rng);
    check("attn_pvl",
          [&] {
            Rng eps(17);
            return probe_loss(attn_pvl(p, x, z, eps, Mode::TrainSampleOnce).y);
          },
          {x, z, p.w_q, p.w_k, p.w_v, p.w_out, p.gate_logit});
  }
  {
    auto logits = rand_tensor({2, 4, 5}, rng, -3, 3);
    Rng mr(5);
    auto target = rand_tensor({2, 4, 5}, mr, 0, 1, false);
    for (auto& v : target.values()) v = v > 0.5 ? 1.0 : 0.0;
    check("dice_bce", [&] { return dice_bce(logits, target, 1.0); }, {logits});
    auto vis = rand_tensor({3, 5, 4}, rng), txt = rand_tensor({3, 4}, rng);
    auto scale = Td::scalar(1.3, true);
    LossConfig lc;
    check("soft_contrastive", [&] { return soft_contrastive(vis, txt, scale, lc); }, {vis, txt, scale});
  }

  // End-to-end loss wrt 20 parameter entries spread over every module.
  ModelConfig mc;
  mc.encoder.image_h = mc.encoder.image_w = 16;
  mc.encoder.patch = 4;
  mc.encoder.vision_dim = mc.encoder.text_dim = mc.encoder.joint_dim = 8;
  mc.encoder.vision_depth = mc.encoder.text_depth = 2;
  mc.encoder.heads = 2;
  mc.encoder.ffn_mult = 2;
  mc.encoder.max_prompt_len = 12;
  mc.shared_dim = 8;
  mc.upscale_blocks = 1;
  mc.adapter_init.gate_logit = 0.3;
  Rng mrng(4);
  std::vector<Sample> data;
  for (std::size_t i = 0; i < 3; ++i) {
    Sample s;
    Rng sr = Rng(8).derive(i);
    SceneObject o;
    o.shape = static_cast<ShapeKind>(i);
    o.r = 3.0 + 0.5 * static_cast<double>(i);
    o.cy = 6.0 + static_cast<double>(i);
    o.cx = 8.0;
    s.mask = o.render(16);
    s.image = Image<double>(16, 16);
    for (std::size_t k = 0; k < s.image.size(); ++k) s.image.px[k] = (s.mask.px[k] ? 0.8 : 0.4) + 0.02 * sr.normal();
    s.text = i == 0 ? "a round bright lesion" : i == 1 ? "rectangular lesion on the left" : "dark triangular lesion";
    data.push_back(std::move(s));
  }
  std::vector<std::string> texts;
  for (auto& s : data) texts.push_back(s.text);
  auto model = PvlSegModel<double>::init(mc, Vocabulary::build(texts), mrng);
  const auto batch = make_batch(model, data, {0, 1, 2});
  LossConfig lc;
  auto total = [&] {
    Rng eps(23);
    auto fr = forward(model, batch.images, batch.tokens, eps, Mode::TrainSampleOnce);
    return compute_loss(model, fr, batch.masks, lc).total;
  };
  const std::vector<std::string> groups{"encoder.vision", "encoder.text", ".attn_", "adapter", "head.", "logit_scale"};
  const auto named = model.named_tensors();
  std::vector<std::vector<std::size_t>> members(groups.size());
  for (std::size_t i = 0; i < named.size(); ++i)
    for (std::size_t g = 0; g < groups.size(); ++g)
      if (named[i].first.find(groups[g]) != std::string::npos) {
        members[g].push_back(i);
        break;
      }
  for (auto& t : model.parameters()) t.zero_grad();
  total().backward();
  Rng pick(31);
  double e2e_worst = 0;
  std::set<std::string> covered;
  for (std::size_t k = 0; k < 20; ++k) {
    const auto& grp = members[k % groups.size()];
    const auto& [name, t] = named[grp[pick.below(grp.size())]];
    const std::size_t idx = pick.below(t.numel());
    Td tensor = t;
    const double analytic = tensor.grad()[idx];
    double& v = tensor.values()[idx];
    const double saved = v;
    double fp, fm;
    {
      NoGradGuard ng;
      v = saved + 1e-5;
      fp = total().item();
      v = saved - 1e-5;
      fm = total().item();
    }
    v = saved;
    const double err = gradient_rel_error(analytic, (fp - fm) / 2e-5);
    if (!(err <= e2e_worst)) e2e_worst = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
    covered.insert(groups[k % groups.size()]);
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && e2e_worst < 1e-4 && covered.size() == groups.size() && secs < 120;
  return {pass, std::to_string(checks) + " op checks, max rel err " + sci(worst) + " (" + worst_name +
                    "); end-to-end 20 params over " + std::to_string(covered.size()) + " modules, max rel err " +
                    sci(e2e_worst) + "; " + f2(secs) + " s (need < 1e-4, < 120 s)"};
}

// ------------------------------------------------------------ criterion 2

// Textbook scaled dot-product cross-attention with the same gated residual.
std::vector<double> reference_attention(const PvlAttentionParams<double>& p, const Td& x, const Td& z) {
  const std::size_t b = x.dim(0), tq = x.dim(1), tk = z.dim(1), ds = x.dim(2), da = p.attn_dim();
  const auto& wq = p.w_q.values();
  const auto& wk = p.w_k.values();
  const auto& wv = p.w_v.values();
  const auto& wo = p.w_out.values();
  const double g = 1.0 / (1.0 + std::exp(-p.gate_logit.item()));
  std::vector<double> y(b * tq * ds);
  for (std::size_t n = 0; n < b; ++n) {
    std::vector<double> k(tk * da, 0.0), v(tk * da, 0.0);
    for (std::size_t j = 0; j < tk; ++j)
      for (std::size_t c = 0; c < da; ++c)
        for (std::size_t d = 0; d < ds; ++d) {
          const double zz = z.values()[(n * tk + j) * ds + d];
          k[j * da + c] += zz * wk[d * 2 * da + c];
          v[j * da + c] += zz * wv[d * 2 * da + c];
        }
    for (std::size_t i = 0; i < tq; ++i) {
      std::vector<double> q(da, 0.0), s(tk, 0.0), o(da, 0.0);
      for (std::size_t c = 0; c < da; ++c)
        for (std::size_t d = 0; d < ds; ++d) q[c] += x.values()[(n * tq + i) * ds + d] * wq[d * da + c];
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < tk; ++j) {
        for (std::size_t c = 0; c < da; ++c) s[j] += q[c] * k[j * da + c];
        s[j] /= std::sqrt(static_cast<double>(da));
        mx = std::max(mx, s[j]);
      }
      double den = 0;
      for (auto& e : s) den += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < tk; ++j)
        for (std::size_t c = 0; c < da; ++c) o[c] += s[j] / den * v[j * da + c];
      for (std::size_t d = 0; d < ds; ++d) {
        double acc = 0;
        for (std::size_t c = 0; c < da; ++c) acc += o[c] * wo[c * ds + d];
        y[(n * tq + i) * ds + d] = g * acc + (1 - g) * x.values()[(n * tq + i) * ds + d];
      }
    }
  }
  return y;
}

Outcome deterministic_reduction() {
  Rng rng(2);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t ds = 2 + rng.below(7), da = 1 + rng.below(6), b = 1 + rng.below(3);
    const std::size_t tq = 1 + rng.below(6), tk = 1 + rng.below(8);
    Rng init = rng.derive(static_cast<std::uint64_t>(t));
    auto p = PvlAttentionParams<double>::init(ds, da, init, rng.uniform(-2, 2), 0.0);
    auto x = rand_tensor({b, tq, ds}, rng, -2, 2, false), z = rand_tensor({b, tk, ds}, rng, -2, 2, false);
    Rng eps(t);
    const auto y = attn_pvl(p, x, z, eps, Mode::InferMean).y;
    const auto ref = reference_attention(p, x, z);
    for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y.values()[i] - ref[i]));
  }
  return {worst <= 1e-12, "100 instances, beta=0 infer_mean vs standard attention, max |diff| " + sci(worst) +
                               " (need <= 1e-12)"};
}

// ------------------------------------------------------------ criterion 3

Outcome omega_identity() {
  Rng rng(3);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t ds = 2 + rng.below(7), da = 1 + rng.below(6), b = 1 + rng.below(3);
    const std::size_t tq = 1 + rng.below(6), tk = 1 + rng.below(8);
    const double beta = rng.uniform(0.0, 5.0);
    Rng init = rng.derive(static_cast<std::uint64_t>(t));
    auto p = PvlAttentionParams<double>::init(ds, da, init, 0.0, beta);
    auto x = rand_tensor({b, tq, ds}, rng, -2, 2, false), z = rand_tensor({b, tk, ds}, rng, -2, 2, false);
    Rng eps(t);
    const auto r = attn_pvl(p, x, z, eps, Mode::InferMean);
    const auto& mu = r.diag.score_mean.values();
    const auto& sd = r.diag.score_std.values();
    const auto& a = r.diag.attention.values();
    // omega-form: exp(S_mu) / omega, omega = exp(beta S_sigma), normalised per row
    for (std::size_t row = 0; row < b * tq; ++row) {
      double den = 0;
      for (std::size_t j = 0; j < tk; ++j) den += std::exp(mu[row * tk + j]) / std::exp(beta * sd[row * tk + j]);
      for (std::size_t j = 0; j < tk; ++j) {
        const double w = std::exp(mu[row * tk + j]) / std::exp(beta * sd[row * tk + j]) / den;
        worst = std::max(worst, std::abs(a[row * tk + j] - w));
      }
    }
  }
  return {worst <= 1e-9, "100 instances, softmax(S_mu - beta S_sigma) vs omega-normalised form, max |diff| " +
                              sci(worst) + " (need <= 1e-9)"};
}

// ------------------------------------------------------------ criterion 4

Outcome monte_carlo() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng init(4);
  auto p = PvlAttentionParams<double>::init(4, 3, init, 0.5);
  Rng r(5);
  auto x = rand_tensor({2, 3, 4}, r, -1.5, 1.5, false), z = rand_tensor({2, 4, 4}, r, -1.5, 1.5, false);
  const std::size_t n = 100000;
  auto [m, v] = mc_moments(p, x, z, Rng(6), n);
  Rng e(0);
  const auto det = attn_pvl(p, x, z, e, Mode::InferMean).y;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < det.numel(); ++i)
    ok += std::abs(m.values()[i] - det.values()[i]) <= 4.0 * std::sqrt(v.values()[i] / double(n));
  const double frac = 100.0 * double(ok) / double(det.numel());
  const double secs = seconds_since(t0);
  return {frac >= 99.0 && secs < 60, std::to_string(ok) + "/" + std::to_string(det.numel()) +
                                         " elements within 4 SE over 1e5 passes (" + f2(frac) + "%, need >= 99%); " +
                                         f2(secs) + " s (need < 60 s)"};
}

// ------------------------------------------------------- training helpers

std::ostringstream quiet;

std::string corpus_dir() { return (fs::path(work_dir) / "corpus").string(); }

void ensure_corpus() {
  static bool done = false;
  if (done) return;
  CorpusOptions co;
  co.seed = 0;
  co.n_train = 200;
  co.n_test = 50;
  co.ood = true;
  cmd_gen(corpus_dir(), co, true, quiet);
  done = true;
}

RunConfig make_config(const std::vector<std::string>& sets) {
  RunConfig c;
  for (const auto& s : sets) c.set_assignment(s);
  c.validate();
  return c;
}

// Trains (or, with --reuse, reloads) the model for `cfg` under `name`.
LoadedModel trained(const std::string& name, const RunConfig& cfg) {
  ensure_corpus();
  const fs::path out = fs::path(work_dir) / "runs" / name;
  const fs::path ck = out / "checkpoint.bin";
  if (!(reuse && fs::exists(ck) && read_checkpoint(ck.string()).config_hash == cfg.hash())) {
    const auto t0 = std::chrono::steady_clock::now();
    std::cerr << "  training " << name << " ..." << std::flush;
    cmd_train(cfg, corpus_dir(), out.string(), quiet);
    std::cerr << " " << f2(seconds_since(t0)) << " s\n";
  }
  return load_model(ck.string());
}

MetricReport evaluate(const LoadedModel& lm, const std::vector<std::string>& sets = {}) {
  const RunConfig cfg = merge_eval_config(lm, nullptr, sets);
  return cmd_eval(lm, cfg, corpus_dir(), {"test", "test_ood"}, {"original"}, quiet);
}

// ---------------------------------------------------------- criteria 5, 7

struct DefaultRun {
  bool ready = false;
  LoadedModel lm;
  MetricReport report;
  double train_secs = 0;
};

DefaultRun& default_run() {
  static DefaultRun d;
  if (!d.ready) {
    const auto t0 = std::chrono::steady_clock::now();
    d.lm = trained("default", RunConfig());
    d.train_secs = seconds_since(t0);
    d.report = evaluate(d.lm);
    d.ready = true;
  }
  return d;
}

// Two-object scenes outside the corpus; each object is prompted with the
// caption read off its own mask.
Outcome prompt_switching(const LoadedModel& lm) {
  SynthOptions so;
  std::vector<Image<double>> images;
  std::vector<std::array<Mask, 2>> masks;
  std::vector<std::array<std::string, 2>> prompts;
  Rng root(424242);
  for (std::uint64_t i = 0; images.size() < 40; ++i) {
    Rng rng = root.derive(i);
    const Scene sc = generate_scene(rng, so);
    std::size_t other = sc.objects.size();
    for (std::size_t k = 0; k < sc.objects.size(); ++k)
      if (!sc.objects[k].target) other = k;
    if (other == sc.objects.size() || sc.planted_number != "single") continue;
    const Mask& second = sc.object_masks[other];
    auto a = extract_attributes(sc.target_mask, sc.image), b = extract_attributes(second, sc.image);
    a.id = b.id = i;
    images.push_back(sc.image);
    masks.push_back({sc.target_mask, second});
    prompts.push_back({fill_template(a, PromptStyle::Original), fill_template(b, PromptStyle::Original)});
  }
  const EvalOptions opt = lm.cfg.eval();
  double dsc_sum[2] = {0, 0}, iou_sum = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto res = mc_infer(lm.model, {&images[i], &images[i]}, {prompts[i][0], prompts[i][1]}, opt.mc_samples,
                              opt.seed, opt.mode);
    for (int k = 0; k < 2; ++k) dsc_sum[k] += dsc(res[k].pred, masks[i][k]);
    iou_sum += iou(res[0].pred, res[1].pred);
  }
  const double n = double(images.size());
  const double d0 = dsc_sum[0] / n, d1 = dsc_sum[1] / n, cross = iou_sum / n;
  return {d0 >= 80 && d1 >= 80 && cross < 0.2, "prompt switching on " + std::to_string(images.size()) +
                                                  " two-object images: DSC " + f2(d0) + " / " + f2(d1) +
                                                  " (need >= 80), cross-prompt IoU " + fmt(cross, 3) + " (need < 0.2)"};
}

Outcome toy_segmentation() {
  auto& d = default_run();
  const double test = d.report.find("test")->dsc;
  const Outcome sw = prompt_switching(d.lm);
  return {test >= 90 && sw.pass, "default schedule: test DSC " + f2(test) + " (need >= 90), training " +
                                     f2(d.train_secs) + " s; " + sw.detail};
}

Outcome uncertainty_correlation() {
  auto& d = default_run();
  const auto* id = d.report.find("test");
  const auto* ood = d.report.find("test_ood");
  const double a = id->spearman.value_or(std::numeric_limits<double>::quiet_NaN());
  const double b = ood->spearman.value_or(std::numeric_limits<double>::quiet_NaN());
  return {a >= 50 && b >= 50, "pooled entropy-error Spearman: ID " + f2(a) + ", OOD " + f2(b) + " (need >= 50 each)"};
}

// ---------------------------------------------------------- criteria 6, 8

// Reduced architecture for the multi-seed comparisons (12 trainings).
const std::vector<std::string> kAblationBase = {"embed_dim=64", "depth=4", "shared_dim=32"};

struct Variant {
  std::string name;
  std::vector<std::string> sets;
};

const std::vector<Variant> kVariants = {
    {"full", {}},
    {"deterministic", {"beta=0", "value_sampling=false"}},
    {"no_softcon", {"lambda_softcon=0"}},
    {"beta0", {"beta=0"}},
};

struct AblationResults {
  // variant -> per-seed (test report, ood dsc/brier)
  std::map<std::string, std::vector<MetricReport>> reports;
  std::vector<MetricReport> full_mc5;
};

AblationResults& ablations() {
  static AblationResults r;
  static bool ready = false;
  if (ready) return r;
  for (int seed = 0; seed < 3; ++seed)
    for (const auto& v : kVariants) {
      auto sets = kAblationBase;
      sets.insert(sets.end(), v.sets.begin(), v.sets.end());
      sets.push_back("seed=" + std::to_string(seed));
      const auto lm = trained("ablation_" + v.name + "_s" + std::to_string(seed), make_config(sets));
      r.reports[v.name].push_back(evaluate(lm));
      if (v.name == "full") r.full_mc5.push_back(evaluate(lm, {"mc_samples=5"}));
    }
  ready = true;
  return r;
}

double seed_mean(const std::vector<MetricReport>& rs, const std::string& split, double SplitMetrics::*field) {
  double s = 0;
  for (const auto& r : rs) s += r.find(split)->*field;
  return s / double(rs.size());
}

Outcome calibration_direction() {
  auto& r = ablations();
  const double prob = seed_mean(r.reports["full"], "test_ood", &SplitMetrics::brier);
  const double det = seed_mean(r.reports["deterministic"], "test_ood", &SplitMetrics::brier);
  return {prob < det, "OOD band Brier over 3 seeds: probabilistic " + f2(prob) + " vs deterministic " + f2(det) +
                          " (need strictly lower)"};
}

Outcome ablation_directions() {
  auto& r = ablations();
  const double full = seed_mean(r.reports["full"], "test_ood", &SplitMetrics::dsc);
  const double nocon = seed_mean(r.reports["no_softcon"], "test_ood", &SplitMetrics::dsc);
  const double beta0 = seed_mean(r.reports["beta0"], "test_ood", &SplitMetrics::dsc);
  double delta = 0;
  for (const std::string split : {"test", "test_ood"})
    delta = std::max(delta, std::abs(seed_mean(r.reports["full"], split, &SplitMetrics::dsc) -
                                     seed_mean(r.full_mc5, split, &SplitMetrics::dsc)));
  const bool a = nocon <= full, b = full >= beta0, c = delta < 1.5;
  return {a && b && c, std::string("(a) ") + (a ? "ok" : "FAIL") + " OOD DSC without soft contrastive " + f2(nocon) +
                           " <= full " + f2(full) + "; (b) " + (b ? "ok" : "FAIL") + " beta=2.35 " + f2(full) +
                           " >= beta=0 " + f2(beta0) + "; (c) " + (c ? "ok" : "FAIL") + " |DSC(5) - DSC(30)| max " +
                           f2(delta) + " (need < 1.5); 3 seeds"};
}

// ------------------------------------------------------------ criterion 9

Mask random_mask(Rng& rng, std::size_t h, std::size_t w) {
  Mask m(h, w);
  const std::size_t k = rng.below(4);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t y0 = rng.below(h), x0 = rng.below(w);
    const std::size_t y1 = std::min(h, y0 + 1 + rng.below(h / 2)), x1 = std::min(w, x0 + 1 + rng.below(w / 2));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m(y, x) = 1;
  }
  return m;
}

double dsc_ref(const Mask& p, const Mask& g) {
  double a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    a += p.px[i] != 0;
    b += g.px[i] != 0;
    both += p.px[i] && g.px[i];
  }
  return a + b == 0 ? 100.0 : 200.0 * both / (a + b);
}

std::vector<std::pair<int, int>> edge_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  const int h = int(m.h), w = int(m.w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m(y, x)) continue;
      bool edge = false;
      for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
        const int yy = y + dy, xx = x + dx;
        edge |= yy < 0 || xx < 0 || yy >= h || xx >= w || !m(yy, xx);
      }
      if (edge) out.emplace_back(y, x);
    }
  return out;
}

double nsd_ref(const Mask& p, const Mask& g, double tol) {
  const auto bp = edge_pixels(p), bg = edge_pixels(g);
  if (bp.empty() && bg.empty()) return 100.0;
  if (bp.empty() || bg.empty()) return 0.0;
  auto frac = [&](const auto& from, const auto& to) {
    double ok = 0;
    for (auto [y, x] : from) {
      double best = std::numeric_limits<double>::infinity();
      for (auto [v, u] : to) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      ok += best <= tol + 1e-6;
    }
    return ok / double(from.size());
  };
  return 50.0 * (frac(bp, bg) + frac(bg, bp));
}

double brier_ref(const Image<double>& p, const Mask& g, double radius) {
  double acc = 0, n = 0;
  for (std::size_t y = 0; y < g.h; ++y)
    for (std::size_t x = 0; x < g.w; ++x) {
      bool near = false;
      for (std::size_t v = 0; v < g.h && !near; ++v)
        for (std::size_t u = 0; u < g.w && !near; ++u)
          near = g(v, u) && std::hypot(double(y) - double(v), double(x) - double(u)) <= radius;
      if (!near) continue;
      acc += (p(y, x) - g(y, x)) * (p(y, x) - g(y, x));
      n += 1;
    }
  return 100.0 * acc / n;
}

double spearman_ref(const std::vector<double>& a, const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, eq = 0;
      for (double w : v) {
        less += w < v[i];
        eq += w == v[i];
      }
      r[i] = less + (eq + 1) / 2;
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  const double n = double(a.size());
  double ma = 0, mb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i] / n;
    mb += rb[i] / n;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return 100.0 * sab / std::sqrt(saa * sbb);
}

Outcome metric_oracles() {
  Rng rng(9);
  double e_dsc = 0, e_nsd = 0, e_brier = 0, e_sp = 0, e_hm = 0;
  const int n = 40;
  for (int t = 0; t < n; ++t) {
    const std::size_t h = 6 + rng.below(14), w = 6 + rng.below(14);
    const Mask p = random_mask(rng, h, w);
    Mask g = random_mask(rng, h, w);
    if (count(g) == 0) g(rng.below(h), rng.below(w)) = 1;
    e_dsc = std::max(e_dsc, std::abs(dsc(p, g) - dsc_ref(p, g)));
    const double tol = rng.uniform(0.5, 3.0);
    e_nsd = std::max(e_nsd, std::abs(nsd(p, g, tol) - nsd_ref(p, g, tol)));
    Image<double> prob(h, w);
    for (auto& v : prob.px) v = rng.uniform();
    const double band = rng.uniform(1.0, 5.0);
    e_brier = std::max(e_brier, std::abs(brier(prob, g, BrierRegion::ForegroundBand, band) - brier_ref(prob, g, band)));
    std::vector<double> a(10 + rng.below(40)), b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = std::round(rng.uniform(0, 6));  // ties
      b[i] = rng.uniform() < 0.5 ? a[i] + rng.normal() : rng.normal();
    }
    e_sp = std::max(e_sp, std::abs(spearman(a, b) - spearman_ref(a, b)));
    const double x = rng.uniform(1, 100), y = rng.uniform(1, 100);
    e_hm = std::max(e_hm, std::abs(harmonic_mean(x, y) - 2 * x * y / (x + y)));
  }
  const std::string hm = fmt(harmonic_mean(89.11, 79.02), 2);
  const bool pass = e_dsc <= 1e-9 && e_nsd <= 1e-6 && e_brier <= 1e-9 && e_sp <= 1e-9 && e_hm <= 1e-9 && hm == "83.76";
  return {pass, std::to_string(n) + " random instances, max |diff| dsc " + sci(e_dsc) + ", nsd " + sci(e_nsd) +
                    ", brier " + sci(e_brier) + ", spearman " + sci(e_sp) + ", hm " + sci(e_hm) +
                    "; HM(89.11, 79.02) = " + hm + " (need 83.76)"};
}

// ----------------------------------------------------------- criterion 10

Outcome round_trips() {
  // Checkpoint, 64-bit parameters and moments.
  ModelConfig mc;
  mc.encoder.image_h = mc.encoder.image_w = 16;
  mc.encoder.patch = 4;
  mc.encoder.vision_dim = mc.encoder.text_dim = mc.encoder.joint_dim = 8;
  mc.encoder.vision_depth = mc.encoder.text_depth = 2;
  mc.encoder.heads = 2;
  mc.shared_dim = 8;
  mc.upscale_blocks = 1;
  Rng r1(10), r2(11);
  const Vocabulary vocab = Vocabulary::build({"bright round lesion"});
  auto a = PvlSegModel<double>::init(mc, vocab, r1);
  auto b = PvlSegModel<double>::init(mc, vocab, r2);
  Adam<double> oa(a.parameters(), AdamConfig{}), ob(b.parameters(), AdamConfig{});
  Rng gr(12);
  for (auto& p : a.parameters())
    for (auto& g : p.grad()) g = gr.normal();
  oa.step(1e-3);
  const fs::path p1 = fs::path(work_dir) / "rt_a.bin", p2 = fs::path(work_dir) / "rt_b.bin";
  write_checkpoint(p1.string(), make_checkpoint(a, &oa, "k=v\n", 0x1234));
  restore(read_checkpoint(p1.string()), b, &ob);
  bool ckpt_ok = ob.steps() == oa.steps();
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ckpt_ok &= std::memcmp(pa[i].values().data(), pb[i].values().data(), pa[i].numel() * sizeof(double)) == 0;
    ckpt_ok &= oa.first_moments()[i] == ob.first_moments()[i] && oa.second_moments()[i] == ob.second_moments()[i];
  }
  write_checkpoint(p2.string(), make_checkpoint(b, &ob, "k=v\n", 0x1234));
  ckpt_ok &= file_bytes(p1) == file_bytes(p2);

  // Corpus regeneration.
  CorpusOptions co;
  co.seed = 77;
  co.n_train = 20;
  co.n_test = 10;
  co.ood = true;
  co.extra_style = PromptStyle::Overdescriptive;
  const fs::path c1 = fs::path(work_dir) / "rt_corpus_a", c2 = fs::path(work_dir) / "rt_corpus_b";
  fs::remove_all(c1);
  fs::remove_all(c2);
  generate_corpus(c1.string(), co);
  generate_corpus(c2.string(), co);
  bool corpus_ok = true;
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(c1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    corpus_ok &= file_bytes(e.path()) == file_bytes(c2 / fs::relative(e.path(), c1));
  }
  std::size_t files2 = 0;
  for (const auto& e : fs::recursive_directory_iterator(c2)) files2 += e.is_regular_file();
  corpus_ok &= files == files2 && files > 0;

  // Attribute extraction over 1000 scenes.
  Rng sr(2025);
  std::size_t shape_ok = 0, loc_ok = 0, num_ok = 0;
  const std::size_t n = 1000;
  for (std::size_t i = 0; i < n; ++i) {
    const Scene sc = generate_scene(sr, {});
    const auto rec = extract_attributes(sc.target_mask, sc.image);
    shape_ok += rec.shape == shape_descriptor(sc.target_shape);
    loc_ok += rec.location == sc.planted_location;
    num_ok += rec.number == sc.planted_number;
  }
  const bool attr_ok = shape_ok >= 950 && loc_ok == n && num_ok == n;
  return {ckpt_ok && corpus_ok && attr_ok,
          std::string("checkpoint ") + (ckpt_ok ? "bit-exact" : "MISMATCH") + "; corpus (" + std::to_string(files) +
              " files) " + (corpus_ok ? "byte-identical" : "DIFFERS") + "; attributes over 1000 scenes: shape " +
              f2(shape_ok / 10.0) + "% (need >= 95), location " + f2(loc_ok / 10.0) + "%, number " +
              f2(num_ok / 10.0) + "% (need 100)"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  work_dir = (fs::temp_directory_path() / "pvlseg_acceptance").string();
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) work_dir = argv[++i];
    else if (a == "--reuse") reuse = true;
    else if (a.find_first_not_of("0123456789") == std::string::npos && !a.empty()) only.insert(std::stoi(a));
    else {
      std::cerr << "usage: acceptance [--work DIR] [--reuse] [N ...]\n";
      return 2;
    }
  }
  fs::create_directories(work_dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", gradient_integrity},
      {"deterministic reduction", deterministic_reduction},
      {"attention identity", omega_identity},
      {"Monte-Carlo statistics", monte_carlo},
      {"toy segmentation learning", toy_segmentation},
      {"calibration direction", calibration_direction},
      {"uncertainty-error correlation", uncertainty_correlation},
      {"ablation directions", ablation_directions},
      {"metric oracles", metric_oracles},
      {"round trips", round_trips},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %2d %s  %s: %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
