#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pvlseg/eval/report.hpp"
#include "pvlseg/model/model.hpp"
#include "pvlseg/train/trainer.hpp"

namespace pvlseg {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

enum class KeyKind { Int, Real, Bool, Choice };

struct KeySpec {
  std::string name;
  KeyKind kind;
  std::string fallback;
  double lo = 0, hi = 0;  // inclusive range for Int/Real
  std::vector<std::string> choices;
  bool arch = false;  // changes the parameter layout or the forward function
  std::string help;
};

inline const std::vector<KeySpec>& config_schema() {
  using K = KeyKind;
  static const std::vector<KeySpec> s = {
      // model
      {"image_size", K::Int, "64", 8, 1024, {}, true, "square input size in pixels"},
      {"patch", K::Int, "8", 1, 64, {}, true, "patch size"},
      {"embed_dim", K::Int, "128", 2, 2048, {}, true, "vision/text/joint width"},
      {"depth", K::Int, "6", 1, 48, {}, true, "blocks per encoder"},
      {"heads", K::Int, "4", 1, 64, {}, true, "attention heads per block"},
      {"ffn_mult", K::Int, "4", 1, 16, {}, true, "MLP expansion"},
      {"max_prompt_len", K::Int, "32", 2, 256, {}, true, "tokens incl. [EOS]"},
      {"adapters", K::Bool, "true", 0, 0, {}, true, "insert the fusion adapters"},
      {"adapter_depth", K::Int, "0", 0, 48, {}, true, "fuse after blocks 1..n (0: depth-1)"},
      {"shared_dim", K::Int, "64", 1, 2048, {}, true, "adapter shared width"},
      {"attn_dim", K::Int, "0", 0, 2048, {}, true, "attention width (0: shared_dim)"},
      {"order", K::Choice, "vision_first", 0, 0, {"vision_first", "text_first", "one_way"}, true, "fusion order"},
      {"mechanism", K::Choice, "difference", 0, 0, {"difference", "scaling", "none"}, true, "confidence mechanism"},
      {"beta", K::Real, "2.35", 0, 100, {}, true, "score-variance penalty"},
      {"value_sampling", K::Bool, "true", 0, 0, {}, true, "sample attention values (false: deterministic variant)"},
      {"upscale_blocks", K::Int, "2", 0, 4, {}, true, "2x upsampling blocks in the head"},
      {"gate_logit", K::Real, "0", -20, 20, {}, false, "initial gate logit"},
      {"proj_std", K::Real, "0.02", 0, 1, {}, false, "adapter projection init std"},
      {"up_scale", K::Real, "0.1", 0, 10, {}, false, "up-projection init scale"},
      // loss
      {"lambda_seg", K::Real, "0.5", 0, 100, {}, false, "segmentation loss weight"},
      {"lambda_softcon", K::Real, "0.1", 0, 100, {}, false, "soft contrastive weight"},
      {"tau", K::Real, "0.2", 1e-6, 100, {}, false, "soft target temperature"},
      {"dice_smooth", K::Real, "1", 0, 1000, {}, false, "Dice smoothing"},
      {"pooling", K::Choice, "average", 0, 0, {"average", "cls"}, false, "vision pooling for the contrastive loss"},
      {"logit_scale_init", K::Real, "2.659", -10, 10, {}, false, "initial log contrastive scale"},
      // optimisation
      {"epochs", K::Int, "60", 1, 100000, {}, false, "training epochs"},
      {"lr", K::Real, "3e-4", 0, 1, {}, false, "peak learning rate"},
      {"batch", K::Int, "24", 1, 4096, {}, false, "batch size"},
      {"adam_beta1", K::Real, "0.9", 0, 0.999999, {}, false, ""},
      {"adam_beta2", K::Real, "0.999", 0, 0.999999999, {}, false, ""},
      {"adam_eps", K::Real, "1e-8", 0, 1, {}, false, ""},
      {"weight_decay", K::Real, "0", 0, 1, {}, false, ""},
      {"clip_norm", K::Real, "5", 0, 1e6, {}, false, "global gradient norm cap (0: off)"},
      {"max_steps", K::Int, "0", 0, 1e9, {}, false, "stop after n steps (0: full schedule)"},
      {"checkpoint_every", K::Int, "0", 0, 100000, {}, false, "extra checkpoint every n epochs (0: last only)"},
      {"seed", K::Int, "0", 0, 9.0e15, {}, false, "initialisation, shuffling and noise seed"},
      // evaluation
      {"mc_samples", K::Int, "30", 1, 10000, {}, false, "stochastic passes per image"},
      {"eval_seed", K::Int, "0", 0, 9.0e15, {}, false, "pass seeds for inference"},
      {"nsd_tol", K::Real, "2", 0, 1000, {}, false, "NSD tolerance in pixels"},
      {"brier_region", K::Choice, "band", 0, 0, {"band", "full"}, false, "Brier region"},
      {"brier_band", K::Real, "5", 0, 1000, {}, false, "foreground band radius"},
      {"spearman_pooling", K::Choice, "pixel", 0, 0, {"pixel", "image"}, false, "Spearman pooling"},
  };
  return s;
}

inline const KeySpec* find_key(const std::string& name) {
  for (const auto& k : config_schema())
    if (k.name == name) return &k;
  return nullptr;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Validated key=value settings; every schema key is always present.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = canonical(k, k.fallback);
  }

  void set(const std::string& key, const std::string& raw) {
    const KeySpec* k = find_key(key);
    if (!k) throw ConfigError("unknown config key '" + key + "'");
    values_[key] = canonical(*k, trim(raw));
  }

  void set_assignment(const std::string& line, const std::string& where = "") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value, got '" + line + "'");
    set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }

  static RunConfig parse(const std::string& text, const std::string& origin = "config") {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
      line = trim(line);
      if (line.empty()) continue;
      c.set_assignment(line, origin + ":" + std::to_string(no) + ": ");
    }
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  long long get_int(const std::string& key) const { return std::stoll(get(key)); }
  double get_real(const std::string& key) const { return std::stod(get(key)); }
  bool get_bool(const std::string& key) const { return get(key) == "true"; }

  // Sorted key=value lines; the hash input and the text stored in outputs.
  std::string canonical_text(bool arch_only = false) const {
    std::string s;
    for (const auto& [k, v] : values_)
      if (!arch_only || find_key(k)->arch) s += k + "=" + v + "\n";
    return s;
  }
  std::uint64_t hash() const { return fnv1a64(canonical_text()); }
  std::uint64_t arch_hash() const { return fnv1a64(canonical_text(true)); }

  // Architectural keys whose values differ.
  std::vector<std::string> arch_mismatches(const RunConfig& other) const {
    std::vector<std::string> out;
    for (const auto& k : config_schema())
      if (k.arch && get(k.name) != other.get(k.name)) out.push_back(k.name);
    return out;
  }

  ModelConfig model() const {
    ModelConfig m;
    const auto size = static_cast<std::size_t>(get_int("image_size"));
    const auto dim = static_cast<std::size_t>(get_int("embed_dim"));
    const auto depth = static_cast<std::size_t>(get_int("depth"));
    m.encoder.image_h = m.encoder.image_w = size;
    m.encoder.channels = 3;
    m.encoder.patch = static_cast<std::size_t>(get_int("patch"));
    m.encoder.vision_dim = m.encoder.text_dim = m.encoder.joint_dim = dim;
    m.encoder.vision_depth = m.encoder.text_depth = depth;
    m.encoder.heads = static_cast<std::size_t>(get_int("heads"));
    m.encoder.ffn_mult = static_cast<std::size_t>(get_int("ffn_mult"));
    m.encoder.max_prompt_len = static_cast<std::size_t>(get_int("max_prompt_len"));
    m.adapters = get_bool("adapters");
    m.adapter_depth = static_cast<std::size_t>(get_int("adapter_depth"));
    m.shared_dim = static_cast<std::size_t>(get_int("shared_dim"));
    m.attn_dim = static_cast<std::size_t>(get_int("attn_dim"));
    const auto& o = get("order");
    m.order = o == "vision_first" ? InteractionOrder::VisionFirst
              : o == "text_first" ? InteractionOrder::TextFirst
                                  : InteractionOrder::OneWay;
    const auto& mech = get("mechanism");
    m.adapter_init.mechanism = mech == "difference" ? ConfidenceMechanism::Difference
                               : mech == "scaling"  ? ConfidenceMechanism::Scaling
                                                    : ConfidenceMechanism::None;
    m.adapter_init.beta = get_real("beta");
    m.adapter_init.gate_logit = get_real("gate_logit");
    m.adapter_init.proj_std = get_real("proj_std");
    m.adapter_init.up_scale = get_real("up_scale");
    m.upscale_blocks = static_cast<std::size_t>(get_int("upscale_blocks"));
    m.logit_scale_init = get_real("logit_scale_init");
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = static_cast<std::size_t>(get_int("epochs"));
    t.lr = get_real("lr");
    t.batch = static_cast<std::size_t>(get_int("batch"));
    t.adam = {get_real("adam_beta1"), get_real("adam_beta2"), get_real("adam_eps"), get_real("weight_decay")};
    t.clip_norm = get_real("clip_norm");
    t.seed = static_cast<std::uint64_t>(get_int("seed"));
    t.sample_values = get_bool("value_sampling");
    t.max_steps = static_cast<std::size_t>(get_int("max_steps"));
    t.loss.lambda_seg = get_real("lambda_seg");
    t.loss.lambda_softcon = get_real("lambda_softcon");
    t.loss.tau = get_real("tau");
    t.loss.dice_smooth = get_real("dice_smooth");
    t.loss.pooling = get("pooling") == "cls" ? ContrastivePooling::Cls : ContrastivePooling::Average;
    t.loss.logit_scale_init = get_real("logit_scale_init");
    return t;
  }

  // The deterministic variant is evaluated with mean values, as it was trained.
  EvalOptions eval() const {
    EvalOptions e;
    e.mc_samples = static_cast<std::size_t>(get_int("mc_samples"));
    e.seed = static_cast<std::uint64_t>(get_int("eval_seed"));
    e.mode = get_bool("value_sampling") ? Mode::InferSample : Mode::InferMean;
    e.nsd_tol = get_real("nsd_tol");
    e.brier_region = get("brier_region") == "full" ? BrierRegion::Full : BrierRegion::ForegroundBand;
    e.brier_band = get_real("brier_band");
    e.spearman = get("spearman_pooling") == "image" ? SpearmanPooling::Image : SpearmanPooling::Pixel;
    return e;
  }

  // Cross-key checks; also runs the model's own validation.
  void validate() const {
    ModelConfig m = model();
    m.encoder.vocab_size = 3;  // the corpus supplies the real size
    m.validate();
    train().validate();
  }

 private:
  static std::string canonical(const KeySpec& k, const std::string& v) {
    auto bad = [&](const std::string& why) {
      return ConfigError("config key '" + k.name + "': " + why + " (got '" + v + "')");
    };
    switch (k.kind) {
      case KeyKind::Bool:
        if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
        if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
        throw bad("expected a boolean");
      case KeyKind::Choice:
        if (std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
          std::string all;
          for (const auto& c : k.choices) all += (all.empty() ? "" : "|") + c;
          throw bad("expected one of " + all);
        }
        return v;
      case KeyKind::Int: {
        long long x = 0;
        const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
        if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) throw bad("expected an integer");
        if (static_cast<double>(x) < k.lo || static_cast<double>(x) > k.hi)
          throw bad("out of range [" + fmt(k.lo, 0) + ", " + fmt(k.hi, 0) + "]");
        return std::to_string(x);
      }
      case KeyKind::Real: {
        double x = 0;
        std::size_t used = 0;
        try {
          x = std::stod(v, &used);
        } catch (const std::exception&) {
          throw bad("expected a number");
        }
        if (used != v.size() || !std::isfinite(x)) throw bad("expected a number");
        if (x < k.lo || x > k.hi) throw bad("out of range [" + fmt(k.lo, 6) + ", " + fmt(k.hi, 6) + "]");
        char buf[64];
        const auto r = std::to_chars(buf, buf + sizeof buf, x);  // shortest round-trip form
        return std::string(buf, r.ptr);
      }
    }
    return v;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace pvlseg
