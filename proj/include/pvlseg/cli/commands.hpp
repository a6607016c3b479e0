#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "pvlseg/cli/config.hpp"
#include "pvlseg/data/synth.hpp"
#include "pvlseg/eval/report.hpp"
#include "pvlseg/train/checkpoint.hpp"

namespace pvlseg {

using TrainModel = PvlSegModel<float>;

// ------------------------------------------------------------------ gen

inline std::vector<PromptRow> cmd_gen(const std::string& out, const CorpusOptions& opt, bool force,
                                      std::ostream& log) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(out, ec) && !fs::is_empty(out, ec) && !force)
    throw ArgumentError("output directory " + out + " is not empty (use --force to overwrite)");
  const auto rows = generate_corpus(out, opt);
  std::map<std::string, std::size_t> per_split;
  std::set<std::size_t> ids;
  for (const auto& r : rows) {
    ++per_split[r.split + "/" + r.style];
    ids.insert(r.id);
  }
  log << "wrote " << ids.size() << " image/mask pairs and " << rows.size() << " prompts to " << out << "\n";
  for (const auto& [k, n] : per_split) log << "  " << k << ": " << n << "\n";
  return rows;
}

// ---------------------------------------------------------------- train

inline Vocabulary corpus_vocabulary(const std::vector<Sample>& train) {
  std::vector<std::string> texts;
  for (const auto& s : train) texts.push_back(s.text);
  return Vocabulary::build(texts);
}

inline TrainModel build_model(const RunConfig& cfg, Vocabulary vocab) {
  Rng rng(static_cast<std::uint64_t>(cfg.get_int("seed")));
  return TrainModel::init(cfg.model(), std::move(vocab), rng);
}

inline void check_image_size(const RunConfig& cfg, const std::vector<Sample>& data, const std::string& what) {
  const auto size = static_cast<std::size_t>(cfg.get_int("image_size"));
  for (const auto& s : data)
    if (s.image.h != size || s.image.w != size)
      throw InputError(what + " image " + s.id + " is " + std::to_string(s.image.h) + "x" +
                       std::to_string(s.image.w) + ", config expects " + std::to_string(size));
}

struct TrainOutputs {
  std::string checkpoint, loss_log;
  std::vector<LossLogEntry> log;
};

inline void write_model_checkpoint(const std::string& path, const TrainModel& m, const Adam<float>* opt,
                                   const RunConfig& cfg) {
  write_checkpoint(path, make_checkpoint(m, opt, cfg.canonical_text(), cfg.hash()));
}

// Trains on the `train` split of `data` and writes checkpoint.bin,
// loss_log.tsv and config.txt under `out`.
inline TrainOutputs cmd_train(const RunConfig& cfg, const std::string& data, const std::string& out,
                              std::ostream& log) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto train_set = load_split(data, "train");
  if (train_set.empty()) throw InputError(data + ": no training samples (split 'train', style 'original')");
  check_image_size(cfg, train_set, "training");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (!fs::is_directory(out)) throw IoError("cannot create output directory " + out);

  TrainModel model = build_model(cfg, corpus_vocabulary(train_set));
  model.vocab.save((fs::path(out) / "vocab.txt").string());  // copy; the checkpoint carries its own
  const TrainConfig tc = cfg.train();
  Adam<float> opt = make_optimizer(model, tc);
  const std::string hash = hash_hex(cfg.hash());
  {
    std::ofstream c(fs::path(out) / "config.txt");
    c << "# config_hash: " << hash << "\n" << cfg.canonical_text();
  }
  TrainOutputs res;
  res.checkpoint = (fs::path(out) / "checkpoint.bin").string();
  res.loss_log = (fs::path(out) / "loss_log.tsv").string();
  std::ofstream ll(res.loss_log);
  if (!ll) throw IoError("cannot write " + res.loss_log);
  ll << "# config_hash: " << hash << "\nstep\tlr\tseg\tcon\ttotal\n";

  const std::size_t per_epoch = steps_per_epoch(train_set.size(), tc.batch);
  const auto every = static_cast<std::size_t>(cfg.get_int("checkpoint_every"));
  log << "training " << model.parameter_count() << " parameters on " << train_set.size() << " samples, "
      << tc.epochs << " epochs x " << per_epoch << " steps (config " << hash << ")\n";
  train(model, opt, train_set, tc, [&](const LossLogEntry& e) {
    ll << e.step << '\t' << fmt(e.lr, 8) << '\t' << fmt(e.seg, 6) << '\t' << fmt(e.con, 6) << '\t' << fmt(e.total, 6)
       << '\n';
    res.log.push_back(e);
    if ((e.step + 1) % per_epoch == 0) {
      const std::size_t epoch = (e.step + 1) / per_epoch;
      log << "epoch " << epoch << " step " << e.step + 1 << " loss " << fmt(e.total) << " (seg " << fmt(e.seg)
          << ", con " << fmt(e.con) << ")\n";
      if (every && epoch % every == 0 && epoch != tc.epochs) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_e%04zu.bin", epoch);
        write_model_checkpoint((fs::path(out) / name).string(), model, &opt, cfg);
      }
    }
  });
  write_model_checkpoint(res.checkpoint, model, &opt, cfg);
  log << "wrote " << res.checkpoint << "\n";
  return res;
}

// ------------------------------------------------------------- checkpoint

struct LoadedModel {
  RunConfig cfg;  // as stored at training time
  std::uint64_t hash = 0;
  TrainModel model;
};

inline LoadedModel load_model(const std::string& path) {
  const CheckpointFile ck = read_checkpoint(path);
  LoadedModel lm{RunConfig::parse(ck.at("meta.config").as_text(), path + ":meta.config"), ck.config_hash, {}};
  lm.model = build_model(lm.cfg, vocabulary_from(ck));
  restore(ck, lm.model);
  return lm;
}

// Applies an evaluation config on top of the stored one; architectural keys
// must agree.
inline RunConfig merge_eval_config(const LoadedModel& lm, const RunConfig* given,
                                   const std::vector<std::string>& overrides) {
  RunConfig cfg = given ? *given : lm.cfg;
  for (const auto& o : overrides) cfg.set_assignment(o, "--set: ");
  const auto diff = lm.cfg.arch_mismatches(cfg);
  if (!diff.empty()) {
    std::string keys;
    for (const auto& k : diff) keys += (keys.empty() ? "" : ", ") + k + " (checkpoint " + lm.cfg.get(k) + ", config " + cfg.get(k) + ")";
    throw ConfigError("checkpoint architecture does not match the config: " + keys);
  }
  return cfg;
}

// ----------------------------------------------------------------- eval

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s + ",") {
    if (c == ',') {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return out;
}

// Evaluates each requested split under every caption style it carries (or
// the requested styles). Missing splits are reported and skipped.
inline MetricReport cmd_eval(const LoadedModel& lm, const RunConfig& cfg, const std::string& data,
                             const std::vector<std::string>& splits, const std::vector<std::string>& styles,
                             std::ostream& warn) {
  const auto rows = read_prompts(data);
  MetricReport report;
  report.config_hash = lm.hash;
  const EvalOptions opt = cfg.eval();
  report.mc_samples = opt.mc_samples;
  std::size_t found = 0;
  for (const auto& split : splits) {
    std::vector<std::string> st = styles;
    if (st.empty()) {
      std::set<std::string> seen;
      st.push_back("original");
      seen.insert("original");
      for (const auto& r : rows)
        if (r.split == split && seen.insert(r.style).second) st.push_back(r.style);
    }
    bool any = false;
    for (const auto& style : st) {
      const auto samples = load_split(data, split, style);
      if (samples.empty()) continue;
      check_image_size(lm.cfg, samples, "evaluation");
      any = true;
      report.splits.push_back(evaluate_split(lm.model, samples, opt, split, style));
    }
    if (any) ++found;
    else warn << "warning: split '" << split << "' not found in " << data << ", skipped\n";
  }
  if (!found) throw InputError("none of the requested splits exist in " + data);
  report.add_harmonic_pairs();
  return report;
}

inline void write_report(const MetricReport& r, const std::string& prefix) {
  std::ofstream t(prefix + ".txt"), s(prefix + ".tsv");
  if (!t || !s) throw IoError("cannot write report " + prefix + ".{txt,tsv}");
  t << report_text(r);
  s << report_tsv(r);
}

// ---------------------------------------------------------------- infer

struct InferOutputs {
  UncertaintyResult result;
  std::size_t unknown_tokens = 0, tokens = 0;
};

inline InferOutputs cmd_infer(const LoadedModel& lm, const Image<double>& image, const std::string& prompt,
                              const std::string& prefix, std::size_t n, std::uint64_t seed, std::ostream& warn) {
  const auto size = static_cast<std::size_t>(lm.cfg.get_int("image_size"));
  if (image.h != size || image.w != size)
    throw InputError("image is " + std::to_string(image.h) + "x" + std::to_string(image.w) + ", model expects " +
                     std::to_string(size) + "x" + std::to_string(size));
  InferOutputs out;
  out.tokens = tokenize(prompt).size();
  lm.model.vocab.encode(prompt, lm.model.cfg.encoder.max_prompt_len, &out.unknown_tokens);
  if (out.tokens == 0 || out.unknown_tokens == out.tokens)
    warn << "warning: no prompt token is in the vocabulary; the prompt reduces to [UNK]/[EOS]\n";
  const Mode mode = lm.cfg.get_bool("value_sampling") ? Mode::InferSample : Mode::InferMean;
  out.result = std::move(mc_infer(lm.model, {&image}, {prompt}, n, seed, mode).front());
  const auto& u = out.result;
  auto [pmin, pmax] = std::minmax_element(u.mean_prob.px.begin(), u.mean_prob.px.end());
  auto [emin, emax] = std::minmax_element(u.entropy.px.begin(), u.entropy.px.end());
  write_mask(prefix + "_mask.pgm", u.pred);
  write_pgm(prefix + "_prob.pgm", to_bytes(u.mean_prob, *pmin, *pmax));
  write_pgm(prefix + "_entropy.pgm", to_bytes(u.entropy, *emin, *emax));
  std::ofstream s(prefix + "_scale.txt");
  if (!s) throw IoError("cannot write " + prefix + "_scale.txt");
  s << "config_hash: " << hash_hex(lm.hash) << "\nprompt: " << prompt << "\nmc_samples: " << n << "\nseed: " << seed
    << "\nprob_min: " << fmt(*pmin, 9) << "\nprob_max: " << fmt(*pmax, 9) << "\nentropy_min: " << fmt(*emin, 9)
    << "\nentropy_max: " << fmt(*emax, 9) << "\nunknown_tokens: " << out.unknown_tokens << "\n";
  return out;
}

}  // namespace pvlseg
