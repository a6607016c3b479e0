// pvlseg: corpus generation, training, evaluation and inference.
#include <CLI11.hpp>

#include <iostream>

#include "pvlseg/cli/commands.hpp"

using namespace pvlseg;

namespace {

constexpr int kOk = 0, kRuntime = 1, kUsage = 2;

RunConfig config_from(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::load(path);
  for (const auto& o : overrides) cfg.set_assignment(o, "--set: ");
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-conditioned segmentation with probabilistic vision-language adapters"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "write a synthetic prompt/segmentation corpus");
  std::string gen_out, gen_style = "original";
  CorpusOptions co;
  bool force = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", co.seed, "corpus seed");
  gen->add_option("--n-train", co.n_train, "training images")->check(CLI::PositiveNumber);
  gen->add_option("--n-test", co.n_test, "test images (per test split)")->check(CLI::PositiveNumber);
  gen->add_flag("--ood", co.ood, "add the shifted test_ood split");
  gen->add_option("--style", gen_style, "extra caption style for test splits")
      ->check(CLI::IsMember({"original", "underdescriptive", "overdescriptive", "contradictory", "missing_location"}));
  gen->add_flag("--force", force, "write into a non-empty directory");

  // train
  auto* tr = app.add_subcommand("train", "train a model on the train split");
  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_set;
  tr->add_option("--config", tr_config, "key=value config file")->check(CLI::ExistingFile);
  tr->add_option("--set", tr_set, "override one key (key=value), repeatable");
  tr->add_option("--data", tr_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", tr_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on test splits");
  std::string ev_ckpt, ev_data, ev_report = "report", ev_config, ev_splits = "test,test_ood", ev_styles;
  std::vector<std::string> ev_set;
  std::size_t ev_mc = 0;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--splits", ev_splits, "comma-separated split names");
  ev->add_option("--styles", ev_styles, "comma-separated caption styles (default: all present)");
  ev->add_option("--mc-samples", ev_mc, "stochastic passes per image (default from config: 30)")
      ->check(CLI::PositiveNumber);
  ev->add_option("--report", ev_report, "report prefix; writes <prefix>.txt and <prefix>.tsv");
  ev->add_option("--config", ev_config, "config file; architectural keys must match the checkpoint")
      ->check(CLI::ExistingFile);
  ev->add_option("--set", ev_set, "override one key (key=value), repeatable");

  // infer
  auto* inf = app.add_subcommand("infer", "segment one image for one prompt");
  std::string in_ckpt, in_image, in_prompt, in_prefix;
  std::size_t in_mc = 30;
  std::uint64_t in_seed = 0;
  inf->add_option("--ckpt", in_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--image", in_image, "8-bit P5 PGM image")->required()->check(CLI::ExistingFile);
  inf->add_option("--prompt", in_prompt, "text prompt")->required();
  inf->add_option("--out-prefix", in_prefix, "output prefix")->required();
  inf->add_option("--mc-samples", in_mc, "stochastic passes")->check(CLI::PositiveNumber);
  inf->add_option("--seed", in_seed, "pass seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) {
      co.extra_style = parse_style(gen_style);
      cmd_gen(gen_out, co, force, std::cout);
    } else if (*tr) {
      cmd_train(config_from(tr_config, tr_set), tr_data, tr_out, std::cout);
    } else if (*ev) {
      const LoadedModel lm = load_model(ev_ckpt);
      RunConfig given;
      if (!ev_config.empty()) given = RunConfig::load(ev_config);
      auto overrides = ev_set;
      if (ev_mc) overrides.push_back("mc_samples=" + std::to_string(ev_mc));
      const RunConfig cfg = merge_eval_config(lm, ev_config.empty() ? nullptr : &given, overrides);
      const auto report = cmd_eval(lm, cfg, ev_data, split_list(ev_splits), split_list(ev_styles), std::cerr);
      write_report(report, ev_report);
      for (const auto& s : report.splits)
        std::cout << s.split << "/" << s.style << ": DSC " << fmt(s.dsc, 2) << "  NSD " << fmt(s.nsd, 2)
                  << "  Brier " << fmt(s.brier, 2) << "  Spearman " << (s.spearman ? fmt(*s.spearman, 2) : "n/a")
                  << "\n";
      for (const auto& h : report.harmonic)
        std::cout << "HM(" << h.id_split << ", " << h.ood_split << "): DSC " << fmt(h.dsc, 2) << "  NSD "
                  << fmt(h.nsd, 2) << "\n";
      std::cout << "wrote " << ev_report << ".txt and " << ev_report << ".tsv\n";
    } else if (*inf) {
      const LoadedModel lm = load_model(in_ckpt);
      const auto img = from_bytes(read_pgm(in_image));
      cmd_infer(lm, img, in_prompt, in_prefix, in_mc, in_seed, std::cerr);
      std::cout << "wrote " << in_prefix << "_{mask,prob,entropy}.pgm and " << in_prefix << "_scale.txt\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
