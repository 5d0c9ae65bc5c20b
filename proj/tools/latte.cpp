// Command-line driver: make-toy, pseudo-label, describe, train, eval, ablate, hash.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "latte/commands.hpp"

namespace {

using namespace latte;

// Exit codes, also listed in the README.
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitMissing = 3;
constexpr int kExitBackend = 4;

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoull(item.substr(0, dash)), hi = std::stoull(item.substr(dash + 1));
        for (auto s = lo; s <= hi; ++s) out.push_back(s);
      } else {
        out.push_back(std::stoull(item));
      }
    } catch (const std::exception&) {
      throw ConfigError("bad seed list '" + csv + "'");
    }
  }
  if (out.empty()) throw ConfigError("seed list is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised CLIP fine-tuning with generated descriptions and class prototypes"};
  app.require_subcommand(1);
  std::string run_dir = default_run_dir().string();
  app.add_option("--run-dir", run_dir, "Run directory (default: $LATTE_RUN_DIR or ./run)");

  // make-toy
  auto* mk = app.add_subcommand("make-toy", "Generate the synthetic benchmark dataset and its zero-shot encoder");
  ToyConfig toy;
  std::string mk_out;
  mk->add_option("--classes", toy.classes, "Number of classes")->check(CLI::Range(2, 32));
  mk->add_option("--input-dim", toy.input_dim, "Raw image feature dimension");
  mk->add_option("--embed-dim", toy.embed_dim, "Embedding dimension");
  mk->add_option("--train-per-class", toy.train_per_class);
  mk->add_option("--val-per-class", toy.val_per_class);
  mk->add_option("--test-per-class", toy.test_per_class);
  mk->add_option("--spread", toy.cluster_spread, "Gaussian spread around class means");
  mk->add_option("--noise", toy.caption_noise, "Stub caption noise level")->check(CLI::Range(0.0, 1.0));
  mk->add_option("--zs-accuracy", toy.zs_target_accuracy, "Target zero-shot train accuracy")->check(CLI::Range(0.0, 1.0));
  mk->add_option("--seed", toy.seed);
  mk->add_option("--out", mk_out, "Output directory (default: <run-dir>/dataset)");

  // pseudo-label
  auto* pl = app.add_subcommand("pseudo-label", "Compute and store zero-shot pseudo-labels for the training pool");
  std::string pl_dataset, pl_pretrained, pl_out;
  bool pl_force = false;
  pl->add_option("--dataset", pl_dataset, "Dataset directory (default: <run-dir>/dataset)");
  pl->add_option("--pretrained", pl_pretrained, "Zero-shot encoder (default: <dataset>/pretrained.json)");
  pl->add_option("--out", pl_out, "Label table (default: <run-dir>/czs.jsonl)");
  pl->add_flag("--force", pl_force, "Recompute even if the table exists");

  // describe
  auto* ds = app.add_subcommand("describe", "Generate class, image and group descriptions into the caption cache");
  DescribeCliOptions dopt;
  std::string d_dataset, d_pretrained, d_cache, d_domain, d_kinds = "class,image,group";
  std::optional<std::size_t> d_correct;
  ds->add_option("--dataset", d_dataset);
  ds->add_option("--pretrained", d_pretrained);
  ds->add_option("--domain", d_domain, "Domain word used in prompts (default: dataset domain)");
  ds->add_option("--kinds", d_kinds, "Comma-separated subset of class,image,group");
  ds->add_option("--group-size", dopt.group_size)->check(CLI::IsMember({2, 4, 8, 16}));
  ds->add_option("--workers", dopt.workers)->check(CLI::PositiveNumber);
  ds->add_option("--provider", dopt.provider)->check(CLI::IsMember({"stub", "external"}));
  ds->add_option("--seed", dopt.seed);
  ds->add_option("--cache", d_cache, "Caption cache (default: <run-dir>/captions.jsonl)");
  ds->add_option("--correct-in-group", d_correct, "Build groups by ground truth with this many same-class images");

  // train
  auto* tr = app.add_subcommand("train", "Fine-tune the encoders (resumes automatically from the run directory)");
  std::string t_dataset, t_pretrained, t_config, t_resume;
  std::optional<std::uint64_t> t_seed;
  tr->add_option("--dataset", t_dataset);
  tr->add_option("--pretrained", t_pretrained);
  tr->add_option("--config", t_config, "Train config JSON (default: <dataset>/train_config.json, else built-in)");
  tr->add_option("--resume", t_resume, "Trainer state to resume from");
  tr->add_option("--seed", t_seed, "Override the config seed");

  // eval
  auto* ev = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on a dataset split");
  std::string e_checkpoint, e_dataset, e_split = "test";
  bool e_json = false;
  ev->add_option("--checkpoint", e_checkpoint, "Checkpoint directory (default: <run-dir>/checkpoint)");
  ev->add_option("--dataset", e_dataset);
  ev->add_option("--split", e_split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--json", e_json, "Print the report as JSON instead of a table");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run an ablation grid on the toy benchmark");
  std::vector<std::string> a_presets, a_axes;
  std::string a_seeds = "0-4", a_out;
  ab->add_option("--preset", a_presets, "descriptions|components|losses|group-size|correct-in-group|data-fraction");
  ab->add_option("--axis", a_axes, "Custom axis name=v1,v2 (repeatable)");
  ab->add_option("--seeds", a_seeds, "Seed list, e.g. 0-4 or 1,3,5");
  ab->add_option("--out", a_out, "Write cells as JSON here");

  // hash
  auto* hs = app.add_subcommand("hash", "Canonical content hash of a run directory (timestamps excluded)");
  bool h_list = false;
  hs->add_flag("--list", h_list, "Also print per-file hashes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kExitUsage;
  }

  const RunDir run{run_dir};
  auto or_default = [](const std::string& v, const fs::path& d) { return v.empty() ? d : fs::path(v); };
  try {
    if (mk->parsed()) {
      RunLock lock(run);
      cmd_make_toy({toy, or_default(mk_out, run.dataset())}, std::cout);
    } else if (pl->parsed()) {
      RunLock lock(run);
      ensure_zs_labels({or_default(pl_dataset, run.dataset()), pl_pretrained, or_default(pl_out, run.zs_labels()), pl_force},
                       std::cout);
    } else if (ds->parsed()) {
      RunLock lock(run);
      dopt.dataset = or_default(d_dataset, run.dataset());
      dopt.pretrained = d_pretrained;
      dopt.cache = or_default(d_cache, run.captions());
      dopt.zs_labels = run.zs_labels();
      dopt.snapshot = run.describe_config();
      if (!d_domain.empty()) dopt.domain = d_domain;
      dopt.kinds = parse_kinds(d_kinds);
      dopt.correct_in_group = d_correct;
      cmd_describe(dopt, std::cout);
    } else if (tr->parsed()) {
      RunLock lock(run);
      TrainCliOptions topt;
      topt.dataset = or_default(t_dataset, run.dataset());
      topt.pretrained = t_pretrained;
      if (!t_config.empty()) topt.config = t_config;
      if (!t_resume.empty()) topt.resume = t_resume;
      topt.seed = t_seed;
      topt.run = run;
      cmd_train(topt, std::cout);
    } else if (ev->parsed()) {
      RunLock lock(run);
      const Split split = split_from_string(e_split);
      std::ostringstream table;
      const EvalReport r =
          cmd_eval({or_default(e_checkpoint, run.checkpoint()), or_default(e_dataset, run.dataset()), split,
                    run.eval_report(split)},
                   table);
      std::cout << (e_json ? eval_to_json(r).dump(2) + "\n" : table.str());
    } else if (ab->parsed()) {
      AblationSpec spec;
      spec.seeds = parse_seeds(a_seeds);
      for (const auto& p : a_presets)
        for (auto& a : ablation_preset(p)) spec.axes.push_back(std::move(a));
      for (const auto& a : a_axes) spec.axes.push_back(parse_axis(a));
      if (spec.axes.empty()) throw ConfigError("ablate needs at least one --preset or --axis");
      const auto cells = ablation_matrix(spec, [](const AblationCell& c) {
        std::cout << ablation_table({c}) << std::flush;
      });
      if (!a_out.empty()) write_json(a_out, ablation_to_json(cells));
    } else if (hs->parsed()) {
      if (!fs::is_directory(run.root)) throw MissingArtifact("run directory " + run.root.string(), "make-toy");
      std::cout << canonical_run_hash(run.root, h_list ? &std::cout : nullptr) << '\n';
    }
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissing;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const BackendUnavailable& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBackend;
  } catch (const GenerationFailed& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return 0;
}
