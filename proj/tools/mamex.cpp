// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// `mamex` command-line entry point: synth | split | train | eval | ablate.
#include <CLI11.hpp>

#include "mamex/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MAMEX: dual-level mixture-of-experts engine for multimodal item "
               "cold-start recommendation"};
  app.require_subcommand(1);

  // --- synth ---
  mamex::cli::SynthOptions synth;
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  synth_cmd->add_option("--n-users", synth.spec.n_users, "number of users");
  synth_cmd->add_option("--n-items", synth.spec.n_items, "number of items");
  synth_cmd->add_option("--dim", synth.spec.dim, "feature dimension");
  synth_cmd->add_option("--text-signal", synth.spec.text_signal,
                        "latent signal weight in text features");
  synth_cmd->add_option("--image-signal", synth.spec.image_signal,
                        "latent signal weight in image features");
  synth_cmd->add_option("--interactions-per-user", synth.spec.interactions_per_user,
                        "interactions per user");
  synth_cmd->add_option("--seed", synth.spec.seed, "root seed");
  synth_cmd->add_option("--out-dir", synth.out_dir, "output directory")->required();
  synth_cmd->add_flag("--force", synth.force, "overwrite a non-empty output directory");

  // --- split ---
  mamex::cli::SplitOptions split;
  CLI::App* split_cmd =
      app.add_subcommand("split", "perform the 8:1:1 cold-start split and write audit files");
  split_cmd->add_option("--data-dir", split.data_dir, "dataset directory")->required();
  split_cmd->add_option("--out-dir", split.out_dir, "output directory (default: data dir)");
  split_cmd->add_option("--seed", split.seed, "split seed");

  // --- train ---
  mamex::cli::TrainOptions train;
  std::uint64_t train_seed = 0;
  std::string train_variant;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model and evaluate on test-cold");
  train_cmd->add_option("--config", train.config_path, "config file (key = value lines)");
  train_cmd->add_option("--data-dir", train.data_dir, "dataset directory")->required();
  train_cmd->add_option("--out-dir", train.out_dir, "output directory")->required();
  CLI::Option* seed_opt = train_cmd->add_option("--seed", train_seed, "override config seed");
  CLI::Option* variant_opt =
      train_cmd->add_option("--variant", train_variant,
                            "override config variant (full|no_moe|no_align|no_mmf|"
                            "joint_router|mod_specific_router)");

  // --- eval ---
  mamex::cli::EvalOptions eval;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a cold partition");
  eval_cmd->add_option("--checkpoint", eval.checkpoint_path, "checkpoint file")->required();
  eval_cmd->add_option("--data-dir", eval.data_dir, "dataset directory")->required();
  eval_cmd->add_option("--partition", eval.partition, "valid|test");
  eval_cmd->add_option("--out-dir", eval.out_dir, "optional directory for report.tsv");

  // --- ablate ---
  mamex::cli::AblateOptions ablate;
  std::string ablate_variants;
  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "train all variants over several seeds and tabulate");
  ablate_cmd->add_option("--config", ablate.config_path, "base config file");
  ablate_cmd->add_option("--data-dir", ablate.data_dir, "dataset directory")->required();
  ablate_cmd->add_option("--out-dir", ablate.out_dir, "output directory")->required();
  ablate_cmd->add_option("--seeds", ablate.seeds, "number of seeds per variant");
  ablate_cmd->add_option("--variants", ablate_variants,
                         "comma-separated variant list (default: all)");

  CLI11_PARSE(app, argc, argv);

  if (synth_cmd->parsed()) return mamex::cli::guarded([&] { mamex::cli::run_synth(synth); });
  if (split_cmd->parsed()) return mamex::cli::guarded([&] { mamex::cli::run_split(split); });
  if (train_cmd->parsed()) {
    if (*seed_opt) train.seed = train_seed;
    if (*variant_opt) train.variant = train_variant;
    return mamex::cli::guarded([&] { mamex::cli::run_train(train); });
  }
  if (eval_cmd->parsed()) return mamex::cli::guarded([&] { mamex::cli::run_eval(eval); });
  if (ablate_cmd->parsed()) {
    if (!ablate_variants.empty()) {
      std::size_t start = 0;
      while (start <= ablate_variants.size()) {
        std::size_t comma = ablate_variants.find(',', start);
        if (comma == std::string::npos) comma = ablate_variants.size();
        const std::string name = ablate_variants.substr(start, comma - start);
        if (!name.empty()) ablate.variants.push_back(name);
        start = comma + 1;
      }
    }
    return mamex::cli::guarded([&] { mamex::cli::run_ablate(ablate); });
  }
  return 0;
}
