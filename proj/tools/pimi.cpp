// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pimi/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"pimi: periodicity-aware multi-interest sequential recommender"};
  app.require_subcommand(1);

  std::string config_path;
  std::string checkpoint_path;
  std::string data_path;
  std::string out_path;
  std::uint64_t seed = 0;
  std::vector<std::size_t> topn;
  bool dump_users = false;

  CLI::App* train = app.add_subcommand("train", "train a model from an interaction log");
  train->add_option("--config", config_path, "run configuration file")->required();
  train->add_option("--data", data_path, "interaction CSV, overrides the config");
  train->add_option("--out", out_path, "run directory")->default_val("pimi_run");
  CLI::Option* train_seed = train->add_option("--seed", seed, "overrides the config seed");
  CLI::Option* train_topn =
      train->add_option("--topn", topn, "evaluation cutoffs")->delimiter(',');
  train->add_flag("--dump-users", dump_users, "write per-user retrieval records");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on an interaction log");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval->add_option("--data", data_path, "interaction CSV")->required();
  eval->add_option("--topn", topn, "evaluation cutoffs")->delimiter(',');
  CLI::Option* eval_out = eval->add_option("--out", out_path, "output directory");
  eval->add_flag("--dump-users", dump_users, "write per-user retrieval records");

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic interaction log");
  synth->add_option("--config", config_path, "generator configuration file")->required();
  synth->add_option("--out", out_path, "output CSV path")->required();
  CLI::Option* synth_seed = synth->add_option("--seed", seed, "overrides the config seed");

  CLI::App* ablate = app.add_subcommand("ablate", "train and compare ablated model variants");
  ablate->add_option("--config", config_path, "run configuration file")->required();
  ablate->add_option("--data", data_path, "interaction CSV, overrides the config");
  ablate->add_option("--out", out_path, "output directory")->default_val("pimi_ablation");
  CLI::Option* ablate_seed = ablate->add_option("--seed", seed, "overrides the config seed");
  CLI::Option* ablate_topn =
      ablate->add_option("--topn", topn, "evaluation cutoffs")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage problems share the configuration exit code
  }

  pimi::CommandOverrides overrides;
  overrides.dump_users = dump_users;

  if (train->parsed()) {
    if (!data_path.empty()) overrides.data = data_path;
    if (train_seed->count() > 0) overrides.seed = seed;
    if (train_topn->count() > 0) overrides.topn = topn;
    return pimi::run_command(
        [&] { return pimi::cmd_train(config_path, out_path, overrides, std::cout, std::cerr); },
        std::cerr);
  }
  if (eval->parsed()) {
    const std::vector<std::size_t> cutoffs = topn.empty() ? std::vector<std::size_t>{20, 50} : topn;
    std::optional<std::string> out_dir;
    if (eval_out->count() > 0) out_dir = out_path;
    return pimi::run_command(
        [&] {
          return pimi::cmd_eval(checkpoint_path, data_path, cutoffs, out_dir, dump_users,
                                std::cout, std::cerr);
        },
        std::cerr);
  }
  if (synth->parsed()) {
    if (synth_seed->count() > 0) overrides.seed = seed;
    return pimi::run_command(
        [&] { return pimi::cmd_synth(config_path, out_path, overrides, std::cout, std::cerr); },
        std::cerr);
  }
  if (ablate->parsed()) {
    if (!data_path.empty()) overrides.data = data_path;
    if (ablate_seed->count() > 0) overrides.seed = seed;
    if (ablate_topn->count() > 0) overrides.topn = topn;
    return pimi::run_command(
        [&] { return pimi::cmd_ablate(config_path, out_path, overrides, std::cout, std::cerr); },
        std::cerr);
  }
  return 2;
}
