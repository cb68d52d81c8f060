// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pimi/checkpoint.hpp"
#include "pimi/common.hpp"
#include "pimi/dataset.hpp"
#include "pimi/retrieval.hpp"
#include "pimi/run_config.hpp"
#include "pimi/synthetic.hpp"
#include "pimi/training.hpp"

namespace pimi {

/// Command-line flags that override values from the config file.
struct CommandOverrides {
  std::optional<std::string> data;
  std::optional<std::uint64_t> seed;
  std::optional<std::vector<std::size_t>> topn;
  bool dump_users = false;
};

namespace detail {

inline void apply_overrides(RunConfig& cfg, const CommandOverrides& ov) {
  if (ov.data) cfg.data = *ov.data;
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.topn) cfg.topn = *ov.topn;
}

inline void require_data_file(const RunConfig& cfg) {
  if (cfg.data.empty())
    throw ConfigError("data: no interaction log configured (set data= or pass --data)");
  if (!std::filesystem::exists(cfg.data))
    throw ConfigError("data: file not found: " + cfg.data);
}

inline void require_topn_fits(const std::vector<std::size_t>& topn, std::size_t vocab) {
  for (std::size_t n : topn)
    if (n > vocab)
      throw ConfigError("topn: " + std::to_string(n) + " exceeds the vocabulary of " +
                        std::to_string(vocab) + " items after filtering");
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

inline void write_metrics(std::ostream& out, const MetricsReport& report) {
  out << "users " << report.user_count << '\n';
  out << "skipped " << report.skipped << '\n';
  for (const auto& [n, m] : report.at) {
    out << "recall@" << n << ' ' << format_double(m.recall) << '\n';
    out << "ndcg@" << n << ' ' << format_double(m.ndcg) << '\n';
    out << "hitrate@" << n << ' ' << format_double(m.hit_rate) << '\n';
  }
}

inline void write_train_summary(std::ostream& out, const TrainReport& report,
                                const MetricsReport& test_metrics) {
  out << "iterations " << report.iterations_run << '\n';
  out << "best_iteration " << report.best_iteration << '\n';
  out << "validation_topn " << report.validation_topn << '\n';
  out << "best_validation_recall " << format_double(report.best_recall) << '\n';
  out << "stopped_early " << (report.stopped_early ? "true" : "false") << '\n';
  write_metrics(out, test_metrics);
}

struct PipelineData {
  SplitLogs split;
  std::size_t vocab_size = 0;
};

inline PipelineData run_data_pipeline(const RunConfig& cfg, std::ostream& diag) {
  InteractionLog raw = ingest(cfg.data);
  diag << "ingested " << raw.users.size() << " users, " << raw.vocab_size() << " items, "
       << raw.total_events() << " events (" << raw.dropped_rows << " rows dropped)\n";
  InteractionLog filtered = filter_min_count(raw, cfg.min_count);
  diag << "after min_count=" << cfg.min_count << ": " << filtered.users.size() << " users, "
       << filtered.vocab_size() << " items, " << filtered.total_events() << " events\n";
  PipelineData data;
  data.vocab_size = filtered.vocab_size();
  data.split = split_users(filtered, SplitRatios{}, cfg.seed);
  diag << "split users: " << data.split.train.users.size() << " train, "
       << data.split.valid.users.size() << " valid, " << data.split.test.users.size()
       << " test\n";
  return data;
}

/// Trains one model and writes the per-run artifacts into `dir`:
/// config snapshot, split CSVs, vocabulary, progress log, checkpoint,
/// summary, and the optional per-user dump.
inline MetricsReport run_training(const RunConfig& cfg, const PipelineData& data,
                                  const std::filesystem::path& dir, bool dump_users,
                                  std::ostream& diag) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream snapshot = open_out(dir / "config.txt");
    write_run_config(snapshot, cfg);
  }
  write_vocab(data.split.train, (dir / "vocab.tsv").string());
  write_csv(data.split.train, (dir / "train.csv").string());
  write_csv(data.split.valid, (dir / "valid.csv").string());
  write_csv(data.split.test, (dir / "test.csv").string());

  TrainResult result;
  {
    std::ofstream progress = open_out(dir / "train.log");
    result = train(data.split.train, data.split.valid, cfg.model_config(), cfg.train_config(),
                   cfg.ablation(), &progress);
  }
  diag << "trained " << result.report.iterations_run << " iterations, best at "
       << result.report.best_iteration << "\n";
  save_checkpoint((dir / "checkpoint.pimi").string(), result.params, cfg.model_config(),
                  data.vocab_size, cfg.ablation());

  std::optional<std::ofstream> dump;
  if (dump_users) dump.emplace(open_out(dir / "dump.jsonl"));
  MetricsReport test_metrics =
      evaluate(result.params, cfg.model_config(), data.split.test, cfg.topn, cfg.eval_ratio,
               dump ? &*dump : nullptr, cfg.ablation());
  std::ofstream summary = open_out(dir / "train_summary.txt");
  write_train_summary(summary, result.report, test_metrics);
  return test_metrics;
}

}  // namespace detail

inline int cmd_train(const std::string& config_path, const std::string& out_dir,
                     const CommandOverrides& overrides, std::ostream& results,
                     std::ostream& diag) {
  RunConfig cfg = load_run_config(config_path);
  detail::apply_overrides(cfg, overrides);
  cfg.validate();
  detail::require_data_file(cfg);

  detail::PipelineData data = detail::run_data_pipeline(cfg, diag);
  detail::require_topn_fits(cfg.topn, data.vocab_size);

  detail::run_training(cfg, data, out_dir, overrides.dump_users, diag);

  std::ifstream summary(std::filesystem::path(out_dir) / "train_summary.txt");
  results << summary.rdbuf();
  return 0;
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::vector<std::size_t>& topn,
                    const std::optional<std::string>& out_dir, bool dump_users,
                    std::ostream& results, std::ostream& diag) {
  if (topn.empty()) throw ConfigError("topn: need at least one value");
  CheckpointData ckpt = load_checkpoint(checkpoint_path);

  const std::filesystem::path run_dir = std::filesystem::path(checkpoint_path).parent_path();
  const std::filesystem::path vocab_path = run_dir / "vocab.tsv";
  if (!std::filesystem::exists(vocab_path))
    throw ConfigError("vocab: expected " + vocab_path.string() + " next to the checkpoint");
  Vocabulary vocab = read_vocab(vocab_path.string());
  if (vocab.items.size() - 1 != ckpt.vocab_size)
    throw CheckpointError("checkpoint: vocabulary size mismatch: checkpoint has " +
                          std::to_string(ckpt.vocab_size) + " items, vocab file has " +
                          std::to_string(vocab.items.size() - 1));

  if (!std::filesystem::exists(data_path))
    throw ConfigError("data: file not found: " + data_path);
  InteractionLog raw = ingest(data_path);
  InteractionLog log = apply_vocab(raw, vocab);
  if (log.dropped_rows > raw.dropped_rows)
    diag << (log.dropped_rows - raw.dropped_rows) << " events dropped (unknown items)\n";
  detail::require_topn_fits(topn, log.vocab_size());

  const std::filesystem::path target = out_dir ? std::filesystem::path(*out_dir) : run_dir;
  std::filesystem::create_directories(target);
  std::optional<std::ofstream> dump;
  if (dump_users) dump.emplace(detail::open_out(target / "eval_dump.jsonl"));

  MetricsReport report =
      evaluate(ckpt.params, ckpt.config, log, topn, 0.8, dump ? &*dump : nullptr, ckpt.ablation);
  std::ofstream metrics = detail::open_out(target / "eval_metrics.txt");
  detail::write_metrics(metrics, report);
  detail::write_metrics(results, report);
  return 0;
}

inline int cmd_synth(const std::string& config_path, const std::string& out_path,
                     const CommandOverrides& overrides, std::ostream& results,
                     std::ostream& diag) {
  RunConfig cfg = load_run_config(config_path);
  detail::apply_overrides(cfg, overrides);
  SyntheticData data = generate_synthetic(cfg.synth_config());
  write_csv(data.log, out_path);
  const std::string labels_path = out_path + ".labels.tsv";
  write_labels(data, labels_path);
  diag << "wrote " << out_path << " and " << labels_path << "\n";
  results << "users " << data.log.users.size() << '\n';
  results << "items " << data.log.vocab_size() << '\n';
  results << "events " << data.log.total_events() << '\n';
  return 0;
}

inline int cmd_ablate(const std::string& config_path, const std::string& out_dir,
                      const CommandOverrides& overrides, std::ostream& results,
                      std::ostream& diag) {
  RunConfig cfg = load_run_config(config_path);
  detail::apply_overrides(cfg, overrides);
  cfg.validate();
  detail::require_data_file(cfg);

  detail::PipelineData data = detail::run_data_pipeline(cfg, diag);
  detail::require_topn_fits(cfg.topn, data.vocab_size);

  struct Variant {
    const char* name;
    bool no_periodicity, no_interactivity, no_central;
  };
  const Variant variants[] = {
      {"full", false, false, false},
      {"no_periodicity", true, false, false},
      {"no_interactivity", false, true, false},
      {"no_central_node", false, false, true},
  };

  std::ostringstream table;
  table << "variant";
  for (std::size_t n : cfg.topn)
    table << " recall@" << n << " ndcg@" << n << " hitrate@" << n;
  table << '\n';

  for (const Variant& v : variants) {
    RunConfig variant_cfg = cfg;
    variant_cfg.disable_periodicity = v.no_periodicity;
    variant_cfg.disable_interactivity = v.no_interactivity;
    variant_cfg.disable_central_node = v.no_central;
    diag << "training variant " << v.name << "\n";
    MetricsReport metrics =
        detail::run_training(variant_cfg, data, std::filesystem::path(out_dir) / v.name,
                             overrides.dump_users, diag);
    table << v.name;
    for (std::size_t n : cfg.topn) {
      const MetricsAtN& m = metrics.at.at(n);
      table << ' ' << detail::format_double(m.recall) << ' ' << detail::format_double(m.ndcg)
            << ' ' << detail::format_double(m.hit_rate);
    }
    table << '\n';
  }

  std::ofstream table_file = detail::open_out(std::filesystem::path(out_dir) / "ablation_table.txt");
  table_file << table.str();
  results << table.str();
  return 0;
}

/// Maps a thrown error onto the command exit code contract. Configuration
/// and input problems share code 2; training divergence is 3; checkpoint
/// integrity failures are 4; anything else is an internal error.
inline int run_command(const std::function<int()>& action, std::ostream& diag) {
  try {
    return action();
  } catch (const DivergenceError& e) {
    diag << "error: " << e.what() << '\n';
    return 3;
  } catch (const CheckpointError& e) {
    diag << "error: " << e.what() << '\n';
    return 4;
  } catch (const ConfigError& e) {
    diag << "error: " << e.what() << '\n';
    return 2;
  } catch (const InputError& e) {
    diag << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    diag << "internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace pimi
