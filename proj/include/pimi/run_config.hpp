// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/model.hpp"
#include "pimi/synthetic.hpp"
#include "pimi/training.hpp"

namespace pimi {

/// One flat key=value namespace: model and optimizer settings, dataset
/// handling, ablation switches, and synthetic-generator settings. Commands
/// read the subset they need; a snapshot of the resolved values replays the
/// run exactly.
struct RunConfig {
  std::string data;  // interaction CSV path; required by train and ablate

  std::size_t dim = 64;
  std::size_t seq_len = 20;
  std::size_t interests = 4;
  std::size_t layers = 3;
  std::size_t interval_threshold = 64;
  std::size_t heads = 2;
  double dropout_rate = 0.2;

  std::size_t batch_size = 128;
  std::size_t negatives = 10;
  std::size_t max_iterations = 1000;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  double learning_rate = 0.001;
  std::uint64_t seed = 1;

  std::size_t min_count = 5;
  double eval_ratio = 0.8;
  std::vector<std::size_t> topn = {20, 50};

  bool disable_periodicity = false;
  bool disable_interactivity = false;
  bool disable_central_node = false;

  std::size_t users = 100;
  std::size_t clusters = 4;
  std::size_t items_per_cluster = 50;
  std::size_t events_per_user = 40;
  std::size_t events_jitter = 0;
  std::vector<double> period_days = {3.0, 14.0, 60.0, 180.0};
  double jitter_days = 1.0;
  std::size_t clusters_per_user = 2;
  std::size_t favorites_per_cluster = 0;

  ModelConfig model_config() const {
    ModelConfig m;
    m.dim = dim;
    m.seq_len = seq_len;
    m.interests = interests;
    m.layers = layers;
    m.interval_threshold = interval_threshold;
    m.heads = heads;
    m.dropout_rate = dropout_rate;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.batch_size = batch_size;
    t.negatives = negatives;
    t.max_iterations = max_iterations;
    t.eval_every = eval_every;
    t.patience = patience;
    t.learning_rate = learning_rate;
    t.seed = seed;
    return t;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.users = users;
    s.clusters = clusters;
    s.items_per_cluster = items_per_cluster;
    s.events_per_user = events_per_user;
    s.events_jitter = events_jitter;
    s.period_days = period_days;
    s.jitter_days = jitter_days;
    s.clusters_per_user = clusters_per_user;
    s.favorites_per_cluster = favorites_per_cluster;
    s.seed = seed;
    return s;
  }

  Ablation ablation() const {
    Ablation a;
    a.no_periodicity = disable_periodicity;
    a.no_interactivity = disable_interactivity;
    a.no_central = disable_central_node;
    return a;
  }

  void validate() const {
    model_config().validate();
    train_config().validate();
    if (min_count < 1) throw ConfigError("min_count: must be >= 1");
    if (eval_ratio <= 0.0 || eval_ratio >= 1.0) throw ConfigError("eval_ratio: must be in (0,1)");
    if (topn.empty()) throw ConfigError("topn: need at least one value");
    for (std::size_t n : topn)
      if (n == 0) throw ConfigError("topn: values must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigError key_error(std::size_t line, const std::string& key, const std::string& what) {
  return ConfigError("config line " + std::to_string(line) + ": key '" + key + "': " + what);
}

inline std::size_t parse_size(std::size_t line, const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw key_error(line, key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

inline std::uint64_t parse_u64(std::size_t line, const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw key_error(line, key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(std::size_t line, const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw key_error(line, key, "expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(std::size_t line, const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw key_error(line, key, "expected 'true' or 'false', got '" + v + "'");
}

template <typename T, typename Parse>
std::vector<T> parse_list(std::size_t line, const std::string& key, const std::string& v,
                          Parse parse) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(parse(line, key, trim(part)));
  if (out.empty()) throw key_error(line, key, "expected a comma-separated list, got '" + v + "'");
  return out;
}

/// Shortest decimal text that parses back to exactly the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw ContractError("format_double: conversion failed");
  return std::string(buf, p);
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& in, const std::string& source = "config") {
  RunConfig cfg;
  std::vector<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = detail::trim(line);
    if (text.empty() || text[0] == '#') continue;
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + " line " + std::to_string(lineno) +
                        ": expected key=value, got '" + text + "'");
    const std::string key = detail::trim(text.substr(0, eq));
    const std::string value = detail::trim(text.substr(eq + 1));
    if (key.empty())
      throw ConfigError(source + " line " + std::to_string(lineno) + ": empty key");
    for (const std::string& s : seen)
      if (s == key)
        throw ConfigError(source + " line " + std::to_string(lineno) + ": duplicate key '" +
                          key + "'");
    seen.push_back(key);

    if (key == "data") {
      cfg.data = value;
    } else if (key == "dim") {
      cfg.dim = detail::parse_size(lineno, key, value);
    } else if (key == "seq_len") {
      cfg.seq_len = detail::parse_size(lineno, key, value);
    } else if (key == "interests") {
      cfg.interests = detail::parse_size(lineno, key, value);
    } else if (key == "layers") {
      cfg.layers = detail::parse_size(lineno, key, value);
    } else if (key == "interval_threshold") {
      cfg.interval_threshold = detail::parse_size(lineno, key, value);
    } else if (key == "heads") {
      cfg.heads = detail::parse_size(lineno, key, value);
    } else if (key == "dropout_rate") {
      cfg.dropout_rate = detail::parse_double(lineno, key, value);
    } else if (key == "batch_size") {
      cfg.batch_size = detail::parse_size(lineno, key, value);
    } else if (key == "negatives") {
      cfg.negatives = detail::parse_size(lineno, key, value);
    } else if (key == "max_iterations") {
      cfg.max_iterations = detail::parse_size(lineno, key, value);
    } else if (key == "eval_every") {
      cfg.eval_every = detail::parse_size(lineno, key, value);
    } else if (key == "patience") {
      cfg.patience = detail::parse_size(lineno, key, value);
    } else if (key == "learning_rate") {
      cfg.learning_rate = detail::parse_double(lineno, key, value);
    } else if (key == "seed") {
      cfg.seed = detail::parse_u64(lineno, key, value);
    } else if (key == "min_count") {
      cfg.min_count = detail::parse_size(lineno, key, value);
    } else if (key == "eval_ratio") {
      cfg.eval_ratio = detail::parse_double(lineno, key, value);
    } else if (key == "topn") {
      cfg.topn = detail::parse_list<std::size_t>(lineno, key, value, detail::parse_size);
    } else if (key == "disable_periodicity") {
      cfg.disable_periodicity = detail::parse_bool(lineno, key, value);
    } else if (key == "disable_interactivity") {
      cfg.disable_interactivity = detail::parse_bool(lineno, key, value);
    } else if (key == "disable_central_node") {
      cfg.disable_central_node = detail::parse_bool(lineno, key, value);
    } else if (key == "users") {
      cfg.users = detail::parse_size(lineno, key, value);
    } else if (key == "clusters") {
      cfg.clusters = detail::parse_size(lineno, key, value);
    } else if (key == "items_per_cluster") {
      cfg.items_per_cluster = detail::parse_size(lineno, key, value);
    } else if (key == "events_per_user") {
      cfg.events_per_user = detail::parse_size(lineno, key, value);
    } else if (key == "events_jitter") {
      cfg.events_jitter = detail::parse_size(lineno, key, value);
    } else if (key == "period_days") {
      cfg.period_days = detail::parse_list<double>(lineno, key, value, detail::parse_double);
    } else if (key == "jitter_days") {
      cfg.jitter_days = detail::parse_double(lineno, key, value);
    } else if (key == "clusters_per_user") {
      cfg.clusters_per_user = detail::parse_size(lineno, key, value);
    } else if (key == "favorites_per_cluster") {
      cfg.favorites_per_cluster = detail::parse_size(lineno, key, value);
    } else {
      throw ConfigError(source + " line " + std::to_string(lineno) + ": unknown key '" + key +
                        "'");
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_run_config(in, path);
}

/// Writes every resolved value in a fixed order. Parsing the output yields
/// an identical configuration.
inline void write_run_config(std::ostream& out, const RunConfig& cfg) {
  auto list_sizes = [](const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i > 0) s += ',';
      s += std::to_string(v[i]);
    }
    return s;
  };
  auto list_doubles = [](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i > 0) s += ',';
      s += detail::format_double(v[i]);
    }
    return s;
  };
  out << "data=" << cfg.data << '\n';
  out << "dim=" << cfg.dim << '\n';
  out << "seq_len=" << cfg.seq_len << '\n';
  out << "interests=" << cfg.interests << '\n';
  out << "layers=" << cfg.layers << '\n';
  out << "interval_threshold=" << cfg.interval_threshold << '\n';
  out << "heads=" << cfg.heads << '\n';
  out << "dropout_rate=" << detail::format_double(cfg.dropout_rate) << '\n';
  out << "batch_size=" << cfg.batch_size << '\n';
  out << "negatives=" << cfg.negatives << '\n';
  out << "max_iterations=" << cfg.max_iterations << '\n';
  out << "eval_every=" << cfg.eval_every << '\n';
  out << "patience=" << cfg.patience << '\n';
  out << "learning_rate=" << detail::format_double(cfg.learning_rate) << '\n';
  out << "seed=" << cfg.seed << '\n';
  out << "min_count=" << cfg.min_count << '\n';
  out << "eval_ratio=" << detail::format_double(cfg.eval_ratio) << '\n';
  out << "topn=" << list_sizes(cfg.topn) << '\n';
  out << "disable_periodicity=" << (cfg.disable_periodicity ? "true" : "false") << '\n';
  out << "disable_interactivity=" << (cfg.disable_interactivity ? "true" : "false") << '\n';
  out << "disable_central_node=" << (cfg.disable_central_node ? "true" : "false") << '\n';
  out << "users=" << cfg.users << '\n';
  out << "clusters=" << cfg.clusters << '\n';
  out << "items_per_cluster=" << cfg.items_per_cluster << '\n';
  out << "events_per_user=" << cfg.events_per_user << '\n';
  out << "events_jitter=" << cfg.events_jitter << '\n';
  out << "period_days=" << list_doubles(cfg.period_days) << '\n';
  out << "jitter_days=" << detail::format_double(cfg.jitter_days) << '\n';
  out << "clusters_per_user=" << cfg.clusters_per_user << '\n';
  out << "favorites_per_cluster=" << cfg.favorites_per_cluster << '\n';
}

}  // namespace pimi
