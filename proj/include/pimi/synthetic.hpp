// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/dataset.hpp"

namespace pimi {

/// Generator settings for planted-interest interaction logs. Each cluster
/// has its own repeat period; a user's assigned clusters run concurrently
/// and the merged stream always takes the cluster whose clock is earliest,
/// so short-period clusters contribute proportionally more events and
/// per-cluster periodicity is recoverable from the timestamps.
struct SynthConfig {
  std::size_t users = 100;
  std::size_t clusters = 4;
  std::size_t items_per_cluster = 50;
  std::size_t events_per_user = 40;
  std::size_t events_jitter = 0;  // per-user event count varies uniformly by +/- this
  std::vector<double> period_days;
  double jitter_days = 1.0;
  std::size_t clusters_per_user = 2;
  // When positive, each user draws items from a personal subset of this many
  // items per assigned cluster instead of the whole cluster. Users then keep
  // returning to the same items, so future purchases overlap the history.
  std::size_t favorites_per_cluster = 0;
  std::uint64_t seed = 1;
};

struct SyntheticData {
  InteractionLog log;
  std::vector<std::size_t> item_cluster;  // dense item index -> cluster; [0] unused
  std::map<std::string, std::vector<std::size_t>> user_clusters;
};

inline void validate(const SynthConfig& c) {
  if (c.clusters == 0) throw ConfigError("synthetic: cluster count must be positive");
  if (c.users == 0) throw ConfigError("synthetic: user count must be positive");
  if (c.items_per_cluster == 0) throw ConfigError("synthetic: items per cluster must be positive");
  if (c.events_per_user == 0) throw ConfigError("synthetic: events per user must be positive");
  if (c.events_jitter >= c.events_per_user)
    throw ConfigError("synthetic: event jitter must stay below events per user");
  if (c.period_days.size() != c.clusters)
    throw ConfigError("synthetic: need exactly one period per cluster, got " +
                      std::to_string(c.period_days.size()) + " for " +
                      std::to_string(c.clusters) + " clusters");
  for (double p : c.period_days)
    if (p <= 0.0) throw ConfigError("synthetic: periods must be positive");
  if (c.jitter_days < 0.0) throw ConfigError("synthetic: jitter must be non-negative");
  if (c.clusters_per_user == 0 || c.clusters_per_user > c.clusters)
    throw ConfigError("synthetic: clusters per user must be in [1, clusters]");
  if (c.favorites_per_cluster > c.items_per_cluster)
    throw ConfigError("synthetic: favorites per cluster cannot exceed items per cluster");
}

inline SyntheticData generate_synthetic(const SynthConfig& config) {
  validate(config);
  constexpr std::int64_t kDay = 86400;
  constexpr std::int64_t kBase = 1'600'000'000;  // arbitrary fixed epoch origin

  SyntheticData data;
  data.log.items.push_back("");
  data.item_cluster.push_back(0);
  for (std::size_t c = 0; c < config.clusters; ++c) {
    for (std::size_t j = 0; j < config.items_per_cluster; ++j) {
      const std::string id = "c" + std::to_string(c) + "_i" + std::to_string(j);
      data.log.item_index.emplace(id, data.log.items.size());
      data.log.items.push_back(id);
      data.item_cluster.push_back(c);
    }
  }

  Rng rng(config.seed);
  std::vector<std::size_t> cluster_order(config.clusters);
  for (std::size_t u = 0; u < config.users; ++u) {
    std::string uid = std::to_string(u);
    uid = "u" + std::string(6 - std::min<std::size_t>(6, uid.size()), '0') + uid;

    std::iota(cluster_order.begin(), cluster_order.end(), 0);
    rng.shuffle(cluster_order);
    std::vector<std::size_t> assigned(cluster_order.begin(),
                                      cluster_order.begin() + config.clusters_per_user);
    std::sort(assigned.begin(), assigned.end());
    data.user_clusters.emplace(uid, assigned);

    // Each assigned cluster advances its own clock by (period +/- jitter)
    // per event, starting at a random phase inside one period. The merged
    // stream is a renewal process: every event comes from the assigned
    // cluster whose clock is currently earliest.
    std::vector<double> next_time(assigned.size());
    for (std::size_t a = 0; a < assigned.size(); ++a)
      next_time[a] = static_cast<double>(kBase) +
                     rng.uniform(0.0, config.period_days[assigned[a]]) * kDay;

    // With favorites enabled, the user owns a fixed item subset per assigned
    // cluster and every event draws uniformly from it.
    std::vector<std::vector<std::size_t>> favorites(assigned.size());
    if (config.favorites_per_cluster > 0) {
      std::vector<std::size_t> pool(config.items_per_cluster);
      for (std::size_t a = 0; a < assigned.size(); ++a) {
        std::iota(pool.begin(), pool.end(), 0);
        rng.shuffle(pool);
        favorites[a].assign(pool.begin(), pool.begin() + config.favorites_per_cluster);
      }
    }

    std::size_t count = config.events_per_user;
    if (config.events_jitter > 0) {
      const std::int64_t lo = static_cast<std::int64_t>(config.events_per_user) -
                              static_cast<std::int64_t>(config.events_jitter);
      const std::int64_t hi = static_cast<std::int64_t>(config.events_per_user) +
                              static_cast<std::int64_t>(config.events_jitter);
      count = static_cast<std::size_t>(rng.uniform_int(lo, hi));
    }

    std::vector<Event> events;
    events.reserve(count);
    for (std::size_t e = 0; e < count; ++e) {
      std::size_t pick = 0;
      for (std::size_t a = 1; a < assigned.size(); ++a)
        if (next_time[a] < next_time[pick]) pick = a;
      const std::size_t cluster = assigned[pick];
      std::size_t offset;
      if (config.favorites_per_cluster > 0) {
        offset = favorites[pick][rng.uniform_index(config.favorites_per_cluster)];
      } else {
        offset = rng.uniform_index(config.items_per_cluster);
      }
      const std::size_t item = 1 + cluster * config.items_per_cluster + offset;
      events.push_back(Event{item, static_cast<std::int64_t>(next_time[pick])});
      double step = config.period_days[cluster] * kDay;
      if (config.jitter_days > 0.0)
        step += rng.uniform(-config.jitter_days, config.jitter_days) * kDay;
      next_time[pick] += std::max(step, 3600.0);
    }
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
    data.log.users.emplace(std::move(uid), std::move(events));
  }
  return data;
}

/// Sidecar with the planted structure: item -> cluster rows, then
/// user -> assigned-cluster rows.
inline void write_labels(const SyntheticData& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write label sidecar: " + path);
  for (std::size_t i = 1; i < data.log.items.size(); ++i)
    out << "item\t" << data.log.items[i] << '\t' << data.item_cluster[i] << '\n';
  for (const auto& [uid, clusters] : data.user_clusters) {
    out << "user\t" << uid << '\t';
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      if (i > 0) out << ',';
      out << clusters[i];
    }
    out << '\n';
  }
  if (!out) throw InputError("failed while writing label sidecar: " + path);
}

}  // namespace pimi
