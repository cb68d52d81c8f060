// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pimi/common.hpp"

namespace pimi {

/// One interaction after vocabulary mapping: dense item index + epoch seconds.
struct Event {
  std::size_t item = 0;
  std::int64_t timestamp = 0;
};

/// Interaction histories keyed by user id, sharing one item vocabulary.
/// Item index 0 is reserved for padding and never appears in an event.
struct InteractionLog {
  std::map<std::string, std::vector<Event>> users;
  std::vector<std::string> items;  // index -> id; items[0] is the padding slot
  std::unordered_map<std::string, std::size_t> item_index;
  std::size_t dropped_rows = 0;

  std::size_t vocab_size() const { return items.empty() ? 0 : items.size() - 1; }

  std::size_t total_events() const {
    std::size_t n = 0;
    for (const auto& [id, events] : users) n += events.size();
    return n;
  }
};

/// Fixed-length, left-padded window over a user history. Real items occupy
/// the trailing slots in temporal order; padded slots carry item 0, a
/// timestamp sentinel of -1 and a false mask bit.
struct FixedSequence {
  std::vector<std::size_t> item_ids;
  std::vector<std::int64_t> timestamps;
  std::vector<std::uint8_t> mask;
  std::size_t length = 0;
};

struct TrainingSample {
  FixedSequence input;
  std::size_t target_item = 0;
};

/// Pairwise day counts between sequence positions, clamped at `threshold`.
/// Entries touching a padded slot equal the threshold (maximal separation).
struct IntervalMatrix {
  std::size_t n = 0;
  std::size_t threshold = 0;
  std::vector<std::size_t> entries;  // row-major n*n

  std::size_t at(std::size_t a, std::size_t b) const { return entries[a * n + b]; }
};

struct EvalCase {
  FixedSequence input;
  std::set<std::size_t> ground_truth;
};

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

inline bool parse_timestamp(std::string_view text, std::int64_t& out) {
  if (text.empty()) return false;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && out >= 0;
}

}  // namespace detail

/// Reads a `user_id,item_id,timestamp` CSV. Rows with the wrong field count,
/// empty ids, or unparsable/negative timestamps are dropped and counted.
/// Per-user lists come out time-ascending with ties in file order.
inline InteractionLog ingest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open interaction log: " + path);
  std::string line;
  if (!std::getline(in, line)) throw InputError(path + ": line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "user_id,item_id,timestamp")
    throw InputError(path + ": line 1: expected header 'user_id,item_id,timestamp', got '" +
                     line + "'");

  InteractionLog log;
  log.items.push_back("");  // padding slot

  // Keep original file order per user so the stable sort below breaks
  // timestamp ties by input order.
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = detail::split_fields(line, ',');
    std::int64_t ts = 0;
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() ||
        !detail::parse_timestamp(fields[2], ts)) {
      ++log.dropped_rows;
      continue;
    }
    const std::string item_id(fields[1]);
    auto [it, inserted] = log.item_index.try_emplace(item_id, log.items.size());
    if (inserted) log.items.push_back(item_id);
    log.users[std::string(fields[0])].push_back(Event{it->second, ts});
  }
  for (auto& [id, events] : log.users)
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
  return log;
}

/// Iteratively removes users and items with fewer than `min_count`
/// interactions until nothing changes, then reindexes the vocabulary
/// densely (surviving items keep their relative order).
inline InteractionLog filter_min_count(const InteractionLog& log, std::size_t min_count) {
  if (min_count < 1) throw ConfigError("filter_min_count: min_count must be >= 1");
  std::map<std::string, std::vector<Event>> users = log.users;
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::size_t> item_count(log.items.size(), 0);
    for (const auto& [id, events] : users)
      for (const Event& e : events) ++item_count[e.item];
    bool any_bad_item = false;
    for (std::size_t i = 1; i < item_count.size(); ++i)
      if (item_count[i] > 0 && item_count[i] < min_count) any_bad_item = true;
    if (any_bad_item) {
      for (auto& [id, events] : users) {
        auto keep_end = std::remove_if(events.begin(), events.end(), [&](const Event& e) {
          return item_count[e.item] < min_count;
        });
        if (keep_end != events.end()) {
          events.erase(keep_end, events.end());
          changed = true;
        }
      }
    }
    for (auto it = users.begin(); it != users.end();) {
      if (it->second.size() < min_count) {
        it = users.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }

  InteractionLog out;
  out.users = std::move(users);
  out.items.push_back("");
  std::vector<std::size_t> remap(log.items.size(), 0);
  std::vector<bool> used(log.items.size(), false);
  for (const auto& [id, events] : out.users)
    for (const Event& e : events) used[e.item] = true;
  for (std::size_t i = 1; i < log.items.size(); ++i) {
    if (!used[i]) continue;
    remap[i] = out.items.size();
    out.item_index.emplace(log.items[i], out.items.size());
    out.items.push_back(log.items[i]);
  }
  for (auto& [id, events] : out.users)
    for (Event& e : events) e.item = remap[e.item];
  return out;
}

struct SplitRatios {
  std::size_t train = 8;
  std::size_t valid = 1;
  std::size_t test = 1;
};

struct SplitLogs {
  InteractionLog train, valid, test;
};

/// Seeded shuffle of user ids followed by a largest-remainder proportional
/// partition. All three outputs share the input's item vocabulary. Each
/// bucket receives at least one user.
inline SplitLogs split_users(const InteractionLog& log, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train == 0 || ratios.valid == 0 || ratios.test == 0)
    throw ConfigError("split_users: ratios must be positive");
  if (log.users.size() < 3)
    throw InputError("split_users: need at least 3 users, have " +
                     std::to_string(log.users.size()));
  std::vector<std::string> ids;
  ids.reserve(log.users.size());
  for (const auto& [id, events] : log.users) ids.push_back(id);
  Rng rng(seed);
  rng.shuffle(ids);

  const double total = static_cast<double>(ratios.train + ratios.valid + ratios.test);
  const std::size_t u = ids.size();
  const std::array<double, 3> quota = {u * ratios.train / total, u * ratios.valid / total,
                                       u * ratios.test / total};
  std::array<std::size_t, 3> count{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    count[i] = static_cast<std::size_t>(quota[i]);
    assigned += count[i];
  }
  while (assigned < u) {  // largest remainder, ties to the earlier bucket
    int best = 0;
    double best_rem = -1.0;
    for (int i = 0; i < 3; ++i) {
      const double rem = quota[i] - static_cast<double>(count[i]);
      if (rem > best_rem + 1e-12) {
        best_rem = rem;
        best = i;
      }
    }
    ++count[best];
    ++assigned;
  }
  for (int i = 0; i < 3; ++i) {
    if (count[i] > 0) continue;
    int donor = 0;
    for (int j = 1; j < 3; ++j)
      if (count[j] > count[donor]) donor = j;
    --count[donor];
    ++count[i];
  }

  SplitLogs out;
  InteractionLog* parts[3] = {&out.train, &out.valid, &out.test};
  std::size_t cursor = 0;
  for (int i = 0; i < 3; ++i) {
    parts[i]->items = log.items;
    parts[i]->item_index = log.item_index;
    for (std::size_t j = 0; j < count[i]; ++j, ++cursor)
      parts[i]->users.emplace(ids[cursor], log.users.at(ids[cursor]));
  }
  return out;
}

/// Trailing window of at most n events, left-padded to exactly n slots.
inline FixedSequence make_fixed_sequence(const std::vector<Event>& events, std::size_t n) {
  if (n < 1) throw ConfigError("make_fixed_sequence: window length must be >= 1");
  FixedSequence seq;
  const std::size_t real = std::min(events.size(), n);
  const std::size_t pad = n - real;
  seq.item_ids.assign(n, 0);
  seq.timestamps.assign(n, -1);
  seq.mask.assign(n, 0);
  seq.length = real;
  const std::size_t first = events.size() - real;
  for (std::size_t i = 0; i < real; ++i) {
    seq.item_ids[pad + i] = events[first + i].item;
    seq.timestamps[pad + i] = events[first + i].timestamp;
    seq.mask[pad + i] = 1;
  }
  return seq;
}

/// One sample per predictable position: for each user with >= 2 events and
/// each k in [1, |S|-1], input = up to n events ending at position k-1
/// (left-padded) and target = event k's item.
inline std::vector<TrainingSample> build_training_samples(const InteractionLog& log,
                                                          std::size_t n) {
  if (n < 1) throw ConfigError("build_training_samples: window length must be >= 1");
  std::vector<TrainingSample> samples;
  for (const auto& [id, events] : log.users) {
    if (events.size() < 2) continue;
    for (std::size_t k = 1; k < events.size(); ++k) {
      TrainingSample s;
      const std::vector<Event> context(events.begin(), events.begin() + k);
      s.input = make_fixed_sequence(context, n);
      s.target_item = events[k].item;
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

/// Pairwise whole-day separations: real-real entries are
/// min(p, floor(|dt| / 86400)); every entry touching a padded slot is p.
inline IntervalMatrix interval_matrix(const FixedSequence& seq, std::size_t p) {
  if (p < 1) throw ConfigError("interval_matrix: threshold must be >= 1");
  IntervalMatrix m;
  m.n = seq.item_ids.size();
  m.threshold = p;
  m.entries.assign(m.n * m.n, p);
  for (std::size_t a = 0; a < m.n; ++a) {
    if (!seq.mask[a]) continue;
    for (std::size_t b = 0; b < m.n; ++b) {
      if (!seq.mask[b]) continue;
      const std::int64_t dt = seq.timestamps[a] >= seq.timestamps[b]
                                  ? seq.timestamps[a] - seq.timestamps[b]
                                  : seq.timestamps[b] - seq.timestamps[a];
      const std::size_t days = static_cast<std::size_t>(dt / 86400);
      m.entries[a * m.n + b] = std::min(p, days);
    }
  }
  return m;
}

/// 80/20-style holdout for one user: input window = last n of the first
/// ceil(ratio * len) events, ground truth = item set of the remainder.
/// Returns nothing when the remainder is empty (caller counts the skip).
inline std::optional<EvalCase> eval_split(const std::vector<Event>& history, double ratio,
                                          std::size_t n) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("eval_split: ratio must be in (0,1)");
  if (history.empty()) return std::nullopt;
  const std::size_t len = history.size();
  const std::size_t prefix =
      static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(len) - 1e-9));
  if (prefix == 0 || prefix >= len) return std::nullopt;  // empty prefix or remainder
  EvalCase c;
  const std::vector<Event> head(history.begin(), history.begin() + prefix);
  c.input = make_fixed_sequence(head, n);
  for (std::size_t i = prefix; i < len; ++i) c.ground_truth.insert(history[i].item);
  return c;
}

// ---------------------------------------------------------------------------
// Plain-text side files
// ---------------------------------------------------------------------------

inline void write_csv(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write interaction log: " + path);
  out << "user_id,item_id,timestamp\n";
  for (const auto& [id, events] : log.users)
    for (const Event& e : events)
      out << id << ',' << log.items[e.item] << ',' << e.timestamp << '\n';
  if (!out) throw InputError("failed while writing interaction log: " + path);
}

/// One `item_id<TAB>index` line per real item so separate processes agree
/// on dense indices.
inline void write_vocab(const InteractionLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write vocabulary: " + path);
  for (std::size_t i = 1; i < log.items.size(); ++i) out << log.items[i] << '\t' << i << '\n';
  if (!out) throw InputError("failed while writing vocabulary: " + path);
}

struct Vocabulary {
  std::vector<std::string> items;  // [0] = padding slot
  std::unordered_map<std::string, std::size_t> item_index;
};

inline Vocabulary read_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocabulary: " + path);
  Vocabulary v;
  v.items.push_back("");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw InputError(path + ": line " + std::to_string(line_no) + ": expected 'id<TAB>index'");
    const std::string id = line.substr(0, tab);
    std::size_t index = 0;
    const std::string idx_text = line.substr(tab + 1);
    const auto res =
        std::from_chars(idx_text.data(), idx_text.data() + idx_text.size(), index);
    if (res.ec != std::errc() || res.ptr != idx_text.data() + idx_text.size() || index == 0)
      throw InputError(path + ": line " + std::to_string(line_no) + ": bad index '" + idx_text +
                       "'");
    if (index != v.items.size())
      throw InputError(path + ": line " + std::to_string(line_no) +
                       ": indices must be dense and ascending");
    v.item_index.emplace(id, index);
    v.items.push_back(id);
  }
  return v;
}

/// Re-keys a raw CSV log onto an existing vocabulary (items unseen in the
/// vocabulary are dropped and counted), so evaluation agrees with the
/// training-time indices.
inline InteractionLog apply_vocab(const InteractionLog& raw, const Vocabulary& vocab) {
  InteractionLog out;
  out.items = vocab.items;
  out.item_index = vocab.item_index;
  out.dropped_rows = raw.dropped_rows;
  for (const auto& [id, events] : raw.users) {
    std::vector<Event> mapped;
    for (const Event& e : events) {
      const auto it = vocab.item_index.find(raw.items[e.item]);
      if (it == vocab.item_index.end()) {
        ++out.dropped_rows;
        continue;
      }
      mapped.push_back(Event{it->second, e.timestamp});
    }
    if (!mapped.empty()) out.users.emplace(id, std::move(mapped));
  }
  return out;
}

}  // namespace pimi
