// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/dataset.hpp"
#include "pimi/model.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

struct ScoredItem {
  std::size_t item = 0;
  double score = 0.0;
};

/// Per-interest exact top-N lists, each sorted by score descending with
/// ties broken by smaller item index.
struct CandidateSet {
  std::vector<std::vector<ScoredItem>> per_interest;
};

namespace detail {

inline bool scored_before(const ScoredItem& a, const ScoredItem& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.item < b.item;
}

inline double row_dot(const Tensor& table, std::size_t row, const Tensor& vectors,
                      std::size_t vec_row) {
  const std::size_t d = table.dim(1);
  const double* a = table.vals().data() + row * d;
  const double* b = vectors.vals().data() + vec_row * d;
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

}  // namespace detail

/// Exact maximum-inner-product retrieval by full scan over the real item
/// rows (row 0 is the padding slot and never retrieved).
inline CandidateSet retrieve_candidates(const InterestMatrix& interests, const Tensor& item_table,
                                        std::size_t topn) {
  const std::size_t vocab = item_table.dim(0) - 1;
  if (topn == 0) throw ConfigError("retrieve_candidates: top-N must be >= 1");
  if (topn > vocab)
    throw ConfigError("retrieve_candidates: top-N " + std::to_string(topn) +
                      " exceeds vocabulary size " + std::to_string(vocab));
  if (item_table.dim(1) != interests.vectors.dim(1))
    throw ShapeError("retrieve_candidates: embedding width mismatch");
  const std::size_t k = interests.vectors.dim(0);
  CandidateSet out;
  out.per_interest.resize(k);
  std::vector<ScoredItem> scored(vocab);
  for (std::size_t ki = 0; ki < k; ++ki) {
    for (std::size_t item = 1; item <= vocab; ++item)
      scored[item - 1] = ScoredItem{item, detail::row_dot(item_table, item, interests.vectors, ki)};
    std::partial_sort(scored.begin(), scored.begin() + topn, scored.end(),
                      detail::scored_before);
    out.per_interest[ki].assign(scored.begin(), scored.begin() + topn);
  }
  return out;
}

struct AggregateResult {
  std::vector<ScoredItem> ranked;  // N items, descending aggregated score
  std::size_t pool_shortfall = 0;  // items padded in from outside the pool
};

/// Value-function aggregation: the additive objective is maximized by the
/// top-N distinct pool items under s(x) = max over interests of the inner
/// product. When the pool runs short the remainder is padded from a global
/// scan and counted.
inline AggregateResult aggregate(const CandidateSet& candidates, const InterestMatrix& interests,
                                 const Tensor& item_table, std::size_t topn) {
  const std::size_t vocab = item_table.dim(0) - 1;
  if (topn == 0) throw ConfigError("aggregate: top-N must be >= 1");
  if (topn > vocab)
    throw ConfigError("aggregate: top-N " + std::to_string(topn) + " exceeds vocabulary size " +
                      std::to_string(vocab));
  const std::size_t k = interests.vectors.dim(0);

  const auto max_score = [&](std::size_t item) {
    double best = detail::row_dot(item_table, item, interests.vectors, 0);
    for (std::size_t ki = 1; ki < k; ++ki)
      best = std::max(best, detail::row_dot(item_table, item, interests.vectors, ki));
    return best;
  };

  std::set<std::size_t> pool;
  for (const auto& list : candidates.per_interest)
    for (const ScoredItem& s : list) pool.insert(s.item);

  std::vector<ScoredItem> scored;
  scored.reserve(pool.size());
  for (std::size_t item : pool) scored.push_back(ScoredItem{item, max_score(item)});

  AggregateResult out;
  if (pool.size() < topn) {
    out.pool_shortfall = topn - pool.size();
    std::vector<ScoredItem> rest;
    for (std::size_t item = 1; item <= vocab; ++item)
      if (!pool.count(item)) rest.push_back(ScoredItem{item, max_score(item)});
    std::sort(rest.begin(), rest.end(), detail::scored_before);
    const std::size_t pad = std::min(out.pool_shortfall, rest.size());
    scored.insert(scored.end(), rest.begin(), rest.begin() + pad);
  }
  std::sort(scored.begin(), scored.end(), detail::scored_before);
  if (scored.size() > topn) scored.resize(topn);
  out.ranked = std::move(scored);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline double recall_at(const std::vector<std::size_t>& ranked,
                        const std::set<std::size_t>& ground_truth) {
  if (ground_truth.empty()) throw ContractError("recall_at: empty ground truth");
  std::size_t hits = 0;
  for (std::size_t item : ranked) hits += ground_truth.count(item);
  return static_cast<double>(hits) / static_cast<double>(ground_truth.size());
}

inline double hitrate_at(const std::vector<std::size_t>& ranked,
                         const std::set<std::size_t>& ground_truth) {
  if (ground_truth.empty()) throw ContractError("hitrate_at: empty ground truth");
  for (std::size_t item : ranked)
    if (ground_truth.count(item)) return 1.0;
  return 0.0;
}

/// Binary-gain NDCG: DCG adds 1/log2(rank+1) per hit (1-based ranks), IDCG
/// assumes the first min(N, |G|) ranks all hit.
inline double ndcg_at(const std::vector<std::size_t>& ranked,
                      const std::set<std::size_t>& ground_truth) {
  if (ground_truth.empty()) throw ContractError("ndcg_at: empty ground truth");
  double dcg = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ground_truth.count(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i + 2));
  const std::size_t ideal = std::min(ranked.size(), ground_truth.size());
  double idcg = 0.0;
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i + 2));
  return dcg / idcg;
}

struct MetricsAtN {
  double recall = 0.0;
  double ndcg = 0.0;
  double hit_rate = 0.0;
};

struct MetricsReport {
  std::map<std::size_t, MetricsAtN> at;  // keyed by N
  std::size_t user_count = 0;
  std::size_t skipped = 0;
  std::size_t pool_shortfalls = 0;
};

/// Full 80/20 evaluation: per user, split the history, run the eval-mode
/// forward pass, retrieve and aggregate per N, and macro-average the
/// metrics over users. Optional sink receives one JSON record per user and
/// N with the ranked list, scores, candidates, and ground truth.
inline MetricsReport evaluate(const ParameterSet& params, const ModelConfig& config,
                              const InteractionLog& eval_log,
                              const std::vector<std::size_t>& topn_list, double ratio = 0.8,
                              std::ostream* dump = nullptr, const Ablation& ablation = {}) {
  if (eval_log.users.empty()) throw InputError("evaluate: empty interaction log");
  if (topn_list.empty()) throw ConfigError("evaluate: need at least one N");
  MetricsReport report;
  for (std::size_t n : topn_list) report.at[n] = MetricsAtN{};

  ForwardOptions options;
  options.ablation = ablation;
  for (const auto& [user, events] : eval_log.users) {
    const auto eval_case = eval_split(events, ratio, config.seq_len);
    if (!eval_case.has_value()) {
      ++report.skipped;
      continue;
    }
    const InterestMatrix interests = forward(eval_case->input, params, config, options);
    ++report.user_count;
    for (std::size_t n : topn_list) {
      const CandidateSet candidates = retrieve_candidates(interests, params.item_table, n);
      const AggregateResult agg = aggregate(candidates, interests, params.item_table, n);
      report.pool_shortfalls += agg.pool_shortfall;
      std::vector<std::size_t> ranked;
      ranked.reserve(agg.ranked.size());
      for (const ScoredItem& s : agg.ranked) ranked.push_back(s.item);
      MetricsAtN& acc = report.at[n];
      acc.recall += recall_at(ranked, eval_case->ground_truth);
      acc.ndcg += ndcg_at(ranked, eval_case->ground_truth);
      acc.hit_rate += hitrate_at(ranked, eval_case->ground_truth);
      if (dump != nullptr) {
        *dump << "{\"user\":\"" << user << "\",\"topn\":" << n << ",\"ranked\":[";
        for (std::size_t i = 0; i < agg.ranked.size(); ++i) {
          if (i > 0) *dump << ',';
          *dump << "[" << agg.ranked[i].item << ',' << agg.ranked[i].score << ']';
        }
        *dump << "],\"candidates\":[";
        for (std::size_t ki = 0; ki < candidates.per_interest.size(); ++ki) {
          if (ki > 0) *dump << ',';
          *dump << '[';
          for (std::size_t i = 0; i < candidates.per_interest[ki].size(); ++i) {
            if (i > 0) *dump << ',';
            *dump << "[" << candidates.per_interest[ki][i].item << ','
                  << candidates.per_interest[ki][i].score << ']';
          }
          *dump << ']';
        }
        *dump << "],\"ground_truth\":[";
        bool first = true;
        for (std::size_t item : eval_case->ground_truth) {
          if (!first) *dump << ',';
          first = false;
          *dump << item;
        }
        *dump << "]}\n";
      }
    }
  }
  if (report.user_count > 0) {
    for (auto& [n, acc] : report.at) {
      acc.recall /= static_cast<double>(report.user_count);
      acc.ndcg /= static_cast<double>(report.user_count);
      acc.hit_rate /= static_cast<double>(report.user_count);
    }
  }
  return report;
}

}  // namespace pimi
