// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#include "pimi/retrieval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "pimi/dataset.hpp"
#include "pimi/model.hpp"

namespace pimi {
namespace {

Tensor make_table(std::size_t vocab, std::size_t d, Rng& rng) {
  Tensor table = Tensor::zeros({vocab + 1, d});
  for (std::size_t i = d; i < table.size(); ++i)  // row 0 stays zero
    table.vals()[i] = rng.uniform(-1.0, 1.0);
  return table;
}

InterestMatrix make_interests(std::size_t k, std::size_t d, Rng& rng) {
  InterestMatrix m;
  m.vectors = Tensor::zeros({k, d});
  for (std::size_t i = 0; i < m.vectors.size(); ++i) m.vectors.vals()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

TEST(Retrieve, MatchesFullSortOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t vocab = 3 + rng.uniform_index(20);
    const std::size_t d = 2 + rng.uniform_index(6);
    const std::size_t k = 1 + rng.uniform_index(4);
    const std::size_t topn = 1 + rng.uniform_index(vocab);
    Tensor table = make_table(vocab, d, rng);
    InterestMatrix interests = make_interests(k, d, rng);

    CandidateSet candidates = retrieve_candidates(interests, table, topn);
    ASSERT_EQ(candidates.per_interest.size(), k);
    for (std::size_t ki = 0; ki < k; ++ki) {
      std::vector<ScoredItem> all;
      for (std::size_t item = 1; item <= vocab; ++item) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j)
          s += table.vals()[item * d + j] * interests.vectors.vals()[ki * d + j];
        all.push_back(ScoredItem{item, s});
      }
      std::sort(all.begin(), all.end(), [](const ScoredItem& a, const ScoredItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.item < b.item;
      });
      ASSERT_EQ(candidates.per_interest[ki].size(), topn);
      for (std::size_t i = 0; i < topn; ++i) {
        EXPECT_EQ(candidates.per_interest[ki][i].item, all[i].item);
        EXPECT_DOUBLE_EQ(candidates.per_interest[ki][i].score, all[i].score);
      }
    }
  }
}

TEST(Retrieve, TieBreaksBySmallerIndex) {
  Tensor table = Tensor::zeros({4, 2});
  // Items 1 and 3 score identically; 2 scores lower.
  table.vals()[2] = 1.0;  // item 1
  table.vals()[4] = 0.5;  // item 2
  table.vals()[6] = 1.0;  // item 3
  InterestMatrix interests;
  interests.vectors = Tensor::from({1, 2}, {1.0, 0.0});
  CandidateSet c = retrieve_candidates(interests, table, 3);
  ASSERT_EQ(c.per_interest[0].size(), 3u);
  EXPECT_EQ(c.per_interest[0][0].item, 1u);
  EXPECT_EQ(c.per_interest[0][1].item, 3u);
  EXPECT_EQ(c.per_interest[0][2].item, 2u);
}

TEST(Retrieve, RejectsBadArguments) {
  Rng rng(3);
  Tensor table = make_table(5, 3, rng);
  InterestMatrix interests = make_interests(2, 3, rng);
  EXPECT_THROW(retrieve_candidates(interests, table, 0), ConfigError);
  EXPECT_THROW(retrieve_candidates(interests, table, 6), ConfigError);
  InterestMatrix wrong = make_interests(2, 4, rng);
  EXPECT_THROW(retrieve_candidates(wrong, table, 2), ShapeError);
}

TEST(Aggregate, ScoresAreMaxOverInterests) {
  Rng rng(7);
  const std::size_t vocab = 12, d = 4, k = 3, topn = 5;
  Tensor table = make_table(vocab, d, rng);
  InterestMatrix interests = make_interests(k, d, rng);
  CandidateSet candidates = retrieve_candidates(interests, table, topn);
  AggregateResult agg = aggregate(candidates, interests, table, topn);
  ASSERT_EQ(agg.ranked.size(), topn);
  for (const ScoredItem& s : agg.ranked) {
    double expect = -1e300;
    for (std::size_t ki = 0; ki < k; ++ki) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        dot += table.vals()[s.item * d + j] * interests.vectors.vals()[ki * d + j];
      expect = std::max(expect, dot);
    }
    EXPECT_DOUBLE_EQ(s.score, expect);
  }
  for (std::size_t i = 1; i < agg.ranked.size(); ++i)
    EXPECT_GE(agg.ranked[i - 1].score, agg.ranked[i].score);
}

TEST(Aggregate, MatchesExhaustiveSubsetOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t vocab = 4 + rng.uniform_index(7);  // 4..10
    const std::size_t d = 2 + rng.uniform_index(5);
    const std::size_t k = 1 + rng.uniform_index(4);
    const std::size_t topn = 1 + rng.uniform_index(3);
    Tensor table = make_table(vocab, d, rng);
    InterestMatrix interests = make_interests(k, d, rng);

    CandidateSet candidates = retrieve_candidates(interests, table, topn);
    AggregateResult agg = aggregate(candidates, interests, table, topn);
    std::set<std::size_t> got;
    for (const ScoredItem& s : agg.ranked) got.insert(s.item);

    std::vector<std::size_t> pool;
    std::vector<double> scores;
    for (std::size_t item = 1; item <= vocab; ++item) {
      double best = -1e300;
      for (std::size_t ki = 0; ki < k; ++ki) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j)
          dot += table.vals()[item * d + j] * interests.vectors.vals()[ki * d + j];
        best = std::max(best, dot);
      }
      pool.push_back(item);
      scores.push_back(best);
    }
    EXPECT_EQ(got, pimi::testing::ref_best_subset(pool, scores, topn)) << "trial " << trial;
  }
}

TEST(Aggregate, PadsShortPoolFromFullScan) {
  Rng rng(5);
  const std::size_t vocab = 10, d = 3;
  Tensor table = make_table(vocab, d, rng);
  InterestMatrix interests = make_interests(1, d, rng);
  // One interest retrieved at depth 1 gives a pool of one item; aggregation
  // at N=4 must pad with the next-best global items.
  CandidateSet shallow = retrieve_candidates(interests, table, 1);
  AggregateResult agg = aggregate(shallow, interests, table, 4);
  EXPECT_EQ(agg.pool_shortfall, 3u);
  ASSERT_EQ(agg.ranked.size(), 4u);
  CandidateSet deep = retrieve_candidates(interests, table, 4);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(agg.ranked[i].item, deep.per_interest[0][i].item);
}

TEST(Aggregate, DuplicateItemsAcrossInterestsCollapse) {
  Tensor table = Tensor::zeros({4, 2});
  table.vals()[2] = 2.0;
  table.vals()[4] = 1.0;
  table.vals()[6] = 0.5;
  InterestMatrix interests;
  interests.vectors = Tensor::from({2, 2}, {1.0, 0.0, 1.0, 0.0});  // identical interests
  CandidateSet c = retrieve_candidates(interests, table, 2);
  AggregateResult agg = aggregate(c, interests, table, 2);
  ASSERT_EQ(agg.ranked.size(), 2u);
  EXPECT_EQ(agg.ranked[0].item, 1u);
  EXPECT_EQ(agg.ranked[1].item, 2u);
  EXPECT_EQ(agg.pool_shortfall, 0u);
}

TEST(Metrics, HandComputedValues) {
  // Ranked [a, x, b] with ground truth {a, b}, as items 1, 9, 2.
  const std::vector<std::size_t> ranked = {1, 9, 2};
  const std::set<std::size_t> truth = {1, 2};
  EXPECT_DOUBLE_EQ(recall_at(ranked, truth), 1.0);
  EXPECT_DOUBLE_EQ(hitrate_at(ranked, truth), 1.0);
  const double dcg = 1.0 / std::log2(2.0) + 1.0 / std::log2(4.0);
  const double idcg = 1.0 / std::log2(2.0) + 1.0 / std::log2(3.0);
  EXPECT_NEAR(ndcg_at(ranked, truth), dcg / idcg, 1e-12);
  EXPECT_NEAR(ndcg_at(ranked, truth), 0.9197, 5e-5);
}

TEST(Metrics, PartialAndZeroHits) {
  const std::set<std::size_t> truth = {3, 4, 5, 6};
  EXPECT_DOUBLE_EQ(recall_at({3, 7, 8}, truth), 0.25);
  EXPECT_DOUBLE_EQ(hitrate_at({3, 7, 8}, truth), 1.0);
  EXPECT_DOUBLE_EQ(recall_at({7, 8}, truth), 0.0);
  EXPECT_DOUBLE_EQ(hitrate_at({7, 8}, truth), 0.0);
  EXPECT_DOUBLE_EQ(ndcg_at({7, 8}, truth), 0.0);
}

TEST(Metrics, IdealOrderGivesPerfectNdcg) {
  const std::set<std::size_t> truth = {1, 2, 3};
  EXPECT_DOUBLE_EQ(ndcg_at({1, 2, 3, 8, 9}, truth), 1.0);
  EXPECT_DOUBLE_EQ(ndcg_at({2, 3, 1}, truth), 1.0);
  // Truth larger than the list: the ideal DCG only counts reachable slots.
  EXPECT_DOUBLE_EQ(ndcg_at({1, 2}, {1, 2, 3, 4}), 1.0);
}

TEST(Metrics, EmptyTruthRejected) {
  EXPECT_THROW(recall_at({1}, {}), ContractError);
  EXPECT_THROW(hitrate_at({1}, {}), ContractError);
  EXPECT_THROW(ndcg_at({1}, {}), ContractError);
}

TEST(Metrics, MatchesOraclesOnRandomPairs) {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t universe = 2 + rng.uniform_index(30);
    const std::size_t n = 1 + rng.uniform_index(10);
    std::vector<std::size_t> items(universe);
    for (std::size_t i = 0; i < universe; ++i) items[i] = i + 1;
    rng.shuffle(items);
    std::vector<std::size_t> ranked(items.begin(), items.begin() + std::min(n, universe));
    std::set<std::size_t> truth;
    const std::size_t truth_size = 1 + rng.uniform_index(universe);
    for (std::size_t i = 0; i < truth_size; ++i) truth.insert(1 + rng.uniform_index(universe));

    EXPECT_DOUBLE_EQ(recall_at(ranked, truth), pimi::testing::ref_recall(ranked, truth));
    EXPECT_DOUBLE_EQ(hitrate_at(ranked, truth), pimi::testing::ref_hitrate(ranked, truth));
    EXPECT_NEAR(ndcg_at(ranked, truth), pimi::testing::ref_ndcg(ranked, truth), 1e-12);
    EXPECT_GE(hitrate_at(ranked, truth), recall_at(ranked, truth));
    EXPECT_LE(ndcg_at(ranked, truth), 1.0 + 1e-12);
  }
}

InteractionLog eval_fixture_log(std::size_t users, std::size_t events_per_user,
                                std::size_t vocab) {
  InteractionLog log;
  log.items.push_back("");
  for (std::size_t i = 1; i <= vocab; ++i) {
    log.items.push_back("item" + std::to_string(i));
    log.item_index[log.items.back()] = i;
  }
  Rng rng(77);
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<Event> events;
    std::int64_t t = 1'600'000'000;
    for (std::size_t e = 0; e < events_per_user; ++e) {
      events.push_back(Event{1 + rng.uniform_index(vocab), t});
      t += 86'400;
    }
    log.users["user" + std::to_string(u)] = std::move(events);
  }
  return log;
}

TEST(Evaluate, MacroAveragesOverUsers) {
  ModelConfig config;
  config.dim = 8;
  config.seq_len = 6;
  config.interests = 2;
  config.layers = 1;
  config.interval_threshold = 7;
  config.heads = 2;
  config.dropout_rate = 0.0;

  InteractionLog log = eval_fixture_log(6, 10, 15);
  Rng rng(9);
  ParameterSet params = ParameterSet::init(config, log.vocab_size(), rng);

  MetricsReport report = evaluate(params, config, log, {3, 5});
  EXPECT_EQ(report.user_count, 6u);
  EXPECT_EQ(report.skipped, 0u);
  ASSERT_TRUE(report.at.count(3));
  ASSERT_TRUE(report.at.count(5));

  // Recompute one N by hand from the per-user pieces.
  double recall_sum = 0.0;
  for (const auto& [user, events] : log.users) {
    auto c = eval_split(events, 0.8, config.seq_len);
    ASSERT_TRUE(c.has_value());
    InterestMatrix m = forward(c->input, params, config);
    CandidateSet cand = retrieve_candidates(m, params.item_table, 3);
    AggregateResult agg = aggregate(cand, m, params.item_table, 3);
    std::vector<std::size_t> ranked;
    for (const ScoredItem& s : agg.ranked) ranked.push_back(s.item);
    recall_sum += recall_at(ranked, c->ground_truth);
  }
  EXPECT_NEAR(report.at.at(3).recall, recall_sum / 6.0, 1e-12);
}

TEST(Evaluate, SkipsUsersWithoutSplit) {
  ModelConfig config;
  config.dim = 4;
  config.seq_len = 5;
  config.interests = 2;
  config.layers = 0;
  config.interval_threshold = 7;
  config.heads = 1;
  config.dropout_rate = 0.0;

  InteractionLog log = eval_fixture_log(3, 10, 8);
  // A 4-event history has an empty holdout after the 80% prefix rounds up.
  log.users["short"] = {Event{1, 100}, Event{2, 200}, Event{3, 300}, Event{4, 400}};
  Rng rng(13);
  ParameterSet params = ParameterSet::init(config, log.vocab_size(), rng);
  MetricsReport report = evaluate(params, config, log, {4});
  EXPECT_EQ(report.user_count, 3u);
  EXPECT_EQ(report.skipped, 1u);
}

TEST(Evaluate, DumpRecordsMatchReport) {
  ModelConfig config;
  config.dim = 6;
  config.seq_len = 5;
  config.interests = 2;
  config.layers = 1;
  config.interval_threshold = 7;
  config.heads = 2;
  config.dropout_rate = 0.0;

  InteractionLog log = eval_fixture_log(4, 9, 12);
  Rng rng(17);
  ParameterSet params = ParameterSet::init(config, log.vocab_size(), rng);
  std::ostringstream dump;
  MetricsReport report = evaluate(params, config, log, {4}, 0.8, &dump);

  std::istringstream lines(dump.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    ++count;
    EXPECT_EQ(line.front(), '{');
    EXPECT_EQ(line.back(), '}');
    EXPECT_NE(line.find("\"user\":"), std::string::npos);
    EXPECT_NE(line.find("\"topn\":4"), std::string::npos);
    EXPECT_NE(line.find("\"ranked\":["), std::string::npos);
    EXPECT_NE(line.find("\"candidates\":["), std::string::npos);
    EXPECT_NE(line.find("\"ground_truth\":["), std::string::npos);
  }
  EXPECT_EQ(count, report.user_count);
}

TEST(Evaluate, HonorsArchitectureSwitches) {
  ModelConfig config;
  config.dim = 8;
  config.seq_len = 6;
  config.interests = 2;
  config.layers = 1;
  config.interval_threshold = 7;
  config.heads = 2;
  config.dropout_rate = 0.0;

  InteractionLog log = eval_fixture_log(5, 10, 15);
  Rng rng(23);
  ParameterSet params = ParameterSet::init(config, log.vocab_size(), rng);
  Ablation ablation;
  ablation.no_interactivity = true;

  MetricsReport report = evaluate(params, config, log, {3}, 0.8, nullptr, ablation);

  double recall_sum = 0.0;
  ForwardOptions options;
  options.ablation = ablation;
  for (const auto& [user, events] : log.users) {
    auto c = eval_split(events, 0.8, config.seq_len);
    ASSERT_TRUE(c.has_value());
    InterestMatrix m = forward(c->input, params, config, options);
    CandidateSet cand = retrieve_candidates(m, params.item_table, 3);
    AggregateResult agg = aggregate(cand, m, params.item_table, 3);
    std::vector<std::size_t> ranked;
    for (const ScoredItem& s : agg.ranked) ranked.push_back(s.item);
    recall_sum += recall_at(ranked, c->ground_truth);
  }
  EXPECT_NEAR(report.at.at(3).recall, recall_sum / 5.0, 1e-12);
}

TEST(Evaluate, RejectsBadInputs) {
  ModelConfig config;
  config.dim = 4;
  config.seq_len = 5;
  config.interests = 1;
  config.layers = 0;
  config.interval_threshold = 7;
  config.heads = 1;
  config.dropout_rate = 0.0;
  InteractionLog log = eval_fixture_log(3, 8, 6);
  Rng rng(1);
  ParameterSet params = ParameterSet::init(config, log.vocab_size(), rng);
  EXPECT_THROW(evaluate(params, config, InteractionLog{}, {3}), InputError);
  EXPECT_THROW(evaluate(params, config, log, {}), ConfigError);
}

}  // namespace
}  // namespace pimi
