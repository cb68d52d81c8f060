// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "pimi/adam.hpp"
#include "pimi/common.hpp"
#include "pimi/dataset.hpp"
#include "pimi/model.hpp"
#include "pimi/retrieval.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t negatives = 10;
  std::size_t max_iterations = 1000;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  double learning_rate = 0.001;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0 || negatives == 0 || max_iterations == 0 || eval_every == 0 ||
        patience == 0)
      throw ConfigError("train config: all counts must be >= 1");
    if (learning_rate <= 0.0) throw ConfigError("train config: learning rate must be positive");
  }
};

/// Hard interest selection: the row of the interest matrix with the largest
/// inner product against the target embedding. The index is chosen outside
/// the tape, so gradients flow only through the selected row.
inline std::size_t select_interest_index(const InterestMatrix& interests,
                                         const Tensor& target_embedding) {
  const std::size_t k = interests.vectors.dim(0);
  const std::size_t d = interests.vectors.dim(1);
  if (target_embedding.size() != d)
    throw ShapeError("select_interest: target embedding width mismatch");
  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t ki = 0; ki < k; ++ki) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      s += interests.vectors.vals()[ki * d + j] * target_embedding.vals()[j];
    if (ki == 0 || s > best_score) {  // ties keep the smaller index
      best_score = s;
      best = ki;
    }
  }
  return best;
}

inline Tensor select_interest(const InterestMatrix& interests, const Tensor& target_embedding) {
  const std::size_t best = select_interest_index(interests, target_embedding);
  return gather_rows(interests.vectors, {best});  // 1 x d
}

/// Sampled-softmax loss against an explicit negative set: a
/// (negatives+1)-way cross-entropy whose denominator includes the target.
inline Tensor sampled_softmax_loss(const Tensor& interest, std::size_t target,
                                   const ParameterSet& params,
                                   const std::vector<std::size_t>& negative_items) {
  const std::size_t vocab = params.item_table.dim(0) - 1;
  if (target < 1 || target > vocab)
    throw ContractError("sampled_softmax_loss: target index out of range");
  for (std::size_t neg : negative_items)
    if (neg < 1 || neg > vocab || neg == target)
      throw ContractError("sampled_softmax_loss: invalid negative item index");
  std::vector<std::size_t> rows;
  rows.reserve(negative_items.size() + 1);
  rows.push_back(target);
  rows.insert(rows.end(), negative_items.begin(), negative_items.end());
  Tensor candidates = gather_rows(params.item_table, rows);
  Tensor logits = matmul(reshape(interest, {1, interest.size()}), candidates,
                         /*transpose_b=*/true);
  return softmax_xent(logits, 0);
}

/// Draws `count` distinct negatives uniformly from the vocabulary excluding
/// the target.
inline std::vector<std::size_t> sample_negatives(std::size_t target, std::size_t vocab,
                                                 std::size_t count, Rng& rng) {
  if (count == 0) throw ConfigError("sample_negatives: need at least one negative");
  if (vocab < count + 1)
    throw ConfigError("sample_negatives: vocabulary of " + std::to_string(vocab) +
                      " items cannot supply " + std::to_string(count) +
                      " negatives plus the target");
  std::vector<std::size_t> out;
  out.reserve(count);
  if (count * 2 >= vocab) {
    std::vector<std::size_t> all;
    all.reserve(vocab - 1);
    for (std::size_t i = 1; i <= vocab; ++i)
      if (i != target) all.push_back(i);
    rng.shuffle(all);
    out.assign(all.begin(), all.begin() + count);
  } else {
    std::set<std::size_t> seen;
    while (out.size() < count) {
      const std::size_t pick = 1 + rng.uniform_index(vocab);
      if (pick == target || !seen.insert(pick).second) continue;
      out.push_back(pick);
    }
  }
  return out;
}

inline Tensor sampled_softmax_loss(const Tensor& interest, std::size_t target,
                                   const ParameterSet& params, std::size_t negatives, Rng& rng) {
  const std::size_t vocab = params.item_table.dim(0) - 1;
  return sampled_softmax_loss(interest, target, params,
                              sample_negatives(target, vocab, negatives, rng));
}

struct EvalRecord {
  std::size_t iteration = 0;
  double train_loss = 0.0;
  double recall = 0.0;
  double ndcg = 0.0;
  double hit_rate = 0.0;
};

struct TrainReport {
  std::vector<EvalRecord> evaluations;
  std::size_t best_iteration = 0;
  double best_recall = 0.0;
  std::size_t iterations_run = 0;
  std::size_t validation_topn = 0;
  bool stopped_early = false;
};

struct TrainResult {
  TrainReport report;
  ParameterSet params;  // best-validation snapshot
};

/// Mini-batch training loop: shuffled samples, per-sample hard-attention
/// sampled-softmax loss, Adam updates, periodic validation with early
/// stopping on Recall at the validation cutoff, best-snapshot retention.
inline TrainResult train(const InteractionLog& train_log, const InteractionLog& valid_log,
                         const ModelConfig& model_config, const TrainConfig& train_config,
                         const Ablation& ablation = {}, std::ostream* log = nullptr) {
  model_config.validate();
  train_config.validate();
  const std::size_t vocab = train_log.vocab_size();
  if (vocab == 0) throw InputError("train: empty item vocabulary");
  if (vocab < train_config.negatives + 1)
    throw ConfigError("train: vocabulary of " + std::to_string(vocab) +
                      " items cannot supply " + std::to_string(train_config.negatives) +
                      " negatives plus the target");

  std::vector<TrainingSample> samples = build_training_samples(train_log, model_config.seq_len);
  if (samples.empty()) throw InputError("train: no training samples (all histories too short)");

  Rng init_rng(derive_seed(train_config.seed, 0));
  Rng shuffle_rng(derive_seed(train_config.seed, 1));
  Rng dropout_rng(derive_seed(train_config.seed, 2));
  Rng negative_rng(derive_seed(train_config.seed, 3));

  ParameterSet params = ParameterSet::init(model_config, vocab, init_rng);
  AdamConfig adam_config;
  adam_config.learning_rate = train_config.learning_rate;
  AdamState optimizer(params.trainables(), adam_config);

  const std::size_t validation_topn = std::min<std::size_t>(50, vocab);

  TrainResult result;
  result.report.validation_topn = validation_topn;
  ParameterSet best = params.clone();
  double best_recall = -1.0;
  std::size_t best_iteration = 0;
  std::size_t stale = 0;

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  std::size_t cursor = 0;

  double window_loss = 0.0;
  std::size_t window_batches = 0;

  ForwardOptions options;
  options.train = true;
  options.ablation = ablation;
  options.rng = &dropout_rng;

  const std::size_t bsize = train_config.batch_size;
  const std::size_t kcount = model_config.interests;
  const std::size_t dim = model_config.dim;
  std::vector<FixedSequence> batch_seqs(bsize);
  std::vector<std::size_t> batch_targets(bsize);

  for (std::size_t iteration = 1; iteration <= train_config.max_iterations; ++iteration) {
    for (std::size_t b = 0; b < bsize; ++b) {
      if (cursor == order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      const TrainingSample& sample = samples[order[cursor++]];
      batch_seqs[b] = sample.input;
      batch_targets[b] = sample.target_item;
    }

    Tape tape;
    Tensor batch_loss;
    {
      TapeScope scope(tape);
      BatchInterests interests = forward_batch(batch_seqs, params, model_config, options);

      // Hard selection per sample on raw values; gradients flow only
      // through the chosen interest row.
      const std::vector<double>& vecs = interests.vectors.vals();
      const std::vector<double>& table = params.item_table.vals();
      std::vector<std::size_t> chosen(bsize);
      for (std::size_t b = 0; b < bsize; ++b) {
        const double* target_row = table.data() + batch_targets[b] * dim;
        std::size_t best_k = 0;
        double best_score = 0.0;
        for (std::size_t ki = 0; ki < kcount; ++ki) {
          const double* row = vecs.data() + (b * kcount + ki) * dim;
          double s = 0.0;
          for (std::size_t j = 0; j < dim; ++j) s += row[j] * target_row[j];
          if (ki == 0 || s > best_score) {
            best_score = s;
            best_k = ki;
          }
        }
        chosen[b] = b * kcount + best_k;
      }
      Tensor selected =
          gather_rows(reshape(interests.vectors, {bsize * kcount, dim}), chosen);  // B x d

      // Candidate rows per sample: target first, then sampled negatives.
      const std::size_t ccount = 1 + train_config.negatives;
      std::vector<std::size_t> cand(bsize * ccount);
      for (std::size_t b = 0; b < bsize; ++b) {
        cand[b * ccount] = batch_targets[b];
        const std::vector<std::size_t> negs =
            sample_negatives(batch_targets[b], vocab, train_config.negatives, negative_rng);
        std::copy(negs.begin(), negs.end(), cand.begin() + b * ccount + 1);
      }
      Tensor cand_rows = gather_rows(params.item_table, cand);  // (B*C) x d
      Tensor logits = reshape(bmm(reshape(selected, {bsize, 1, dim}),
                                  reshape(cand_rows, {bsize, ccount, dim}),
                                  /*transpose_b=*/true),
                              {bsize, ccount});
      batch_loss = softmax_xent_rows(logits, 0);
      if (!std::isfinite(batch_loss.item()))
        throw DivergenceError("train: non-finite loss at iteration " +
                              std::to_string(iteration));
      tape.backward(batch_loss);
    }
    optimizer.step();
    ParameterSet::zero_padding_row(params);

    window_loss += batch_loss.item();
    ++window_batches;
    result.report.iterations_run = iteration;

    const bool last = iteration == train_config.max_iterations;
    if (iteration % train_config.eval_every != 0 && !last) continue;

    EvalRecord record;
    record.iteration = iteration;
    record.train_loss = window_loss / static_cast<double>(window_batches);
    window_loss = 0.0;
    window_batches = 0;

    MetricsReport metrics =
        evaluate(params, model_config, valid_log, {validation_topn}, 0.8, nullptr, ablation);
    const MetricsAtN& at = metrics.at.at(validation_topn);
    record.recall = at.recall;
    record.ndcg = at.ndcg;
    record.hit_rate = at.hit_rate;
    result.report.evaluations.push_back(record);
    if (log != nullptr)
      *log << "iteration " << record.iteration << " loss " << record.train_loss << " recall@"
           << validation_topn << " " << record.recall << " ndcg " << record.ndcg << " hitrate "
           << record.hit_rate << "\n";

    if (record.recall > best_recall) {
      best_recall = record.recall;
      best_iteration = iteration;
      best = params.clone();
      stale = 0;
    } else {
      ++stale;
      if (stale >= train_config.patience) {
        result.report.stopped_early = true;
        break;
      }
    }
  }

  result.report.best_iteration = best_iteration;
  result.report.best_recall = best_recall;
  result.params = std::move(best);
  return result;
}

}  // namespace pimi
