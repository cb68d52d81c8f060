// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pimi/attention.hpp"
#include "pimi/common.hpp"
#include "pimi/dataset.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t seq_len = 20;
  std::size_t interests = 4;
  std::size_t layers = 3;
  std::size_t interval_threshold = 64;
  std::size_t heads = 2;
  double dropout_rate = 0.2;

  void validate() const {
    // layers may be zero: the interactivity stage then reduces to the sum of
    // the item and periodicity embeddings.
    if (dim == 0 || seq_len == 0 || interests == 0 || interval_threshold == 0 || heads == 0)
      throw ConfigError("model config: all counts must be >= 1");
    if (dim % heads != 0)
      throw ConfigError("model config: dim " + std::to_string(dim) +
                        " not divisible by heads " + std::to_string(heads));
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
      throw ConfigError("model config: dropout rate must be in [0,1)");
  }
};

/// One graph layer owns separate attention projections for the item-node
/// update and the central-node update.
struct LayerAttention {
  AttentionParams item;
  AttentionParams central;
};

struct ParameterSet {
  Tensor item_table;      // (|I|+1) x d, row 0 = padding, kept at zero
  Tensor interval_table;  // (p+1) x d, indexed by clamped day count
  Tensor interval_score;  // d x 1, scores interval embeddings
  Tensor extract_hidden;  // 4d x d, interest-extraction hidden projection
  Tensor extract_score;   // K x 4d, interest-extraction scoring projection
  std::vector<LayerAttention> layer_attention;

  static ParameterSet init(const ModelConfig& config, std::size_t vocab_size, Rng& rng) {
    config.validate();
    if (vocab_size == 0) throw ConfigError("parameter init: empty item vocabulary");
    const std::size_t d = config.dim;
    const double emb = 0.05;
    const double proj_d = 1.0 / std::sqrt(static_cast<double>(d));
    const double proj_4d = 1.0 / std::sqrt(static_cast<double>(4 * d));
    ParameterSet p;
    p.item_table = Tensor::uniform({vocab_size + 1, d}, -emb, emb, rng, true);
    p.interval_table =
        Tensor::uniform({config.interval_threshold + 1, d}, -emb, emb, rng, true);
    p.interval_score = Tensor::uniform({d, 1}, -proj_d, proj_d, rng, true);
    p.extract_hidden = Tensor::uniform({4 * d, d}, -proj_d, proj_d, rng, true);
    p.extract_score = Tensor::uniform({config.interests, 4 * d}, -proj_4d, proj_4d, rng, true);
    for (std::size_t l = 0; l < config.layers; ++l)
      p.layer_attention.push_back(
          LayerAttention{AttentionParams::init(d, rng), AttentionParams::init(d, rng)});
    zero_padding_row(p);
    return p;
  }

  /// Stable named enumeration of every trainable array, used by the
  /// optimizer and the checkpoint format.
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("item_table", item_table);
    fn("interval_table", interval_table);
    fn("interval_score", interval_score);
    fn("extract_hidden", extract_hidden);
    fn("extract_score", extract_score);
    for (std::size_t l = 0; l < layer_attention.size(); ++l) {
      const std::string prefix = "layer" + std::to_string(l);
      LayerAttention& att = layer_attention[l];
      fn(prefix + ".item.wq", att.item.wq);
      fn(prefix + ".item.wk", att.item.wk);
      fn(prefix + ".item.wv", att.item.wv);
      fn(prefix + ".item.wo", att.item.wo);
      fn(prefix + ".central.wq", att.central.wq);
      fn(prefix + ".central.wk", att.central.wk);
      fn(prefix + ".central.wv", att.central.wv);
      fn(prefix + ".central.wo", att.central.wo);
    }
  }

  std::vector<Tensor> trainables() {
    std::vector<Tensor> out;
    for_each([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
  }

  ParameterSet clone() const {
    ParameterSet p;
    p.item_table = item_table.clone();
    p.interval_table = interval_table.clone();
    p.interval_score = interval_score.clone();
    p.extract_hidden = extract_hidden.clone();
    p.extract_score = extract_score.clone();
    for (const LayerAttention& att : layer_attention) {
      LayerAttention c;
      c.item.wq = att.item.wq.clone();
      c.item.wk = att.item.wk.clone();
      c.item.wv = att.item.wv.clone();
      c.item.wo = att.item.wo.clone();
      c.central.wq = att.central.wq.clone();
      c.central.wk = att.central.wk.clone();
      c.central.wv = att.central.wv.clone();
      c.central.wo = att.central.wo.clone();
      p.layer_attention.push_back(std::move(c));
    }
    return p;
  }

  static void zero_padding_row(ParameterSet& p) {
    const std::size_t d = p.item_table.dim(1);
    for (std::size_t j = 0; j < d; ++j) p.item_table.vals()[j] = 0.0;
  }
};

struct Ablation {
  bool no_periodicity = false;
  bool no_interactivity = false;
  bool no_central = false;
};

struct ForwardOptions {
  bool train = false;
  Ablation ablation;
  Rng* rng = nullptr;  // required in train mode when dropout is active
};

/// Interest vectors plus the extraction attention, kept for diagnostics.
struct InterestMatrix {
  Tensor vectors;    // K x d
  Tensor attention;  // K x n, rows sum to 1 over real positions
};

/// Embedding lookup with padding hygiene: padded slots read row 0 no matter
/// what item id they carry, and come out exactly zero.
inline Tensor embed_items(const FixedSequence& seq, const ParameterSet& params) {
  const std::size_t n = seq.item_ids.size();
  std::vector<std::size_t> effective(n, 0);
  for (std::size_t r = 0; r < n; ++r)
    if (seq.mask[r]) effective[r] = seq.item_ids[r];
  Tensor rows = gather_rows(params.item_table, effective);
  return mask_rows(rows, seq.mask);
}

/// Periodicity encoding: embeds the pairwise interval counts, scores each
/// row's partners, and forms per-position weighted sums. Padded partner
/// columns get zero weight; padded rows come out zero.
inline Tensor periodicity_encode(const IntervalMatrix& m, const std::vector<std::uint8_t>& mask,
                                 const ParameterSet& params, DropoutSpec drop = {}) {
  const std::size_t n = m.n;
  if (mask.size() != n) throw ShapeError("periodicity_encode: mask length mismatch");
  if (params.interval_table.dim(0) <= m.threshold)
    throw ContractError("periodicity_encode: interval table smaller than threshold+1");
  const std::size_t d = params.interval_table.dim(1);

  Tensor embedded = gather_rows(params.interval_table, m.entries);    // (n*n) x d
  Tensor scores = reshape(matmul(embedded, params.interval_score), {n, n});
  std::vector<std::uint8_t> pair_mask(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) pair_mask[a * n + b] = mask[a] && mask[b];
  Tensor weights = masked_softmax(scores, 1, pair_mask);
  if (drop.rate > 0.0) {
    if (drop.rng == nullptr) throw ContractError("periodicity_encode: dropout requires an rng");
    weights = dropout(weights, drop.rate, *drop.rng);
  }
  Tensor combined = bmm(reshape(weights, {n, 1, n}), reshape(embedded, {n, n, d}));
  return reshape(combined, {n, d});
}

/// Star-graph interactivity: alternating item-node and central-node updates.
/// Each real position attends over its token set {predecessor state, central
/// node, own state, own item embedding}; the central node then attends over
/// itself plus all real item states. Padded positions stay zero throughout.
inline Tensor interactivity_encode(const Tensor& item_emb, const Tensor& period_emb,
                                   const std::vector<std::uint8_t>& mask,
                                   const ParameterSet& params, std::size_t layers,
                                   std::size_t heads, DropoutSpec drop = {},
                                   bool no_central = false) {
  detail::check_same_shape(item_emb, period_emb, "interactivity_encode");
  const std::size_t n = item_emb.dim(0);
  const std::size_t d = item_emb.dim(1);
  if (mask.size() != n) throw ShapeError("interactivity_encode: mask length mismatch");
  Tensor state = add(item_emb, period_emb);
  if (layers == 0) return state;
  if (params.layer_attention.size() < layers)
    throw ContractError("interactivity_encode: " + std::to_string(layers) +
                        " layers requested but only " +
                        std::to_string(params.layer_attention.size()) + " parameterized");

  std::size_t first_real = n;
  for (std::size_t r = 0; r < n; ++r)
    if (mask[r]) {
      first_real = r;
      break;
    }
  if (first_real == n) throw ContractError("interactivity_encode: all positions masked");
  const std::size_t real_count = n - first_real;

  Tensor central;
  if (!no_central) central = mean_rows_masked(state, mask);

  for (std::size_t l = 0; l < layers; ++l) {
    const LayerAttention& att = params.layer_attention[l];

    std::vector<Tensor> tokens;
    tokens.push_back(shift_rows_down(state));
    if (!no_central) tokens.push_back(repeat_row(central, n));
    tokens.push_back(state);
    tokens.push_back(item_emb);
    Tensor token_block = stack_tokens(tokens);        // n x T x d
    Tensor queries = reshape(state, {n, 1, d});
    Tensor updated =
        multi_head_attention_batched(queries, token_block, att.item, heads, {}, drop);
    state = mask_rows(reshape(updated, {n, d}), mask);

    if (!no_central) {
      Tensor real_states = slice_rows(state, first_real, real_count);
      Tensor key_values = concat_rows(central, real_states);
      central = multi_head_attention(central, key_values, att.central, heads, {}, drop);
    }
  }
  return state;
}

/// Multi-interest extraction: attention over positions per interest slot.
inline InterestMatrix extract_interests(const Tensor& state, const std::vector<std::uint8_t>& mask,
                                        const ParameterSet& params, DropoutSpec drop = {}) {
  const std::size_t n = state.dim(0);
  if (mask.size() != n) throw ShapeError("extract_interests: mask length mismatch");
  const std::size_t k = params.extract_score.dim(0);
  Tensor h = state;
  if (drop.rate > 0.0) {
    if (drop.rng == nullptr) throw ContractError("extract_interests: dropout requires an rng");
    h = dropout(h, drop.rate, *drop.rng);
  }
  Tensor hidden = pimi::tanh(matmul(params.extract_hidden, transpose2d(h)));  // 4d x n
  Tensor scores = matmul(params.extract_score, hidden);                       // K x n
  std::vector<std::uint8_t> col_mask(k * n);
  for (std::size_t ki = 0; ki < k; ++ki)
    for (std::size_t r = 0; r < n; ++r) col_mask[ki * n + r] = mask[r];
  InterestMatrix out;
  out.attention = masked_softmax(scores, 1, col_mask);
  out.vectors = matmul(out.attention, h);
  return out;
}

/// Full forward pass. Train mode activates dropout (needs options.rng);
/// eval mode is deterministic. Ablation switches disable the periodicity
/// path, the whole graph module, or just the central node.
inline InterestMatrix forward(const FixedSequence& seq, const ParameterSet& params,
                              const ModelConfig& config, const ForwardOptions& options = {}) {
  config.validate();
  if (seq.item_ids.size() != config.seq_len)
    throw ShapeError("forward: sequence has " + std::to_string(seq.item_ids.size()) +
                     " slots, config expects " + std::to_string(config.seq_len));
  if (seq.length == 0) throw InputError("forward: sequence has no real items");

  DropoutSpec drop;
  if (options.train && config.dropout_rate > 0.0) {
    if (options.rng == nullptr) throw ContractError("forward: train mode requires an rng");
    drop = DropoutSpec{config.dropout_rate, options.rng};
  }

  Tensor item_emb = embed_items(seq, params);
  Tensor period_emb;
  if (options.ablation.no_periodicity) {
    period_emb = Tensor::zeros({config.seq_len, config.dim});
  } else {
    IntervalMatrix intervals = interval_matrix(seq, config.interval_threshold);
    period_emb = periodicity_encode(intervals, seq.mask, params, drop);
  }
  Tensor state;
  if (options.ablation.no_interactivity) {
    state = add(item_emb, period_emb);
  } else {
    state = interactivity_encode(item_emb, period_emb, seq.mask, params, config.layers,
                                 config.heads, drop, options.ablation.no_central);
  }
  return extract_interests(state, seq.mask, params, drop);
}

/// Interest vectors and extraction attention for a whole batch: vectors is
/// [B x K x d], attention [B x K x n].
struct BatchInterests {
  Tensor vectors;
  Tensor attention;
};

/// Batched forward pass over B sequences, one row block of seq_len per
/// sample. Produces the same per-sample numbers as `forward` while paying
/// the per-op bookkeeping cost once per batch instead of once per sample.
inline BatchInterests forward_batch(const std::vector<FixedSequence>& seqs,
                                    const ParameterSet& params, const ModelConfig& config,
                                    const ForwardOptions& options = {}) {
  config.validate();
  const std::size_t bcount = seqs.size();
  if (bcount == 0) throw ContractError("forward_batch: empty batch");
  const std::size_t n = config.seq_len, d = config.dim;

  std::vector<std::uint8_t> mask(bcount * n, 0);
  std::vector<std::size_t> ids(bcount * n, 0);
  for (std::size_t b = 0; b < bcount; ++b) {
    const FixedSequence& seq = seqs[b];
    if (seq.item_ids.size() != n)
      throw ShapeError("forward_batch: sequence has " + std::to_string(seq.item_ids.size()) +
                       " slots, config expects " + std::to_string(n));
    if (seq.length == 0) throw InputError("forward_batch: sequence has no real items");
    for (std::size_t r = 0; r < n; ++r)
      if (seq.mask[r]) {
        mask[b * n + r] = 1;
        ids[b * n + r] = seq.item_ids[r];
      }
  }

  DropoutSpec drop;
  if (options.train && config.dropout_rate > 0.0) {
    if (options.rng == nullptr) throw ContractError("forward_batch: train mode requires an rng");
    drop = DropoutSpec{config.dropout_rate, options.rng};
  }

  Tensor item_emb = mask_rows(gather_rows(params.item_table, ids), mask);  // (B*n) x d

  Tensor period_emb;
  if (options.ablation.no_periodicity) {
    period_emb = Tensor::zeros({bcount * n, d});
  } else {
    std::vector<std::size_t> entries(bcount * n * n);
    std::vector<std::uint8_t> pair_mask(bcount * n * n, 0);
    for (std::size_t b = 0; b < bcount; ++b) {
      IntervalMatrix m = interval_matrix(seqs[b], config.interval_threshold);
      std::copy(m.entries.begin(), m.entries.end(), entries.begin() + b * n * n);
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t c = 0; c < n; ++c)
          pair_mask[(b * n + a) * n + c] = mask[b * n + a] && mask[b * n + c];
    }
    Tensor embedded = gather_rows(params.interval_table, entries);  // (B*n*n) x d
    Tensor scores = reshape(matmul(embedded, params.interval_score), {bcount * n, n});
    Tensor weights = masked_softmax(scores, 1, pair_mask);
    if (drop.rate > 0.0) weights = dropout(weights, drop.rate, *drop.rng);
    Tensor combined = bmm(reshape(weights, {bcount * n, 1, n}),
                          reshape(embedded, {bcount * n, n, d}));
    period_emb = reshape(combined, {bcount * n, d});
  }

  Tensor state = add(item_emb, period_emb);
  if (!options.ablation.no_interactivity && config.layers > 0) {
    if (params.layer_attention.size() < config.layers)
      throw ContractError("forward_batch: " + std::to_string(config.layers) +
                          " layers requested but only " +
                          std::to_string(params.layer_attention.size()) + " parameterized");
    const bool no_central = options.ablation.no_central;
    Tensor central;  // B x d
    if (!no_central) central = mean_rows_blocked(state, mask, n);

    std::vector<std::size_t> rep_idx(bcount * n);
    for (std::size_t b = 0; b < bcount; ++b)
      for (std::size_t r = 0; r < n; ++r) rep_idx[b * n + r] = b;

    std::vector<std::size_t> kv_idx;
    std::vector<std::uint8_t> kv_mask;
    if (!no_central) {
      kv_idx.resize(bcount * (n + 1));
      kv_mask.assign(bcount * (n + 1), 0);
      for (std::size_t b = 0; b < bcount; ++b) {
        kv_idx[b * (n + 1)] = b;
        kv_mask[b * (n + 1)] = 1;
        for (std::size_t r = 0; r < n; ++r) {
          kv_idx[b * (n + 1) + 1 + r] = bcount + b * n + r;
          kv_mask[b * (n + 1) + 1 + r] = mask[b * n + r];
        }
      }
    }

    for (std::size_t l = 0; l < config.layers; ++l) {
      const LayerAttention& att = params.layer_attention[l];
      std::vector<Tensor> tokens;
      tokens.push_back(shift_rows_down(state, n));
      if (!no_central) tokens.push_back(gather_rows(central, rep_idx));
      tokens.push_back(state);
      tokens.push_back(item_emb);
      Tensor token_block = stack_tokens(tokens);  // (B*n) x T x d
      Tensor queries = reshape(state, {bcount * n, 1, d});
      Tensor updated =
          multi_head_attention_batched(queries, token_block, att.item, config.heads, {}, drop);
      state = mask_rows(reshape(updated, {bcount * n, d}), mask);

      if (!no_central) {
        Tensor cat = concat_rows(central, state);  // (B + B*n) x d
        Tensor kv = reshape(gather_rows(cat, kv_idx), {bcount, n + 1, d});
        Tensor q = reshape(central, {bcount, 1, d});
        central = reshape(
            multi_head_attention_batched(q, kv, att.central, config.heads, kv_mask, drop),
            {bcount, d});
      }
    }
  }

  // Interest extraction, batched: same math as extract_interests with the
  // position axis kept per sample.
  Tensor h = state;
  if (drop.rate > 0.0) h = dropout(h, drop.rate, *drop.rng);
  const std::size_t k = params.extract_score.dim(0);
  Tensor hidden = pimi::tanh(matmul(h, params.extract_hidden, /*transpose_b=*/true));
  Tensor scores = matmul(hidden, params.extract_score, /*transpose_b=*/true);  // (B*n) x K
  std::vector<std::uint8_t> col_mask(bcount * n * k);
  for (std::size_t b = 0; b < bcount; ++b)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t ki = 0; ki < k; ++ki) col_mask[(b * n + r) * k + ki] = mask[b * n + r];
  Tensor attn = masked_softmax(reshape(scores, {bcount, n, k}), 1, col_mask);
  BatchInterests out;
  out.attention = transpose_last2(attn);                        // B x K x n
  out.vectors = bmm(out.attention, reshape(h, {bcount, n, d}));  // B x K x d
  return out;
}

}  // namespace pimi
