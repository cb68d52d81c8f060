// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

/// Projection weights for one multi-head attention block. All projections
/// are square [d x d] and bias-free.
struct AttentionParams {
  Tensor wq, wk, wv, wo;

  static AttentionParams init(std::size_t dim, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    AttentionParams p;
    p.wq = Tensor::uniform({dim, dim}, -bound, bound, rng, true);
    p.wk = Tensor::uniform({dim, dim}, -bound, bound, rng, true);
    p.wv = Tensor::uniform({dim, dim}, -bound, bound, rng, true);
    p.wo = Tensor::uniform({dim, dim}, -bound, bound, rng, true);
    return p;
  }
};

/// Optional dropout applied to attention weights during training.
struct DropoutSpec {
  double rate = 0.0;
  Rng* rng = nullptr;
};

namespace detail {

inline Tensor project_batched(const Tensor& x, const Tensor& w) {
  // [B x t x d] * [d x d]: flatten the batch and token axes for the GEMM.
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  Tensor flat = reshape(x, {b * t, d});
  return reshape(matmul(flat, w), {b, t, d});
}

}  // namespace detail

/// Scaled dot-product multi-head attention over a batch of token sets.
/// queries: [B x q x d], keys_values: [B x s x d]; returns [B x q x d].
/// `valid` (optional) flags which key/value slots participate per batch
/// element ([B x s], false entries receive zero attention).
inline Tensor multi_head_attention_batched(const Tensor& queries, const Tensor& keys_values,
                                           const AttentionParams& params, std::size_t heads,
                                           const std::vector<std::uint8_t>& valid = {},
                                           DropoutSpec drop = {}) {
  if (queries.rank() != 3 || keys_values.rank() != 3)
    throw ShapeError("attention: expected rank-3 inputs");
  const std::size_t b = queries.dim(0), q = queries.dim(1), d = queries.dim(2);
  const std::size_t s = keys_values.dim(1);
  if (keys_values.dim(0) != b || keys_values.dim(2) != d)
    throw ShapeError("attention: query/key batch or feature mismatch");
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention: feature dim " + std::to_string(d) +
                      " not divisible by head count " + std::to_string(heads));
  if (!valid.empty() && valid.size() != b * s)
    throw ShapeError("attention: validity mask must have one entry per key slot");

  Tensor qp = split_heads(detail::project_batched(queries, params.wq), heads);
  Tensor kp = split_heads(detail::project_batched(keys_values, params.wk), heads);
  Tensor vp = split_heads(detail::project_batched(keys_values, params.wv), heads);

  const std::size_t dh = d / heads;
  Tensor scores = scale(bmm(qp, kp, /*transpose_b=*/true),
                        1.0 / std::sqrt(static_cast<double>(dh)));  // [(B*h) x q x s]

  Tensor weights;
  if (valid.empty()) {
    weights = softmax(scores, 2);
  } else {
    std::vector<std::uint8_t> mask(b * heads * q * s);
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t t = 0; t < q; ++t)
          for (std::size_t j = 0; j < s; ++j)
            mask[(((bi * heads + h) * q) + t) * s + j] = valid[bi * s + j];
    weights = masked_softmax(scores, 2, mask);
  }
  if (drop.rate > 0.0) {
    if (drop.rng == nullptr) throw ContractError("attention: dropout requires an rng");
    weights = dropout(weights, drop.rate, *drop.rng);
  }

  Tensor ctx = merge_heads(bmm(weights, vp), heads);  // [B x q x d]
  return detail::project_batched(ctx, params.wo);
}

/// Unbatched convenience wrapper: queries [q x d], keys_values [s x d].
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                                   const AttentionParams& params, std::size_t heads,
                                   const std::vector<std::uint8_t>& valid = {},
                                   DropoutSpec drop = {}) {
  if (queries.rank() != 2 || keys_values.rank() != 2)
    throw ShapeError("attention: expected rank-2 inputs");
  Tensor out = multi_head_attention_batched(
      reshape(queries, {1, queries.dim(0), queries.dim(1)}),
      reshape(keys_values, {1, keys_values.dim(0), keys_values.dim(1)}), params, heads, valid,
      drop);
  return reshape(out, {queries.dim(0), queries.dim(1)});
}

}  // namespace pimi
