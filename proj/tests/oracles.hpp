// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

// Straight-line reference implementations used as independent oracles.
// Everything here works on plain double vectors with explicit loops and
// shares no code with the library's tensor machinery.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include "pimi/model.hpp"
#include "pimi/tensor.hpp"

namespace pimi::testing {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  Mat m(rows, Vec(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t.vals()[r * cols + c];
  return m;
}

inline Vec to_vec(const Tensor& t) { return t.vals(); }

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline Vec vecmat(const Vec& x, const Mat& w) {
  Vec out(w[0].size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) out[j] += x[i] * w[i][j];
  return out;
}

inline Vec ref_softmax(const Vec& scores) {
  double mx = scores[0];
  for (double v : scores) mx = std::max(mx, v);
  Vec out(scores.size());
  double denom = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    denom += out[i];
  }
  for (double& v : out) v /= denom;
  return out;
}

struct RefAttention {
  Mat wq, wk, wv, wo;
};

inline RefAttention to_ref(const AttentionParams& p) {
  return RefAttention{to_mat(p.wq), to_mat(p.wk), to_mat(p.wv), to_mat(p.wo)};
}

/// Single-query multi-head attention: one d-vector attending over a token
/// list, head by head.
inline Vec ref_attention(const Vec& query, const std::vector<Vec>& tokens,
                         const RefAttention& att, std::size_t heads) {
  const std::size_t d = query.size();
  const std::size_t dh = d / heads;
  const Vec qp = vecmat(query, att.wq);
  std::vector<Vec> kp, vp;
  for (const Vec& t : tokens) {
    kp.push_back(vecmat(t, att.wk));
    vp.push_back(vecmat(t, att.wv));
  }
  Vec ctx(d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    Vec scores(tokens.size(), 0.0);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      double s = 0.0;
      for (std::size_t j = 0; j < dh; ++j) s += qp[h * dh + j] * kp[t][h * dh + j];
      scores[t] = s / std::sqrt(static_cast<double>(dh));
    }
    const Vec weights = ref_softmax(scores);
    for (std::size_t t = 0; t < tokens.size(); ++t)
      for (std::size_t j = 0; j < dh; ++j) ctx[h * dh + j] += weights[t] * vp[t][h * dh + j];
  }
  return vecmat(ctx, att.wo);
}

/// Reference periodicity encoding over raw interval indices.
inline Mat ref_periodicity(const std::vector<std::size_t>& entries, std::size_t n,
                           const std::vector<std::uint8_t>& mask, const Mat& interval_table,
                           const Vec& w1) {
  const std::size_t d = interval_table[0].size();
  Mat out(n, Vec(d, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    if (!mask[a]) continue;
    std::vector<std::size_t> partners;
    Vec scores;
    for (std::size_t b = 0; b < n; ++b) {
      if (!mask[b]) continue;
      partners.push_back(b);
      scores.push_back(dot(interval_table[entries[a * n + b]], w1));
    }
    const Vec weights = ref_softmax(scores);
    for (std::size_t i = 0; i < partners.size(); ++i) {
      const Vec& emb = interval_table[entries[a * n + partners[i]]];
      for (std::size_t j = 0; j < d; ++j) out[a][j] += weights[i] * emb[j];
    }
  }
  return out;
}

struct RefLayer {
  RefAttention item, central;
};

inline std::vector<RefLayer> to_ref(const std::vector<LayerAttention>& layers) {
  std::vector<RefLayer> out;
  for (const LayerAttention& l : layers)
    out.push_back(RefLayer{to_ref(l.item), to_ref(l.central)});
  return out;
}

/// Reference star-graph update: literal per-position loops.
inline Mat ref_interactivity(const Mat& item_emb, const Mat& period_emb,
                             const std::vector<std::uint8_t>& mask,
                             const std::vector<RefLayer>& layers, std::size_t layer_count,
                             std::size_t heads, bool no_central = false) {
  const std::size_t n = item_emb.size();
  const std::size_t d = item_emb[0].size();
  Mat state(n, Vec(d));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) state[r][j] = item_emb[r][j] + period_emb[r][j];
  if (layer_count == 0) return state;

  Vec central(d, 0.0);
  if (!no_central) {
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[r]) continue;
      ++count;
      for (std::size_t j = 0; j < d; ++j) central[j] += state[r][j];
    }
    for (double& v : central) v /= static_cast<double>(count);
  }

  for (std::size_t l = 0; l < layer_count; ++l) {
    Mat next(n, Vec(d, 0.0));
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[r]) continue;
      const Vec prev = r > 0 ? state[r - 1] : Vec(d, 0.0);
      std::vector<Vec> tokens;
      tokens.push_back(prev);
      if (!no_central) tokens.push_back(central);
      tokens.push_back(state[r]);
      tokens.push_back(item_emb[r]);
      next[r] = ref_attention(state[r], tokens, layers[l].item, heads);
    }
    state = next;
    if (!no_central) {
      std::vector<Vec> tokens;
      tokens.push_back(central);
      for (std::size_t r = 0; r < n; ++r)
        if (mask[r]) tokens.push_back(state[r]);
      central = ref_attention(central, tokens, layers[l].central, heads);
    }
  }
  return state;
}

/// Reference interest extraction, one interest row at a time.
inline Mat ref_extract(const Mat& state, const std::vector<std::uint8_t>& mask, const Mat& w2,
                       const Mat& w3) {
  const std::size_t n = state.size();
  const std::size_t d = state[0].size();
  const std::size_t k = w3.size();
  Mat hidden(n, Vec(w2.size()));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < w2.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += w2[i][j] * state[r][j];
      hidden[r][i] = std::tanh(s);
    }
  Mat interests(k, Vec(d, 0.0));
  for (std::size_t ki = 0; ki < k; ++ki) {
    std::vector<std::size_t> real;
    Vec scores;
    for (std::size_t r = 0; r < n; ++r) {
      if (!mask[r]) continue;
      real.push_back(r);
      double s = 0.0;
      for (std::size_t i = 0; i < w2.size(); ++i) s += w3[ki][i] * hidden[r][i];
      scores.push_back(s);
    }
    const Vec weights = ref_softmax(scores);
    for (std::size_t i = 0; i < real.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) interests[ki][j] += weights[i] * state[real[i]][j];
  }
  return interests;
}

// ---------------------------------------------------------------------------
// Retrieval-metric references
// ---------------------------------------------------------------------------

inline double ref_recall(const std::vector<std::size_t>& ranked,
                         const std::set<std::size_t>& truth) {
  std::size_t hits = 0;
  for (std::size_t item : ranked) hits += truth.count(item);
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline double ref_hitrate(const std::vector<std::size_t>& ranked,
                          const std::set<std::size_t>& truth) {
  for (std::size_t item : ranked)
    if (truth.count(item)) return 1.0;
  return 0.0;
}

inline double ref_ndcg(const std::vector<std::size_t>& ranked,
                       const std::set<std::size_t>& truth) {
  double dcg = 0.0;
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (truth.count(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  const std::size_t ideal = std::min(ranked.size(), truth.size());
  double idcg = 0.0;
  for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return idcg > 0.0 ? dcg / idcg : 0.0;
}

/// Exhaustive maximization of the additive value function over all
/// C(pool, N) subsets. Returns the best subset under (max total score,
/// lexicographically smallest sorted item list) ordering.
inline std::set<std::size_t> ref_best_subset(const std::vector<std::size_t>& pool,
                                             const std::vector<double>& scores, std::size_t n) {
  std::vector<std::size_t> best_items;
  double best_q = -1e300;
  bool have = false;

  std::vector<std::size_t> comb(n);
  // Enumerate combinations via the standard odometer.
  for (std::size_t i = 0; i < n; ++i) comb[i] = i;
  while (true) {
    double q = 0.0;
    std::vector<std::size_t> items;
    for (std::size_t i : comb) {
      q += scores[i];
      items.push_back(pool[i]);
    }
    std::sort(items.begin(), items.end());
    if (!have || q > best_q + 1e-12 ||
        (std::abs(q - best_q) <= 1e-12 && items < best_items)) {
      best_q = q;
      best_items = items;
      have = true;
    }
    // Advance the combination odometer.
    std::size_t i = n;
    while (i > 0) {
      --i;
      if (comb[i] != i + pool.size() - n) {
        ++comb[i];
        for (std::size_t j = i + 1; j < n; ++j) comb[j] = comb[j - 1] + 1;
        break;
      }
      if (i == 0) return std::set<std::size_t>(best_items.begin(), best_items.end());
    }
  }
}

}  // namespace pimi::testing
