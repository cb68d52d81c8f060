// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pimi/common.hpp"

namespace pimi {

/// Dense row-major tensor of 64-bit floats with optional gradient storage.
/// Tensor itself is a cheap shared handle; copies alias the same storage.
struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // same length as values when requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    auto d = std::make_shared<TensorData>();
    std::size_t total = 1;
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("tensor extent must be positive");
      total *= e;
    }
    d->shape = std::move(shape);
    d->values.assign(total, 0.0);
    d->requires_grad = requires_grad;
    if (requires_grad) d->grad.assign(total, 0.0);
    return Tensor(std::move(d));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (values.size() != t.size())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(t.shape()));
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    Tensor t = zeros({1}, requires_grad);
    t.d_->values[0] = v;
    return t;
  }

  static Tensor uniform(std::vector<std::size_t> shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.d_->values) v = rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape.at(i); }
  std::size_t size() const { return d_->values.size(); }
  bool requires_grad() const { return d_ && d_->requires_grad; }

  std::vector<double>& vals() { return d_->values; }
  const std::vector<double>& vals() const { return d_->values; }
  std::vector<double>& grads() {
    if (!d_->requires_grad)
      throw ContractError("tensor has no gradient storage");
    return d_->grad;
  }
  const std::vector<double>& grads() const {
    if (!d_->requires_grad)
      throw ContractError("tensor has no gradient storage");
    return d_->grad;
  }

  double item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
    return d_->values[0];
  }

  void zero_grad() {
    if (d_ && d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  /// Deep copy of values (gradient storage reset to zero).
  Tensor clone() const {
    Tensor t = zeros(d_->shape, d_->requires_grad);
    t.d_->values = d_->values;
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  TensorData* impl() const { return d_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

/// Wengert list of recorded operations. Forward ops append a backward rule;
/// replaying the list in reverse populates grad for every requires_grad
/// tensor reachable from the loss. Cleared between training steps.
class Tape {
 public:
  void record(std::function<void()> backward_rule) {
    entries_.push_back(std::move(backward_rule));
  }

  std::size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  /// Seeds the loss gradient with 1 and replays the tape backward.
  /// Gradients accumulate additively across fan-out.
  void backward(Tensor& loss) {
    if (loss.size() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_string(loss.shape()));
    if (!loss.requires_grad())
      throw ContractError("backward: loss does not require grad (not connected to the tape)");
    loss.grads()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> entries_;
};

/// Active tape for the current thread. Forward ops record onto it when set;
/// with no active tape, ops run in pure inference mode (thread-safe given a
/// frozen parameter set).
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(active_tape()) { active_tape() = &tape; }
  ~TapeScope() { active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool track(const Tensor& a) { return active_tape() != nullptr && a.requires_grad(); }

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction operations
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros(a.shape(), rec);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out.vals()[i] = a.vals()[i] + b.vals()[i];
  if (rec) {
    active_tape()->record([a, b, out]() {
      const auto& g = out.grads();
      if (a.requires_grad()) {
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < out.size(); ++i) out.vals()[i] = a.vals()[i] - b.vals()[i];
  if (rec) {
    active_tape()->record([a, b, out]() {
      const auto& g = out.grads();
      if (a.requires_grad()) {
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < out.size(); ++i) out.vals()[i] = a.vals()[i] * b.vals()[i];
  if (rec) {
    active_tape()->record([a, b, out]() {
      const auto& g = out.grads();
      if (a.requires_grad()) {
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.vals()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.vals()[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < out.size(); ++i) out.vals()[i] = a.vals()[i] * c;
  if (rec) {
    active_tape()->record([a, out, c]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

inline Tensor tanh(const Tensor& a) {
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros(a.shape(), rec);
  for (std::size_t i = 0; i < out.size(); ++i) out.vals()[i] = std::tanh(a.vals()[i]);
  if (rec) {
    active_tape()->record([a, out]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (1.0 - out.vals()[i] * out.vals()[i]);
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& a) {
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({1}, rec);
  double s = 0.0;
  for (double v : a.vals()) s += v;
  out.vals()[0] = s;
  if (rec) {
    active_tape()->record([a, out]() {
      const double g = out.grads()[0];
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

/// Sum of same-shape tensors (used to reduce per-sample losses).
inline Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ContractError("add_n: empty term list");
  bool rec = false;
  for (const Tensor& t : terms) {
    detail::check_same_shape(terms.front(), t, "add_n");
    rec = rec || detail::track(t);
  }
  Tensor out = Tensor::zeros(terms.front().shape(), rec);
  for (const Tensor& t : terms)
    for (std::size_t i = 0; i < out.size(); ++i) out.vals()[i] += t.vals()[i];
  if (rec) {
    active_tape()->record([terms, out]() {
      const auto& g = out.grads();
      for (const Tensor& t : terms) {
        if (!t.requires_grad()) continue;
        auto& gt = t.impl()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  std::size_t total = 1;
  for (std::size_t e : shape) total *= e;
  if (total != a.size())
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros(std::move(shape), rec);
  out.vals() = a.vals();
  if (rec) {
    active_tape()->record([a, out]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({c, r}, rec);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.vals()[j * r + i] = a.vals()[i * c + j];
  if (rec) {
    active_tape()->record([a, out, r, c]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
  }
  return out;
}

/// Rows [r0, r0+count) of a 2-D tensor.
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t count) {
  if (a.rank() != 2) throw ShapeError("slice_rows: expected rank 2");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (r0 + count > rows) throw ShapeError("slice_rows: range out of bounds");
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({count, cols}, rec);
  std::memcpy(out.vals().data(), a.vals().data() + r0 * cols, count * cols * sizeof(double));
  if (rec) {
    active_tape()->record([a, out, r0, cols, count]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < count * cols; ++i) ga[r0 * cols + i] += g[i];
    });
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw ShapeError("concat_rows: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  const std::size_t cols = a.dim(1);
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros({a.dim(0) + b.dim(0), cols}, rec);
  std::memcpy(out.vals().data(), a.vals().data(), a.size() * sizeof(double));
  std::memcpy(out.vals().data() + a.size(), b.vals().data(), b.size() * sizeof(double));
  if (rec) {
    active_tape()->record([a, b, out]() {
      const auto& g = out.grads();
      if (a.requires_grad()) {
        auto& ga = a.impl()->grad;
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.impl()->grad;
        const std::size_t off = a.size();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[off + i];
      }
    });
  }
  return out;
}

/// Shifts rows down by one: out[0] = 0, out[r] = a[r-1]. Gives each sequence
/// position its temporal predecessor under left-padding. A positive
/// block_rows treats the matrix as stacked blocks of that many rows and
/// shifts inside each block independently.
inline Tensor shift_rows_down(const Tensor& a, std::size_t block_rows = 0) {
  if (a.rank() != 2) throw ShapeError("shift_rows_down: expected rank 2");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (block_rows == 0) block_rows = rows;
  if (rows % block_rows != 0)
    throw ShapeError("shift_rows_down: row count " + std::to_string(rows) +
                     " is not a multiple of block size " + std::to_string(block_rows));
  const std::size_t blocks = rows / block_rows;
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({rows, cols}, rec);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t base = b * block_rows * cols;
    if (block_rows > 1)
      std::memcpy(out.vals().data() + base + cols, a.vals().data() + base,
                  (block_rows - 1) * cols * sizeof(double));
  }
  if (rec) {
    active_tape()->record([a, out, blocks, block_rows, cols]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t base = b * block_rows * cols;
        for (std::size_t i = 0; i < (block_rows - 1) * cols; ++i) ga[base + i] += g[base + cols + i];
      }
    });
  }
  return out;
}

inline Tensor repeat_row(const Tensor& a, std::size_t n) {
  if (a.rank() != 2 || a.dim(0) != 1) throw ShapeError("repeat_row: expected shape [1xd]");
  const std::size_t cols = a.dim(1);
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({n, cols}, rec);
  for (std::size_t r = 0; r < n; ++r)
    std::memcpy(out.vals().data() + r * cols, a.vals().data(), cols * sizeof(double));
  if (rec) {
    active_tape()->record([a, out, n, cols]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < cols; ++j) ga[j] += g[r * cols + j];
    });
  }
  return out;
}

/// Zeroes rows whose mask entry is false. Shapes: a is [n x d], mask has n entries.
inline Tensor mask_rows(const Tensor& a, const std::vector<std::uint8_t>& mask) {
  if (a.rank() != 2 || a.dim(0) != mask.size())
    throw ShapeError("mask_rows: mask length does not match row count");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({rows, cols}, rec);
  for (std::size_t r = 0; r < rows; ++r)
    if (mask[r])
      std::memcpy(out.vals().data() + r * cols, a.vals().data() + r * cols,
                  cols * sizeof(double));
  if (rec) {
    active_tape()->record([a, out, mask, rows, cols]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[r * cols + j];
      }
    });
  }
  return out;
}

/// Gathers rows of a 2-D tensor: out[i] = a[indices[i]]. Duplicated indices
/// accumulate additively on the backward pass (embedding lookup semantics).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& indices) {
  if (a.rank() != 2) throw ShapeError("gather_rows: expected rank 2");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  for (std::size_t idx : indices)
    if (idx >= rows)
      throw ContractError("gather_rows: index " + std::to_string(idx) +
                          " out of range for table with " + std::to_string(rows) + " rows");
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({indices.size(), cols}, rec);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(out.vals().data() + i * cols, a.vals().data() + indices[i] * cols,
                cols * sizeof(double));
  if (rec) {
    active_tape()->record([a, out, indices, cols]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j) ga[indices[i] * cols + j] += g[i * cols + j];
    });
  }
  return out;
}

/// Interleaves T same-shape [n x d] tensors into an [n x T x d] token block:
/// out[r][t] = inputs[t] row r.
inline Tensor stack_tokens(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ContractError("stack_tokens: empty input list");
  const std::size_t n = inputs.front().dim(0), d = inputs.front().dim(1);
  bool rec = false;
  for (const Tensor& t : inputs) {
    detail::check_same_shape(inputs.front(), t, "stack_tokens");
    rec = rec || detail::track(t);
  }
  const std::size_t tcount = inputs.size();
  Tensor out = Tensor::zeros({n, tcount, d}, rec);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t t = 0; t < tcount; ++t)
      std::memcpy(out.vals().data() + (r * tcount + t) * d, inputs[t].vals().data() + r * d,
                  d * sizeof(double));
  if (rec) {
    active_tape()->record([inputs, out, n, d, tcount]() {
      const auto& g = out.grads();
      for (std::size_t t = 0; t < tcount; ++t) {
        if (!inputs[t].requires_grad()) continue;
        auto& gt = inputs[t].impl()->grad;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[(r * tcount + t) * d + j];
      }
    });
  }
  return out;
}

/// Mean over rows with a true mask entry; shape [1 x d]. At least one row
/// must be unmasked.
inline Tensor mean_rows_masked(const Tensor& a, const std::vector<std::uint8_t>& mask) {
  if (a.rank() != 2 || a.dim(0) != mask.size())
    throw ShapeError("mean_rows_masked: mask length does not match row count");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::size_t count = 0;
  for (std::uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) throw ContractError("mean_rows_masked: all rows masked");
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({1, cols}, rec);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < cols; ++j) out.vals()[j] += a.vals()[r * cols + j];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t j = 0; j < cols; ++j) out.vals()[j] *= inv;
  if (rec) {
    active_tape()->record([a, out, mask, rows, cols, inv]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] += g[j] * inv;
      }
    });
  }
  return out;
}

/// Per-block masked row mean: the input is read as stacked blocks of
/// block_rows rows and each block yields one output row, averaging its rows
/// with a true mask entry. Every block needs at least one unmasked row.
inline Tensor mean_rows_blocked(const Tensor& a, const std::vector<std::uint8_t>& mask,
                                std::size_t block_rows) {
  if (a.rank() != 2 || a.dim(0) != mask.size())
    throw ShapeError("mean_rows_blocked: mask length does not match row count");
  if (block_rows == 0 || a.dim(0) % block_rows != 0)
    throw ShapeError("mean_rows_blocked: row count " + std::to_string(a.dim(0)) +
                     " is not a multiple of block size " + std::to_string(block_rows));
  const std::size_t blocks = a.dim(0) / block_rows, cols = a.dim(1);
  std::vector<double> inv(blocks);
  for (std::size_t b = 0; b < blocks; ++b) {
    std::size_t count = 0;
    for (std::size_t r = 0; r < block_rows; ++r) count += mask[b * block_rows + r] ? 1 : 0;
    if (count == 0) throw ContractError("mean_rows_blocked: block with all rows masked");
    inv[b] = 1.0 / static_cast<double>(count);
  }
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({blocks, cols}, rec);
  for (std::size_t b = 0; b < blocks; ++b) {
    double* orow = out.vals().data() + b * cols;
    for (std::size_t r = 0; r < block_rows; ++r) {
      if (!mask[b * block_rows + r]) continue;
      const double* arow = a.vals().data() + (b * block_rows + r) * cols;
      for (std::size_t j = 0; j < cols; ++j) orow[j] += arow[j];
    }
    for (std::size_t j = 0; j < cols; ++j) orow[j] *= inv[b];
  }
  if (rec) {
    active_tape()->record([a, out, mask, blocks, block_rows, cols, inv]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t r = 0; r < block_rows; ++r) {
          if (!mask[b * block_rows + r]) continue;
          for (std::size_t j = 0; j < cols; ++j)
            ga[(b * block_rows + r) * cols + j] += g[b * cols + j] * inv[b];
        }
    });
  }
  return out;
}

/// Swaps the last two axes of a rank-3 tensor: [B x m x p] -> [B x p x m].
inline Tensor transpose_last2(const Tensor& a) {
  if (a.rank() != 3)
    throw ShapeError("transpose_last2: expected rank 3, got " + shape_string(a.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), p = a.dim(2);
  const bool rec = detail::track(a);
  Tensor out = Tensor::zeros({batch, p, m}, rec);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = a.vals().data() + b * m * p;
    double* dst = out.vals().data() + b * m * p;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p; ++j) dst[j * m + i] = src[i * p + j];
  }
  if (rec) {
    active_tape()->record([a, out, batch, m, p]() {
      const auto& g = out.grads();
      auto& ga = a.impl()->grad;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = g.data() + b * m * p;
        double* dst = ga.data() + b * m * p;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < p; ++j) dst[i * p + j] += src[j * m + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

// C[m x p] += A[m x k] * B[k x p], row-major.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C[m x p] += A[m x k] * B[p x k]^T, row-major.
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * p;
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] += s;
    }
  }
}

// C[m x p] += A[k x m]^T * B[k x p], row-major.
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t p) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* arow = a + kk * m;
    const double* brow = b + kk * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double aik = arow[i];
      double* crow = c + i * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
}

}  // namespace detail

/// Matrix product. With transpose_b the second operand is [p x k] and used
/// transposed. Gradient rules are recorded when either input requires grad.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1);
  const std::size_t p = transpose_b ? b.dim(0) : b.dim(1);
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  if (k != bk)
    throw ShapeError("matmul: inner extents disagree for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + (transpose_b ? " (transposed)" : ""));
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros({m, p}, rec);
  if (transpose_b)
    detail::gemm_nt_acc(a.vals().data(), b.vals().data(), out.vals().data(), m, k, p);
  else
    detail::gemm_acc(a.vals().data(), b.vals().data(), out.vals().data(), m, k, p);
  if (rec) {
    active_tape()->record([a, b, out, m, k, p, transpose_b]() {
      const double* g = out.grads().data();
      if (a.requires_grad()) {
        double* ga = a.impl()->grad.data();
        if (transpose_b)  // dA = dC * B
          detail::gemm_acc(g, b.vals().data(), ga, m, p, k);
        else  // dA = dC * B^T
          detail::gemm_nt_acc(g, b.vals().data(), ga, m, p, k);
      }
      if (b.requires_grad()) {
        double* gb = b.impl()->grad.data();
        if (transpose_b)  // dB = dC^T * A
          detail::gemm_tn_acc(g, a.vals().data(), gb, p, m, k);
        else  // dB = A^T * dC
          detail::gemm_tn_acc(a.vals().data(), g, gb, k, m, p);
      }
    });
  }
  return out;
}

/// Batched matrix product over the leading extent: [B x m x k] * [B x k x p]
/// (or [B x p x k] with transpose_b) -> [B x m x p].
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: expected rank-3 operands with equal batch, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t p = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (k != bk)
    throw ShapeError("bmm: inner extents disagree for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  const bool rec = detail::track(a) || detail::track(b);
  Tensor out = Tensor::zeros({batch, m, p}, rec);
  for (std::size_t i = 0; i < batch; ++i) {
    const double* pa = a.vals().data() + i * m * k;
    const double* pb = b.vals().data() + i * (transpose_b ? p * k : k * p);
    double* pc = out.vals().data() + i * m * p;
    if (transpose_b)
      detail::gemm_nt_acc(pa, pb, pc, m, k, p);
    else
      detail::gemm_acc(pa, pb, pc, m, k, p);
  }
  if (rec) {
    active_tape()->record([a, b, out, batch, m, k, p, transpose_b]() {
      for (std::size_t i = 0; i < batch; ++i) {
        const double* g = out.grads().data() + i * m * p;
        const double* pa = a.vals().data() + i * m * k;
        const double* pb = b.vals().data() + i * (transpose_b ? p * k : k * p);
        if (a.requires_grad()) {
          double* ga = a.impl()->grad.data() + i * m * k;
          if (transpose_b)
            detail::gemm_acc(g, pb, ga, m, p, k);
          else
            detail::gemm_nt_acc(g, pb, ga, m, p, k);
        }
        if (b.requires_grad()) {
          double* gb = b.impl()->grad.data() + i * (transpose_b ? p * k : k * p);
          if (transpose_b)
            detail::gemm_tn_acc(g, pa, gb, p, m, k);
          else
            detail::gemm_tn_acc(pa, g, gb, k, m, p);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace detail {

struct AxisStrides {
  std::size_t outer, extent, inner;
};

inline AxisStrides axis_strides(const std::vector<std::size_t>& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape));
  AxisStrides s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Softmax over `axis`, restricted to entries whose mask is true (empty mask
// means all entries participate). Masked entries output exactly 0; a fully
// masked slice outputs all zeros.
inline Tensor softmax_impl(const Tensor& x, std::size_t axis,
                           const std::vector<std::uint8_t>& mask) {
  if (!mask.empty() && mask.size() != x.size())
    throw ShapeError("masked_softmax: mask length does not match tensor size");
  const AxisStrides st = axis_strides(x.shape(), axis);
  const bool rec = track(x);
  Tensor out = Tensor::zeros(x.shape(), rec);
  const auto at = [&](std::size_t o, std::size_t e, std::size_t i) {
    return (o * st.extent + e) * st.inner + i;
  };
  for (std::size_t o = 0; o < st.outer; ++o) {
    for (std::size_t i = 0; i < st.inner; ++i) {
      double mx = -1e300;
      bool any = false;
      for (std::size_t e = 0; e < st.extent; ++e) {
        const std::size_t idx = at(o, e, i);
        if (!mask.empty() && !mask[idx]) continue;
        any = true;
        mx = std::max(mx, x.vals()[idx]);
      }
      if (!any) continue;  // fully masked slice stays zero
      double denom = 0.0;
      for (std::size_t e = 0; e < st.extent; ++e) {
        const std::size_t idx = at(o, e, i);
        if (!mask.empty() && !mask[idx]) continue;
        const double v = std::exp(x.vals()[idx] - mx);
        out.vals()[idx] = v;
        denom += v;
      }
      for (std::size_t e = 0; e < st.extent; ++e) {
        const std::size_t idx = at(o, e, i);
        if (!mask.empty() && !mask[idx]) continue;
        out.vals()[idx] /= denom;
      }
    }
  }
  if (rec) {
    active_tape()->record([x, out, st, mask]() {
      const auto& g = out.grads();
      auto& gx = x.impl()->grad;
      for (std::size_t o = 0; o < st.outer; ++o) {
        for (std::size_t i = 0; i < st.inner; ++i) {
          double dot = 0.0;
          for (std::size_t e = 0; e < st.extent; ++e) {
            const std::size_t idx = (o * st.extent + e) * st.inner + i;
            if (!mask.empty() && !mask[idx]) continue;
            dot += g[idx] * out.vals()[idx];
          }
          for (std::size_t e = 0; e < st.extent; ++e) {
            const std::size_t idx = (o * st.extent + e) * st.inner + i;
            if (!mask.empty() && !mask[idx]) continue;
            gx[idx] += out.vals()[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

}  // namespace detail

/// Exponent-shifted softmax along `axis`; each slice sums to 1.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  return detail::softmax_impl(x, axis, {});
}

/// Softmax along `axis` over entries with a true mask bit (mask has the same
/// element count as x). Masked entries output 0.
inline Tensor masked_softmax(const Tensor& x, std::size_t axis,
                             const std::vector<std::uint8_t>& mask) {
  return detail::softmax_impl(x, axis, mask);
}

/// Cross-entropy of a row of logits against the class at `target`:
/// logsumexp(logits) - logits[target]. Shape [1 x S] or [S].
inline Tensor softmax_xent(const Tensor& logits, std::size_t target) {
  const std::size_t s = logits.size();
  if (target >= s) throw ContractError("softmax_xent: target index out of range");
  const bool rec = detail::track(logits);
  Tensor out = Tensor::zeros({1}, rec);
  double mx = -1e300;
  for (double v : logits.vals()) mx = std::max(mx, v);
  double denom = 0.0;
  for (double v : logits.vals()) denom += std::exp(v - mx);
  out.vals()[0] = mx + std::log(denom) - logits.vals()[target];
  if (rec) {
    active_tape()->record([logits, out, target, mx, denom]() {
      const double g = out.grads()[0];
      auto& gl = logits.impl()->grad;
      for (std::size_t i = 0; i < gl.size(); ++i) {
        const double p = std::exp(logits.vals()[i] - mx) / denom;
        gl[i] += g * (p - (i == target ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

/// Mean over rows of the per-row cross-entropy against the class at
/// `target`: (1/B) * sum_b (logsumexp(logits[b]) - logits[b][target]).
inline Tensor softmax_xent_rows(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_xent_rows: expected rank 2, got " + shape_string(logits.shape()));
  const std::size_t b = logits.dim(0), s = logits.dim(1);
  if (target >= s) throw ContractError("softmax_xent_rows: target index out of range");
  const bool rec = detail::track(logits);
  Tensor out = Tensor::zeros({1}, rec);
  std::vector<double> mx(b, -1e300), denom(b, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.vals().data() + i * s;
    for (std::size_t j = 0; j < s; ++j) mx[i] = std::max(mx[i], row[j]);
    for (std::size_t j = 0; j < s; ++j) denom[i] += std::exp(row[j] - mx[i]);
    total += mx[i] + std::log(denom[i]) - row[target];
  }
  const double inv = 1.0 / static_cast<double>(b);
  out.vals()[0] = total * inv;
  if (rec) {
    active_tape()->record([logits, out, target, mx, denom, b, s, inv]() {
      const double g = out.grads()[0] * inv;
      auto& gl = logits.impl()->grad;
      for (std::size_t i = 0; i < b; ++i) {
        const double* row = logits.vals().data() + i * s;
        for (std::size_t j = 0; j < s; ++j) {
          const double p = std::exp(row[j] - mx[i]) / denom[i];
          gl[i * s + j] += g * (p - (j == target ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention head plumbing and dropout
// ---------------------------------------------------------------------------

/// [B x q x d] -> [(B*heads) x q x (d/heads)]: splits the feature axis into
/// heads and folds heads into the batch axis.
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3) throw ShapeError("split_heads: expected rank 3");
  const std::size_t b = x.dim(0), q = x.dim(1), d = x.dim(2);
  if (d % heads != 0) throw ConfigError("split_heads: feature dim not divisible by head count");
  const std::size_t dh = d / heads;
  const bool rec = detail::track(x);
  Tensor out = Tensor::zeros({b * heads, q, dh}, rec);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < q; ++t)
        std::memcpy(out.vals().data() + (((bi * heads + h) * q) + t) * dh,
                    x.vals().data() + (bi * q + t) * d + h * dh, dh * sizeof(double));
  if (rec) {
    active_tape()->record([x, out, b, q, d, heads, dh]() {
      const auto& g = out.grads();
      auto& gx = x.impl()->grad;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < q; ++t)
            for (std::size_t j = 0; j < dh; ++j)
              gx[(bi * q + t) * d + h * dh + j] += g[(((bi * heads + h) * q) + t) * dh + j];
    });
  }
  return out;
}

/// Inverse of split_heads: [(B*heads) x q x dh] -> [B x q x (heads*dh)].
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3) throw ShapeError("merge_heads: expected rank 3");
  if (x.dim(0) % heads != 0) throw ConfigError("merge_heads: batch not divisible by head count");
  const std::size_t b = x.dim(0) / heads, q = x.dim(1), dh = x.dim(2);
  const std::size_t d = heads * dh;
  const bool rec = detail::track(x);
  Tensor out = Tensor::zeros({b, q, d}, rec);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < q; ++t)
        std::memcpy(out.vals().data() + (bi * q + t) * d + h * dh,
                    x.vals().data() + (((bi * heads + h) * q) + t) * dh, dh * sizeof(double));
  if (rec) {
    active_tape()->record([x, out, b, q, d, heads, dh]() {
      const auto& g = out.grads();
      auto& gx = x.impl()->grad;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t t = 0; t < q; ++t)
            for (std::size_t j = 0; j < dh; ++j)
              gx[(((bi * heads + h) * q) + t) * dh + j] += g[(bi * q + t) * d + h * dh + j];
    });
  }
  return out;
}

/// Inverted dropout: keeps each entry with probability 1-rate and rescales
/// by 1/(1-rate). Call sites skip this entirely at evaluation time.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  const bool rec = detail::track(x);
  Tensor out = Tensor::zeros(x.shape(), rec);
  for (std::size_t i = 0; i < x.size(); ++i) out.vals()[i] = x.vals()[i] * mask[i];
  if (rec) {
    active_tape()->record([x, out, mask = std::move(mask)]() {
      const auto& g = out.grads();
      auto& gx = x.impl()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

}  // namespace pimi
