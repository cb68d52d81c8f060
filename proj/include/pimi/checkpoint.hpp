// Copyright 2026-present the pimi authors
// Licensed under the Apache License, Version 2.0.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pimi/common.hpp"
#include "pimi/model.hpp"
#include "pimi/tensor.hpp"

namespace pimi {

namespace detail {

constexpr char kCheckpointMagic[8] = {'P', 'I', 'M', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void append_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_f64(std::string& buf, double v) {
  append_u64(buf, std::bit_cast<std::uint64_t>(v));
}

class CheckpointReader {
 public:
  CheckpointReader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint32_t read_u32() {
    require(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t read_u64() {
    require(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  double read_f64() { return std::bit_cast<double>(read_u64()); }

  std::string read_bytes(std::size_t n) {
    require(n);
    std::string out = buf_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool exhausted() const { return pos_ == end_; }

 private:
  void require(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint: truncated file");
  }

  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a64(const std::string& data, std::size_t end) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (std::size_t i = 0; i < end; ++i) {
    hash ^= static_cast<unsigned char>(data[i]);
    hash *= 1099511628211ULL;
  }
  return hash;
}

}  // namespace detail

struct CheckpointData {
  ModelConfig config;
  Ablation ablation;
  std::size_t vocab_size = 0;
  ParameterSet params;
};

/// Writes a self-validating binary snapshot of the model configuration,
/// the architecture switches it was trained with, and every parameter
/// array. The trailing checksum covers all preceding bytes.
inline void save_checkpoint(const std::string& path, ParameterSet params,
                            const ModelConfig& config, std::size_t vocab_size,
                            const Ablation& ablation = {}) {
  std::string buf;
  buf.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::append_u32(buf, detail::kCheckpointVersion);
  detail::append_u64(buf, config.dim);
  detail::append_u64(buf, config.seq_len);
  detail::append_u64(buf, config.interests);
  detail::append_u64(buf, config.layers);
  detail::append_u64(buf, config.interval_threshold);
  detail::append_u64(buf, config.heads);
  detail::append_f64(buf, config.dropout_rate);
  std::uint64_t switches = 0;
  if (ablation.no_periodicity) switches |= 1;
  if (ablation.no_interactivity) switches |= 2;
  if (ablation.no_central) switches |= 4;
  detail::append_u64(buf, switches);
  detail::append_u64(buf, vocab_size);

  std::size_t count = 0;
  params.for_each([&](const std::string&, Tensor&) { ++count; });
  detail::append_u64(buf, count);
  params.for_each([&](const std::string& name, Tensor& t) {
    detail::append_u64(buf, name.size());
    buf.append(name);
    detail::append_u64(buf, t.shape().size());
    for (std::size_t dim : t.shape()) detail::append_u64(buf, dim);
    for (double v : t.vals()) detail::append_f64(buf, v);
  });
  detail::append_u64(buf, detail::fnv1a64(buf, buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(detail::kCheckpointMagic) + 4 + 8)
    throw CheckpointError("checkpoint: file too small");
  const std::size_t body = buf.size() - 8;
  detail::CheckpointReader trailer(buf, buf.size());
  {
    detail::CheckpointReader tail(buf.substr(body), 8);
    if (tail.read_u64() != detail::fnv1a64(buf, body))
      throw CheckpointError("checkpoint: checksum mismatch");
  }

  detail::CheckpointReader r(buf, body);
  if (r.read_bytes(sizeof(detail::kCheckpointMagic)) !=
      std::string(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)))
    throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = r.read_u32();
  if (version != detail::kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));

  CheckpointData data;
  data.config.dim = r.read_u64();
  data.config.seq_len = r.read_u64();
  data.config.interests = r.read_u64();
  data.config.layers = r.read_u64();
  data.config.interval_threshold = r.read_u64();
  data.config.heads = r.read_u64();
  data.config.dropout_rate = r.read_f64();
  const std::uint64_t switches = r.read_u64();
  if (switches > 7) throw CheckpointError("checkpoint: unknown architecture switch bits");
  data.ablation.no_periodicity = (switches & 1) != 0;
  data.ablation.no_interactivity = (switches & 2) != 0;
  data.ablation.no_central = (switches & 4) != 0;
  data.vocab_size = r.read_u64();
  try {
    data.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: invalid configuration: ") + e.what());
  }
  if (data.vocab_size == 0) throw CheckpointError("checkpoint: empty vocabulary");

  std::map<std::string, Tensor> arrays;
  const std::uint64_t count = r.read_u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = r.read_u64();
    if (name_len > 4096) throw CheckpointError("checkpoint: implausible array name length");
    const std::string name = r.read_bytes(name_len);
    const std::uint64_t rank = r.read_u64();
    if (rank > 8) throw CheckpointError("checkpoint: implausible array rank");
    std::vector<std::size_t> shape;
    std::size_t total = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape.push_back(r.read_u64());
      total *= shape.back();
    }
    if (total > (1ULL << 30)) throw CheckpointError("checkpoint: implausible array size");
    Tensor t = Tensor::zeros(shape, /*requires_grad=*/true);
    for (std::size_t j = 0; j < total; ++j) t.vals()[j] = r.read_f64();
    if (!arrays.emplace(name, t).second)
      throw CheckpointError("checkpoint: duplicate array " + name);
  }
  if (!r.exhausted()) throw CheckpointError("checkpoint: trailing bytes after arrays");

  Rng scratch(0);
  data.params = ParameterSet::init(data.config, data.vocab_size, scratch);
  std::size_t matched = 0;
  data.params.for_each([&](const std::string& name, Tensor& t) {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw CheckpointError("checkpoint: missing array " + name);
    if (it->second.shape() != t.shape())
      throw CheckpointError("checkpoint: shape mismatch for " + name + ": file has " +
                            shape_string(it->second.shape()) + ", model expects " +
                            shape_string(t.shape()));
    t = it->second;
    ++matched;
  });
  if (matched != arrays.size())
    throw CheckpointError("checkpoint: file contains unexpected extra arrays");
  return data;
}

}  // namespace pimi
