// Copyright 2026 The NestPipe Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Sharded hierarchical embedding store. Each worker owns the host shard for
// keys with id % W == owner, plus two device buffers that alternate between
// the active role (serving the batch in fwd/bwd) and the prefetch role
// (being filled for the next batch).

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestpipe/core.hpp"

namespace nestpipe::embedding {

using EmbeddingRow = std::vector<float>;
using RowMap = std::map<SparseKey, EmbeddingRow>;

inline WorkerId shard_of(SparseKey key, std::size_t world) {
  return static_cast<WorkerId>(key.id % world);
}

struct DedupResult {
  std::vector<SparseKey> unique;    // ascending
  std::vector<std::size_t> inverse;  // unique[inverse[i]] == keys[i]
};

inline DedupResult dedup(std::span<const SparseKey> keys) {
  DedupResult r;
  r.unique = canonical_key_order(std::vector<SparseKey>(keys.begin(), keys.end()));
  r.inverse.reserve(keys.size());
  for (auto k : keys) {
    auto it = std::lower_bound(r.unique.begin(), r.unique.end(), k);
    r.inverse.push_back(static_cast<std::size_t>(it - r.unique.begin()));
  }
  return r;
}

// Deterministic initial value of a row; identical on every worker and in the
// reference trainer. Values lie strictly inside (-1/sqrt(d), 1/sqrt(d)).
inline EmbeddingRow init_row(const Prf& prf, SparseKey key, std::size_t dim) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  EmbeddingRow row(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    float v = static_cast<float>(prf_uniform(prf, "emb", {key.id, j}, -bound, bound));
    while (std::abs(static_cast<double>(v)) >= bound) v = std::nextafter(v, 0.0f);
    row[j] = v;
  }
  return row;
}

class HostShard {
 public:
  HostShard(WorkerId owner, std::size_t world, std::size_t dim)
      : owner_(owner), world_(world), dim_(dim) {}

  WorkerId owner() const { return owner_; }
  std::size_t world() const { return world_; }
  std::size_t dim() const { return dim_; }
  bool owns(SparseKey k) const { return shard_of(k, world_) == owner_; }

  const RowMap& rows() const { return rows_; }

  // Materializes the row on first access.
  const EmbeddingRow& fetch(SparseKey k, const Prf& prf) {
    check_owner(k);
    auto it = rows_.find(k);
    if (it == rows_.end()) it = rows_.emplace(k, init_row(prf, k, dim_)).first;
    return it->second;
  }

  void store(SparseKey k, const EmbeddingRow& row) {
    check_owner(k);
    rows_[k] = row;
  }

  void check_owner(SparseKey k) const {
    if (!owns(k))
      throw ShardViolation("key " + std::to_string(k.id) + " is not owned by worker " +
                           std::to_string(owner_));
  }

 private:
  WorkerId owner_;
  std::size_t world_;
  std::size_t dim_;
  RowMap rows_;
};

enum class BufferRole { kActive, kPrefetch };

struct HbmBuffer {
  WorkerId owner = 0;
  BufferRole role = BufferRole::kPrefetch;
  std::uint64_t step = 0;
  RowMap rows;
  std::set<SparseKey> dirty;
  bool grads_applied = false;  // gradients of `step` are in `rows`
  bool written_back = false;   // dirty rows have reached the host shard
  bool synced = false;         // dual-buffer sync ran against step - 1

  bool empty() const { return rows.empty() && dirty.empty(); }
};

inline HbmBuffer retrieve(HostShard& shard, std::span<const SparseKey> keys, const Prf& prf,
                          std::uint64_t step) {
  HbmBuffer buf;
  buf.owner = shard.owner();
  buf.role = BufferRole::kPrefetch;
  buf.step = step;
  for (auto k : keys) buf.rows.emplace(k, shard.fetch(k, prf));
  return buf;
}

// Copies the rows at the intersection of both buffers from active (fully
// updated by step t-1) into prefetch (step t). Other prefetch rows are left
// alone: they were untouched by step t-1, so the host copy is current.
inline void dual_buffer_sync(const HbmBuffer& active, HbmBuffer& prefetch) {
  if (active.step + 1 != prefetch.step)
    throw OrderingViolation("dual_buffer_sync: active step " + std::to_string(active.step) +
                            " does not precede prefetch step " + std::to_string(prefetch.step));
  if (!active.grads_applied)
    throw OrderingViolation("dual_buffer_sync: gradients of step " +
                            std::to_string(active.step) + " not applied yet");
  if (active.owner != prefetch.owner)
    throw ShardViolation("dual_buffer_sync: buffers belong to different owners");
  auto a = active.rows.begin();
  auto p = prefetch.rows.begin();
  while (a != active.rows.end() && p != prefetch.rows.end()) {
    if (a->first < p->first) {
      ++a;
    } else if (p->first < a->first) {
      ++p;
    } else {
      p->second = a->second;
      ++a;
      ++p;
    }
  }
  prefetch.synced = true;
}

// One per-sample gradient contribution; `contributor` is the global
// sample_id, the canonical summation key.
struct KeyGrad {
  SparseKey key;
  std::vector<float> grad;
  std::uint64_t contributor = 0;
};

// A per-key pre-sum over one (micro-batch, source worker) pair, in 64-bit.
struct PartialKeyGrad {
  SparseKey key;
  std::vector<double> grad;
};

namespace detail {

inline EmbeddingRow& row_for_grad(HbmBuffer& buf, SparseKey k, std::size_t len) {
  auto it = buf.rows.find(k);
  if (it == buf.rows.end())
    throw std::invalid_argument("gradient for key " + std::to_string(k.id) +
                                " absent from buffer of step " + std::to_string(buf.step));
  if (it->second.size() != len) throw ShapeError("gradient length does not match row");
  return it->second;
}

}  // namespace detail

// Exact-order rule: per key, contributions are summed in 32-bit in ascending
// contributor order, then e -= lr * sum / batch.
inline void apply_sparse_grads(HbmBuffer& buf, std::span<const KeyGrad> grads,
                               std::size_t batch_size, float lr) {
  std::vector<const KeyGrad*> order;
  order.reserve(grads.size());
  for (const auto& g : grads) order.push_back(&g);
  std::stable_sort(order.begin(), order.end(), [](const KeyGrad* a, const KeyGrad* b) {
    return a->key != b->key ? a->key < b->key : a->contributor < b->contributor;
  });
  for (std::size_t i = 0; i < order.size();) {
    const SparseKey k = order[i]->key;
    EmbeddingRow& row = detail::row_for_grad(buf, k, order[i]->grad.size());
    std::vector<float> sum(row.size(), 0.0f);
    for (; i < order.size() && order[i]->key == k; ++i) {
      if (order[i]->grad.size() != row.size()) throw ShapeError("gradient length mismatch");
      for (std::size_t j = 0; j < row.size(); ++j) sum[j] += order[i]->grad[j];
    }
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = sgd_update(row[j], sum[j], batch_size, lr);
    buf.dirty.insert(k);
  }
}

// Fast rule: pre-sums are merged in the order given (the caller supplies
// ascending (micro-batch, source worker) order) with 64-bit accumulation.
inline void apply_sparse_grads(HbmBuffer& buf, std::span<const PartialKeyGrad> grads,
                               std::size_t batch_size, float lr) {
  std::map<SparseKey, std::vector<double>> sums;
  for (const auto& g : grads) {
    detail::row_for_grad(buf, g.key, g.grad.size());
    auto& s = sums[g.key];
    if (s.empty()) s.assign(g.grad.size(), 0.0);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] += g.grad[j];
  }
  for (const auto& [k, s] : sums) {
    EmbeddingRow& row = buf.rows.at(k);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = sgd_update(row[j], s[j], batch_size, lr);
    buf.dirty.insert(k);
  }
}

inline void write_back(HbmBuffer& buf, HostShard& shard) {
  if (buf.owner != shard.owner())
    throw ShardViolation("write_back: buffer of worker " + std::to_string(buf.owner) +
                         " written to shard of worker " + std::to_string(shard.owner()));
  for (auto k : buf.dirty) shard.store(k, buf.rows.at(k));
  buf.written_back = true;
}

struct BufferPair {
  HbmBuffer active;
  HbmBuffer prefetch;
};

// Fresh pair for a worker before step 1: the "active" buffer stands for the
// empty step 0 and is trivially applied and written back.
inline BufferPair make_buffer_pair(WorkerId owner) {
  BufferPair p;
  p.active.owner = p.prefetch.owner = owner;
  p.active.role = BufferRole::kActive;
  p.active.step = 0;
  p.active.grads_applied = p.active.written_back = p.active.synced = true;
  p.prefetch.role = BufferRole::kPrefetch;
  p.prefetch.step = 1;
  return p;
}

// Prefetch becomes active; the outgoing active buffer is emptied and
// recycled as the prefetch buffer for the step after.
inline void swap_buffers(BufferPair& pair) {
  if (!pair.active.written_back)
    throw OrderingViolation("swap_buffers: active buffer of step " +
                            std::to_string(pair.active.step) + " not written back");
  std::swap(pair.active, pair.prefetch);
  pair.active.role = BufferRole::kActive;
  HbmBuffer& recycled = pair.prefetch;
  recycled.role = BufferRole::kPrefetch;
  recycled.rows.clear();
  recycled.dirty.clear();
  recycled.grads_applied = recycled.written_back = recycled.synced = false;
  recycled.step = pair.active.step + 1;
}

// Debug dump: for each row in ascending key order, the key as u64 then the
// row as d float32, all little-endian.
inline void write_shard_dump(const std::filesystem::path& path, const HostShard& shard) {
  static_assert(std::endian::native == std::endian::little, "dump assumes little-endian host");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& [k, row] : shard.rows()) {
    out.write(reinterpret_cast<const char*>(&k.id), sizeof(k.id));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline RowMap read_shard_dump(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard dump: " + path.string());
  RowMap rows;
  std::uint64_t id = 0;
  while (in.read(reinterpret_cast<char*>(&id), sizeof(id))) {
    EmbeddingRow row(dim);
    if (!in.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(dim * sizeof(float))))
      throw IoError("truncated shard dump: " + path.string());
    rows.emplace(SparseKey{id}, std::move(row));
  }
  return rows;
}

}  // namespace nestpipe::embedding
