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

// Intra-batch frozen-window execution. A batch is split into N micro-batches
// per worker; each micro-batch pulls its rows from the owners, runs dense
// fwd/bwd and pushes gradients back, all against the same frozen parameters.
// Updates are applied once, after the last micro-batch.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include "nestpipe/core.hpp"
#include "nestpipe/dense.hpp"
#include "nestpipe/embedding.hpp"
#include "nestpipe/fabric.hpp"

namespace nestpipe::fwp {

enum class PartitionMode { kSequential, kRandom, kClustered };

inline const char* to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::kSequential: return "sequential";
    case PartitionMode::kRandom: return "random";
    case PartitionMode::kClustered: return "clustered";
  }
  return "?";
}

struct Partition {
  std::vector<MicroBatch> micro_batches;
  PartitionMode provenance = PartitionMode::kSequential;
  std::uint64_t seed = 0;
};

namespace detail {

inline Partition slice(std::span<const Sample> samples, const std::vector<std::size_t>& order,
                       std::size_t n_micro, std::uint64_t step) {
  Partition p;
  const std::size_t g = samples.size() / n_micro;
  for (std::size_t i = 0; i < n_micro; ++i) {
    MicroBatch mb;
    mb.parent_step = step;
    mb.index = i + 1;
    for (std::size_t j = i * g; j < (i + 1) * g; ++j) mb.samples.push_back(samples[order[j]]);
    std::sort(mb.samples.begin(), mb.samples.end(),
              [](const Sample& a, const Sample& b) { return a.sample_id < b.sample_id; });
    p.micro_batches.push_back(std::move(mb));
  }
  return p;
}

// Greedy agglomeration: seed each group with the largest unassigned sample,
// then repeatedly add the unassigned sample sharing the most keys with the
// group's key union (ties: smaller union growth, then lower sample_id).
inline std::vector<std::size_t> greedy_cluster_order(std::span<const Sample> samples,
                                                     std::size_t n_micro) {
  const std::size_t n = samples.size();
  const std::size_t g = n / n_micro;
  std::vector<std::size_t> by_size(n);
  std::iota(by_size.begin(), by_size.end(), 0);
  std::sort(by_size.begin(), by_size.end(), [&](std::size_t a, std::size_t b) {
    if (samples[a].keys.size() != samples[b].keys.size())
      return samples[a].keys.size() > samples[b].keys.size();
    return samples[a].sample_id < samples[b].sample_id;
  });

  std::unordered_map<SparseKey, std::vector<std::size_t>> holders;
  for (std::size_t s = 0; s < n; ++s)
    for (auto k : samples[s].keys) holders[k].push_back(s);

  std::vector<bool> assigned(n, false);
  std::vector<std::size_t> overlap(n, 0);
  std::vector<std::size_t> order;
  order.reserve(n);
  std::size_t cursor = 0;

  for (std::size_t group = 0; group < n_micro; ++group) {
    std::fill(overlap.begin(), overlap.end(), 0);
    std::unordered_set<SparseKey> in_union;
    auto take = [&](std::size_t s) {
      assigned[s] = true;
      order.push_back(s);
      for (auto k : samples[s].keys)
        if (in_union.insert(k).second)
          for (std::size_t h : holders[k]) ++overlap[h];
    };
    while (assigned[by_size[cursor]]) ++cursor;
    take(by_size[cursor]);
    for (std::size_t filled = 1; filled < g; ++filled) {
      std::size_t best = n;
      for (std::size_t s = 0; s < n; ++s) {
        if (assigned[s]) continue;
        if (best == n) {
          best = s;
          continue;
        }
        const std::size_t growth_s = samples[s].keys.size() - overlap[s];
        const std::size_t growth_b = samples[best].keys.size() - overlap[best];
        if (overlap[s] != overlap[best] ? overlap[s] > overlap[best]
            : growth_s != growth_b     ? growth_s < growth_b
                                       : samples[s].sample_id < samples[best].sample_id)
          best = s;
      }
      take(best);
    }
  }
  return order;
}

}  // namespace detail

inline Partition cluster_samples(std::span<const Sample> samples, std::size_t n_micro,
                                 PartitionMode mode, std::uint64_t seed, std::uint64_t step = 0) {
  if (n_micro == 0 || samples.size() % n_micro != 0)
    throw std::invalid_argument("cluster_samples: " + std::to_string(samples.size()) +
                                " samples not divisible into " + std::to_string(n_micro) +
                                " micro-batches");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return samples[a].sample_id < samples[b].sample_id;
  });
  switch (mode) {
    case PartitionMode::kSequential:
      break;
    case PartitionMode::kRandom: {
      const Prf prf(seed);
      for (std::size_t i = order.size(); i > 1; --i) {
        const std::size_t j = prf.word("shuffle", {step, i}) % i;
        std::swap(order[i - 1], order[j]);
      }
      break;
    }
    case PartitionMode::kClustered:
      order = detail::greedy_cluster_order(samples, n_micro);
      break;
  }
  Partition p = detail::slice(samples, order, n_micro, step);
  p.provenance = mode;
  p.seed = seed;
  return p;
}

// Sum over micro-batches of |K(M_i)|: the number of rows one worker pulls
// through the embedding All2All in one batch.
inline std::size_t transmitted_keys(const Partition& p) {
  std::size_t total = 0;
  for (const auto& mb : p.micro_batches) total += key_set(mb.samples).size();
  return total;
}

// Per-owner key lists for one micro-batch; deduplicated within the
// micro-batch only, so a key used by several micro-batches is requested by
// each of them.
inline std::vector<std::vector<SparseKey>> microbatch_routing(const MicroBatch& mb,
                                                              std::size_t world) {
  std::vector<std::vector<SparseKey>> out(world);
  for (auto k : key_set(mb.samples)) out[embedding::shard_of(k, world)].push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Window execution
// ---------------------------------------------------------------------------

enum class WindowPolicy {
  kFrozen,
  // Applies each micro-batch's update before the next one starts. Not a
  // training mode: it exists to show what the frozen window prevents.
  kNaivePerMicroBatch,
};

// Fingerprints parameters and owner buffers when the window opens; any
// change before close is a violation.
class FrozenGuard {
 public:
  FrozenGuard(std::span<const dense::DenseParams<float>> params,
              std::span<embedding::HbmBuffer* const> buffers)
      : params_(params), buffers_(buffers), opened_(fingerprint()) {}

  std::size_t mutations() const { return fingerprint() == opened_ ? 0 : 1; }

  void check() const {
    if (mutations() != 0)
      throw OrderingViolation("parameters mutated while the frozen window was open");
  }

 private:
  static void mix(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& p : params_) mix(h, p.flat().data(), p.flat().size_bytes());
    for (const auto* b : buffers_) {
      for (const auto& [k, row] : b->rows) {
        mix(h, &k.id, sizeof(k.id));
        mix(h, row.data(), row.size() * sizeof(float));
      }
      for (auto k : b->dirty) mix(h, &k.id, sizeof(k.id));
    }
    return h;
  }

  std::span<const dense::DenseParams<float>> params_;
  std::span<embedding::HbmBuffer* const> buffers_;
  std::uint64_t opened_;
};

struct SampleDenseGrad {
  std::uint64_t sample_id = 0;
  std::vector<float> grad;
};

// Gradient state held open across the micro-batches of one batch.
struct FrozenAccumulator {
  explicit FrozenAccumulator(std::size_t world, std::size_t param_count)
      : exact(world), partial(world), dense_exact(world),
        dense_fast(world, std::vector<double>(param_count, 0.0)) {}

  std::vector<std::vector<embedding::KeyGrad>> exact;           // per owner
  std::vector<std::vector<embedding::PartialKeyGrad>> partial;  // per owner, arrival order
  std::vector<std::vector<SampleDenseGrad>> dense_exact;        // per worker
  std::vector<std::vector<double>> dense_fast;                  // per worker
  bool closed = false;
};

struct WindowStats {
  // transmitted[i][w]: rows worker w pulled for micro-batch i.
  std::vector<std::vector<std::size_t>> transmitted;
  double loss_sum = 0.0;
  std::size_t samples = 0;
  std::size_t guard_mutations = 0;
};

namespace detail {

struct GradMessage {
  std::vector<embedding::KeyGrad> exact;
  std::vector<embedding::PartialKeyGrad> partial;
};

// Dense update once every worker has its view of the batch's gradients.
inline void apply_dense(FrozenAccumulator& acc, std::span<dense::DenseParams<float>> params,
                        bool exact, std::size_t batch, float lr) {
  const std::size_t world = params.size();
  if (exact) {
    // Per-sample records are gathered and folded in ascending sample_id so
    // the sum is the same sequence of float additions as a single trainer.
    auto gathered = fabric::all_gather(acc.dense_exact);
    for (std::size_t w = 0; w < world; ++w) {
      auto& recs = gathered[w];
      std::stable_sort(recs.begin(), recs.end(),
                       [](const SampleDenseGrad& a, const SampleDenseGrad& b) {
                         return a.sample_id < b.sample_id;
                       });
      std::vector<float> sum(params[w].flat().size(), 0.0f);
      for (const auto& r : recs)
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += r.grad[i];
      dense::sgd_step<float>(params[w], sum, batch, lr);
    }
  } else {
    auto reduced = fabric::all_reduce_sum(acc.dense_fast);
    for (std::size_t w = 0; w < world; ++w)
      dense::sgd_step<double>(params[w], reduced[w], batch, lr);
  }
  for (auto& v : acc.dense_exact) v.clear();
  for (auto& v : acc.dense_fast) std::fill(v.begin(), v.end(), 0.0);
}

inline void apply_sparse(FrozenAccumulator& acc, std::span<embedding::HbmBuffer* const> buffers,
                         bool exact, std::size_t batch, float lr) {
  for (std::size_t o = 0; o < buffers.size(); ++o) {
    if (exact)
      embedding::apply_sparse_grads(*buffers[o], std::span<const embedding::KeyGrad>(acc.exact[o]),
                                    batch, lr);
    else
      embedding::apply_sparse_grads(
          *buffers[o], std::span<const embedding::PartialKeyGrad>(acc.partial[o]), batch, lr);
    acc.exact[o].clear();
    acc.partial[o].clear();
  }
}

}  // namespace detail

// Runs one batch through the window. partitions[w] is worker w's split of its
// local samples; buffers[o] is owner o's active buffer (already synced);
// params[w] is worker w's replica. On return every buffer has its gradients
// applied and every replica holds the same updated parameters.
inline WindowStats run_frozen_window(std::span<const Partition> partitions,
                                     std::span<embedding::HbmBuffer* const> buffers,
                                     std::span<dense::DenseParams<float>> params,
                                     const TrainConfig& cfg,
                                     WindowPolicy policy = WindowPolicy::kFrozen) {
  const std::size_t world = partitions.size();
  const std::size_t n_micro = cfg.num_micro_batches;
  const std::size_t batch = cfg.batch_size;
  const std::size_t dim = cfg.emb_dim;
  const float lr = static_cast<float>(cfg.learning_rate);
  const bool exact = cfg.exact_order_mode;
  if (buffers.size() != world || params.size() != world)
    throw std::invalid_argument("run_frozen_window: per-worker inputs disagree on W");
  for (const auto& p : partitions)
    if (p.micro_batches.size() != n_micro)
      throw std::invalid_argument("run_frozen_window: partition has wrong micro-batch count");

  WindowStats stats;
  stats.transmitted.assign(n_micro, std::vector<std::size_t>(world, 0));
  FrozenAccumulator acc(world, params[0].flat().size());
  std::optional<FrozenGuard> guard;
  if (policy == WindowPolicy::kFrozen)
    guard.emplace(std::span<const dense::DenseParams<float>>(params.data(), params.size()),
                  buffers);

  for (std::size_t i = 0; i < n_micro; ++i) {
    // Embedding All2All: requests out, rows back from the frozen buffers.
    std::vector<fabric::A2aPayload<SparseKey>> requests(world);
    for (std::size_t w = 0; w < world; ++w) {
      requests[w] = microbatch_routing(partitions[w].micro_batches[i], world);
      for (const auto& keys : requests[w]) stats.transmitted[i][w] += keys.size();
    }
    auto at_owner = fabric::all_to_all(std::move(requests));
    std::vector<fabric::A2aPayload<std::pair<SparseKey, embedding::EmbeddingRow>>> replies(world);
    for (std::size_t o = 0; o < world; ++o) {
      replies[o].resize(world);
      for (std::size_t src = 0; src < world; ++src)
        for (auto k : at_owner[o][src]) {
          auto it = buffers[o]->rows.find(k);
          if (it == buffers[o]->rows.end())
            throw ShardViolation("owner " + std::to_string(o) + " has no row for key " +
                                 std::to_string(k.id));
          replies[o][src].emplace_back(k, it->second);
        }
    }
    auto rows_at = fabric::all_to_all(std::move(replies));

    // Dense compute per worker, then gradient All2All to the owners.
    std::vector<fabric::A2aPayload<detail::GradMessage>> grads(world);
    for (std::size_t w = 0; w < world; ++w) {
      embedding::RowMap local;
      for (auto& from : rows_at[w])
        for (auto& [k, row] : from) local.emplace(k, std::move(row));
      const auto& mb = partitions[w].micro_batches[i];
      std::vector<std::vector<float>> pooled;
      std::vector<std::uint8_t> labels;
      for (const auto& s : mb.samples) {
        pooled.push_back(dense::pool(s, local, dim));
        labels.push_back(s.label);
      }
      auto fwd = dense::forward<float>(params[w], pooled, labels);
      auto bwd = dense::backward<float>(params[w], fwd.cache, labels);
      for (float l : fwd.losses) stats.loss_sum += l;
      stats.samples += mb.samples.size();

      std::vector<detail::GradMessage> out(world);
      if (exact) {
        auto key_grads = dense::scatter_embedding_grads(mb.samples, bwd.pooled);
        for (auto& kg : key_grads)
          out[embedding::shard_of(kg.key, world)].exact.push_back(std::move(kg));
        for (std::size_t s = 0; s < mb.samples.size(); ++s) {
          auto f = bwd.dense[s].flat();
          acc.dense_exact[w].push_back({mb.samples[s].sample_id, {f.begin(), f.end()}});
        }
      } else {
        std::map<SparseKey, std::vector<double>> presum;
        for (std::size_t s = 0; s < mb.samples.size(); ++s)
          for (auto k : mb.samples[s].keys) {
            auto& v = presum[k];
            if (v.empty()) v.assign(dim, 0.0);
            for (std::size_t j = 0; j < dim; ++j) v[j] += bwd.pooled[s][j];
          }
        for (auto& [k, v] : presum)
          out[embedding::shard_of(k, world)].partial.push_back({k, std::move(v)});
        for (std::size_t s = 0; s < mb.samples.size(); ++s) {
          auto f = bwd.dense[s].flat();
          for (std::size_t j = 0; j < f.size(); ++j) acc.dense_fast[w][j] += f[j];
        }
      }
      grads[w].resize(world);
      for (std::size_t o = 0; o < world; ++o) grads[w][o].push_back(std::move(out[o]));
    }
    auto grads_at = fabric::all_to_all(std::move(grads));
    for (std::size_t o = 0; o < world; ++o)
      for (auto& from : grads_at[o])
        for (auto& msg : from) {
          for (auto& g : msg.exact) acc.exact[o].push_back(std::move(g));
          for (auto& g : msg.partial) acc.partial[o].push_back(std::move(g));
        }

    if (policy == WindowPolicy::kNaivePerMicroBatch) {
      detail::apply_dense(acc, params, exact, batch, lr);
      detail::apply_sparse(acc, buffers, exact, batch, lr);
    }
  }

  if (guard) {
    stats.guard_mutations = guard->mutations();
    guard->check();
  }
  if (acc.closed) throw OrderingViolation("frozen accumulator closed twice");
  acc.closed = true;
  if (policy == WindowPolicy::kFrozen) {
    detail::apply_dense(acc, params, exact, batch, lr);
    detail::apply_sparse(acc, buffers, exact, batch, lr);
  }
  for (auto* b : buffers) b->grads_applied = true;
  return stats;
}

// ---------------------------------------------------------------------------
// Two-stream schedule
// ---------------------------------------------------------------------------

enum class DagNodeType { kEmbA2a, kCompute, kGradA2a, kAllReduce, kApply };

inline const char* to_string(DagNodeType t) {
  switch (t) {
    case DagNodeType::kEmbA2a: return "emb_a2a";
    case DagNodeType::kCompute: return "compute";
    case DagNodeType::kGradA2a: return "grad_a2a";
    case DagNodeType::kAllReduce: return "allreduce";
    case DagNodeType::kApply: return "apply";
  }
  return "?";
}

inline bool is_comm(DagNodeType t) {
  return t == DagNodeType::kEmbA2a || t == DagNodeType::kGradA2a || t == DagNodeType::kAllReduce;
}

struct DagNode {
  DagNodeType type = DagNodeType::kCompute;
  std::size_t index = 0;  // micro-batch, 1-based; 0 for allreduce/apply
  std::size_t payload_bytes = 0;
  std::size_t samples = 0;
};

struct ScheduleDag {
  std::vector<DagNode> nodes;
  std::vector<std::pair<std::size_t, std::size_t>> edges;  // (from, to)

  std::size_t find(DagNodeType type, std::size_t index) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].type == type && nodes[i].index == index) return i;
    throw std::out_of_range(std::string("no node ") + to_string(type) + "_" +
                            std::to_string(index));
  }

  bool has_edge(std::size_t from, std::size_t to) const {
    return std::find(edges.begin(), edges.end(), std::pair{from, to}) != edges.end();
  }

  // Communication-stream order, as the chain edges define it.
  std::vector<std::size_t> comm_order() const {
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (is_comm(nodes[i].type)) order.push_back(i);
    std::vector<std::size_t> chained;
    std::vector<bool> has_pred(nodes.size(), false);
    for (auto [a, b] : edges)
      if (is_comm(nodes[a].type) && is_comm(nodes[b].type)) has_pred[b] = true;
    std::size_t cur = nodes.size();
    for (auto i : order)
      if (!has_pred[i]) cur = i;
    while (cur != nodes.size()) {
      chained.push_back(cur);
      std::size_t next = nodes.size();
      for (auto [a, b] : edges)
        if (a == cur && is_comm(nodes[b].type)) next = b;
      cur = next;
    }
    return chained;
  }

  bool acyclic() const {
    std::vector<std::size_t> indeg(nodes.size(), 0);
    for (auto [a, b] : edges) ++indeg[b];
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (indeg[i] == 0) ready.push_back(i);
    std::size_t seen = 0;
    while (!ready.empty()) {
      auto n = ready.back();
      ready.pop_back();
      ++seen;
      for (auto [a, b] : edges)
        if (a == n && --indeg[b] == 0) ready.push_back(b);
    }
    return seen == nodes.size();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto& ns = j["nodes"] = nlohmann::json::array();
    for (std::size_t i = 0; i < nodes.size(); ++i)
      ns.push_back({{"id", i},
                    {"type", to_string(nodes[i].type)},
                    {"index", nodes[i].index},
                    {"payload_bytes", nodes[i].payload_bytes},
                    {"samples", nodes[i].samples}});
    auto& es = j["edges"] = nlohmann::json::array();
    for (auto [a, b] : edges) es.push_back({a, b});
    return j;
  }
};

struct MicroBatchLoad {
  std::size_t unique_keys = 0;
  std::size_t samples = 0;
};

inline std::vector<MicroBatchLoad> loads_of(const Partition& p) {
  std::vector<MicroBatchLoad> out;
  for (const auto& mb : p.micro_batches)
    out.push_back({key_set(mb.samples).size(), mb.samples.size()});
  return out;
}

// Comm stream: emb_1, emb_2, grad_1, emb_3, grad_2, ..., emb_N, grad_{N-1},
// grad_N, allreduce. The embedding pull for micro-batch i+1 is issued before
// the gradient push of micro-batch i, so compute_i overlaps both.
inline ScheduleDag build_schedule_dag(std::span<const MicroBatchLoad> loads, std::size_t emb_dim,
                                      std::size_t dense_params = 0) {
  ScheduleDag dag;
  const std::size_t n = loads.size();
  if (n == 0) throw std::invalid_argument("build_schedule_dag: no micro-batches");
  std::vector<std::size_t> emb(n), comp(n), grad(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bytes = loads[i].unique_keys * emb_dim * sizeof(float);
    emb[i] = dag.nodes.size();
    dag.nodes.push_back({DagNodeType::kEmbA2a, i + 1, bytes, loads[i].samples});
    comp[i] = dag.nodes.size();
    dag.nodes.push_back({DagNodeType::kCompute, i + 1, 0, loads[i].samples});
    grad[i] = dag.nodes.size();
    dag.nodes.push_back({DagNodeType::kGradA2a, i + 1, bytes, loads[i].samples});
  }
  const std::size_t allreduce = dag.nodes.size();
  dag.nodes.push_back({DagNodeType::kAllReduce, 0, dense_params * sizeof(float), 0});
  const std::size_t apply = dag.nodes.size();
  dag.nodes.push_back({DagNodeType::kApply, 0, 0, 0});

  for (std::size_t i = 0; i < n; ++i) {
    dag.edges.emplace_back(emb[i], comp[i]);
    dag.edges.emplace_back(comp[i], grad[i]);
    if (i > 0) dag.edges.emplace_back(comp[i - 1], comp[i]);
    dag.edges.emplace_back(grad[i], apply);
  }
  std::vector<std::size_t> chain;
  chain.push_back(emb[0]);
  if (n > 1) chain.push_back(emb[1]);
  for (std::size_t i = 0; i + 2 < n; ++i) {
    chain.push_back(grad[i]);
    chain.push_back(emb[i + 2]);
  }
  if (n > 1) chain.push_back(grad[n - 2]);
  chain.push_back(grad[n - 1]);
  chain.push_back(allreduce);
  for (std::size_t i = 0; i + 1 < chain.size(); ++i) dag.edges.emplace_back(chain[i], chain[i + 1]);
  dag.edges.emplace_back(comp[n - 1], apply);
  dag.edges.emplace_back(allreduce, apply);
  return dag;
}

inline ScheduleDag build_schedule_dag(const Partition& p, std::size_t emb_dim,
                                      std::size_t dense_params = 0) {
  auto loads = loads_of(p);
  return build_schedule_dag(loads, emb_dim, dense_params);
}

}  // namespace nestpipe::fwp
