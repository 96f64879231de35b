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

// Reference synchronous trainer: one context, one unsharded table, one full
// batch gradient per step. Nothing distributed runs here; agreement with it
// is what the pipelined engine is measured against.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>
#include "nestpipe/core.hpp"
#include "nestpipe/dense.hpp"
#include "nestpipe/embedding.hpp"

namespace nestpipe::oracle {

using embedding::RowMap;

inline dense::DenseShape dense_shape_of(const TrainConfig& cfg) {
  return {cfg.emb_dim, cfg.hidden_dim, cfg.dense_layers};
}

struct OracleState {
  dense::DenseParams<float> params;
  RowMap table;  // lazily materialized with embedding::init_row
  std::uint64_t step = 0;
};

inline OracleState make_oracle(const TrainConfig& cfg) {
  OracleState s;
  s.params = dense::DenseParams<float>::init(Prf(cfg.seed), dense_shape_of(cfg));
  return s;
}

// One step of W <- W - lr/|B| * sum_xi grad F(W, xi). Returns the rows the
// batch read (its view of E_t).
inline RowMap sync_step(OracleState& state, const Batch& batch, const TrainConfig& cfg) {
  const Prf prf(cfg.seed);
  const std::size_t dim = cfg.emb_dim;
  const float lr = static_cast<float>(cfg.learning_rate);
  std::vector<Sample> samples = batch.samples;
  std::sort(samples.begin(), samples.end(),
            [](const Sample& a, const Sample& b) { return a.sample_id < b.sample_id; });

  RowMap read;
  for (const auto& s : samples)
    for (auto k : s.keys) {
      auto it = state.table.find(k);
      if (it == state.table.end()) it = state.table.emplace(k, embedding::init_row(prf, k, dim)).first;
      read.emplace(k, it->second);
    }

  std::vector<std::vector<float>> pooled;
  std::vector<std::uint8_t> labels;
  for (const auto& s : samples) {
    pooled.push_back(dense::pool(s, read, dim));
    labels.push_back(s.label);
  }
  auto fwd = dense::forward<float>(state.params, pooled, labels);
  for (float l : fwd.losses)
    if (!std::isfinite(l)) throw std::runtime_error("sync_step: non-finite loss");
  auto bwd = dense::backward<float>(state.params, fwd.cache, labels);

  // Sums run in ascending sample_id, starting from zero.
  std::vector<float> dense_sum(state.params.flat().size(), 0.0f);
  std::map<SparseKey, std::vector<float>> key_sum;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    auto g = bwd.dense[s].flat();
    for (std::size_t i = 0; i < g.size(); ++i) dense_sum[i] += g[i];
    for (auto k : samples[s].keys) {
      auto& acc = key_sum[k];
      if (acc.empty()) acc.assign(dim, 0.0f);
      for (std::size_t j = 0; j < dim; ++j) acc[j] += bwd.pooled[s][j];
    }
  }
  const std::size_t n = samples.size();
  auto p = state.params.flat();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sgd_update(p[i], dense_sum[i], n, lr);
  for (const auto& [k, sum] : key_sum) {
    auto& row = state.table.at(k);
    for (std::size_t j = 0; j < dim; ++j) row[j] = sgd_update(row[j], sum[j], n, lr);
  }
  state.step = batch.step;
  return read;
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct ModelSnapshot {
  std::vector<float> dense;
  RowMap rows;  // materialized rows; absent rows are at their init value
};

struct Trajectory {
  TrainConfig config;
  std::vector<ModelSnapshot> states;  // states[t] = after t steps
  std::vector<RowMap> reads;          // reads[t] = rows used by step t (reads[0] empty)

  std::size_t steps() const { return states.empty() ? 0 : states.size() - 1; }
};

inline ModelSnapshot snapshot(const OracleState& s) {
  auto f = s.params.flat();
  return {{f.begin(), f.end()}, s.table};
}

// Batches are consecutive runs of batch_size samples in ascending sample_id.
inline std::vector<Batch> make_batches(std::span<const Sample> dataset, const TrainConfig& cfg,
                                       std::size_t max_steps) {
  for (std::size_t i = 1; i < dataset.size(); ++i)
    if (!(dataset[i - 1].sample_id < dataset[i].sample_id))
      throw std::invalid_argument("dataset must be in strictly ascending sample_id");
  std::vector<Batch> out;
  for (std::size_t t = 0; t < max_steps && (t + 1) * cfg.batch_size <= dataset.size(); ++t) {
    Batch b;
    b.step = t + 1;
    b.samples.assign(dataset.begin() + static_cast<std::ptrdiff_t>(t * cfg.batch_size),
                     dataset.begin() + static_cast<std::ptrdiff_t>((t + 1) * cfg.batch_size));
    out.push_back(std::move(b));
  }
  return out;
}

inline Trajectory run_oracle(std::span<const Sample> dataset, const TrainConfig& cfg) {
  cfg.validate();
  Trajectory traj;
  traj.config = cfg;
  OracleState state = make_oracle(cfg);
  traj.states.push_back(snapshot(state));
  traj.reads.emplace_back();
  for (const auto& b : make_batches(dataset, cfg, cfg.steps)) {
    traj.reads.push_back(sync_step(state, b, cfg));
    traj.states.push_back(snapshot(state));
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct StepDiff {
  std::size_t step = 0;
  double dense = 0.0;
  double embedding = 0.0;
};

struct ConsistencyReport {
  std::size_t steps_compared = 0;
  double tolerance = 0.0;
  double max_abs_dense_diff = 0.0;
  double max_abs_embedding_diff = 0.0;
  bool bitwise_equal = true;
  std::optional<std::size_t> first_divergent_step;
  std::optional<std::size_t> estimated_staleness_lag;
  std::vector<StepDiff> per_step;

  bool consistent() const { return !first_divergent_step.has_value(); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["steps_compared"] = steps_compared;
    j["tolerance"] = tolerance;
    j["max_abs_dense_diff"] = max_abs_dense_diff;
    j["max_abs_embedding_diff"] = max_abs_embedding_diff;
    j["bitwise_equal"] = bitwise_equal;
    j["first_divergent_step"] =
        first_divergent_step ? nlohmann::json(*first_divergent_step) : nlohmann::json(nullptr);
    j["estimated_staleness_lag"] = estimated_staleness_lag
                                       ? nlohmann::json(*estimated_staleness_lag)
                                       : nlohmann::json(nullptr);
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& d : per_step)
      steps.push_back({{"step", d.step}, {"dense", d.dense}, {"embedding", d.embedding}});
    return j;
  }
};

namespace detail {

struct Diff {
  double max_abs = 0.0;
  bool bitwise = true;
};

inline void accumulate(Diff& d, std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("compare: vector length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    d.max_abs = std::max(d.max_abs, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) d.bitwise = false;
  }
}

class LazyTable {
 public:
  LazyTable(const RowMap& rows, const Prf& prf, std::size_t dim)
      : rows_(rows), prf_(prf), dim_(dim) {}
  embedding::EmbeddingRow get(SparseKey k) const {
    auto it = rows_.find(k);
    return it != rows_.end() ? it->second : embedding::init_row(prf_, k, dim_);
  }

 private:
  const RowMap& rows_;
  const Prf& prf_;
  std::size_t dim_;
};

inline Diff diff_rows(const RowMap& a, const RowMap& b, const Prf& prf, std::size_t dim) {
  Diff d;
  std::set<SparseKey> keys;
  for (const auto& [k, _] : a) keys.insert(k);
  for (const auto& [k, _] : b) keys.insert(k);
  LazyTable ta(a, prf, dim), tb(b, prf, dim);
  for (auto k : keys) accumulate(d, ta.get(k), tb.get(k));
  return d;
}

inline bool rows_match(const embedding::EmbeddingRow& a, const embedding::EmbeddingRow& b,
                       double tol) {
  Diff d;
  accumulate(d, a, b);
  return tol == 0.0 ? d.bitwise : d.max_abs <= tol;
}

inline void check_compatible(const TrainConfig& a, const TrainConfig& b) {
  if (a.seed != b.seed || a.emb_dim != b.emb_dim || a.hidden_dim != b.hidden_dim ||
      a.dense_layers != b.dense_layers || a.batch_size != b.batch_size ||
      a.learning_rate != b.learning_rate || a.vocab_size != b.vocab_size)
    throw ConfigError("trajectory", "trajectories were produced under different configs");
}

}  // namespace detail

// Compares run `b` against reference `a` step by step. A step diverges when
// any dense value or row differs by more than `tol` (tol == 0: any bit
// difference). At the first divergent step, the rows `b` read are matched
// against lagged reference states to estimate the staleness lag.
inline ConsistencyReport compare_trajectories(const Trajectory& a, const Trajectory& b,
                                              double tol) {
  detail::check_compatible(a.config, b.config);
  const Prf prf(a.config.seed);
  const std::size_t dim = a.config.emb_dim;
  ConsistencyReport r;
  r.tolerance = tol;
  r.steps_compared = std::min(a.steps(), b.steps());
  for (std::size_t t = 1; t <= r.steps_compared; ++t) {
    detail::Diff dd;
    detail::accumulate(dd, a.states[t].dense, b.states[t].dense);
    auto de = detail::diff_rows(a.states[t].rows, b.states[t].rows, prf, dim);
    r.per_step.push_back({t, dd.max_abs, de.max_abs});
    r.max_abs_dense_diff = std::max(r.max_abs_dense_diff, dd.max_abs);
    r.max_abs_embedding_diff = std::max(r.max_abs_embedding_diff, de.max_abs);
    r.bitwise_equal = r.bitwise_equal && dd.bitwise && de.bitwise;
    const bool diverged =
        tol == 0.0 ? !(dd.bitwise && de.bitwise) : std::max(dd.max_abs, de.max_abs) > tol;
    if (diverged && !r.first_divergent_step) r.first_divergent_step = t;
  }

  if (r.first_divergent_step && *r.first_divergent_step < b.reads.size()) {
    const std::size_t t = *r.first_divergent_step;
    const detail::LazyTable sync_view(a.states[t - 1].rows, prf, dim);
    std::vector<std::pair<SparseKey, const embedding::EmbeddingRow*>> stale;
    for (const auto& [k, row] : b.reads[t])
      if (!detail::rows_match(row, sync_view.get(k), tol)) stale.emplace_back(k, &row);
    if (!stale.empty()) {
      for (std::size_t tau = 1; tau <= 3 && tau + 1 <= t; ++tau) {
        const detail::LazyTable lagged(a.states[t - 1 - tau].rows, prf, dim);
        const bool all = std::all_of(stale.begin(), stale.end(), [&](const auto& e) {
          return detail::rows_match(*e.second, lagged.get(e.first), tol);
        });
        if (all) {
          r.estimated_staleness_lag = tau;
          break;
        }
      }
    }
  }
  return r;
}

}  // namespace nestpipe::oracle
