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

// Inter-batch pipeline: prefetch -> h2d -> key routing -> retrieval (+ dual
// buffer sync) -> fwd/bwd. Batches advance one stage per tick, so up to five
// are in flight. Within a tick every in-flight stage first starts (oldest
// batch first), then finishes (oldest first); a retrieval that starts in the
// same tick as the previous batch's fwd/bwd therefore reads the host before
// that batch's write-back, and the sync at retrieval finish repairs it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "nestpipe/core.hpp"
#include "nestpipe/dense.hpp"
#include "nestpipe/embedding.hpp"
#include "nestpipe/fabric.hpp"
#include "nestpipe/fwp.hpp"
#include "nestpipe/oracle.hpp"

namespace nestpipe::dbp {

enum class Stage { kPrefetch, kH2d, kKeyRouting, kRetrieval, kFwdBwd };
inline constexpr std::size_t kNumStages = 5;

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::kPrefetch: return "prefetch";
    case Stage::kH2d: return "h2d";
    case Stage::kKeyRouting: return "key_routing";
    case Stage::kRetrieval: return "retrieval";
    case Stage::kFwdBwd: return "fwd_bwd";
  }
  return "?";
}

// Logical (not wall-clock) interval of one stage of one batch. Markers come
// from a single counter shared by every record of a run.
struct StageRecord {
  std::uint64_t step = 0;
  Stage stage = Stage::kPrefetch;
  std::uint64_t seq_start = 0;
  std::uint64_t seq_end = 0;
};

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

class DatasetCursor {
 public:
  DatasetCursor(std::span<const Sample> data, std::size_t batch_size)
      : data_(data), batch_size_(batch_size) {
    if (batch_size == 0) throw ConfigError("batch_size", "must be > 0");
    for (std::size_t i = 1; i < data.size(); ++i)
      if (!(data[i - 1].sample_id < data[i].sample_id))
        throw std::invalid_argument("dataset must be in strictly ascending sample_id");
  }

  std::size_t remaining() const { return data_.size() - pos_; }

  // Next batch, or nullopt once fewer than batch_size samples remain.
  std::optional<Batch> next() {
    if (remaining() < batch_size_) return std::nullopt;
    Batch b;
    b.step = ++step_;
    b.samples.assign(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                     data_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_size_));
    pos_ += batch_size_;
    return b;
  }

 private:
  std::span<const Sample> data_;
  std::size_t batch_size_;
  std::size_t pos_ = 0;
  std::uint64_t step_ = 0;
};

inline std::optional<Batch> stage_prefetch(DatasetCursor& cursor) { return cursor.next(); }

// Worker w gets the w-th contiguous slice of the batch.
inline std::vector<std::vector<Sample>> split_by_worker(const Batch& batch, std::size_t world) {
  if (world == 0 || batch.samples.size() % world != 0)
    throw ConfigError("num_workers", "batch of " + std::to_string(batch.samples.size()) +
                                         " does not split evenly over " +
                                         std::to_string(world) + " workers");
  const std::size_t n = batch.samples.size() / world;
  std::vector<std::vector<Sample>> out(world);
  for (std::size_t w = 0; w < world; ++w)
    out[w].assign(batch.samples.begin() + static_cast<std::ptrdiff_t>(w * n),
                  batch.samples.begin() + static_cast<std::ptrdiff_t>((w + 1) * n));
  return out;
}

// Host-to-device copy. No functional effect; its cost lives in the timing model.
inline Batch stage_h2d(Batch batch) { return batch; }

// Sources dedup and bucket their keys by owner; owners dedup the union of
// what they receive. Result: one ascending request list per owner.
inline std::vector<std::vector<SparseKey>> stage_key_routing(
    const std::vector<std::vector<Sample>>& local, std::size_t world) {
  if (local.size() != world) throw fabric::FabricError("key_routing: need one slice per worker");
  std::vector<fabric::A2aPayload<SparseKey>> payloads(world, fabric::A2aPayload<SparseKey>(world));
  for (std::size_t w = 0; w < world; ++w)
    for (auto k : key_set(local[w])) payloads[w][embedding::shard_of(k, world)].push_back(k);
  auto received = fabric::all_to_all(std::move(payloads));
  std::vector<std::vector<SparseKey>> requests(world);
  for (std::size_t o = 0; o < world; ++o) {
    std::vector<SparseKey> all;
    for (const auto& from : received[o]) all.insert(all.end(), from.begin(), from.end());
    requests[o] = canonical_key_order(std::move(all));
  }
  return requests;
}

// Retrieval, first half: fill each owner's prefetch buffer for `step` from
// its host shard.
inline void retrieval_fetch(const std::vector<std::vector<SparseKey>>& requests,
                            std::vector<embedding::HostShard>& shards,
                            std::vector<embedding::BufferPair>& pairs, const Prf& prf,
                            std::uint64_t step) {
  for (std::size_t o = 0; o < pairs.size(); ++o) {
    auto& pre = pairs[o].prefetch;
    if (pre.step != step || !pre.empty())
      throw OrderingViolation("retrieval: prefetch buffer of worker " + std::to_string(o) +
                              " is not free for step " + std::to_string(step));
    pre.rows = embedding::retrieve(shards[o], requests[o], prf, step).rows;
  }
}

// Retrieval, second half: dual-buffer sync against the active buffer, which
// must hold the previous step with its gradients applied.
inline void retrieval_sync(std::vector<embedding::BufferPair>& pairs) {
  for (auto& p : pairs) embedding::dual_buffer_sync(p.active, p.prefetch);
}

inline void stage_retrieval(const std::vector<std::vector<SparseKey>>& requests,
                            std::vector<embedding::HostShard>& shards,
                            std::vector<embedding::BufferPair>& pairs, const Prf& prf,
                            std::uint64_t step, bool unsafe_six_stage) {
  retrieval_fetch(requests, shards, pairs, prf, step);
  if (!unsafe_six_stage) retrieval_sync(pairs);
}

// Fwd/bwd, first half: promote the prefetch buffers of `step` to active.
inline void fwd_bwd_begin(std::vector<embedding::BufferPair>& pairs, std::uint64_t step,
                          bool unsafe_six_stage) {
  for (auto& p : pairs) {
    embedding::swap_buffers(p);
    if (p.active.step != step)
      throw OrderingViolation("fwd_bwd: active buffer holds step " +
                              std::to_string(p.active.step) + ", expected " +
                              std::to_string(step));
    if (!unsafe_six_stage && !p.active.synced)
      throw OrderingViolation("fwd_bwd: step " + std::to_string(step) +
                              " started before its dual-buffer sync");
  }
}

// Fwd/bwd, second half: the frozen window, then write-back to the host.
inline fwp::WindowStats fwd_bwd_run(std::span<const fwp::Partition> partitions,
                                    std::vector<embedding::BufferPair>& pairs,
                                    std::vector<embedding::HostShard>& shards,
                                    std::vector<dense::DenseParams<float>>& params,
                                    const TrainConfig& cfg, fwp::WindowPolicy policy) {
  std::vector<embedding::HbmBuffer*> active;
  for (auto& p : pairs) active.push_back(&p.active);
  auto stats = fwp::run_frozen_window(partitions, active, params, cfg, policy);
  for (std::size_t o = 0; o < pairs.size(); ++o) embedding::write_back(pairs[o].active, shards[o]);
  for (std::size_t w = 1; w < params.size(); ++w)
    if (!params[w].bit_equal(params[0]))
      throw std::logic_error("dense replica of worker " + std::to_string(w) + " diverged");
  return stats;
}

inline fwp::WindowStats stage_fwd_bwd(std::span<const fwp::Partition> partitions,
                                      std::vector<embedding::BufferPair>& pairs,
                                      std::vector<embedding::HostShard>& shards,
                                      std::vector<dense::DenseParams<float>>& params,
                                      const TrainConfig& cfg, std::uint64_t step,
                                      fwp::WindowPolicy policy = fwp::WindowPolicy::kFrozen) {
  fwd_bwd_begin(pairs, step, cfg.unsafe_six_stage);
  return fwd_bwd_run(partitions, pairs, shards, params, cfg, policy);
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct RunOptions {
  bool record_trajectory = false;
  fwp::WindowPolicy policy = fwp::WindowPolicy::kFrozen;
};

struct StepStats {
  std::uint64_t step = 0;
  std::vector<std::size_t> requested_rows;  // per owner, after routing dedup
  fwp::WindowStats window;
};

struct RunResult {
  dense::DenseParams<float> params;  // worker 0's replica (all are bit-equal)
  std::vector<embedding::HostShard> shards;
  std::vector<StageRecord> log;
  std::vector<StepStats> stats;
  std::optional<oracle::Trajectory> trajectory;
  std::size_t steps_run = 0;
};

struct InFlightBatch {
  Batch batch;
  std::size_t next_stage = 0;  // index of the stage to run this tick
  std::vector<std::vector<Sample>> local;
  std::vector<fwp::Partition> partitions;
  std::vector<std::vector<SparseKey>> requests;
  std::size_t record = 0;  // index into the log of the stage in progress
};

struct PipelineState {
  std::deque<InFlightBatch> in_flight;  // oldest first
  std::vector<embedding::BufferPair> buffers;
  std::vector<embedding::HostShard> shards;
  std::vector<dense::DenseParams<float>> params;  // one replica per worker
  std::uint64_t steps_done = 0;
  std::uint64_t seq = 0;
};

class Pipeline {
 public:
  Pipeline(std::span<const Sample> dataset, const TrainConfig& cfg, RunOptions opts = {})
      : cfg_(cfg), opts_(opts), prf_(cfg.seed), cursor_(dataset, cfg.batch_size) {
    cfg_.validate();
    const auto shape = oracle::dense_shape_of(cfg_);
    const auto init = dense::DenseParams<float>::init(prf_, shape);
    for (std::size_t w = 0; w < cfg_.num_workers; ++w) {
      state_.buffers.push_back(embedding::make_buffer_pair(w));
      state_.shards.emplace_back(w, cfg_.num_workers, cfg_.emb_dim);
      state_.params.push_back(init);
    }
    if (opts_.record_trajectory) {
      trajectory_.emplace();
      trajectory_->config = cfg_;
      trajectory_->states.push_back(snapshot());
      trajectory_->reads.emplace_back();
    }
  }

  const PipelineState& state() const { return state_; }
  const std::vector<StageRecord>& log() const { return log_; }
  bool done() const { return state_.in_flight.empty() && !can_admit(); }

  // One scheduler tick. Returns false once nothing is left to do.
  bool tick() {
    if (done()) return false;
    const bool admit = can_admit() && state_.in_flight.size() < cfg_.pipeline_depth;
    for (auto& b : state_.in_flight) start(b);
    if (admit) {
      auto batch = stage_prefetch(cursor_);
      if (batch) {
        InFlightBatch f;
        f.batch = std::move(*batch);
        state_.in_flight.push_back(std::move(f));
        start(state_.in_flight.back());
      } else {
        exhausted_ = true;
      }
    }
    for (auto& b : state_.in_flight) finish(b);
    while (!state_.in_flight.empty() && state_.in_flight.front().next_stage == kNumStages)
      state_.in_flight.pop_front();
    return true;
  }

  RunResult run() {
    while (tick()) {
    }
    RunResult r;
    r.params = state_.params.front();
    r.shards = state_.shards;
    r.log = log_;
    r.stats = stats_;
    r.trajectory = trajectory_;
    r.steps_run = state_.steps_done;
    return r;
  }

 private:
  bool can_admit() const { return !exhausted_ && admitted_ < cfg_.steps; }

  oracle::ModelSnapshot snapshot() const {
    oracle::ModelSnapshot s;
    auto f = state_.params.front().flat();
    s.dense.assign(f.begin(), f.end());
    for (const auto& sh : state_.shards) s.rows.insert(sh.rows().begin(), sh.rows().end());
    return s;
  }

  Stage stage_of(const InFlightBatch& b) const { return static_cast<Stage>(b.next_stage); }

  void open_record(InFlightBatch& b) {
    b.record = log_.size();
    log_.push_back({b.batch.step, stage_of(b), state_.seq++, 0});
  }

  void close_record(InFlightBatch& b) { log_[b.record].seq_end = state_.seq++; }

  void start(InFlightBatch& b) {
    if (b.next_stage == 0) ++admitted_;
    open_record(b);
    switch (stage_of(b)) {
      case Stage::kPrefetch:
      case Stage::kH2d:
      case Stage::kKeyRouting:
        break;
      case Stage::kRetrieval:
        retrieval_fetch(b.requests, state_.shards, state_.buffers, prf_, b.batch.step);
        // Without the sync there is nothing to wait for: the stage is over
        // before the previous batch's gradients land.
        if (cfg_.unsafe_six_stage) close_record(b);
        break;
      case Stage::kFwdBwd:
        fwd_bwd_begin(state_.buffers, b.batch.step, cfg_.unsafe_six_stage);
        break;
    }
  }

  void finish(InFlightBatch& b) {
    switch (stage_of(b)) {
      case Stage::kPrefetch: {
        b.local = split_by_worker(b.batch, cfg_.num_workers);
        const auto mode =
            cfg_.clustering_enabled ? fwp::PartitionMode::kClustered : fwp::PartitionMode::kSequential;
        for (const auto& l : b.local)
          b.partitions.push_back(
              fwp::cluster_samples(l, cfg_.num_micro_batches, mode, cfg_.seed, b.batch.step));
        break;
      }
      case Stage::kH2d:
        b.batch = stage_h2d(std::move(b.batch));
        break;
      case Stage::kKeyRouting:
        b.requests = stage_key_routing(b.local, cfg_.num_workers);
        break;
      case Stage::kRetrieval:
        if (!cfg_.unsafe_six_stage) retrieval_sync(state_.buffers);
        break;
      case Stage::kFwdBwd: {
        embedding::RowMap reads;
        if (trajectory_)
          for (const auto& p : state_.buffers) reads.insert(p.active.rows.begin(), p.active.rows.end());
        StepStats st;
        st.step = b.batch.step;
        for (const auto& r : b.requests) st.requested_rows.push_back(r.size());
        st.window = fwd_bwd_run(b.partitions, state_.buffers, state_.shards, state_.params, cfg_,
                                opts_.policy);
        stats_.push_back(std::move(st));
        ++state_.steps_done;
        if (trajectory_) {
          trajectory_->reads.push_back(std::move(reads));
          trajectory_->states.push_back(snapshot());
        }
        break;
      }
    }
    if (log_[b.record].seq_end == 0) close_record(b);
    ++b.next_stage;
  }

  TrainConfig cfg_;
  RunOptions opts_;
  Prf prf_;
  DatasetCursor cursor_;
  PipelineState state_;
  std::vector<StageRecord> log_;
  std::vector<StepStats> stats_;
  std::optional<oracle::Trajectory> trajectory_;
  std::uint64_t admitted_ = 0;
  bool exhausted_ = false;
};

inline RunResult run(std::span<const Sample> dataset, const TrainConfig& cfg,
                     RunOptions opts = {}) {
  return Pipeline(dataset, cfg, opts).run();
}

// step,stage,worker,seq_start,seq_end; every worker runs every stage of
// every batch, so each record expands to one row per worker.
inline void write_stage_log_csv(std::ostream& out, std::span<const StageRecord> log,
                                std::size_t world) {
  out << "# schema=1\n" << "step,stage,worker,seq_start,seq_end\n";
  for (const auto& r : log)
    for (std::size_t w = 0; w < world; ++w)
      out << r.step << ',' << to_string(r.stage) << ',' << w << ',' << r.seq_start << ','
          << r.seq_end << '\n';
}

inline void write_stage_log_csv(const std::filesystem::path& path,
                                std::span<const StageRecord> log, std::size_t world) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_stage_log_csv(out, log, world);
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace nestpipe::dbp
