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

// Discrete-event performance model. Plans are DAGs of events pinned to
// resource lanes; a greedy list scheduler places them, and the resulting
// timeline is reduced to step latency and its breakdown.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "nestpipe/core.hpp"
#include "nestpipe/dbp.hpp"
#include "nestpipe/fwp.hpp"

namespace nestpipe::timing {

struct CostModel {
  double a2a_base = 0.5;                 // ms per All2All
  double a2a_per_worker = 0.0;           // ms per worker
  double a2a_per_worker2 = 0.0;          // ms per worker^2 (optional super-linear term)
  double a2a_per_byte = 0.0;             // ms per byte sent by one worker
  double h2d_per_byte = 0.0;             // ms per byte
  double prep_per_sample = 0.0;          // ms per local sample (read, parse, cluster)
  double retrieval_per_key = 0.0;        // ms per row fetched from host memory
  double sync_cost = 0.0;                // ms, dual-buffer sync at the batch boundary
  double compute_per_sample_per_layer = 0.0;  // ms; the output head counts as a layer
  double allreduce_cost = 0.0;           // ms, dense gradient AllReduce

  void validate() const {
    const std::array<std::pair<const char*, double>, 10> fields{{
        {"a2a_base", a2a_base},
        {"a2a_per_worker", a2a_per_worker},
        {"a2a_per_worker2", a2a_per_worker2},
        {"a2a_per_byte", a2a_per_byte},
        {"h2d_per_byte", h2d_per_byte},
        {"prep_per_sample", prep_per_sample},
        {"retrieval_per_key", retrieval_per_key},
        {"sync_cost", sync_cost},
        {"compute_per_sample_per_layer", compute_per_sample_per_layer},
        {"allreduce_cost", allreduce_cost},
    }};
    for (auto [name, v] : fields)
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name, "must be finite and >= 0");
  }
};

inline double cost_a2a(double payload_bytes, std::size_t world, const CostModel& cm) {
  if (world < 1) throw ConfigError("num_workers", "must be >= 1");
  const double w = static_cast<double>(world);
  return cm.a2a_base + cm.a2a_per_worker * w + cm.a2a_per_worker2 * w * w +
         cm.a2a_per_byte * payload_bytes;
}

// ---------------------------------------------------------------------------
// Event graphs
// ---------------------------------------------------------------------------

enum class Lane { kCpuPrep, kH2d, kInterconnect, kRetrieval, kCompute };
inline constexpr std::size_t kNumLanes = 5;

inline const char* to_string(Lane l) {
  switch (l) {
    case Lane::kCpuPrep: return "cpu_prep";
    case Lane::kH2d: return "h2d";
    case Lane::kInterconnect: return "interconnect";
    case Lane::kRetrieval: return "retrieval";
    case Lane::kCompute: return "compute";
  }
  return "?";
}

// Declaration order is the tie-break rank.
enum class EventKind {
  kPrefetch,
  kH2d,
  kRouting,
  kRetrieval,
  kSync,
  kEmbA2a,
  kCompute,
  kGradA2a,
  kAllReduce,
  kApply,
};

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::kPrefetch: return "prefetch";
    case EventKind::kH2d: return "h2d";
    case EventKind::kRouting: return "key_routing";
    case EventKind::kRetrieval: return "retrieval";
    case EventKind::kSync: return "sync";
    case EventKind::kEmbA2a: return "emb_a2a";
    case EventKind::kCompute: return "compute";
    case EventKind::kGradA2a: return "grad_a2a";
    case EventKind::kAllReduce: return "allreduce";
    case EventKind::kApply: return "apply";
  }
  return "?";
}

enum class Category { kLookup, kComm, kCompute };

inline Category category_of(EventKind k) {
  switch (k) {
    case EventKind::kEmbA2a:
    case EventKind::kGradA2a:
    case EventKind::kAllReduce:
      return Category::kComm;
    case EventKind::kCompute:
    case EventKind::kApply:
      return Category::kCompute;
    default:
      return Category::kLookup;
  }
}

struct Event {
  EventKind kind = EventKind::kCompute;
  Lane lane = Lane::kCompute;
  double duration = 0.0;
  std::uint64_t step = 0;
  std::size_t index = 0;  // micro-batch index, 0 if not applicable

  std::string name() const {
    std::string n = "b" + std::to_string(step) + "." + to_string(kind);
    if (index > 0) n += "_" + std::to_string(index);
    return n;
  }
};

struct EventGraph {
  std::vector<Event> events;
  std::vector<std::vector<std::size_t>> preds;

  std::size_t add(Event e) {
    if (!(e.duration >= 0.0) || !std::isfinite(e.duration))
      throw std::invalid_argument("event duration must be finite and >= 0");
    events.push_back(e);
    preds.emplace_back();
    return events.size() - 1;
  }

  void edge(std::size_t from, std::size_t to) {
    if (from >= events.size() || to >= events.size())
      throw std::out_of_range("edge endpoint out of range");
    preds[to].push_back(from);
  }

  std::size_t size() const { return events.size(); }
};

struct Timeline {
  EventGraph graph;
  std::vector<double> start;
  std::vector<double> end;

  double makespan() const {
    double m = 0.0;
    for (double e : end) m = std::max(m, e);
    return m;
  }

  // Lane exclusivity and dependency respect; throws on violation.
  void validate() const {
    for (std::size_t i = 0; i < graph.size(); ++i)
      for (auto p : graph.preds[i])
        if (start[i] < end[p])
          throw std::logic_error(graph.events[i].name() + " starts before " +
                                 graph.events[p].name() + " ends");
    for (std::size_t lane = 0; lane < kNumLanes; ++lane) {
      std::vector<std::size_t> on;
      for (std::size_t i = 0; i < graph.size(); ++i)
        if (static_cast<std::size_t>(graph.events[i].lane) == lane) on.push_back(i);
      std::sort(on.begin(), on.end(), [&](auto a, auto b) {
        return std::tie(start[a], end[a]) < std::tie(start[b], end[b]);
      });
      for (std::size_t k = 1; k < on.size(); ++k)
        if (start[on[k]] < end[on[k - 1]])
          throw std::logic_error("lane " + std::string(to_string(static_cast<Lane>(lane))) +
                                 ": " + graph.events[on[k]].name() + " overlaps " +
                                 graph.events[on[k - 1]].name());
    }
  }
};

// Greedy list scheduling: among events whose predecessors are placed, place
// the one with the earliest feasible start (lane free and predecessors
// done); ties go to the older step, then event kind, then micro-batch index.
inline Timeline simulate(const EventGraph& g) {
  const std::size_t n = g.size();
  Timeline t;
  t.graph = g;
  t.start.assign(n, 0.0);
  t.end.assign(n, 0.0);
  std::vector<std::size_t> missing(n);
  std::vector<std::vector<std::size_t>> succ(n);
  for (std::size_t i = 0; i < n; ++i) {
    missing[i] = g.preds[i].size();
    for (auto p : g.preds[i]) succ[p].push_back(i);
  }
  std::vector<double> ready_at(n, 0.0);
  std::vector<std::size_t> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (missing[i] == 0) ready.push_back(i);
  std::array<double, kNumLanes> lane_free{};

  auto key = [&](std::size_t i) {
    const Event& e = g.events[i];
    const double est = std::max(ready_at[i], lane_free[static_cast<std::size_t>(e.lane)]);
    return std::make_tuple(est, e.step, static_cast<int>(e.kind), e.index, i);
  };

  for (std::size_t placed = 0; placed < n; ++placed) {
    if (ready.empty()) throw std::invalid_argument("simulate: event graph has a cycle");
    auto best = std::min_element(ready.begin(), ready.end(),
                                 [&](auto a, auto b) { return key(a) < key(b); });
    const std::size_t i = *best;
    ready.erase(best);
    const Event& e = g.events[i];
    auto& lane = lane_free[static_cast<std::size_t>(e.lane)];
    t.start[i] = std::max(ready_at[i], lane);
    t.end[i] = t.start[i] + e.duration;
    lane = t.end[i];
    for (auto s : succ[i]) {
      ready_at[s] = std::max(ready_at[s], t.end[i]);
      if (--missing[s] == 0) ready.push_back(s);
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Interval arithmetic over a timeline
// ---------------------------------------------------------------------------

namespace detail {

using Interval = std::pair<double, double>;

inline std::vector<Interval> merged(std::vector<Interval> v) {
  std::sort(v.begin(), v.end());
  std::vector<Interval> out;
  for (auto [a, b] : v) {
    if (b <= a) continue;
    if (!out.empty() && a <= out.back().second)
      out.back().second = std::max(out.back().second, b);
    else
      out.emplace_back(a, b);
  }
  return out;
}

inline std::vector<Interval> clipped(const std::vector<Interval>& v, double lo, double hi) {
  std::vector<Interval> out;
  for (auto [a, b] : v) {
    a = std::max(a, lo);
    b = std::min(b, hi);
    if (b > a) out.emplace_back(a, b);
  }
  return out;
}

inline double length(const std::vector<Interval>& v) {
  double s = 0.0;
  for (auto [a, b] : v) s += b - a;
  return s;
}

// Union of `a` minus the union of `b`; both must be merged.
inline std::vector<Interval> subtract(const std::vector<Interval>& a,
                                      const std::vector<Interval>& b) {
  std::vector<Interval> out;
  std::size_t j = 0;
  for (auto [lo, hi] : a) {
    double cur = lo;
    while (j < b.size() && b[j].second <= cur) ++j;
    for (std::size_t k = j; k < b.size() && b[k].first < hi; ++k) {
      if (b[k].first > cur) out.emplace_back(cur, b[k].first);
      cur = std::max(cur, b[k].second);
      if (cur >= hi) break;
    }
    if (cur < hi) out.emplace_back(cur, hi);
  }
  return out;
}

template <typename Pred>
std::vector<Interval> intervals_where(const Timeline& t, Pred pred) {
  std::vector<Interval> v;
  for (std::size_t i = 0; i < t.graph.size(); ++i)
    if (pred(t.graph.events[i])) v.emplace_back(t.start[i], t.end[i]);
  return merged(std::move(v));
}

}  // namespace detail

// Share of communication time not covered by any compute-lane activity.
inline double exposed_ratio(const Timeline& t) {
  double total = 0.0;
  for (std::size_t i = 0; i < t.graph.size(); ++i)
    if (category_of(t.graph.events[i].kind) == Category::kComm) total += t.end[i] - t.start[i];
  if (total == 0.0) return 0.0;
  const auto compute =
      detail::intervals_where(t, [](const Event& e) { return e.lane == Lane::kCompute; });
  double exposed = 0.0;
  for (std::size_t i = 0; i < t.graph.size(); ++i) {
    if (category_of(t.graph.events[i].kind) != Category::kComm) continue;
    exposed += detail::length(detail::subtract({{t.start[i], t.end[i]}}, compute));
  }
  return exposed / total;
}

inline double utilization(const Timeline& t) {
  if (t.graph.size() == 0) throw std::invalid_argument("utilization: empty timeline");
  const double span = t.makespan();
  if (span == 0.0) return 0.0;
  const auto busy =
      detail::intervals_where(t, [](const Event& e) { return e.lane == Lane::kCompute; });
  return detail::length(busy) / span;
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

// Per-step load seen by one worker.
struct StepProfile {
  std::size_t local_samples = 0;
  std::size_t keys_per_sample = 0;  // mean, rounded up; sizes the h2d copy
  std::size_t routed_keys = 0;      // unique local keys sent to key routing
  std::size_t retrieved_rows = 0;   // rows this worker fetches as an owner
  std::vector<fwp::MicroBatchLoad> micro_batches;
};

inline StepProfile profile_of(std::span<const Sample> local, std::size_t n_micro,
                              fwp::PartitionMode mode, std::uint64_t seed, std::uint64_t step) {
  StepProfile p;
  p.local_samples = local.size();
  std::size_t keys = 0;
  for (const auto& s : local) keys += s.keys.size();
  p.keys_per_sample = local.empty() ? 0 : (keys + local.size() - 1) / local.size();
  p.routed_keys = key_set(local).size();
  // Symmetric-load proxy: an owner serves about as many rows as a worker asks for.
  p.retrieved_rows = p.routed_keys;
  p.micro_batches = fwp::loads_of(fwp::cluster_samples(local, n_micro, mode, seed, step));
  return p;
}

// Consecutive chunks of `local_batch` samples, each standing for one
// worker's share of a step.
inline std::vector<StepProfile> profiles_from_local(std::span<const Sample> samples,
                                                    std::size_t local_batch, std::size_t n_micro,
                                                    bool clustering, std::uint64_t seed,
                                                    std::size_t steps) {
  std::vector<StepProfile> out;
  const auto mode = clustering ? fwp::PartitionMode::kClustered : fwp::PartitionMode::kSequential;
  for (std::size_t t = 0; t < steps && (t + 1) * local_batch <= samples.size(); ++t)
    out.push_back(profile_of(samples.subspan(t * local_batch, local_batch), n_micro, mode, seed,
                             t + 1));
  return out;
}

struct PlanShape {
  std::size_t world = 1;
  std::size_t depth = 5;
  std::size_t emb_dim = 8;
  std::size_t dense_layers = 2;
  std::size_t dense_params = 0;
};

namespace detail {

struct StepIds {
  std::size_t prefetch, h2d, routing, retrieval, sync, last;
};

// Lookup chain plus the boundary constraints shared by every plan: at most
// `depth` batches in flight, a retrieval needs the buffer freed two batches
// back, and the sync needs the previous batch fully applied.
inline StepIds add_lookup(EventGraph& g, std::uint64_t step, std::array<double, 5> cost,
                          const std::vector<StepIds>& prior, std::size_t depth) {
  StepIds s{};
  s.prefetch = g.add({EventKind::kPrefetch, Lane::kCpuPrep, cost[0], step, 0});
  s.h2d = g.add({EventKind::kH2d, Lane::kH2d, cost[1], step, 0});
  s.routing = g.add({EventKind::kRouting, Lane::kInterconnect, cost[2], step, 0});
  s.retrieval = g.add({EventKind::kRetrieval, Lane::kRetrieval, cost[3], step, 0});
  s.sync = g.add({EventKind::kSync, Lane::kCompute, cost[4], step, 0});
  g.edge(s.prefetch, s.h2d);
  g.edge(s.h2d, s.routing);
  g.edge(s.routing, s.retrieval);
  g.edge(s.retrieval, s.sync);
  const std::size_t t = prior.size();
  if (t >= 1) g.edge(prior[t - 1].last, s.sync);
  if (t >= 2) g.edge(prior[t - 2].last, s.retrieval);
  if (t >= depth) g.edge(prior[t - depth].last, s.prefetch);
  return s;
}

}  // namespace detail

// Abstract five-stage pipeline: stage costs per batch, one lane per stage,
// fwd/bwd as a single compute event.
inline EventGraph build_stage_plan(std::array<double, 5> stage_cost, std::size_t steps,
                                   double sync_cost = 0.0, std::size_t depth = 5) {
  EventGraph g;
  std::vector<detail::StepIds> ids;
  for (std::size_t t = 1; t <= steps; ++t) {
    auto s = detail::add_lookup(
        g, t, {stage_cost[0], stage_cost[1], stage_cost[2], stage_cost[3], sync_cost}, ids, depth);
    s.last = g.add({EventKind::kCompute, Lane::kCompute, stage_cost[4], t, 0});
    g.edge(s.sync, s.last);
    ids.push_back(s);
  }
  return g;
}

// Expands a frozen-window DAG into `g` with costs; returns the apply event.
inline std::size_t add_window(EventGraph& g, const fwp::ScheduleDag& dag, std::uint64_t step,
                              std::size_t sync_event, const PlanShape& shape,
                              const CostModel& cm) {
  std::vector<std::size_t> id(dag.nodes.size());
  const double layers = static_cast<double>(shape.dense_layers + 1);
  for (std::size_t i = 0; i < dag.nodes.size(); ++i) {
    const auto& n = dag.nodes[i];
    Event e;
    e.step = step;
    e.index = n.index;
    switch (n.type) {
      case fwp::DagNodeType::kEmbA2a:
        e = {EventKind::kEmbA2a, Lane::kInterconnect,
             cost_a2a(static_cast<double>(n.payload_bytes), shape.world, cm), step, n.index};
        break;
      case fwp::DagNodeType::kGradA2a:
        e = {EventKind::kGradA2a, Lane::kInterconnect,
             cost_a2a(static_cast<double>(n.payload_bytes), shape.world, cm), step, n.index};
        break;
      case fwp::DagNodeType::kCompute:
        e = {EventKind::kCompute, Lane::kCompute,
             cm.compute_per_sample_per_layer * static_cast<double>(n.samples) * layers, step,
             n.index};
        break;
      case fwp::DagNodeType::kAllReduce:
        e = {EventKind::kAllReduce, Lane::kInterconnect, cm.allreduce_cost, step, 0};
        break;
      case fwp::DagNodeType::kApply:
        e = {EventKind::kApply, Lane::kCompute, 0.0, step, 0};
        break;
    }
    id[i] = g.add(e);
  }
  for (auto [a, b] : dag.edges) g.edge(id[a], id[b]);
  g.edge(sync_event, id[dag.find(fwp::DagNodeType::kEmbA2a, 1)]);
  return id[dag.find(fwp::DagNodeType::kApply, 0)];
}

// One window in isolation with flat costs: every All2All costs `comm`,
// every micro-batch compute costs `compute`.
inline EventGraph build_window_plan(const fwp::ScheduleDag& dag, double comm, double compute,
                                    double allreduce = 0.0) {
  EventGraph g;
  std::vector<std::size_t> id(dag.nodes.size());
  for (std::size_t i = 0; i < dag.nodes.size(); ++i) {
    const auto& n = dag.nodes[i];
    switch (n.type) {
      case fwp::DagNodeType::kEmbA2a:
        id[i] = g.add({EventKind::kEmbA2a, Lane::kInterconnect, comm, 0, n.index});
        break;
      case fwp::DagNodeType::kGradA2a:
        id[i] = g.add({EventKind::kGradA2a, Lane::kInterconnect, comm, 0, n.index});
        break;
      case fwp::DagNodeType::kCompute:
        id[i] = g.add({EventKind::kCompute, Lane::kCompute, compute, 0, n.index});
        break;
      case fwp::DagNodeType::kAllReduce:
        id[i] = g.add({EventKind::kAllReduce, Lane::kInterconnect, allreduce, 0, 0});
        break;
      case fwp::DagNodeType::kApply:
        id[i] = g.add({EventKind::kApply, Lane::kCompute, 0.0, 0, 0});
        break;
    }
  }
  for (auto [a, b] : dag.edges) g.edge(id[a], id[b]);
  return g;
}

inline EventGraph build_training_plan(std::span<const StepProfile> profiles,
                                      const PlanShape& shape, const CostModel& cm) {
  cm.validate();
  if (shape.depth < 1) throw ConfigError("pipeline_depth", "must be >= 1");
  EventGraph g;
  std::vector<detail::StepIds> ids;
  for (std::size_t t = 0; t < profiles.size(); ++t) {
    const auto& p = profiles[t];
    const double h2d_bytes =
        static_cast<double>(p.local_samples * (p.keys_per_sample * sizeof(std::uint64_t) + 1));
    const double route_bytes = static_cast<double>(p.routed_keys * sizeof(std::uint64_t));
    auto s = detail::add_lookup(
        g, t + 1,
        {cm.prep_per_sample * static_cast<double>(p.local_samples), cm.h2d_per_byte * h2d_bytes,
         cost_a2a(route_bytes, shape.world, cm),
         cm.retrieval_per_key * static_cast<double>(p.retrieved_rows), cm.sync_cost},
        ids, shape.depth);
    auto dag = fwp::build_schedule_dag(p.micro_batches, shape.emb_dim, shape.dense_params);
    s.last = add_window(g, dag, t + 1, s.sync, shape, cm);
    ids.push_back(s);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Modes and metrics
// ---------------------------------------------------------------------------

enum class Mode { kSyncBaseline, kDbpOnly, kFwpOnly, kNestPipe };
inline constexpr std::array<Mode, 4> kAllModes = {Mode::kSyncBaseline, Mode::kDbpOnly,
                                                  Mode::kFwpOnly, Mode::kNestPipe};

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::kSyncBaseline: return "sync-baseline";
    case Mode::kDbpOnly: return "dbp-only";
    case Mode::kFwpOnly: return "fwp-only";
    case Mode::kNestPipe: return "nestpipe";
  }
  return "?";
}

inline std::size_t depth_of(Mode m, std::size_t depth) {
  return m == Mode::kDbpOnly || m == Mode::kNestPipe ? depth : 1;
}

inline std::size_t micro_batches_of(Mode m, std::size_t n) {
  return m == Mode::kFwpOnly || m == Mode::kNestPipe ? n : 1;
}

struct Metrics {
  std::string mode;
  std::size_t workers = 0;
  double step_latency_ms = 0.0;
  double lookup_ms = 0.0;
  double comm_total_ms = 0.0;
  double comm_exposed_ms = 0.0;
  double compute_ms = 0.0;
  double idle_ms = 0.0;
  double exposed_ratio = 0.0;
  double utilization = 0.0;
  double qps = 0.0;
};

// Metrics over the window [end of step `first`, end of step `last`],
// averaged per step; first == 0 starts the window at time 0. Each instant is
// charged to one bucket: compute, then sync (as lookup), then exposed
// communication, then the other lookup stages.
inline Metrics window_metrics(const Timeline& t, std::size_t global_batch, std::uint64_t first,
                              std::uint64_t last) {
  if (!(first < last)) throw std::invalid_argument("window_metrics: need first < last");
  auto step_end = [&](std::uint64_t s) {
    double m = 0.0;
    for (std::size_t i = 0; i < t.graph.size(); ++i)
      if (t.graph.events[i].step == s) m = std::max(m, t.end[i]);
    return m;
  };
  const double lo = first == 0 ? 0.0 : step_end(first);
  const double hi = step_end(last);
  const double steps = static_cast<double>(last - first);

  using detail::clipped;
  using detail::length;
  using detail::subtract;
  auto where = [&](auto pred) { return clipped(detail::intervals_where(t, pred), lo, hi); };
  const auto compute = where([](const Event& e) { return category_of(e.kind) == Category::kCompute; });
  const auto sync = where([](const Event& e) { return e.kind == EventKind::kSync; });
  const auto comm = where([](const Event& e) { return category_of(e.kind) == Category::kComm; });
  const auto lookup = where([](const Event& e) {
    return category_of(e.kind) == Category::kLookup && e.kind != EventKind::kSync;
  });
  const auto lane = where([](const Event& e) { return e.lane == Lane::kCompute; });

  const auto sync_only = subtract(sync, compute);
  const auto higher = detail::merged([&] {
    auto v = compute;
    v.insert(v.end(), sync.begin(), sync.end());
    return v;
  }());
  const auto comm_exposed = subtract(comm, higher);
  const auto above_lookup = detail::merged([&] {
    auto v = higher;
    v.insert(v.end(), comm.begin(), comm.end());
    return v;
  }());
  const auto lookup_exposed = subtract(lookup, above_lookup);

  double comm_total = 0.0;
  for (std::size_t i = 0; i < t.graph.size(); ++i)
    if (category_of(t.graph.events[i].kind) == Category::kComm)
      comm_total += std::max(0.0, std::min(t.end[i], hi) - std::max(t.start[i], lo));

  Metrics m;
  m.step_latency_ms = (hi - lo) / steps;
  m.compute_ms = length(compute) / steps;
  m.lookup_ms = (length(sync_only) + length(lookup_exposed)) / steps;
  m.comm_exposed_ms = length(comm_exposed) / steps;
  m.comm_total_ms = comm_total / steps;
  m.idle_ms = m.step_latency_ms - m.compute_ms - m.lookup_ms - m.comm_exposed_ms;
  m.exposed_ratio = comm_total > 0.0 ? length(comm_exposed) / comm_total : 0.0;
  m.utilization = hi > lo ? length(lane) / (hi - lo) : 0.0;
  m.qps = m.step_latency_ms > 0.0
              ? static_cast<double>(global_batch) / (m.step_latency_ms / 1000.0)
              : 0.0;
  return m;
}

inline std::uint64_t last_step_of(const Timeline& t) {
  std::uint64_t last = 0;
  for (const auto& e : t.graph.events) last = std::max(last, e.step);
  return last;
}

// Steady state: from the end of step 1 to the end of the last step.
inline Metrics step_metrics(const Timeline& t, std::size_t global_batch) {
  const std::uint64_t last = last_step_of(t);
  if (last == 0) throw std::invalid_argument("step_metrics: no steps in timeline");
  return window_metrics(t, global_batch, last > 1 ? 1 : 0, last);
}

struct SimulationSetup {
  CostModel cost;
  std::size_t world = 1;
  std::size_t local_batch = 64;
  std::size_t num_micro_batches = 1;
  std::size_t depth = 5;
  std::size_t emb_dim = 8;
  std::size_t dense_layers = 2;
  std::size_t dense_params = 0;
  bool clustering = false;
  std::uint64_t seed = 0;
  std::size_t steps = 8;
};

struct ModeResult {
  Metrics metrics;
  Timeline timeline;
};

// Simulates one (mode, W) point. `local` supplies one worker's samples for
// consecutive steps; the per-worker batch is fixed as W varies.
inline ModeResult simulate_mode(Mode mode, std::span<const Sample> local,
                                const SimulationSetup& s) {
  s.cost.validate();
  const std::size_t n = micro_batches_of(mode, s.num_micro_batches);
  const auto profiles = profiles_from_local(local, s.local_batch, n, s.clustering, s.seed, s.steps);
  if (profiles.empty()) throw ConfigError("steps", "not enough samples for one simulated step");
  PlanShape shape{s.world, depth_of(mode, s.depth), s.emb_dim, s.dense_layers, s.dense_params};
  ModeResult r;
  r.timeline = simulate(build_training_plan(profiles, shape, s.cost));
  r.timeline.validate();
  r.metrics = step_metrics(r.timeline, s.local_batch * s.world);
  r.metrics.mode = to_string(mode);
  r.metrics.workers = s.world;
  return r;
}

inline std::vector<Metrics> compare_modes(std::span<const Sample> local, SimulationSetup s,
                                          std::span<const std::size_t> worker_counts) {
  std::vector<Metrics> rows;
  for (auto w : worker_counts) {
    s.world = w;
    for (auto m : kAllModes) rows.push_back(simulate_mode(m, local, s).metrics);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void write_metrics_header(std::ostream& out) {
  out << "# schema=1\n"
      << "step,mode,workers,step_latency_ms,lookup_ms,comm_total_ms,comm_exposed_ms,compute_ms,"
         "exposed_ratio,utilization,qps\n";
}

inline void write_metrics_row(std::ostream& out, std::uint64_t step, const Metrics& m) {
  const auto old = out.precision(10);
  out << step << ',' << m.mode << ',' << m.workers << ',' << m.step_latency_ms << ','
      << m.lookup_ms << ',' << m.comm_total_ms << ',' << m.comm_exposed_ms << ',' << m.compute_ms
      << ',' << m.exposed_ratio << ',' << m.utilization << ',' << m.qps << '\n';
  out.precision(old);
}

inline void write_timeline_csv(std::ostream& out, const Timeline& t) {
  const auto old = out.precision(10);
  out << "# schema=1\n" << "lane,event,start_ms,end_ms\n";
  std::vector<std::size_t> order(t.graph.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
    return std::tie(t.start[a], a) < std::tie(t.start[b], b);
  });
  for (auto i : order)
    out << to_string(t.graph.events[i].lane) << ',' << t.graph.events[i].name() << ','
        << t.start[i] << ',' << t.end[i] << '\n';
  out.precision(old);
}

inline void write_timeline_csv(const std::filesystem::path& path, const Timeline& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_timeline_csv(out, t);
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace nestpipe::timing
