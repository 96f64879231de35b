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

#include <gtest/gtest.h>

#include <sstream>

#include "nestpipe/nestpipe.hpp"
#include "test_util.hpp"

namespace nestpipe::timing {
namespace {

TEST(CostA2a, AffineModel) {
  CostModel cm;
  cm.a2a_base = 10;
  cm.a2a_per_worker = 0.5;
  cm.a2a_per_byte = 1e-5;
  EXPECT_DOUBLE_EQ(cost_a2a(1e6, 128, cm), 84.0);
  EXPECT_DOUBLE_EQ(cost_a2a(0, 1, cm), 10.5);
  EXPECT_DOUBLE_EQ(cost_a2a(0, 256, cm) - cost_a2a(0, 128, cm), 64.0);
  cm.a2a_per_worker2 = 0.01;
  EXPECT_DOUBLE_EQ(cost_a2a(0, 10, cm), 10 + 5 + 1);
  EXPECT_THROW(cost_a2a(0, 0, cm), ConfigError);
}

TEST(CostModel, ValidateNamesField) {
  CostModel cm;
  cm.retrieval_per_key = -1;
  try {
    cm.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "retrieval_per_key");
  }
  cm.retrieval_per_key = std::numeric_limits<double>::infinity();
  EXPECT_THROW(cm.validate(), ConfigError);
}

double end_of(const Timeline& t, EventKind k, std::uint64_t step) {
  for (std::size_t i = 0; i < t.graph.size(); ++i)
    if (t.graph.events[i].kind == k && t.graph.events[i].step == step) return t.end[i];
  ADD_FAILURE() << "no such event";
  return 0;
}

TEST(Simulate, PipelineBottleneckLaw) {
  auto t = simulate(build_stage_plan({2, 1, 1, 3, 5}, 10));
  t.validate();
  EXPECT_DOUBLE_EQ(end_of(t, EventKind::kCompute, 1), 12.0);
  for (std::uint64_t s = 2; s <= 10; ++s)
    EXPECT_DOUBLE_EQ(end_of(t, EventKind::kCompute, s) - end_of(t, EventKind::kCompute, s - 1), 5.0);
}

TEST(Simulate, SerialDepthAddsStages) {
  auto t = simulate(build_stage_plan({2, 1, 1, 3, 5}, 4, 0.0, 1));
  EXPECT_DOUBLE_EQ(end_of(t, EventKind::kCompute, 4), 4 * 12.0);
}

TEST(Simulate, RejectsCycle) {
  EventGraph g;
  auto a = g.add({EventKind::kCompute, Lane::kCompute, 1, 1, 0});
  auto b = g.add({EventKind::kCompute, Lane::kCompute, 1, 1, 1});
  g.edge(a, b);
  g.edge(b, a);
  EXPECT_THROW(simulate(g), std::invalid_argument);
  EXPECT_THROW(g.edge(a, 7), std::out_of_range);
  EXPECT_THROW(g.add({EventKind::kCompute, Lane::kCompute, -1, 1, 0}), std::invalid_argument);
}

TEST(Timeline, ValidateCatchesOverlapAndOrder) {
  EventGraph g;
  auto a = g.add({EventKind::kCompute, Lane::kCompute, 2, 1, 1});
  auto b = g.add({EventKind::kCompute, Lane::kCompute, 2, 1, 2});
  auto t = simulate(g);
  t.validate();
  t.start[b] = 1;
  t.end[b] = 3;
  EXPECT_THROW(t.validate(), std::logic_error);
  g.edge(a, b);
  auto u = simulate(g);
  u.start[b] = 0;
  EXPECT_THROW(u.validate(), std::logic_error);
}

Timeline window(std::size_t n, double comm, double compute) {
  std::vector<fwp::MicroBatchLoad> loads(n, {1, 1});
  auto t = simulate(build_window_plan(fwp::build_schedule_dag(loads, 1), comm, compute));
  t.validate();
  return t;
}

TEST(ExposedRatio, OneOverNWhenComputeCoversTwoTransfers) {
  for (std::size_t n : {1, 2, 4, 8, 16})
    for (double compute : {2.0, 3.0}) {
      auto t = window(n, 1.0, compute);
      EXPECT_NEAR(exposed_ratio(t), 1.0 / static_cast<double>(n), 1e-12) << n << " " << compute;
    }
}

TEST(ExposedRatio, FourMicroBatchBreakdown) {
  auto t = window(4, 1.0, 2.0);
  double total = 0;
  std::size_t transfers = 0;
  for (std::size_t i = 0; i < t.graph.size(); ++i)
    if (category_of(t.graph.events[i].kind) == Category::kComm && t.end[i] > t.start[i]) {
      total += t.end[i] - t.start[i];
      ++transfers;
    }
  EXPECT_EQ(transfers, 8u);
  EXPECT_DOUBLE_EQ(total, 8.0);
  EXPECT_DOUBLE_EQ(exposed_ratio(t) * total, 2.0);
}

TEST(ExposedRatio, EqualCostsExposeMore) {
  // The pull for i+2 and the push for i both sit inside compute_{i+1}; with
  // compute == comm only one of them fits.
  EXPECT_DOUBLE_EQ(exposed_ratio(window(4, 1.0, 1.0)), 0.5);
  EXPECT_DOUBLE_EQ(exposed_ratio(window(1, 1.0, 1.0)), 1.0);
}

TEST(ExposedRatio, InflatedPayloadCollapsesOverlap) {
  EXPECT_GT(exposed_ratio(window(4, 3.0, 1.0)), 0.25);
}

TEST(ExposedRatio, SerialAndCovered) {
  EventGraph g;
  auto a = g.add({EventKind::kEmbA2a, Lane::kInterconnect, 2, 1, 1});
  auto b = g.add({EventKind::kCompute, Lane::kCompute, 3, 1, 1});
  g.edge(a, b);
  EXPECT_DOUBLE_EQ(exposed_ratio(simulate(g)), 1.0);
  EventGraph h;
  h.add({EventKind::kCompute, Lane::kCompute, 10, 1, 1});
  auto c = h.add({EventKind::kGradA2a, Lane::kInterconnect, 2, 1, 1});
  auto k = h.add({EventKind::kPrefetch, Lane::kCpuPrep, 3, 1, 0});
  h.edge(k, c);
  auto t = simulate(h);
  EXPECT_DOUBLE_EQ(t.start[c], 3.0);
  EXPECT_DOUBLE_EQ(exposed_ratio(t), 0.0);
  EXPECT_DOUBLE_EQ(exposed_ratio(simulate(EventGraph{})), 0.0);
}

TEST(Utilization, ComputeShareOfSpan) {
  EventGraph g;
  auto a = g.add({EventKind::kPrefetch, Lane::kCpuPrep, 1, 1, 0});
  auto b = g.add({EventKind::kCompute, Lane::kCompute, 9, 1, 1});
  g.edge(a, b);
  EXPECT_DOUBLE_EQ(utilization(simulate(g)), 0.9);
  EXPECT_THROW(utilization(simulate(EventGraph{})), std::invalid_argument);
}

TEST(Utilization, SerialBaselineIsComputeOverTotal) {
  auto t = simulate(build_stage_plan({1, 1, 1, 1, 6}, 3, 0.0, 1));
  EXPECT_DOUBLE_EQ(utilization(t), 0.6);
}

SimulationSetup small_setup() {
  SimulationSetup s;
  s.cost.a2a_base = 0.5;
  s.cost.a2a_per_worker = 0.01;
  s.cost.a2a_per_byte = 1e-4;
  s.cost.h2d_per_byte = 1e-3;
  s.cost.prep_per_sample = 0.05;
  s.cost.retrieval_per_key = 0.02;
  s.cost.sync_cost = 0.5;
  s.cost.compute_per_sample_per_layer = 0.05;
  s.cost.allreduce_cost = 0.5;
  s.world = 16;
  s.local_batch = 32;
  s.num_micro_batches = 4;
  s.clustering = true;
  s.steps = 8;
  return s;
}

const std::vector<Sample>& local_samples() {
  static const auto data = testing::zipf_dataset(32 * 8, 1.0, 3);
  return data;
}

TEST(Modes, LatencyOrdering) {
  // Pipelining the same events never hurts. Splitting into micro-batches
  // only pays off once compute covers the extra per-transfer overhead.
  auto s = small_setup();
  for (double cpspl : {0.01, 0.05, 0.2, 0.5})
    for (double per_worker : {0.0, 0.01, 0.05}) {
      s.cost.compute_per_sample_per_layer = cpspl;
      s.cost.a2a_per_worker = per_worker;
      const auto rows = compare_modes(local_samples(), s, std::vector<std::size_t>{16});
      ASSERT_EQ(rows.size(), 4u);
      const double base = rows[0].step_latency_ms, dbp = rows[1].step_latency_ms,
                   fwp = rows[2].step_latency_ms, nest = rows[3].step_latency_ms;
      EXPECT_LE(dbp, base + 1e-9);
      EXPECT_LE(nest, fwp + 1e-9);
      if (cpspl >= 0.2) {
        EXPECT_LE(nest, dbp + 1e-9);
        EXPECT_LE(fwp, base + 1e-9);
      }
    }
}

TEST(Modes, FixedTransferCostCanMakeSplittingSlower) {
  auto s = small_setup();
  s.cost.compute_per_sample_per_layer = 0.01;
  s.cost.a2a_per_worker = 0.05;
  const auto rows = compare_modes(local_samples(), s, std::vector<std::size_t>{16});
  EXPECT_GT(rows[2].step_latency_ms, rows[0].step_latency_ms);
}

TEST(Modes, DbpHidesLookupButNotComm) {
  auto s = small_setup();
  auto base = simulate_mode(Mode::kSyncBaseline, local_samples(), s).metrics;
  auto dbp = simulate_mode(Mode::kDbpOnly, local_samples(), s).metrics;
  EXPECT_GT(base.lookup_ms, s.cost.sync_cost);
  EXPECT_LE(dbp.lookup_ms, s.cost.sync_cost + 1e-9);
  EXPECT_NEAR(dbp.comm_total_ms, base.comm_total_ms, 1e-9);
  EXPECT_EQ(base.exposed_ratio, 1.0);
}

TEST(Modes, BreakdownSumsToLatency) {
  auto s = small_setup();
  for (auto m : kAllModes) {
    auto r = simulate_mode(m, local_samples(), s).metrics;
    EXPECT_NEAR(r.compute_ms + r.lookup_ms + r.comm_exposed_ms + r.idle_ms, r.step_latency_ms,
                1e-9);
    EXPECT_GE(r.idle_ms, -1e-9);
    EXPECT_NEAR(r.qps, 32.0 * 16 / (r.step_latency_ms / 1000.0), 1e-6);
    EXPECT_EQ(r.mode, to_string(m));
    EXPECT_EQ(r.workers, 16u);
  }
}

// Schedule length, not the steady-state window: a slower start can shift the
// window's left edge and shorten the measured per-step interval.
TEST(Modes, MakespanMonotoneInEveryCoefficient) {
  const auto s = small_setup();
  double CostModel::*fields[] = {
      &CostModel::a2a_base,          &CostModel::a2a_per_worker,   &CostModel::a2a_per_worker2,
      &CostModel::a2a_per_byte,      &CostModel::h2d_per_byte,     &CostModel::prep_per_sample,
      &CostModel::retrieval_per_key, &CostModel::sync_cost,
      &CostModel::compute_per_sample_per_layer, &CostModel::allreduce_cost};
  for (auto m : kAllModes) {
    const double before = simulate_mode(m, local_samples(), s).timeline.makespan();
    for (auto f : fields) {
      auto bumped = s;
      bumped.cost.*f = bumped.cost.*f * 2 + 0.01;
      EXPECT_GE(simulate_mode(m, local_samples(), bumped).timeline.makespan(), before - 1e-9)
          << to_string(m);
    }
  }
}

TEST(Modes, ComputeDominantNestPipeStaysBusy) {
  auto s = small_setup();
  s.cost.compute_per_sample_per_layer = 0.5;
  EXPECT_GE(simulate_mode(Mode::kNestPipe, local_samples(), s).metrics.utilization, 0.9);
}

TEST(Modes, TooFewSamplesIsConfigError) {
  auto s = small_setup();
  s.local_batch = 10000;
  EXPECT_THROW(simulate_mode(Mode::kNestPipe, local_samples(), s), ConfigError);
}

TEST(TrainingPlan, BoundaryEdges) {
  auto s = small_setup();
  auto t = simulate_mode(Mode::kNestPipe, local_samples(), s).timeline;
  for (std::uint64_t step = 2; step <= 8; ++step) {
    double sync_start = 0, retrieval_start = 0;
    for (std::size_t i = 0; i < t.graph.size(); ++i) {
      if (t.graph.events[i].step != step) continue;
      if (t.graph.events[i].kind == EventKind::kSync) sync_start = t.start[i];
      if (t.graph.events[i].kind == EventKind::kRetrieval) retrieval_start = t.start[i];
    }
    EXPECT_GE(sync_start, end_of(t, EventKind::kApply, step - 1));
    if (step > 2) {
      EXPECT_GE(retrieval_start, end_of(t, EventKind::kApply, step - 2));
    }
  }
}

TEST(Export, MetricsAndTimelineCsv) {
  std::ostringstream m;
  write_metrics_header(m);
  Metrics row;
  row.mode = "nestpipe";
  row.workers = 4;
  row.step_latency_ms = 1.5;
  write_metrics_row(m, 3, row);
  EXPECT_EQ(m.str(),
            "# schema=1\nstep,mode,workers,step_latency_ms,lookup_ms,comm_total_ms,"
            "comm_exposed_ms,compute_ms,exposed_ratio,utilization,qps\n"
            "3,nestpipe,4,1.5,0,0,0,0,0,0,0\n");
  std::ostringstream t;
  write_timeline_csv(t, window(1, 1.0, 2.0));
  EXPECT_EQ(t.str(),
            "# schema=1\nlane,event,start_ms,end_ms\n"
            "interconnect,b0.emb_a2a_1,0,1\ncompute,b0.compute_1,1,3\n"
            "interconnect,b0.grad_a2a_1,3,4\ninterconnect,b0.allreduce,4,4\n"
            "compute,b0.apply,4,4\n");
}

}  // namespace
}  // namespace nestpipe::timing
