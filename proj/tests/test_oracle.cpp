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

#include <algorithm>
#include <random>

#include "nestpipe/nestpipe.hpp"
#include "test_util.hpp"

namespace nestpipe::oracle {
namespace {

using testing::make_sample;

TEST(SyncStep, ClosedFormSingleRow) {
  for (double lr : {0.1, 0.5, 1.0}) {
    TrainConfig cfg;
    cfg.emb_dim = 1;
    cfg.dense_layers = 0;
    cfg.batch_size = 1;
    cfg.learning_rate = lr;
    OracleState s;
    s.params = dense::DenseParams<float>(dense::DenseShape{1, 1, 0});
    s.params.flat()[0] = 1.0f;  // w_out; b_out stays 0
    s.table[SparseKey{5}] = {0.0f};
    Batch b{1, {make_sample(0, {5}, 1)}};
    auto reads = sync_step(s, b, cfg);
    EXPECT_EQ(reads.at(SparseKey{5}), (embedding::EmbeddingRow{0.0f}));
    // dloss/dlogit = -0.5 at logit 0; the row moves by +0.5*lr.
    EXPECT_FLOAT_EQ(s.table.at(SparseKey{5})[0], static_cast<float>(0.5 * lr));
    EXPECT_EQ(s.step, 1u);
  }
}

TEST(SyncStep, MaterializesLazily) {
  auto cfg = testing::base_config();
  auto s = make_oracle(cfg);
  Batch b{1, {make_sample(0, {3, 9})}};
  cfg.batch_size = 1;
  auto reads = sync_step(s, b, cfg);
  const Prf prf(cfg.seed);
  EXPECT_EQ(reads.at(SparseKey{3}), embedding::init_row(prf, SparseKey{3}, cfg.emb_dim));
  EXPECT_EQ(s.table.size(), 2u);
}

TEST(SyncStep, InvariantToSampleOrder) {
  auto cfg = testing::base_config();
  auto data = testing::zipf_dataset(64, 1.0, 2);
  auto a = make_oracle(cfg);
  auto b = make_oracle(cfg);
  sync_step(a, Batch{1, data}, cfg);
  std::mt19937 rng(4);
  std::shuffle(data.begin(), data.end(), rng);
  sync_step(b, Batch{1, data}, cfg);
  EXPECT_TRUE(a.params.bit_equal(b.params));
  EXPECT_EQ(a.table, b.table);
}

TEST(SyncStep, RejectsNonFiniteLoss) {
  auto cfg = testing::base_config();
  cfg.batch_size = 1;
  auto s = make_oracle(cfg);
  s.table[SparseKey{1}] = embedding::EmbeddingRow(cfg.emb_dim, std::numeric_limits<float>::infinity());
  EXPECT_THROW(sync_step(s, Batch{1, {make_sample(0, {1})}}, cfg), std::runtime_error);
}

TEST(MakeBatches, StopsAtShortTail) {
  auto cfg = testing::base_config();
  auto data = testing::zipf_dataset(200, 1.0, 2);
  auto b = make_batches(data, cfg, 10);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[2].step, 3u);
  EXPECT_EQ(b[2].samples.front().sample_id, 128u);
  EXPECT_EQ(make_batches(data, cfg, 2).size(), 2u);
}

TEST(CompareTrajectories, SelfIsBitwiseEqual) {
  auto cfg = testing::base_config();
  cfg.steps = 5;
  auto data = testing::zipf_dataset(64 * 5, 1.0, 2);
  auto a = run_oracle(data, cfg);
  auto b = run_oracle(data, cfg);
  auto r = compare_trajectories(a, b, 0.0);
  EXPECT_TRUE(r.bitwise_equal);
  EXPECT_TRUE(r.consistent());
  EXPECT_EQ(r.steps_compared, 5u);
  EXPECT_EQ(r.max_abs_dense_diff, 0.0);
  EXPECT_EQ(r.per_step.size(), 5u);
  EXPECT_TRUE(r.to_json()["first_divergent_step"].is_null());
}

TEST(CompareTrajectories, RejectsMismatchedConfigs) {
  auto cfg = testing::base_config();
  cfg.steps = 1;
  auto data = testing::zipf_dataset(64, 1.0, 2);
  auto a = run_oracle(data, cfg);
  cfg.learning_rate = 0.2;
  auto b = run_oracle(data, cfg);
  EXPECT_THROW(compare_trajectories(a, b, 0.0), ConfigError);
}

TEST(CompareTrajectories, LocatesPerturbation) {
  auto cfg = testing::base_config();
  cfg.steps = 4;
  auto data = testing::zipf_dataset(64 * 4, 1.0, 2);
  auto a = run_oracle(data, cfg);
  auto b = a;
  for (std::size_t t = 3; t <= 4; ++t) b.states[t].dense[0] += 1e-3f;
  auto r = compare_trajectories(a, b, 0.0);
  ASSERT_TRUE(r.first_divergent_step);
  EXPECT_EQ(*r.first_divergent_step, 3u);
  EXPECT_FALSE(r.bitwise_equal);
  EXPECT_NEAR(r.max_abs_dense_diff, 1e-3, 1e-6);
  // Within tolerance it counts as consistent, though not bitwise.
  auto loose = compare_trajectories(a, b, 1e-2);
  EXPECT_TRUE(loose.consistent());
  EXPECT_FALSE(loose.bitwise_equal);
}

TEST(CompareTrajectories, EstimatesOneStepLag) {
  auto cfg = testing::base_config();
  cfg.steps = 6;
  auto data = testing::zipf_dataset(64 * 6, 1.0, 2);
  auto ref = run_oracle(data, cfg);
  cfg.unsafe_six_stage = true;
  auto run = dbp::run(data, cfg, {.record_trajectory = true});
  auto r = compare_trajectories(ref, *run.trajectory, 0.0);
  ASSERT_TRUE(r.first_divergent_step);
  EXPECT_EQ(*r.first_divergent_step, 2u);
  ASSERT_TRUE(r.estimated_staleness_lag);
  EXPECT_EQ(*r.estimated_staleness_lag, 1u);
}

// The full safe-mode matrix: every W, N, clustering and depth is bitwise
// equal to the synchronous reference over 100 steps.
TEST(EndToEnd, SafeModeMatrixMatchesOracle) {
  auto base = testing::base_config();
  const auto data = testing::zipf_dataset(64 * 100, 1.0, base.seed);
  const auto ref = run_oracle(data, base);
  ASSERT_EQ(ref.steps(), 100u);
  for (std::size_t w : {1, 2, 4})
    for (std::size_t n : {1, 2, 4})
      for (bool clustering : {false, true})
        for (std::size_t depth = 1; depth <= 5; ++depth) {
          auto cfg = base;
          cfg.num_workers = w;
          cfg.num_micro_batches = n;
          cfg.clustering_enabled = clustering;
          cfg.pipeline_depth = depth;
          auto run = dbp::run(data, cfg, {.record_trajectory = true});
          auto r = compare_trajectories(ref, *run.trajectory, 0.0);
          EXPECT_TRUE(r.bitwise_equal) << "W=" << w << " N=" << n << " clustering=" << clustering
                                       << " depth=" << depth;
          EXPECT_EQ(r.steps_compared, 100u);
        }
}

TEST(EndToEnd, FastModeStaysClose) {
  auto cfg = testing::base_config();
  cfg.exact_order_mode = false;
  const auto data = testing::zipf_dataset(64 * 100, 1.0, cfg.seed);
  auto ref = run_oracle(data, cfg);
  auto run = dbp::run(data, cfg, {.record_trajectory = true});
  auto r = compare_trajectories(ref, *run.trajectory, 1e-5);
  EXPECT_TRUE(r.consistent()) << r.max_abs_dense_diff << " " << r.max_abs_embedding_diff;
}

}  // namespace
}  // namespace nestpipe::oracle
