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

// Trains the same Zipf workload through the pipelined engine and through the
// synchronous reference, then reports how far apart they ended up.

#include <cstdio>

#include "nestpipe/nestpipe.hpp"

int main() {
  using namespace nestpipe;

  workload::WorkloadConfig wc;
  wc.vocab_size = 1000;
  wc.num_samples = 64 * 20;
  wc.zipf_skew = 1.0;
  const auto data = workload::gen_dataset(wc);

  TrainConfig cfg;
  cfg.num_workers = 4;
  cfg.num_micro_batches = 4;
  cfg.batch_size = 64;
  cfg.steps = 20;
  cfg.clustering_enabled = true;

  const auto run = dbp::run(data, cfg, {.record_trajectory = true});
  const auto reference = oracle::run_oracle(data, cfg);
  const auto report = oracle::compare_trajectories(reference, *run.trajectory, 0.0);

  std::printf("steps: %zu, stage records: %zu\n", run.steps_run, run.log.size());
  std::printf("max dense diff: %g, max embedding diff: %g, bitwise equal: %s\n",
              report.max_abs_dense_diff, report.max_abs_embedding_diff,
              report.bitwise_equal ? "yes" : "no");

  cfg.unsafe_six_stage = true;
  const auto unsafe = dbp::run(data, cfg, {.record_trajectory = true});
  const auto stale = oracle::compare_trajectories(reference, *unsafe.trajectory, 0.0);
  if (stale.first_divergent_step)
    std::printf("without the buffer sync: diverges at step %zu\n", *stale.first_divergent_step);
  return report.bitwise_equal ? 0 : 1;
}
