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

// Builds the two-stream schedule of one batch and prints how much of its
// communication stays exposed as the number of micro-batches grows.

#include <cstdio>
#include <vector>

#include "nestpipe/nestpipe.hpp"

int main() {
  using namespace nestpipe;
  const double comm = 1.0;
  const double compute = 2.0;
  for (std::size_t n : {1, 2, 4, 8, 16}) {
    std::vector<fwp::MicroBatchLoad> loads(n, {32, 16});
    const auto dag = fwp::build_schedule_dag(loads, 8);
    const auto tl = timing::simulate(timing::build_window_plan(dag, comm, compute));
    std::printf("N=%-3zu makespan=%6.1f exposed_ratio=%.4f\n", n, tl.makespan(),
                timing::exposed_ratio(tl));
  }
  return 0;
}
