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

#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

#include "nestpipe/nestpipe.hpp"

namespace nestpipe::testing {

inline Sample make_sample(std::uint64_t id, std::initializer_list<std::uint64_t> keys,
                          std::uint8_t label = 1) {
  Sample s;
  s.sample_id = id;
  s.label = label;
  for (auto k : keys) s.keys.push_back(SparseKey{k});
  s.keys = canonical_key_order(s.keys);
  return s;
}

inline std::vector<Sample> zipf_dataset(std::uint64_t samples, double skew, std::uint64_t seed,
                                        std::uint64_t vocab = 1000, std::uint64_t keys = 8) {
  workload::WorkloadConfig wc;
  wc.vocab_size = vocab;
  wc.num_samples = samples;
  wc.keys_per_sample = keys;
  wc.zipf_skew = skew;
  wc.seed = seed;
  return workload::gen_dataset(wc);
}

// The standard small configuration: W=4, |V|=1000, d=8, L=2, h=8, |B|=64.
inline TrainConfig base_config() {
  TrainConfig c;
  c.num_workers = 4;
  c.vocab_size = 1000;
  c.emb_dim = 8;
  c.dense_layers = 2;
  c.hidden_dim = 8;
  c.batch_size = 64;
  c.num_micro_batches = 4;
  c.learning_rate = 0.1;
  c.steps = 100;
  c.seed = 7;
  c.clustering_enabled = true;
  c.pipeline_depth = 5;
  return c;
}

}  // namespace nestpipe::testing
