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

// Simulated collectives among W logical workers. Delivery order is part of
// the contract: receivers see sources in ascending worker id, and items from
// one source in the order that source sent them. Reductions sum in ascending
// worker id. Latency lives in the timing model, not here.

#pragma once

#include <condition_variable>
#include <exception>
#include <cstddef>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "nestpipe/core.hpp"

namespace nestpipe::fabric {

class FabricError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// payload[dst] = items addressed to worker dst.
template <typename T>
using A2aPayload = std::vector<std::vector<T>>;

// result[src] = items received from worker src.
template <typename T>
using A2aResult = std::vector<std::vector<T>>;

template <typename T>
std::vector<A2aResult<T>> all_to_all(std::vector<A2aPayload<T>> payloads) {
  const std::size_t world = payloads.size();
  for (std::size_t src = 0; src < world; ++src) {
    if (payloads[src].size() != world)
      throw FabricError("all_to_all: worker " + std::to_string(src) + " supplied " +
                        std::to_string(payloads[src].size()) + " destination lists, expected " +
                        std::to_string(world));
  }
  std::vector<A2aResult<T>> results(world, A2aResult<T>(world));
  for (std::size_t dst = 0; dst < world; ++dst)
    for (std::size_t src = 0; src < world; ++src)
      results[dst][src] = std::move(payloads[src][dst]);
  return results;
}

// Every worker receives the concatenation of all contributions, ordered by
// source worker id.
template <typename T>
std::vector<std::vector<T>> all_gather(const std::vector<std::vector<T>>& contributions) {
  const std::size_t world = contributions.size();
  std::vector<A2aPayload<T>> payloads(world, A2aPayload<T>(world));
  for (std::size_t src = 0; src < world; ++src)
    for (std::size_t dst = 0; dst < world; ++dst) payloads[src][dst] = contributions[src];
  auto received = all_to_all(std::move(payloads));
  std::vector<std::vector<T>> out(world);
  for (std::size_t dst = 0; dst < world; ++dst)
    for (auto& from : received[dst])
      out[dst].insert(out[dst].end(), from.begin(), from.end());
  return out;
}

template <typename T>
std::vector<std::vector<T>> all_reduce_sum(const std::vector<std::vector<T>>& vectors) {
  if (vectors.empty()) return {};
  const std::size_t len = vectors.front().size();
  for (std::size_t w = 0; w < vectors.size(); ++w) {
    if (vectors[w].size() != len)
      throw FabricError("all_reduce_sum: worker " + std::to_string(w) + " has length " +
                        std::to_string(vectors[w].size()) + ", expected " +
                        std::to_string(len));
  }
  std::vector<T> sum(len, T{});
  for (const auto& v : vectors)
    for (std::size_t i = 0; i < len; ++i) sum[i] += v[i];
  return std::vector<std::vector<T>>(vectors.size(), sum);
}

// Blocking all_to_all for W concurrently running workers. Each worker calls
// exchange() with its payload; the last arrival performs the same
// deterministic permutation as all_to_all() and releases everyone. Reusable
// across rounds.
template <typename T>
class Rendezvous {
 public:
  explicit Rendezvous(std::size_t world) : world_(world), pending_(world), results_(world) {}

  A2aResult<T> exchange(WorkerId worker, A2aPayload<T> payload) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !draining_; });
    if (worker >= world_) throw FabricError("exchange: worker id out of range");
    pending_[worker] = std::move(payload);
    const std::size_t round = round_;
    if (++arrived_ == world_) {
      try {
        results_ = all_to_all(std::move(pending_));
      } catch (...) {
        error_ = std::current_exception();
      }
      pending_.assign(world_, {});
      arrived_ = 0;
      draining_ = true;
      ++round_;
      cv_.notify_all();
    } else {
      cv_.wait(lock, [&] { return round_ != round; });
    }
    if (error_) {
      auto err = error_;
      if (++released_ == world_) finish_round();
      std::rethrow_exception(err);
    }
    A2aResult<T> mine = std::move(results_[worker]);
    if (++released_ == world_) finish_round();
    return mine;
  }

 private:
  void finish_round() {
    released_ = 0;
    draining_ = false;
    error_ = nullptr;
    cv_.notify_all();
  }

  std::size_t world_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<A2aPayload<T>> pending_;
  std::vector<A2aResult<T>> results_;
  std::size_t arrived_ = 0;
  std::size_t released_ = 0;
  std::size_t round_ = 0;
  bool draining_ = false;
  std::exception_ptr error_;
};

}  // namespace nestpipe::fabric
