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

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nestpipe {

using WorkerId = std::size_t;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Invalid configuration. `field()` names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// A worker touched a key it does not own.
class ShardViolation : public std::logic_error {
  using std::logic_error::logic_error;
};

// A pipeline dependency was not satisfied (e.g. sync before grads applied).
class OrderingViolation : public std::logic_error {
  using std::logic_error::logic_error;
};

class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input record; `line()` is 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct SparseKey {
  std::uint64_t id = 0;

  friend auto operator<=>(const SparseKey&, const SparseKey&) = default;
};

struct Sample {
  std::uint64_t sample_id = 0;
  std::vector<SparseKey> keys;  // strictly ascending
  std::uint8_t label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Batch {
  std::uint64_t step = 0;
  std::vector<Sample> samples;  // ascending sample_id
};

struct MicroBatch {
  std::uint64_t parent_step = 0;
  std::size_t index = 0;  // 1-based
  std::vector<Sample> samples;
};

// Sorts ascending and drops duplicates. Idempotent.
inline std::vector<SparseKey> canonical_key_order(std::vector<SparseKey> keys) {
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  return keys;
}

inline bool is_canonical(std::span<const SparseKey> keys) {
  return std::adjacent_find(keys.begin(), keys.end(),
                            [](SparseKey a, SparseKey b) { return !(a < b); }) ==
         keys.end();
}

// K(samples): the distinct keys touched by a set of samples, ascending.
inline std::vector<SparseKey> key_set(std::span<const Sample> samples) {
  std::vector<SparseKey> keys;
  for (const auto& s : samples) keys.insert(keys.end(), s.keys.begin(), s.keys.end());
  return canonical_key_order(std::move(keys));
}

struct TrainConfig {
  std::size_t num_workers = 1;
  std::uint64_t vocab_size = 1000;
  std::size_t emb_dim = 8;
  std::size_t dense_layers = 2;
  std::size_t hidden_dim = 8;
  std::size_t batch_size = 64;
  std::size_t num_micro_batches = 1;
  double learning_rate = 0.1;
  std::size_t steps = 1;
  std::uint64_t seed = 0;
  bool clustering_enabled = false;
  bool exact_order_mode = true;
  bool unsafe_six_stage = false;
  std::size_t pipeline_depth = 5;  // batches in flight, 1..5

  std::size_t local_batch() const { return batch_size / num_workers; }
  std::size_t micro_batch_size() const { return local_batch() / num_micro_batches; }

  void validate() const {
    if (num_workers < 1) throw ConfigError("num_workers", "must be >= 1");
    if (vocab_size < 1) throw ConfigError("vocab_size", "must be >= 1");
    if (emb_dim < 1) throw ConfigError("emb_dim", "must be >= 1");
    if (hidden_dim < 1) throw ConfigError("hidden_dim", "must be >= 1");
    if (num_micro_batches < 1) throw ConfigError("num_micro_batches", "must be >= 1");
    if (batch_size == 0 || batch_size % (num_workers * num_micro_batches) != 0)
      throw ConfigError("batch_size",
                        "must be a positive multiple of num_workers * num_micro_batches");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate", "must be finite and > 0");
    if (pipeline_depth < 1 || pipeline_depth > 5)
      throw ConfigError("pipeline_depth", "must be in [1, 5]");
  }
};

// ---------------------------------------------------------------------------
// Counter-based pseudo-randomness
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

// Keyed pseudo-random function: (seed, purpose, indices) -> 64-bit word.
// Stateless, so the value of a draw never depends on call order.
class Prf {
 public:
  explicit Prf(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t word(std::string_view purpose,
                     std::initializer_list<std::uint64_t> indices) const {
    return word(purpose, std::span<const std::uint64_t>(indices.begin(), indices.size()));
  }

  std::uint64_t word(std::string_view purpose, std::span<const std::uint64_t> indices) const {
    std::uint64_t h = detail::mix64(seed_ ^ detail::kGolden);
    h = detail::mix64(h ^ detail::fnv1a(purpose));
    std::uint64_t pos = 1;
    for (std::uint64_t idx : indices) {
      h = detail::mix64(h ^ detail::mix64(idx + detail::kGolden * pos));
      ++pos;
    }
    return detail::mix64(h + indices.size());
  }

  // Uniform double in [0, 1) from the top 53 bits.
  double unit(std::string_view purpose, std::initializer_list<std::uint64_t> indices) const {
    return static_cast<double>(word(purpose, indices) >> 11) * 0x1.0p-53;
  }

 private:
  std::uint64_t seed_;
};

inline double prf_uniform(const Prf& prf, std::string_view purpose,
                          std::initializer_list<std::uint64_t> indices, double lo,
                          double hi) {
  if (!(lo < hi)) throw std::invalid_argument("prf_uniform: requires lo < hi");
  const double v = lo + (hi - lo) * prf.unit(purpose, indices);
  return v < hi ? v : std::nextafter(hi, lo);
}

// ---------------------------------------------------------------------------
// Shared update rule
// ---------------------------------------------------------------------------

// w - lr * (grad_sum / batch). Every trainer path goes through these two
// overloads so that identical sums yield identical parameters.
inline float sgd_update(float w, float grad_sum, std::size_t batch, float lr) {
  return w - lr * (grad_sum / static_cast<float>(batch));
}

inline float sgd_update(float w, double grad_sum, std::size_t batch, float lr) {
  return static_cast<float>(static_cast<double>(w) -
                            static_cast<double>(lr) * (grad_sum / static_cast<double>(batch)));
}

}  // namespace nestpipe

template <>
struct std::hash<nestpipe::SparseKey> {
  std::size_t operator()(nestpipe::SparseKey k) const noexcept {
    return static_cast<std::size_t>(nestpipe::detail::mix64(k.id));
  }
};
