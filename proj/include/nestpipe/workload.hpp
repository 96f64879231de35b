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

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>
#include "nestpipe/core.hpp"

namespace nestpipe::workload {

struct WorkloadConfig {
  std::uint64_t vocab_size = 1000;
  std::uint64_t num_samples = 6400;
  std::uint64_t keys_per_sample = 8;
  double zipf_skew = 1.0;
  std::uint64_t seed = 0;
  // When set, every sample carries this key in addition to its Zipf draws
  // (the hot-key adversarial workload). It counts toward keys_per_sample.
  std::optional<std::uint64_t> hot_key;

  void validate() const {
    if (vocab_size == 0) throw ConfigError("vocab_size", "must be > 0");
    if (num_samples == 0) throw ConfigError("num_samples", "must be > 0");
    if (keys_per_sample == 0) throw ConfigError("keys_per_sample", "must be > 0");
    if (keys_per_sample > vocab_size)
      throw ConfigError("keys_per_sample", "must not exceed vocab_size");
    if (!(zipf_skew >= 0.0) || !std::isfinite(zipf_skew))
      throw ConfigError("zipf_skew", "must be finite and >= 0");
    if (hot_key && *hot_key >= vocab_size)
      throw ConfigError("hot_key", "must be < vocab_size");
  }
};

// Inverse-CDF sampler over ranks [0, n) with weight 1/(r+1)^s. Rank r is
// key id r, so key 0 is the most popular.
class ZipfTable {
 public:
  ZipfTable(std::uint64_t n, double skew) : weights_(n), cdf_(n) {
    double acc = 0.0;
    for (std::uint64_t r = 0; r < n; ++r) {
      weights_[r] = 1.0 / std::pow(static_cast<double>(r + 1), skew);
      acc += weights_[r];
      cdf_[r] = acc;
    }
    total_ = acc;
  }

  std::uint64_t sample(double u) const {
    const double target = u * total_;
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), target);
    if (it == cdf_.end()) --it;
    return static_cast<std::uint64_t>(it - cdf_.begin());
  }

  double weight(std::uint64_t r) const { return weights_[r]; }
  std::uint64_t size() const { return weights_.size(); }

 private:
  std::vector<double> weights_;
  std::vector<double> cdf_;
  double total_ = 0.0;
};

namespace detail {

// Draws `count` distinct keys, skipping `taken`. Rejection first; once the
// attempt budget is spent, falls back to exact sampling from the
// renormalized remainder, which has the same distribution.
inline void draw_distinct(const ZipfTable& zipf, const Prf& prf, std::uint64_t sample_id,
                          std::uint64_t count, std::set<std::uint64_t>& taken) {
  const std::uint64_t target = taken.size() + count;
  const std::uint64_t budget = 64 * (count + 1);
  std::uint64_t attempt = 0;
  for (; taken.size() < target && attempt < budget; ++attempt) {
    taken.insert(zipf.sample(prf.unit("zipf", {sample_id, attempt})));
  }
  while (taken.size() < target) {
    double rest = 0.0;
    for (std::uint64_t r = 0; r < zipf.size(); ++r)
      if (!taken.count(r)) rest += zipf.weight(r);
    double u = prf.unit("zipf", {sample_id, attempt++}) * rest;
    std::uint64_t pick = zipf.size();
    for (std::uint64_t r = 0; r < zipf.size(); ++r) {
      if (taken.count(r)) continue;
      pick = r;
      u -= zipf.weight(r);
      if (u < 0.0) break;
    }
    taken.insert(pick);
  }
}

}  // namespace detail

// Sample i depends only on (seed, i).
inline std::vector<Sample> gen_dataset(const WorkloadConfig& cfg) {
  cfg.validate();
  const Prf prf(cfg.seed);
  const ZipfTable zipf(cfg.vocab_size, cfg.zipf_skew);
  std::vector<Sample> out;
  out.reserve(cfg.num_samples);
  for (std::uint64_t i = 0; i < cfg.num_samples; ++i) {
    std::set<std::uint64_t> taken;
    std::uint64_t wanted = cfg.keys_per_sample;
    if (cfg.hot_key) {
      taken.insert(*cfg.hot_key);
      --wanted;
    }
    detail::draw_distinct(zipf, prf, i, wanted, taken);
    Sample s;
    s.sample_id = i;
    s.label = prf.unit("label", {i}) < 0.5 ? 1 : 0;
    for (std::uint64_t k : taken) s.keys.push_back(SparseKey{k});
    out.push_back(std::move(s));
  }
  return out;
}

// JSON Lines: {"id": u64, "keys": [ascending u64...], "label": 0|1}
inline void write_dataset(const std::filesystem::path& path, std::span<const Sample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& s : samples) {
    nlohmann::json rec;
    rec["id"] = s.sample_id;
    rec["label"] = s.label;
    auto& keys = rec["keys"] = nlohmann::json::array();
    for (auto k : s.keys) keys.push_back(k.id);
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline Sample parse_sample_line(const std::string& line, std::size_t line_no) {
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!rec.is_object()) throw ParseError(line_no, "record is not an object");
  for (const auto& [name, _] : rec.items())
    if (name != "id" && name != "label" && name != "keys")
      throw ParseError(line_no, "unknown field '" + name + "'");
  if (!rec.contains("id") || !rec["id"].is_number_unsigned())
    throw ParseError(line_no, "'id' must be a non-negative integer");
  if (!rec.contains("label") || !rec["label"].is_number_unsigned() ||
      rec["label"].get<std::uint64_t>() > 1)
    throw ParseError(line_no, "'label' must be 0 or 1");
  if (!rec.contains("keys") || !rec["keys"].is_array() || rec["keys"].empty())
    throw ParseError(line_no, "'keys' must be a non-empty array");

  Sample s;
  s.sample_id = rec["id"].get<std::uint64_t>();
  s.label = static_cast<std::uint8_t>(rec["label"].get<std::uint64_t>());
  for (const auto& k : rec["keys"]) {
    if (!k.is_number_unsigned()) throw ParseError(line_no, "keys must be non-negative integers");
    s.keys.push_back(SparseKey{k.get<std::uint64_t>()});
  }
  const auto canon = canonical_key_order(s.keys);
  if (canon.size() != s.keys.size()) throw ParseError(line_no, "duplicate key in sample");
  s.keys = canon;
  return s;
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path.string());
  std::vector<Sample> out;
  std::unordered_set<std::uint64_t> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Sample s = parse_sample_line(line, line_no);
    if (!ids.insert(s.sample_id).second)
      throw ParseError(line_no, "duplicate sample id " + std::to_string(s.sample_id));
    out.push_back(std::move(s));
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
  std::sort(out.begin(), out.end(),
            [](const Sample& a, const Sample& b) { return a.sample_id < b.sample_id; });
  return out;
}

// Occurrence count per key id, over the whole dataset.
inline std::vector<std::uint64_t> key_frequencies(std::span<const Sample> samples,
                                                  std::uint64_t vocab_size) {
  std::vector<std::uint64_t> freq(vocab_size, 0);
  for (const auto& s : samples)
    for (auto k : s.keys)
      if (k.id < vocab_size) ++freq[k.id];
  return freq;
}

}  // namespace nestpipe::workload
