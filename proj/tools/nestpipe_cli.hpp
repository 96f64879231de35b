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

// Experiment runner: gen / train / simulate / compare over one JSON config
// with sections workload, train, cost and run.

#pragma once

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include "nestpipe/nestpipe.hpp"

namespace nestpipe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kIoError = 3 };

inline constexpr std::array<const char*, 5> kModes = {"sync-baseline", "dbp-only", "fwp-only",
                                                      "nestpipe", "unsafe-six-stage"};

struct RunSection {
  std::string mode = "nestpipe";
  std::string out_dir = "out";
  std::string dataset;  // default: <out_dir>/dataset.jsonl
  bool verify = false;
  std::vector<std::size_t> workers;  // simulate sweep; default: train.num_workers
  std::size_t sim_steps = 8;
  std::size_t local_batch = 0;  // per-worker batch for simulate; 0: batch_size / num_workers
};

struct ExperimentConfig {
  workload::WorkloadConfig workload;
  TrainConfig train;
  timing::CostModel cost;
  RunSection run;

  fs::path dataset_path() const {
    return run.dataset.empty() ? fs::path(run.out_dir) / "dataset.jsonl" : fs::path(run.dataset);
  }
  std::size_t sim_local_batch() const {
    return run.local_batch ? run.local_batch : train.local_batch();
  }
};

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace detail {

class Section {
 public:
  Section(const json& root, std::string name) : name_(std::move(name)) {
    if (!root.contains(name_)) return;
    node_ = &root.at(name_);
    if (!node_->is_object()) throw ConfigError(name_, "section must be an object");
  }

  template <typename T>
  void get(const char* field, T& out) {
    seen_.insert(field);
    if (!node_ || !node_->contains(field)) return;
    const json& v = node_->at(field);
    const std::string where = name_ + "." + field;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(where, "expected a non-negative integer");
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where, "expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where, "expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>) {
      if (v.is_null()) {
        out.reset();
      } else {
        if (!v.is_number_unsigned()) throw ConfigError(where, "expected a non-negative integer");
        out = v.get<std::uint64_t>();
      }
    } else {
      if (!v.is_array()) throw ConfigError(where, "expected an array");
      out.clear();
      for (const auto& e : v) {
        if (!e.is_number_unsigned()) throw ConfigError(where, "expected non-negative integers");
        out.push_back(e.get<typename T::value_type>());
      }
    }
  }

  // Anything present but never asked for is a typo or a stale field.
  void reject_unknown() const {
    if (!node_) return;
    for (const auto& [k, _] : node_->items())
      if (!seen_.count(k)) throw ConfigError(name_ + "." + k, "unknown field");
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  if (!root.is_object()) throw ConfigError("config", "top level must be an object");
  for (const auto& [k, _] : root.items())
    if (k != "workload" && k != "train" && k != "cost" && k != "run")
      throw ConfigError(k, "unknown section");
  ExperimentConfig c;

  detail::Section w(root, "workload");
  w.get("vocab_size", c.workload.vocab_size);
  w.get("num_samples", c.workload.num_samples);
  w.get("keys_per_sample", c.workload.keys_per_sample);
  w.get("zipf_skew", c.workload.zipf_skew);
  w.get("seed", c.workload.seed);
  w.get("hot_key", c.workload.hot_key);
  w.reject_unknown();

  detail::Section t(root, "train");
  t.get("num_workers", c.train.num_workers);
  t.get("emb_dim", c.train.emb_dim);
  t.get("dense_layers", c.train.dense_layers);
  t.get("hidden_dim", c.train.hidden_dim);
  t.get("batch_size", c.train.batch_size);
  t.get("num_micro_batches", c.train.num_micro_batches);
  t.get("learning_rate", c.train.learning_rate);
  t.get("steps", c.train.steps);
  t.get("seed", c.train.seed);
  t.get("clustering_enabled", c.train.clustering_enabled);
  t.get("exact_order_mode", c.train.exact_order_mode);
  t.get("unsafe_six_stage", c.train.unsafe_six_stage);
  t.get("pipeline_depth", c.train.pipeline_depth);
  t.reject_unknown();
  c.train.vocab_size = c.workload.vocab_size;

  detail::Section k(root, "cost");
  k.get("a2a_base", c.cost.a2a_base);
  k.get("a2a_per_worker", c.cost.a2a_per_worker);
  k.get("a2a_per_worker2", c.cost.a2a_per_worker2);
  k.get("a2a_per_byte", c.cost.a2a_per_byte);
  k.get("h2d_per_byte", c.cost.h2d_per_byte);
  k.get("prep_per_sample", c.cost.prep_per_sample);
  k.get("retrieval_per_key", c.cost.retrieval_per_key);
  k.get("sync_cost", c.cost.sync_cost);
  k.get("compute_per_sample_per_layer", c.cost.compute_per_sample_per_layer);
  k.get("allreduce_cost", c.cost.allreduce_cost);
  k.reject_unknown();

  detail::Section r(root, "run");
  r.get("mode", c.run.mode);
  r.get("out_dir", c.run.out_dir);
  r.get("dataset", c.run.dataset);
  r.get("verify", c.run.verify);
  r.get("workers", c.run.workers);
  r.get("sim_steps", c.run.sim_steps);
  r.get("local_batch", c.run.local_batch);
  r.reject_unknown();
  return c;
}

inline void validate(const ExperimentConfig& c) {
  c.workload.validate();
  c.train.validate();
  c.cost.validate();
  if (std::find_if(kModes.begin(), kModes.end(), [&](const char* m) { return c.run.mode == m; }) ==
      kModes.end())
    throw ConfigError("run.mode", "unknown mode '" + c.run.mode + "'");
  if (c.run.sim_steps < 1) throw ConfigError("run.sim_steps", "must be >= 1");
  for (auto w : c.run.workers)
    if (w < 1) throw ConfigError("run.workers", "worker counts must be >= 1");
  if (c.sim_local_batch() % c.train.num_micro_batches != 0)
    throw ConfigError("run.local_batch", "must be divisible by num_micro_batches");
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(root);
}

// Worker counts from "workers=a,b,c".
inline std::vector<std::size_t> parse_sweep(const std::string& text) {
  const std::string prefix = "workers=";
  if (text.rfind(prefix, 0) != 0) throw ConfigError("--sweep", "expected workers=a,b,c");
  std::vector<std::size_t> out;
  std::stringstream ss(text.substr(prefix.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("--sweep", "bad worker count '" + item + "'");
    const auto v = std::stoull(item);
    if (v < 1) throw ConfigError("--sweep", "worker counts must be >= 1");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("--sweep", "no worker counts given");
  return out;
}

// ---------------------------------------------------------------------------
// Modes
// ---------------------------------------------------------------------------

inline TrainConfig train_config_for(const TrainConfig& base, const std::string& mode) {
  TrainConfig c = base;
  c.unsafe_six_stage = false;
  if (mode == "sync-baseline") {
    c.pipeline_depth = 1;
    c.num_micro_batches = 1;
  } else if (mode == "dbp-only") {
    c.num_micro_batches = 1;
  } else if (mode == "fwp-only") {
    c.pipeline_depth = 1;
  } else if (mode == "unsafe-six-stage") {
    c.unsafe_six_stage = true;
  } else if (mode != "nestpipe") {
    throw ConfigError("mode", "unknown mode '" + mode + "'");
  }
  return c;
}

inline timing::Mode timing_mode_for(const std::string& mode) {
  if (mode == "sync-baseline") return timing::Mode::kSyncBaseline;
  if (mode == "dbp-only") return timing::Mode::kDbpOnly;
  if (mode == "fwp-only") return timing::Mode::kFwpOnly;
  return timing::Mode::kNestPipe;  // unsafe-six-stage shares nestpipe's schedule
}

inline timing::SimulationSetup simulation_setup(const ExperimentConfig& c, std::size_t world) {
  timing::SimulationSetup s;
  s.cost = c.cost;
  s.world = world;
  s.local_batch = c.sim_local_batch();
  s.num_micro_batches = c.train.num_micro_batches;
  s.depth = c.train.pipeline_depth;
  s.emb_dim = c.train.emb_dim;
  s.dense_layers = c.train.dense_layers;
  s.dense_params = oracle::dense_shape_of(c.train).param_count();
  s.clustering = c.train.clustering_enabled;
  s.seed = c.train.seed;
  s.steps = c.run.sim_steps;
  return s;
}

// One worker's samples for `steps` simulated steps, drawn from the workload.
inline std::vector<Sample> simulation_samples(const ExperimentConfig& c) {
  workload::WorkloadConfig w = c.workload;
  w.num_samples = c.sim_local_batch() * c.run.sim_steps;
  return workload::gen_dataset(w);
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

inline void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

struct TrainOutcome {
  dbp::RunResult run;
  std::optional<oracle::ConsistencyReport> report;
  bool verified = true;
};

// Verification threshold: bitwise in exact-order mode, 1e-5 otherwise.
inline double verify_tolerance(const TrainConfig& c) { return c.exact_order_mode ? 0.0 : 1e-5; }

inline TrainOutcome train_mode(const ExperimentConfig& c, std::span<const Sample> data,
                               const std::string& mode, bool verify) {
  const TrainConfig cfg = train_config_for(c.train, mode);
  TrainOutcome o;
  dbp::RunOptions opts;
  opts.record_trajectory = verify;
  o.run = dbp::run(data, cfg, opts);
  if (verify) {
    const auto reference = oracle::run_oracle(data, cfg);
    o.report = oracle::compare_trajectories(reference, *o.run.trajectory, verify_tolerance(cfg));
    o.verified = o.report->consistent();
  }
  return o;
}

// Per-step timing for a functional run: worker 0's actual batches through
// the mode's schedule.
inline std::vector<timing::Metrics> per_step_metrics(const ExperimentConfig& c,
                                                     std::span<const Sample> data,
                                                     const std::string& mode, std::size_t steps) {
  const TrainConfig cfg = train_config_for(c.train, mode);
  std::vector<Sample> local;
  dbp::DatasetCursor cursor(data, cfg.batch_size);
  for (std::size_t t = 0; t < steps; ++t) {
    auto b = cursor.next();
    if (!b) break;
    auto split = dbp::split_by_worker(*b, cfg.num_workers);
    local.insert(local.end(), split[0].begin(), split[0].end());
  }
  timing::SimulationSetup s = simulation_setup(c, cfg.num_workers);
  s.local_batch = cfg.local_batch();
  s.num_micro_batches = cfg.num_micro_batches;
  s.depth = cfg.pipeline_depth;
  s.steps = steps;
  const auto r = timing::simulate_mode(timing_mode_for(mode), local, s);
  std::vector<timing::Metrics> out;
  for (std::uint64_t t = 1; t <= timing::last_step_of(r.timeline); ++t) {
    auto m = timing::window_metrics(r.timeline, cfg.batch_size, t - 1, t);
    m.mode = mode;
    m.workers = cfg.num_workers;
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline int cmd_gen(const ExperimentConfig& c) {
  const auto data = workload::gen_dataset(c.workload);
  const fs::path path = c.dataset_path();
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  workload::write_dataset(path, data);
  const auto freq = workload::key_frequencies(data, c.workload.vocab_size);
  std::vector<std::uint64_t> ids(freq.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return freq[a] > freq[b]; });
  fmt::print("wrote {} samples to {}\n", data.size(), path.string());
  fmt::print("hottest keys:");
  for (std::size_t i = 0; i < std::min<std::size_t>(5, ids.size()); ++i)
    fmt::print(" {}:{}", ids[i], freq[ids[i]]);
  fmt::print("\n");
  return kOk;
}

inline int cmd_train(const ExperimentConfig& c) {
  const auto data = workload::read_dataset(c.dataset_path());
  const fs::path out_dir(c.run.out_dir);
  ensure_dir(out_dir);
  spdlog::info("training mode={} workers={} N={} depth={} steps={}", c.run.mode,
               c.train.num_workers, c.train.num_micro_batches, c.train.pipeline_depth,
               c.train.steps);
  const auto o = train_mode(c, data, c.run.mode, c.run.verify);
  const TrainConfig cfg = train_config_for(c.train, c.run.mode);

  {
    auto out = open_out(out_dir / "metrics.csv");
    timing::write_metrics_header(out);
    const auto rows = per_step_metrics(c, data, c.run.mode, o.run.steps_run);
    for (std::size_t t = 0; t < rows.size(); ++t) timing::write_metrics_row(out, t + 1, rows[t]);
  }
  dbp::write_stage_log_csv(out_dir / "stages.csv", o.run.log, cfg.num_workers);
  if (!o.run.stats.empty()) {
    const auto part = fwp::cluster_samples(
        dbp::split_by_worker(dbp::DatasetCursor(data, cfg.batch_size).next().value(),
                             cfg.num_workers)[0],
        cfg.num_micro_batches,
        cfg.clustering_enabled ? fwp::PartitionMode::kClustered : fwp::PartitionMode::kSequential,
        cfg.seed, 1);
    write_json(out_dir / "dag.json",
               fwp::build_schedule_dag(part, cfg.emb_dim,
                                       oracle::dense_shape_of(cfg).param_count())
                   .to_json());
  }
  fmt::print("mode {}: {} steps on {} workers\n", c.run.mode, o.run.steps_run, cfg.num_workers);

  if (o.report) {
    write_json(out_dir / "report.json", o.report->to_json());
    const auto& r = *o.report;
    fmt::print("verify: steps={} max_dense_diff={:.3g} max_embedding_diff={:.3g} bitwise={}\n",
               r.steps_compared, r.max_abs_dense_diff, r.max_abs_embedding_diff,
               r.bitwise_equal ? "yes" : "no");
    if (!o.verified) {
      fmt::print("verify FAILED: first divergent step {}", *r.first_divergent_step);
      if (r.estimated_staleness_lag) fmt::print(", staleness lag {}", *r.estimated_staleness_lag);
      fmt::print("\n");
      return kVerifyFailed;
    }
    fmt::print("verify OK\n");
  }
  return kOk;
}

inline int cmd_simulate(const ExperimentConfig& c, const std::optional<std::string>& only_mode) {
  const auto workers =
      c.run.workers.empty() ? std::vector<std::size_t>{c.train.num_workers} : c.run.workers;
  std::vector<std::string> modes;
  if (only_mode) {
    if (*only_mode == "unsafe-six-stage")
      throw ConfigError("--mode", "unsafe-six-stage has no separate timing schedule");
    modes.push_back(*only_mode);
  } else {
    for (auto m : timing::kAllModes) modes.emplace_back(timing::to_string(m));
  }
  const auto local = simulation_samples(c);
  const fs::path out_dir(c.run.out_dir);
  ensure_dir(out_dir);
  auto out = open_out(out_dir / "metrics.csv");
  timing::write_metrics_header(out);
  std::optional<timing::ModeResult> last;
  fmt::print("{:<14} {:>7} {:>12} {:>10} {:>10} {:>10} {:>8} {:>6}\n", "mode", "workers",
             "latency_ms", "lookup", "comm", "exposed", "ratio", "util");
  for (auto w : workers) {
    for (const auto& m : modes) {
      auto r = timing::simulate_mode(timing_mode_for(m), local, simulation_setup(c, w));
      timing::write_metrics_row(out, 0, r.metrics);
      fmt::print("{:<14} {:>7} {:>12.3f} {:>10.3f} {:>10.3f} {:>10.3f} {:>8.4f} {:>6.3f}\n", m, w,
                 r.metrics.step_latency_ms, r.metrics.lookup_ms, r.metrics.comm_total_ms,
                 r.metrics.comm_exposed_ms, r.metrics.exposed_ratio, r.metrics.utilization);
      last = std::move(r);
    }
  }
  if (!out) throw IoError("write failed: metrics.csv");
  timing::write_timeline_csv(out_dir / "timeline.csv", last->timeline);
  return kOk;
}

inline int cmd_compare(const ExperimentConfig& c) {
  const auto data = workload::read_dataset(c.dataset_path());
  const fs::path out_dir(c.run.out_dir);
  ensure_dir(out_dir);
  const auto local = simulation_samples(c);
  auto out = open_out(out_dir / "compare.csv");
  out << "# schema=1\n"
      << "mode,workers,step_latency_ms,lookup_ms,comm_exposed_ms,oracle_equal\n";
  fmt::print("{:<17} {:>12} {:>10} {:>14} {:>13}\n", "mode", "latency_ms", "lookup_ms",
             "comm_exposed", "oracle_equal");
  bool all_safe_equal = true;
  for (const char* mode : kModes) {
    const auto o = train_mode(c, data, mode, true);
    const bool equal = o.report->consistent();
    if (std::string(mode) != "unsafe-six-stage") all_safe_equal = all_safe_equal && equal;
    const auto sim =
        timing::simulate_mode(timing_mode_for(mode), local, simulation_setup(c, c.train.num_workers));
    const auto& m = sim.metrics;
    fmt::print("{:<17} {:>12.3f} {:>10.3f} {:>14.3f} {:>13}\n", mode, m.step_latency_ms,
               m.lookup_ms, m.comm_exposed_ms, equal ? "yes" : "no");
    out << mode << ',' << c.train.num_workers << ',' << m.step_latency_ms << ',' << m.lookup_ms
        << ',' << m.comm_exposed_ms << ',' << (equal ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed: compare.csv");
  return all_safe_equal ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline void configure_logging() {
  const char* env = std::getenv("NESTPIPE_LOG");
  const std::string level = env ? env : "error";
  if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else if (level == "info")
    spdlog::set_level(spdlog::level::info);
  else
    spdlog::set_level(spdlog::level::err);
}

inline int run(int argc, char** argv) {
  configure_logging();
  CLI::App app{"NestPipe training and timing simulator"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::string> mode;
  bool verify = false;
  bool exact_order = false;
  std::optional<std::string> sweep;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed for workload and model");
  };
  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train functionally, optionally verify against the oracle");
  add_common(train);
  train->add_option("--mode", mode, "sync-baseline|dbp-only|fwp-only|nestpipe|unsafe-six-stage");
  train->add_flag("--verify", verify, "compare against the synchronous oracle");
  train->add_flag("--exact-order", exact_order, "canonical-order gradient summation");
  auto* simulate = app.add_subcommand("simulate", "timing simulation sweep");
  add_common(simulate);
  simulate->add_option("--mode", mode, "simulate only this mode");
  simulate->add_option("--sweep", sweep, "workers=a,b,c");
  auto* compare = app.add_subcommand("compare", "consistency and performance per mode");
  add_common(compare);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    ExperimentConfig c = load_config(config_path);
    if (out_dir) c.run.out_dir = *out_dir;
    if (seed) c.workload.seed = c.train.seed = *seed;
    if (mode) c.run.mode = *mode;
    if (verify) c.run.verify = true;
    if (exact_order) c.train.exact_order_mode = true;
    if (sweep) c.run.workers = parse_sweep(*sweep);
    validate(c);
    spdlog::debug("config loaded from {}", config_path);
    if (*gen) return cmd_gen(c);
    if (*train) return cmd_train(c);
    if (*simulate) return cmd_simulate(c, mode);
    return cmd_compare(c);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfigError;
  } catch (const IoError& e) {
    fmt::print(stderr, "I/O error: {}\n", e.what());
    return kIoError;
  } catch (const ParseError& e) {
    fmt::print(stderr, "dataset error: {}\n", e.what());
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    fmt::print(stderr, "I/O error: {}\n", e.what());
    return kIoError;
  } catch (const std::invalid_argument& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kIoError;
  }
}

}  // namespace nestpipe::cli
