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

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nestpipe_cli.hpp"

namespace nestpipe::cli {
namespace {

namespace fs = std::filesystem;

const fs::path kConfigs = NESTPIPE_CONFIG_DIR;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("nestpipe_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "nestpipe");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return run(static_cast<int>(argv.size()), argv.data());
  }

  // A copy of a shipped config with the edit applied.
  fs::path variant(const std::string& name, const std::function<void(json&)>& edit) {
    std::ifstream in(kConfigs / name);
    json j = json::parse(in);
    edit(j);
    const auto path = dir_ / ("edited_" + name);
    std::ofstream(path) << j.dump(2);
    return path;
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  static std::vector<std::string> data_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty() && line[0] != '#') out.push_back(line);
    return out;  // header included
  }

  fs::path dir_;
};

TEST(ParseConfig, RejectsUnknownFieldsAndSections) {
  json j = {{"train", {{"num_workers", 2u}, {"num_wokers", 2u}}}};
  try {
    parse_config(j);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "train.num_wokers");
  }
  EXPECT_THROW(parse_config(json{{"extra", json::object()}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"train", {{"steps", "ten"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json::array()), ConfigError);
}

TEST(ParseConfig, ShippedConfigsAreValid) {
  for (auto name : {"default.json", "adversarial.json", "sweep.json"}) {
    auto c = load_config(kConfigs / name);
    EXPECT_NO_THROW(validate(c)) << name;
    EXPECT_EQ(c.train.vocab_size, c.workload.vocab_size);
  }
}

TEST(ParseSweep, Forms) {
  EXPECT_EQ(parse_sweep("workers=128,256"), (std::vector<std::size_t>{128, 256}));
  EXPECT_THROW(parse_sweep("workers="), ConfigError);
  EXPECT_THROW(parse_sweep("workers=4,x"), ConfigError);
  EXPECT_THROW(parse_sweep("workers=0"), ConfigError);
  EXPECT_THROW(parse_sweep("nodes=4"), ConfigError);
}

TEST(ModeConfig, Mapping) {
  TrainConfig base;
  base.num_micro_batches = 4;
  base.pipeline_depth = 5;
  auto s = train_config_for(base, "sync-baseline");
  EXPECT_EQ(s.pipeline_depth, 1u);
  EXPECT_EQ(s.num_micro_batches, 1u);
  EXPECT_EQ(train_config_for(base, "dbp-only").num_micro_batches, 1u);
  EXPECT_EQ(train_config_for(base, "fwp-only").pipeline_depth, 1u);
  EXPECT_TRUE(train_config_for(base, "unsafe-six-stage").unsafe_six_stage);
  EXPECT_THROW(train_config_for(base, "turbo"), ConfigError);
}

TEST_F(CliTest, ExitCodesForBadInput) {
  EXPECT_EQ(cli({"gen"}), kConfigError);  // --config is required
  EXPECT_EQ(cli({"gen", "--config", (dir_ / "missing.json").string()}), kIoError);
  std::ofstream(dir_ / "broken.json") << "{ not json";
  EXPECT_EQ(cli({"gen", "--config", (dir_ / "broken.json").string()}), kConfigError);
  auto unknown = variant("default.json", [](json& j) { j["train"]["lr"] = 0.1; });
  EXPECT_EQ(cli({"gen", "--config", unknown.string()}), kConfigError);
  auto bad_mode = variant("default.json", [](json& j) { j["run"]["mode"] = "turbo"; });
  EXPECT_EQ(cli({"train", "--config", bad_mode.string()}), kConfigError);
}

TEST_F(CliTest, ConfigErrorNamesTheField) {
  auto cfg = variant("default.json", [](json& j) {
    j["workload"]["vocab_size"] = 4;
    j["workload"]["keys_per_sample"] = 8;
  });
  ::testing::internal::CaptureStderr();
  const int rc = cli({"gen", "--config", cfg.string()});
  const auto err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(rc, kConfigError);
  EXPECT_NE(err.find("keys_per_sample"), std::string::npos) << err;
}

TEST_F(CliTest, GenIsDeterministicAndCreatesDirectories) {
  auto a = dir_ / "a" / "nested";
  auto b = dir_ / "b";
  ASSERT_EQ(cli({"gen", "--config", (kConfigs / "default.json").string(), "--out", a.string()}), kOk);
  ASSERT_EQ(cli({"gen", "--config", (kConfigs / "default.json").string(), "--out", b.string()}), kOk);
  EXPECT_TRUE(fs::exists(a / "dataset.jsonl"));
  EXPECT_EQ(slurp(a / "dataset.jsonl"), slurp(b / "dataset.jsonl"));
  auto c = dir_ / "c";
  ASSERT_EQ(cli({"gen", "--config", (kConfigs / "default.json").string(), "--out", c.string(),
                 "--seed", "8"}),
            kOk);
  EXPECT_NE(slurp(a / "dataset.jsonl"), slurp(c / "dataset.jsonl"));
}

TEST_F(CliTest, TrainVerifiesSafeMode) {
  const auto cfg = (kConfigs / "default.json").string();
  ASSERT_EQ(cli({"gen", "--config", cfg, "--out", dir_.string()}), kOk);
  ASSERT_EQ(cli({"train", "--config", cfg, "--out", dir_.string(), "--verify"}), kOk);
  for (auto f : {"metrics.csv", "stages.csv", "dag.json", "report.json"})
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  EXPECT_EQ(data_lines(dir_ / "metrics.csv").size(), 1u + 100);
  EXPECT_EQ(data_lines(dir_ / "stages.csv").size(), 1u + 100 * 5 * 4);
  auto report = json::parse(slurp(dir_ / "report.json"));
  EXPECT_TRUE(report["bitwise_equal"].get<bool>());
  EXPECT_TRUE(report["first_divergent_step"].is_null());
  auto dag = json::parse(slurp(dir_ / "dag.json"));
  EXPECT_EQ(dag["nodes"].size(), 3u * 4 + 2);
}

TEST_F(CliTest, TrainFlagsUnsafeMode) {
  const auto cfg = (kConfigs / "adversarial.json").string();
  ASSERT_EQ(cli({"gen", "--config", cfg, "--out", dir_.string()}), kOk);
  EXPECT_EQ(cli({"train", "--config", cfg, "--out", dir_.string(), "--verify"}), kVerifyFailed);
  auto report = json::parse(slurp(dir_ / "report.json"));
  EXPECT_EQ(report["first_divergent_step"], 2);
  EXPECT_EQ(report["estimated_staleness_lag"], 1);
  // Without --verify the run itself succeeds.
  EXPECT_EQ(cli({"train", "--config", cfg, "--out", dir_.string()}), kOk);
}

TEST_F(CliTest, TrainWithoutDatasetIsIoError) {
  EXPECT_EQ(cli({"train", "--config", (kConfigs / "default.json").string(), "--out",
                 (dir_ / "empty").string()}),
            kIoError);
}

TEST_F(CliTest, SimulateSweep) {
  const auto cfg = (kConfigs / "sweep.json").string();
  ASSERT_EQ(cli({"simulate", "--config", cfg, "--out", dir_.string()}), kOk);
  auto rows = data_lines(dir_ / "metrics.csv");
  ASSERT_EQ(rows.size(), 1u + 5 * 4);
  EXPECT_EQ(rows[0].rfind("step,mode,workers,", 0), 0u);
  EXPECT_TRUE(fs::exists(dir_ / "timeline.csv"));

  ASSERT_EQ(cli({"simulate", "--config", cfg, "--out", dir_.string(), "--sweep", "workers=8,16",
                 "--mode", "nestpipe"}),
            kOk);
  rows = data_lines(dir_ / "metrics.csv");
  ASSERT_EQ(rows.size(), 1u + 2);
  EXPECT_EQ(rows[2].rfind("0,nestpipe,16,", 0), 0u);
  EXPECT_EQ(cli({"simulate", "--config", cfg, "--out", dir_.string(), "--mode",
                 "unsafe-six-stage"}),
            kConfigError);
  EXPECT_EQ(cli({"simulate", "--config", cfg, "--out", dir_.string(), "--sweep", "workers=x"}),
            kConfigError);
}

TEST_F(CliTest, CompareReportsEveryMode) {
  auto cfg = variant("default.json", [](json& j) { j["train"]["steps"] = 20; });
  ASSERT_EQ(cli({"gen", "--config", cfg.string(), "--out", dir_.string()}), kOk);
  ASSERT_EQ(cli({"compare", "--config", cfg.string(), "--out", dir_.string()}), kOk);
  auto rows = data_lines(dir_ / "compare.csv");
  ASSERT_EQ(rows.size(), 1u + 5);
  for (std::size_t i = 1; i <= 4; ++i) EXPECT_EQ(rows[i].back(), '1') << rows[i];
  EXPECT_EQ(rows[5].rfind("unsafe-six-stage,", 0), 0u);
  EXPECT_EQ(rows[5].back(), '0');
}

}  // namespace
}  // namespace nestpipe::cli
