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

#include "nestpipe/workload.hpp"
#include "test_util.hpp"

namespace nestpipe::workload {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "nestpipe_test_workload";
  fs::create_directories(dir);
  return dir / name;
}

TEST(GenDataset, DeterministicCanonicalDistinct) {
  WorkloadConfig c;
  c.num_samples = 500;
  c.seed = 11;
  auto a = gen_dataset(c);
  auto b = gen_dataset(c);
  ASSERT_EQ(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].sample_id, i);
    EXPECT_EQ(a[i].keys.size(), c.keys_per_sample);
    EXPECT_TRUE(is_canonical(a[i].keys));
    EXPECT_LT(a[i].keys.back().id, c.vocab_size);
    EXPECT_LE(a[i].label, 1);
  }
  c.seed = 12;
  EXPECT_NE(gen_dataset(c), a);
}

TEST(GenDataset, PrefixStable) {
  WorkloadConfig c;
  c.num_samples = 50;
  auto small = gen_dataset(c);
  c.num_samples = 100;
  auto big = gen_dataset(c);
  EXPECT_TRUE(std::equal(small.begin(), small.end(), big.begin()));
}

TEST(GenDataset, ZipfRanksByPopularity) {
  WorkloadConfig c;
  c.num_samples = 4000;
  c.zipf_skew = 1.2;
  c.keys_per_sample = 4;
  auto d = gen_dataset(c);
  auto f = key_frequencies(d, c.vocab_size);
  EXPECT_GT(f[0], f[1]);
  EXPECT_GT(f[1], f[10]);
  EXPECT_GT(f[10], f[500]);
}

TEST(GenDataset, UniformWhenSkewZero) {
  WorkloadConfig c;
  c.num_samples = 2000;
  c.zipf_skew = 0.0;
  c.vocab_size = 10;
  c.keys_per_sample = 1;
  auto f = key_frequencies(gen_dataset(c), 10);
  for (auto v : f) {
    EXPECT_GT(v, 150u);
    EXPECT_LT(v, 250u);
  }
}

TEST(GenDataset, AllKeysWhenKeysEqualVocab) {
  WorkloadConfig c;
  c.num_samples = 20;
  c.vocab_size = 6;
  c.keys_per_sample = 6;
  c.zipf_skew = 2.0;
  for (const auto& s : gen_dataset(c)) EXPECT_EQ(s.keys.size(), 6u);
}

TEST(GenDataset, HotKeyInEverySample) {
  WorkloadConfig c;
  c.num_samples = 300;
  c.hot_key = 123;
  for (const auto& s : gen_dataset(c)) {
    EXPECT_TRUE(std::binary_search(s.keys.begin(), s.keys.end(), SparseKey{123}));
    EXPECT_EQ(s.keys.size(), c.keys_per_sample);
  }
}

TEST(WorkloadConfig, Errors) {
  WorkloadConfig c;
  c.keys_per_sample = c.vocab_size + 1;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "keys_per_sample");
  }
  c = {};
  c.zipf_skew = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.hot_key = c.vocab_size;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DatasetFile, RoundTrip) {
  WorkloadConfig c;
  c.num_samples = 64;
  auto d = gen_dataset(c);
  auto p = temp_file("rt.jsonl");
  write_dataset(p, d);
  EXPECT_EQ(read_dataset(p), d);
}

TEST(DatasetFile, ParseErrorsCarryLine) {
  auto p = temp_file("bad.jsonl");
  {
    std::ofstream o(p);
    o << R"({"id":0,"keys":[1,2],"label":1})" << "\n\n" << R"({"id":1,"keys":[3,3],"label":0})";
  }
  try {
    read_dataset(p);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_sample_line(R"({"id":0,"keys":[1],"label":2})", 1), ParseError);
  EXPECT_THROW(parse_sample_line(R"({"id":0,"keys":[],"label":1})", 1), ParseError);
  EXPECT_THROW(parse_sample_line(R"({"id":0,"keys":[1],"label":1,"x":1})", 1), ParseError);
  EXPECT_THROW(parse_sample_line("not json", 1), ParseError);
  auto s = parse_sample_line(R"({"id":4,"keys":[9,2],"label":0})", 1);
  EXPECT_EQ(s.keys.front().id, 2u);
}

TEST(DatasetFile, DuplicateIdsAndMissingFile) {
  auto p = temp_file("dup.jsonl");
  {
    std::ofstream o(p);
    o << R"({"id":0,"keys":[1],"label":1})" << "\n" << R"({"id":0,"keys":[2],"label":1})" << "\n";
  }
  EXPECT_THROW(read_dataset(p), ParseError);
  EXPECT_THROW(read_dataset(temp_file("absent.jsonl")), IoError);
}

}  // namespace
}  // namespace nestpipe::workload
