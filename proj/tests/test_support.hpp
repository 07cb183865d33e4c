// Copyright 2026 The margindyn Authors.
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
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "margindyn/run_record.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("margindyn_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Run whose train margins grow every epoch while test margins first improve
/// and then spread out (overfitting after `turn`).
inline std::vector<margindyn::RunRecord> overfitting_run(std::size_t epochs, std::size_t turn, std::size_t n_train,
                                                         std::size_t n_test, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise;
  std::vector<double> base_train(n_train), base_test(n_test);
  for (auto& v : base_train) v = noise(rng);
  for (auto& v : base_test) v = noise(rng);
  std::vector<margindyn::RunRecord> out;
  for (std::size_t t = 0; t < epochs; ++t) {
    const double progress = static_cast<double>(t) / static_cast<double>(epochs - 1);
    const double over = t > turn ? static_cast<double>(t - turn) / static_cast<double>(epochs - 1 - turn) : 0.0;
    margindyn::RunRecord r;
    r.epoch = static_cast<std::int64_t>(t);
    r.lipschitz = 1.0 + 2.0 * progress;
    for (double b : base_train) r.train_margins.push_back(*r.lipschitz * (b + 3.0 * progress - 0.5));
    std::vector<double> test;
    const double shift = t <= turn ? 1.5 * static_cast<double>(t) / static_cast<double>(turn) : 1.5 - 1.0 * over;
    for (double b : base_test) test.push_back(*r.lipschitz * ((1.0 + 1.5 * over) * b + shift - 0.5));
    r.test_margins = std::move(test);
    r.train_loss = 1.0 - 0.9 * progress;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace testing_support
