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

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace margindyn {

inline constexpr int kRunSchemaVersion = 1;

/// Header line of a run file.
struct RunManifest {
  std::size_t num_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::string normalization_method;
  std::string creator;
  std::string notes;
  int schema_version = kRunSchemaVersion;

  bool operator==(const RunManifest&) const = default;
};

/// One epoch of a training run: raw (unnormalized) margins plus the
/// Lipschitz normalization factor and optional scalar metrics.
struct RunRecord {
  std::int64_t epoch = 0;
  std::optional<double> lipschitz;
  /// Network directory relative to the run file, used when `lipschitz` is absent.
  std::optional<std::string> weights;
  std::vector<double> train_margins;
  std::optional<std::vector<double>> test_margins;
  std::optional<double> train_loss;
  std::optional<double> train_error;
  std::optional<double> test_error;

  bool operator==(const RunRecord&) const = default;
};

/// A record produced by the toy trainer always has every field populated.
using EpochSnapshot = RunRecord;

}  // namespace margindyn
