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

#include "margindyn/dynamics.hpp"
#include "margindyn/margins.hpp"

namespace margindyn {

struct AnalysisOptions {
  double q = 0.95;
  /// Empty means "auto": pick gamma (and q) by rank correlation with test error.
  std::optional<double> gamma;
  bool auto_select = true;
  double complexity = 0.0;  // C_H
  double delta = 0.05;
  double tau = 1e-3;
  double input_bound = 1.0;
  std::size_t num_classes = 2;
  /// Sample count for the bound terms; 0 uses the train margin count.
  std::size_t n = 0;
  std::size_t depth = 1;
  std::size_t window = kDefaultSmoothingWindow;
  double prominence = kDefaultProminence;
  std::vector<double> q_set = kDefaultDilemmaQuantiles;
  std::size_t grid_size = 40;
  bool heatmap = true;
  std::size_t threads = 1;
};

struct QuantilePhase {
  double q = 0.0;
  PhaseDetection detection;
  std::optional<std::int64_t> transition_epoch;
};

struct Theorem1Row {
  std::int64_t epoch = 0;
  Theorem1Terms terms;
};

struct Theorem2Row {
  std::int64_t epoch = 0;
  /// Empty when the quantile margin is not positive.
  std::optional<Theorem2Terms> terms;
};

struct CurveRow {
  std::int64_t epoch = 0;
  double lipschitz = 1.0;
  double train_error = 0.0;               // train margin error at 0
  std::optional<double> test_error;       // test margin error at 0
  double train_margin_error = 0.0;        // at the chosen gamma
  double quantile_margin = 0.0;           // at the chosen q
  std::optional<double> inverse_quantile; // 1 / quantile_margin when positive
};

struct AnalysisReport {
  std::size_t n_epochs = 0;
  double q = 0.95;
  double gamma = 0.0;
  std::string gamma_source;  // "auto" or "user"
  std::string q_source;
  std::optional<PredictorSelection> selection;
  std::optional<EarlyStop> stop_quantile;
  std::optional<EarlyStop> stop_gamma;
  std::vector<QuantilePhase> phases;
  std::optional<DilemmaResult> dilemma;
  std::vector<Theorem1Row> theorem1;
  std::vector<Theorem2Row> theorem2;
  BoundParams bound_params;
  std::vector<CurveRow> curves;
  std::optional<CorrelationHeatmap> heatmap;
  std::vector<std::string> notes;
};

/// Runs every diagnostic over a normalized run. Throws AnalysisError for an
/// empty run. Without test margins, automatic selection falls back to the
/// user-supplied (or default) q and gamma and the fallback is noted.
AnalysisReport analyze(const MarginDynamics& dyn, const AnalysisOptions& options);

}  // namespace margindyn
