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
#include <span>
#include <string>
#include <vector>

#include "margindyn/margins.hpp"

namespace margindyn {

// ---------------------------------------------------------------------------
// Rank correlation

/// Average (mid) ranks, 1-based.
std::vector<double> mid_ranks(std::span<const double> values);

/// Pearson correlation of mid-ranks. NaN when either series is constant.
double spearman_rho(std::span<const double> x, std::span<const double> y);

/// Kendall tau-b with tie correction. NaN when either series is constant.
double kendall_tau(std::span<const double> x, std::span<const double> y);

struct CorrelationResult {
  double spearman_rho = 0.0;
  double kendall_tau = 0.0;
  std::size_t n_points = 0;
  /// Set when a series is constant; both coefficients are then NaN.
  bool constant = false;
};

CorrelationResult rank_correlation(std::span<const double> x, std::span<const double> y);

// ---------------------------------------------------------------------------
// Heatmaps

struct CorrelationHeatmap {
  std::vector<double> gamma1_grid;  // rows: test margin-error thresholds
  std::vector<double> gamma2_grid;  // cols: train margin-error thresholds
  std::vector<std::vector<double>> rho;  // NaN marks a constant series
  std::vector<std::vector<double>> tau;
  std::string method = "spearman";
};

/// Threshold grid at evenly spaced quantile levels of all normalized margins
/// (train and test, every epoch) pooled together. Duplicates are dropped so
/// the grid is strictly increasing; a single point sits at the median.
std::vector<double> default_gamma_grid(const MarginDynamics& dyn, std::size_t size = 40);

struct HeatmapOptions {
  bool with_kendall = true;
  /// Worker threads for cell evaluation; results do not depend on it.
  std::size_t threads = 1;
};

/// Cell (i, j) correlates the test margin-error curve at gamma1_grid[i] with
/// the train margin-error curve at gamma2_grid[j] across epochs.
CorrelationHeatmap correlation_heatmap(const MarginDynamics& dyn, std::vector<double> gamma1_grid,
                                       std::vector<double> gamma2_grid, const HeatmapOptions& options = {});

// ---------------------------------------------------------------------------
// Phase transitions

enum class PhaseDirection { kIncreaseThenDecrease, kMonotoneUp, kMonotoneDown, kFlat };

std::string to_string(PhaseDirection d);

struct PhaseDetection {
  std::optional<std::size_t> transition_index;
  PhaseDirection direction = PhaseDirection::kFlat;
  /// Height of the smoothed peak over the higher endpoint, as a fraction of
  /// the smoothed curve's range. 0 without an interior peak.
  double prominence = 0.0;
};

/// Centered moving average; the window shrinks at the ends.
std::vector<double> moving_average(std::span<const double> curve, std::size_t window);

inline constexpr std::size_t kDefaultSmoothingWindow = 5;
inline constexpr double kDefaultProminence = 0.05;

/// Smooths the curve and reports an increase-then-decrease transition when
/// the smoothed maximum is interior and stands at least `prominence` times
/// the curve range above both endpoints. Otherwise the curve is classified
/// by its endpoints (monotone up/down) or as flat when it has zero range.
PhaseDetection detect_phase_transition(std::span<const double> curve, std::size_t window = kDefaultSmoothingWindow,
                                       double prominence = kDefaultProminence);

/// Interior valley test: detect_phase_transition applied to the negated curve.
PhaseDetection detect_valley(std::span<const double> curve, std::size_t window = kDefaultSmoothingWindow,
                             double prominence = kDefaultProminence);

struct DilemmaEvidence {
  double q = 0.0;
  PhaseDetection detection;
};

struct DilemmaResult {
  bool flag = false;
  std::vector<DilemmaEvidence> per_quantile;
  /// Valley detection on the test error (margin error at 0) curve, when
  /// test margins exist.
  std::optional<PhaseDetection> test_error;
};

inline const std::vector<double> kDefaultDilemmaQuantiles{0.5, 0.7, 0.9, 0.95};

/// Raised when every train quantile-margin curve in `q_set` improves
/// monotonically while (if test margins exist) test error has an interior
/// minimum.
DilemmaResult breiman_dilemma_flag(const MarginDynamics& dyn, const std::vector<double>& q_set = kDefaultDilemmaQuantiles,
                                   std::size_t window = kDefaultSmoothingWindow, double prominence = kDefaultProminence);

// ---------------------------------------------------------------------------
// Predictor selection and early stopping

struct ScoredThreshold {
  double threshold = 0.0;
  double rho = 0.0;  // NaN when flagged constant or undefined
  double tau = 0.0;
};

struct PredictorSelection {
  std::optional<double> gamma_star;
  double gamma_rho = 0.0;
  std::optional<double> q_star;
  double q_rho = 0.0;
  std::vector<ScoredThreshold> gamma_scores;
  std::vector<ScoredThreshold> q_scores;
};

std::vector<double> default_q_grid();

/// Picks the train margin-error threshold and the quantile level whose
/// curves best rank-correlate (Spearman) with test error across epochs.
/// Requires test margins; ties go to the first grid entry.
PredictorSelection select_predictor(const MarginDynamics& dyn, const std::vector<double>& gamma_grid,
                                    const std::vector<double>& q_grid = default_q_grid());
PredictorSelection select_predictor(const MarginDynamics& dyn);

struct EarlyStop {
  std::size_t index = 0;
  std::int64_t epoch = 0;
  double value = 0.0;
  /// Indices of interior local minima plus the global minimum, ascending.
  std::vector<std::size_t> local_minima;
};

/// Argmin of a proxy curve (earliest on ties) with all local minima. Missing
/// entries are skipped. Throws AnalysisError if nothing is defined.
EarlyStop suggest_early_stop(std::span<const std::optional<double>> proxy, std::span<const std::int64_t> epochs);
EarlyStop suggest_early_stop(std::span<const double> proxy, std::span<const std::int64_t> epochs);

/// Proxy = inverse quantile margin at level q.
EarlyStop suggest_early_stop_quantile(const MarginDynamics& dyn, double q);
/// Proxy = train margin error at threshold gamma.
EarlyStop suggest_early_stop_gamma(const MarginDynamics& dyn, double gamma);

}  // namespace margindyn
