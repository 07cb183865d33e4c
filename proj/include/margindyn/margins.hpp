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
#include <vector>

#include "margindyn/run_record.hpp"

namespace margindyn {

/// Correct-class logit minus the largest competing logit. Negative iff
/// misclassified; ties give 0.
double margin(std::span<const double> logits, std::size_t label);

struct RampParams {
  double gamma1 = 0.0;
  double gamma2 = 1.0;

  double delta() const { return gamma2 - gamma1; }
  /// Throws DomainError unless 0 <= gamma1 < gamma2.
  void validate() const;
};

/// Piecewise-linear loss: 1 below gamma1, 0 above gamma2, linear between.
double ramp_loss(double zeta, const RampParams& p);

/// 1 when zeta <= gamma, else 0.
int margin_error(double zeta, double gamma);

/// Fraction of `sorted_margins` that are <= gamma.
double empirical_margin_cdf(std::span<const double> sorted_margins, double gamma);

/// Smallest sample value m with empirical_margin_cdf(m) >= q.
double quantile_margin(std::span<const double> sorted_margins, double q);

struct EpochMargins {
  std::int64_t epoch = 0;
  double lipschitz = 1.0;
  std::vector<double> train;                // sorted, normalized
  std::optional<std::vector<double>> test;  // sorted, normalized
  std::optional<double> train_error;
  std::optional<double> test_error;
};

/// Normalized margin distributions of one run, sorted by epoch id.
class MarginDynamics {
 public:
  MarginDynamics() = default;
  explicit MarginDynamics(std::vector<EpochMargins> epochs);

  std::size_t size() const noexcept { return epochs_.size(); }
  bool empty() const noexcept { return epochs_.empty(); }
  const EpochMargins& operator[](std::size_t i) const { return epochs_[i]; }
  const std::vector<EpochMargins>& epochs() const noexcept { return epochs_; }
  std::vector<std::int64_t> epoch_ids() const;

  /// Position of an epoch id; throws AnalysisError if absent.
  std::size_t index_of(std::int64_t epoch) const;
  /// True when every epoch carries test margins.
  bool has_test() const;

 private:
  std::vector<EpochMargins> epochs_;
};

/// Divides every raw margin by the epoch's Lipschitz factor and sorts.
/// Throws DataError on missing/non-positive factors, empty train margins or
/// duplicate epoch ids.
MarginDynamics normalize_run(std::span<const RunRecord> records);

struct BoundParams {
  std::size_t num_classes = 2;
  std::size_t n = 1;
  double delta = 0.05;
  /// User-supplied stand-in for the Rademacher complexity term.
  double complexity = 0.0;
  double tau = 1e-3;
  double input_bound = 1.0;  // M
  std::size_t depth = 1;     // l

  void validate() const;
};

struct Theorem1Terms {
  double empirical = 0.0;   // train fraction with normalized margin <= gamma2
  double complexity = 0.0;  // C_H / Delta
  double confidence = 0.0;  // sqrt(log(1/delta) / 2n)
  double total = 0.0;
};

/// Right-hand side of the fixed-threshold margin bound at one epoch.
Theorem1Terms theorem1_rhs(const MarginDynamics& dyn, std::int64_t epoch, const RampParams& p, const BoundParams& b);

struct Theorem2Terms {
  double quantile_margin = 0.0;
  double q = 0.0;
  double confidence = 0.0;  // sqrt(log(2/delta) / 2n)
  double loglog = 0.0;      // sqrt(log log2(4(M+l)/tau) / n)
  double c_q = 0.0;
  double complexity = 0.0;  // C_H / quantile margin
  double total = 0.0;
  /// False when the quantile margin does not exceed tau; the value is still
  /// reported but the bound's precondition does not hold.
  bool precondition_met = true;
};

/// Right-hand side of the quantile-margin bound at one epoch. Throws
/// DomainError when the quantile margin is <= 0.
Theorem2Terms theorem2_rhs(const MarginDynamics& dyn, std::int64_t epoch, double q, const BoundParams& b);

/// The constant C_q on its own (natural log for log, base 2 for log2).
Theorem2Terms quantile_bound_constant(double q, const BoundParams& b);

/// Per-epoch 1 / quantile margin; epochs with a non-positive quantile margin
/// are left empty.
std::vector<std::optional<double>> inverse_quantile_curve(const MarginDynamics& dyn, double q);
/// Per-epoch quantile margin itself.
std::vector<double> quantile_curve(const MarginDynamics& dyn, double q);

enum class Split { kTrain, kTest };

/// Per-epoch fraction of normalized margins <= gamma on the chosen split.
std::vector<double> margin_error_curve(const MarginDynamics& dyn, double gamma, Split which);

}  // namespace margindyn
