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

#include "margindyn/margins.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "margindyn/errors.hpp"

namespace margindyn {

double margin(std::span<const double> logits, std::size_t label) {
  if (logits.size() < 2) throw DomainError("margin needs at least two classes");
  if (label >= logits.size()) throw DomainError("label " + std::to_string(label) + " out of range");
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (!std::isfinite(logits[j])) throw NumericError("margin: non-finite logit");
    if (j != label) best_other = std::max(best_other, logits[j]);
  }
  return logits[label] - best_other;
}

void RampParams::validate() const {
  if (!(gamma1 >= 0.0) || !(gamma2 > gamma1)) {
    throw DomainError("ramp thresholds need 0 <= gamma1 < gamma2, got (" + std::to_string(gamma1) + ", " +
                      std::to_string(gamma2) + ")");
  }
}

double ramp_loss(double zeta, const RampParams& p) {
  p.validate();
  if (zeta < p.gamma1) return 1.0;
  if (zeta > p.gamma2) return 0.0;
  return (p.gamma2 - zeta) / p.delta();
}

int margin_error(double zeta, double gamma) { return zeta <= gamma ? 1 : 0; }

double empirical_margin_cdf(std::span<const double> sorted_margins, double gamma) {
  if (sorted_margins.empty()) throw DomainError("empirical margin CDF of an empty sample");
  const auto it = std::upper_bound(sorted_margins.begin(), sorted_margins.end(), gamma);
  return static_cast<double>(it - sorted_margins.begin()) / static_cast<double>(sorted_margins.size());
}

double quantile_margin(std::span<const double> sorted_margins, double q) {
  if (sorted_margins.empty()) throw DomainError("quantile margin of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile level must lie in [0, 1]");
  const auto n = static_cast<double>(sorted_margins.size());
  // Smallest k with (k + 1) / n >= q, evaluated in the same floating-point
  // form as the CDF so the two stay exact inverses.
  std::size_t lo = 0, hi = sorted_margins.size() - 1;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (static_cast<double>(mid + 1) / n >= q) {
      hi = mid;
    } else {
      lo = mid + 1;
    }
  }
  return sorted_margins[lo];
}

// ---------------------------------------------------------------------------

MarginDynamics::MarginDynamics(std::vector<EpochMargins> epochs) : epochs_(std::move(epochs)) {
  std::set<std::int64_t> seen;
  for (const auto& e : epochs_) {
    if (!seen.insert(e.epoch).second) throw DataError("duplicate epoch " + std::to_string(e.epoch));
    if (!(e.lipschitz > 0.0)) throw DataError("epoch " + std::to_string(e.epoch) + ": Lipschitz factor must be > 0");
    if (e.train.empty()) throw DataError("epoch " + std::to_string(e.epoch) + ": empty train margins");
    if (!std::is_sorted(e.train.begin(), e.train.end()) ||
        (e.test && !std::is_sorted(e.test->begin(), e.test->end()))) {
      throw DataError("epoch " + std::to_string(e.epoch) + ": margins must be sorted");
    }
  }
  std::sort(epochs_.begin(), epochs_.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
}

std::vector<std::int64_t> MarginDynamics::epoch_ids() const {
  std::vector<std::int64_t> ids;
  ids.reserve(epochs_.size());
  for (const auto& e : epochs_) ids.push_back(e.epoch);
  return ids;
}

std::size_t MarginDynamics::index_of(std::int64_t epoch) const {
  for (std::size_t i = 0; i < epochs_.size(); ++i)
    if (epochs_[i].epoch == epoch) return i;
  throw AnalysisError("epoch " + std::to_string(epoch) + " not present in run");
}

bool MarginDynamics::has_test() const {
  return !epochs_.empty() &&
         std::all_of(epochs_.begin(), epochs_.end(), [](const EpochMargins& e) { return e.test && !e.test->empty(); });
}

namespace {

std::vector<double> normalized_sorted(const std::vector<double>& raw, double lipschitz, std::int64_t epoch) {
  std::vector<double> out;
  out.reserve(raw.size());
  for (double z : raw) {
    if (!std::isfinite(z)) throw DataError("epoch " + std::to_string(epoch) + ": non-finite margin");
    out.push_back(z / lipschitz);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

MarginDynamics normalize_run(std::span<const RunRecord> records) {
  std::vector<EpochMargins> epochs;
  epochs.reserve(records.size());
  for (const auto& r : records) {
    if (!r.lipschitz) {
      throw DataError("epoch " + std::to_string(r.epoch) + ": no Lipschitz factor (estimate it from weights first)");
    }
    if (!(*r.lipschitz > 0.0) || !std::isfinite(*r.lipschitz)) {
      throw DataError("epoch " + std::to_string(r.epoch) + ": Lipschitz factor must be finite and > 0");
    }
    if (r.train_margins.empty()) throw DataError("epoch " + std::to_string(r.epoch) + ": empty train margins");
    EpochMargins e;
    e.epoch = r.epoch;
    e.lipschitz = *r.lipschitz;
    e.train = normalized_sorted(r.train_margins, e.lipschitz, r.epoch);
    if (r.test_margins && !r.test_margins->empty()) e.test = normalized_sorted(*r.test_margins, e.lipschitz, r.epoch);
    e.train_error = r.train_error;
    e.test_error = r.test_error;
    epochs.push_back(std::move(e));
  }
  return MarginDynamics(std::move(epochs));
}

// ---------------------------------------------------------------------------
// Bound evaluators

void BoundParams::validate() const {
  // delta = 1 is admitted: it switches the confidence term off.
  if (!(delta > 0.0 && delta <= 1.0)) throw DomainError("delta must lie in (0, 1]");
  if (num_classes < 2) throw DomainError("number of classes must be >= 2");
  if (n < 1) throw DomainError("sample count n must be >= 1");
  if (depth < 1) throw DomainError("depth must be >= 1");
  if (!(complexity >= 0.0)) throw DomainError("complexity constant must be >= 0");
  if (!(tau > 0.0)) throw DomainError("tau must be > 0");
  if (!(input_bound > 0.0)) throw DomainError("input bound M must be > 0");
}

Theorem1Terms theorem1_rhs(const MarginDynamics& dyn, std::int64_t epoch, const RampParams& p, const BoundParams& b) {
  p.validate();
  b.validate();
  const auto& e = dyn[dyn.index_of(epoch)];
  Theorem1Terms t;
  t.empirical = empirical_margin_cdf(e.train, p.gamma2);
  t.complexity = b.complexity / p.delta();
  t.confidence = std::sqrt(std::log(1.0 / b.delta) / (2.0 * static_cast<double>(b.n)));
  t.total = t.empirical + t.complexity + t.confidence;
  return t;
}

Theorem2Terms quantile_bound_constant(double q, const BoundParams& b) {
  b.validate();
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile level must lie in [0, 1]");
  const double n = static_cast<double>(b.n);
  Theorem2Terms t;
  t.q = q;
  t.confidence = std::sqrt(std::log(2.0 / b.delta) / (2.0 * n));
  // log of log2(...) is negative once the inner ratio drops below 2; the term
  // is clamped at zero there.
  const double inner = std::log2(4.0 * (b.input_bound + static_cast<double>(b.depth)) / b.tau);
  t.loglog = inner > 1.0 ? std::sqrt(std::log(inner) / n) : 0.0;
  t.c_q = q + t.confidence + t.loglog;
  return t;
}

Theorem2Terms theorem2_rhs(const MarginDynamics& dyn, std::int64_t epoch, double q, const BoundParams& b) {
  auto t = quantile_bound_constant(q, b);
  const auto& e = dyn[dyn.index_of(epoch)];
  t.quantile_margin = quantile_margin(e.train, q);
  if (!(t.quantile_margin > 0.0)) {
    throw DomainError("quantile margin at epoch " + std::to_string(epoch) + " is not positive");
  }
  t.precondition_met = t.quantile_margin > b.tau;
  t.complexity = b.complexity / t.quantile_margin;
  t.total = t.c_q + t.complexity;
  return t;
}

std::vector<double> quantile_curve(const MarginDynamics& dyn, double q) {
  std::vector<double> out;
  out.reserve(dyn.size());
  for (const auto& e : dyn.epochs()) out.push_back(quantile_margin(e.train, q));
  return out;
}

std::vector<std::optional<double>> inverse_quantile_curve(const MarginDynamics& dyn, double q) {
  std::vector<std::optional<double>> out;
  out.reserve(dyn.size());
  for (double g : quantile_curve(dyn, q)) {
    out.push_back(g > 0.0 ? std::optional<double>(1.0 / g) : std::nullopt);
  }
  return out;
}

std::vector<double> margin_error_curve(const MarginDynamics& dyn, double gamma, Split which) {
  std::vector<double> out;
  out.reserve(dyn.size());
  for (const auto& e : dyn.epochs()) {
    if (which == Split::kTrain) {
      out.push_back(empirical_margin_cdf(e.train, gamma));
    } else {
      if (!e.test) throw AnalysisError("epoch " + std::to_string(e.epoch) + " has no test margins");
      out.push_back(empirical_margin_cdf(*e.test, gamma));
    }
  }
  return out;
}

}  // namespace margindyn
