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

#include "margindyn/dynamics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "margindyn/errors.hpp"

namespace margindyn {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DomainError("correlation: series lengths differ");
  if (x.size() < 2) throw DomainError("correlation needs at least two points");
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return kNaN;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::vector<double> mid_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    // Positions i..j-1 share the average of ranks i+1..j.
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = avg;
    i = j;
  }
  return ranks;
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const auto rx = mid_ranks(x);
  const auto ry = mid_ranks(y);
  return pearson(rx, ry);
}

double kendall_tau(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  std::int64_t concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
  const std::size_t n = x.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = x[i] - x[j];
      const double dy = y[i] - y[j];
      if (dx == 0.0) ++ties_x;
      if (dy == 0.0) ++ties_y;
      if (dx == 0.0 || dy == 0.0) continue;
      if ((dx > 0.0) == (dy > 0.0)) {
        ++concordant;
      } else {
        ++discordant;
      }
    }
  }
  const auto pairs = static_cast<std::int64_t>(n * (n - 1) / 2);
  const double denom = std::sqrt(static_cast<double>(pairs - ties_x) * static_cast<double>(pairs - ties_y));
  if (denom == 0.0) return kNaN;
  return static_cast<double>(concordant - discordant) / denom;
}

CorrelationResult rank_correlation(std::span<const double> x, std::span<const double> y) {
  CorrelationResult r;
  r.n_points = x.size();
  r.spearman_rho = spearman_rho(x, y);
  r.kendall_tau = kendall_tau(x, y);
  r.constant = std::isnan(r.spearman_rho) || std::isnan(r.kendall_tau);
  return r;
}

// ---------------------------------------------------------------------------

std::vector<double> default_gamma_grid(const MarginDynamics& dyn, std::size_t size) {
  if (dyn.empty()) throw AnalysisError("cannot build a threshold grid for an empty run");
  if (size == 0) throw DomainError("grid size must be >= 1");
  std::vector<double> pooled;
  for (const auto& e : dyn.epochs()) {
    pooled.insert(pooled.end(), e.train.begin(), e.train.end());
    if (e.test) pooled.insert(pooled.end(), e.test->begin(), e.test->end());
  }
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> grid;
  if (size == 1) {
    grid.push_back(quantile_margin(pooled, 0.5));
    return grid;
  }
  for (std::size_t k = 0; k < size; ++k) {
    const double level = static_cast<double>(k) / static_cast<double>(size - 1);
    const double g = quantile_margin(pooled, level);
    if (grid.empty() || g > grid.back()) grid.push_back(g);
  }
  return grid;
}

CorrelationHeatmap correlation_heatmap(const MarginDynamics& dyn, std::vector<double> gamma1_grid,
                                       std::vector<double> gamma2_grid, const HeatmapOptions& options) {
  if (!dyn.has_test()) throw AnalysisError("heatmap needs test margins at every epoch");
  if (dyn.size() < 2) throw AnalysisError("heatmap needs at least two epochs");
  if (gamma1_grid.empty() || gamma2_grid.empty()) throw AnalysisError("heatmap grids must be non-empty");
  const auto increasing = [](const std::vector<double>& g) {
    return std::adjacent_find(g.begin(), g.end(), [](double a, double b) { return !(a < b); }) == g.end();
  };
  if (!increasing(gamma1_grid) || !increasing(gamma2_grid)) throw AnalysisError("heatmap grids must be strictly increasing");

  std::vector<std::vector<double>> test_curves(gamma1_grid.size()), train_curves(gamma2_grid.size());
  parallel_for(gamma1_grid.size(), options.threads,
               [&](std::size_t i) { test_curves[i] = margin_error_curve(dyn, gamma1_grid[i], Split::kTest); });
  parallel_for(gamma2_grid.size(), options.threads,
               [&](std::size_t j) { train_curves[j] = margin_error_curve(dyn, gamma2_grid[j], Split::kTrain); });

  CorrelationHeatmap h;
  h.rho.assign(gamma1_grid.size(), std::vector<double>(gamma2_grid.size(), kNaN));
  if (options.with_kendall) h.tau = h.rho;
  const std::size_t cols = gamma2_grid.size();
  parallel_for(gamma1_grid.size() * cols, options.threads, [&](std::size_t cell) {
    const std::size_t i = cell / cols, j = cell % cols;
    h.rho[i][j] = spearman_rho(test_curves[i], train_curves[j]);
    if (options.with_kendall) h.tau[i][j] = kendall_tau(test_curves[i], train_curves[j]);
  });
  h.gamma1_grid = std::move(gamma1_grid);
  h.gamma2_grid = std::move(gamma2_grid);
  return h;
}

// ---------------------------------------------------------------------------

std::string to_string(PhaseDirection d) {
  switch (d) {
    case PhaseDirection::kIncreaseThenDecrease: return "increase-then-decrease";
    case PhaseDirection::kMonotoneUp: return "monotone-up";
    case PhaseDirection::kMonotoneDown: return "monotone-down";
    case PhaseDirection::kFlat: return "flat";
  }
  return "unknown";
}

std::vector<double> moving_average(std::span<const double> curve, std::size_t window) {
  const std::size_t half = window / 2;
  std::vector<double> out(curve.size());
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(curve.size(), i + half + 1);
    double acc = 0.0;
    for (std::size_t k = lo; k < hi; ++k) acc += curve[k];
    out[i] = acc / static_cast<double>(hi - lo);
  }
  return out;
}

PhaseDetection detect_phase_transition(std::span<const double> curve, std::size_t window, double prominence) {
  PhaseDetection det;
  if (curve.empty()) return det;
  const auto smooth = moving_average(curve, std::max<std::size_t>(window, 1));
  const auto [lo_it, hi_it] = std::minmax_element(smooth.begin(), smooth.end());
  const double range = *hi_it - *lo_it;
  if (!(range > 0.0)) return det;

  const auto peak = static_cast<std::size_t>(hi_it - smooth.begin());
  const double first = smooth.front(), last = smooth.back();
  if (peak > 0 && peak + 1 < smooth.size()) {
    const double height = (smooth[peak] - std::max(first, last)) / range;
    if (height >= prominence) {
      det.transition_index = peak;
      det.direction = PhaseDirection::kIncreaseThenDecrease;
      det.prominence = height;
      return det;
    }
  }
  if (last > first) {
    det.direction = PhaseDirection::kMonotoneUp;
  } else if (last < first) {
    det.direction = PhaseDirection::kMonotoneDown;
  } else {
    det.direction = PhaseDirection::kFlat;
  }
  return det;
}

PhaseDetection detect_valley(std::span<const double> curve, std::size_t window, double prominence) {
  std::vector<double> negated(curve.begin(), curve.end());
  for (auto& v : negated) v = -v;
  auto det = detect_phase_transition(negated, window, prominence);
  // Report directions in terms of the original curve.
  if (det.direction == PhaseDirection::kMonotoneUp) {
    det.direction = PhaseDirection::kMonotoneDown;
  } else if (det.direction == PhaseDirection::kMonotoneDown) {
    det.direction = PhaseDirection::kMonotoneUp;
  }
  return det;
}

DilemmaResult breiman_dilemma_flag(const MarginDynamics& dyn, const std::vector<double>& q_set, std::size_t window,
                                   double prominence) {
  if (q_set.empty()) throw DomainError("dilemma check needs at least one quantile level");
  DilemmaResult r;
  bool all_up = true;
  for (double q : q_set) {
    const auto curve = quantile_curve(dyn, q);
    DilemmaEvidence ev{q, detect_phase_transition(curve, window, prominence)};
    all_up = all_up && ev.detection.direction == PhaseDirection::kMonotoneUp;
    r.per_quantile.push_back(ev);
  }
  r.flag = all_up;
  if (dyn.has_test()) {
    const auto test_error = margin_error_curve(dyn, 0.0, Split::kTest);
    r.test_error = detect_valley(test_error, window, prominence);
    r.flag = r.flag && r.test_error->transition_index.has_value();
  }
  return r;
}

// ---------------------------------------------------------------------------

std::vector<double> default_q_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 20; ++k) g.push_back(0.05 * k);
  return g;
}

PredictorSelection select_predictor(const MarginDynamics& dyn, const std::vector<double>& gamma_grid,
                                    const std::vector<double>& q_grid) {
  if (!dyn.has_test()) {
    throw AnalysisError("predictor selection needs test margins; pass an explicit q or gamma for train-only runs");
  }
  if (dyn.size() < 2) throw AnalysisError("predictor selection needs at least two epochs");
  const auto test_error = margin_error_curve(dyn, 0.0, Split::kTest);

  PredictorSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (double g : gamma_grid) {
    const auto curve = margin_error_curve(dyn, g, Split::kTrain);
    ScoredThreshold s{g, spearman_rho(curve, test_error), kendall_tau(curve, test_error)};
    if (!std::isnan(s.rho) && s.rho > best) {
      best = s.rho;
      sel.gamma_star = g;
      sel.gamma_rho = s.rho;
    }
    sel.gamma_scores.push_back(s);
  }

  best = -std::numeric_limits<double>::infinity();
  for (double q : q_grid) {
    const auto inv = inverse_quantile_curve(dyn, q);
    ScoredThreshold s{q, kNaN, kNaN};
    if (std::all_of(inv.begin(), inv.end(), [](const auto& v) { return v.has_value(); })) {
      std::vector<double> curve;
      curve.reserve(inv.size());
      for (const auto& v : inv) curve.push_back(*v);
      s.rho = spearman_rho(curve, test_error);
      s.tau = kendall_tau(curve, test_error);
    }
    if (!std::isnan(s.rho) && s.rho > best) {
      best = s.rho;
      sel.q_star = q;
      sel.q_rho = s.rho;
    }
    sel.q_scores.push_back(s);
  }
  return sel;
}

PredictorSelection select_predictor(const MarginDynamics& dyn) {
  return select_predictor(dyn, default_gamma_grid(dyn), default_q_grid());
}

EarlyStop suggest_early_stop(std::span<const std::optional<double>> proxy, std::span<const std::int64_t> epochs) {
  if (proxy.size() != epochs.size()) throw DomainError("proxy and epoch lists differ in length");
  std::vector<std::size_t> defined;
  for (std::size_t i = 0; i < proxy.size(); ++i)
    if (proxy[i] && std::isfinite(*proxy[i])) defined.push_back(i);
  if (defined.empty()) throw AnalysisError("early-stopping proxy is undefined at every epoch");

  EarlyStop stop;
  stop.index = defined.front();
  for (auto i : defined)
    if (*proxy[i] < *proxy[stop.index]) stop.index = i;
  stop.epoch = epochs[stop.index];
  stop.value = *proxy[stop.index];

  // Interior local minima over the defined points; a plateau counts once, at
  // its first index, when both neighbours are strictly higher.
  std::vector<std::size_t> minima;
  std::size_t k = 0;
  while (k < defined.size()) {
    std::size_t end = k + 1;
    while (end < defined.size() && *proxy[defined[end]] == *proxy[defined[k]]) ++end;
    const bool interior = k > 0 && end < defined.size();
    if (interior && *proxy[defined[k - 1]] > *proxy[defined[k]] && *proxy[defined[end]] > *proxy[defined[k]]) {
      minima.push_back(defined[k]);
    }
    k = end;
  }
  if (std::find(minima.begin(), minima.end(), stop.index) == minima.end()) minima.push_back(stop.index);
  std::sort(minima.begin(), minima.end());
  stop.local_minima = std::move(minima);
  return stop;
}

EarlyStop suggest_early_stop(std::span<const double> proxy, std::span<const std::int64_t> epochs) {
  std::vector<std::optional<double>> wrapped(proxy.begin(), proxy.end());
  return suggest_early_stop(std::span<const std::optional<double>>(wrapped), epochs);
}

EarlyStop suggest_early_stop_quantile(const MarginDynamics& dyn, double q) {
  const auto proxy = inverse_quantile_curve(dyn, q);
  const auto ids = dyn.epoch_ids();
  return suggest_early_stop(std::span<const std::optional<double>>(proxy), ids);
}

EarlyStop suggest_early_stop_gamma(const MarginDynamics& dyn, double gamma) {
  const auto proxy = margin_error_curve(dyn, gamma, Split::kTrain);
  const auto ids = dyn.epoch_ids();
  return suggest_early_stop(std::span<const double>(proxy), ids);
}

}  // namespace margindyn
