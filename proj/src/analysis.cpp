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

#include "margindyn/analysis.hpp"

#include <algorithm>

#include "margindyn/errors.hpp"

namespace margindyn {

AnalysisReport analyze(const MarginDynamics& dyn, const AnalysisOptions& options) {
  if (dyn.empty()) throw AnalysisError("run has no epochs");
  AnalysisReport rep;
  rep.n_epochs = dyn.size();
  rep.q = options.q;
  rep.q_source = "user";

  BoundParams& b = rep.bound_params;
  b.num_classes = options.num_classes;
  b.n = options.n > 0 ? options.n : dyn[0].train.size();
  b.delta = options.delta;
  b.complexity = options.complexity;
  b.tau = options.tau;
  b.input_bound = options.input_bound;
  b.depth = options.depth;
  b.validate();

  const bool has_test = dyn.has_test();
  const auto ids = dyn.epoch_ids();

  // Threshold choice.
  if (options.gamma) {
    rep.gamma = *options.gamma;
    rep.gamma_source = "user";
  }
  if (options.auto_select && has_test && dyn.size() >= 2) {
    rep.selection = select_predictor(dyn, default_gamma_grid(dyn, options.grid_size), default_q_grid());
    if (!options.gamma) {
      if (rep.selection->gamma_star) {
        rep.gamma = *rep.selection->gamma_star;
        rep.gamma_source = "auto";
      } else {
        rep.notes.push_back("test error is constant across epochs; no gamma could be selected");
      }
    }
  } else if (options.auto_select && !options.gamma) {
    rep.notes.push_back(has_test ? "automatic selection needs at least two epochs"
                                 : "automatic selection needs test margins; falling back to default thresholds");
  }
  if (rep.gamma_source.empty()) {
    std::vector<double> pooled;
    for (const auto& e : dyn.epochs()) pooled.insert(pooled.end(), e.train.begin(), e.train.end());
    std::sort(pooled.begin(), pooled.end());
    rep.gamma = quantile_margin(pooled, 0.5);
    rep.gamma_source = "default-median";
  }

  // Early stopping.
  try {
    rep.stop_quantile = suggest_early_stop_quantile(dyn, rep.q);
  } catch (const AnalysisError& e) {
    rep.notes.push_back(std::string("quantile proxy: ") + e.what());
  }
  rep.stop_gamma = suggest_early_stop_gamma(dyn, rep.gamma);

  // Phase transitions of train quantile margins.
  std::vector<double> levels = options.q_set;
  if (std::find(levels.begin(), levels.end(), rep.q) == levels.end()) levels.push_back(rep.q);
  std::sort(levels.begin(), levels.end());
  for (double q : levels) {
    QuantilePhase p;
    p.q = q;
    p.detection = detect_phase_transition(quantile_curve(dyn, q), options.window, options.prominence);
    if (p.detection.transition_index) p.transition_epoch = ids[*p.detection.transition_index];
    rep.phases.push_back(p);
  }
  rep.dilemma = breiman_dilemma_flag(dyn, options.q_set, options.window, options.prominence);

  // Bound tables.
  if (rep.gamma > 0.0) {
    const RampParams ramp{0.0, rep.gamma};
    for (auto id : ids) rep.theorem1.push_back({id, theorem1_rhs(dyn, id, ramp, b)});
  } else {
    rep.notes.push_back("gamma <= 0: fixed-threshold bound table omitted");
  }
  for (auto id : ids) {
    Theorem2Row row{id, std::nullopt};
    try {
      row.terms = theorem2_rhs(dyn, id, rep.q, b);
    } catch (const DomainError&) {
    }
    rep.theorem2.push_back(row);
  }

  // Per-epoch curves.
  const auto train_err = margin_error_curve(dyn, 0.0, Split::kTrain);
  const auto train_gamma = margin_error_curve(dyn, rep.gamma, Split::kTrain);
  const auto qcurve = quantile_curve(dyn, rep.q);
  for (std::size_t i = 0; i < dyn.size(); ++i) {
    CurveRow row;
    row.epoch = ids[i];
    row.lipschitz = dyn[i].lipschitz;
    row.train_error = train_err[i];
    if (dyn[i].test) row.test_error = empirical_margin_cdf(*dyn[i].test, 0.0);
    row.train_margin_error = train_gamma[i];
    row.quantile_margin = qcurve[i];
    if (qcurve[i] > 0.0) row.inverse_quantile = 1.0 / qcurve[i];
    rep.curves.push_back(row);
  }

  if (options.heatmap && has_test && dyn.size() >= 2) {
    auto grid = default_gamma_grid(dyn, options.grid_size);
    HeatmapOptions ho;
    ho.threads = options.threads;
    rep.heatmap = correlation_heatmap(dyn, grid, grid, ho);
  }
  return rep;
}

}  // namespace margindyn
