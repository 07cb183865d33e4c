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

// margindyn command-line tool.
//
// Exit codes: 0 success, 1 data/validation failure, 2 usage error,
// 3 numeric failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "margindyn/analysis.hpp"
#include "margindyn/errors.hpp"
#include "margindyn/margins.hpp"
#include "margindyn/norms.hpp"
#include "margindyn/snapshot_io.hpp"
#include "margindyn/trainer.hpp"

namespace fs = std::filesystem;
using namespace margindyn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitData = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

struct UsageError : Error {
  using Error::Error;
};

std::size_t env_threads() {
  const char* v = std::getenv("MARGINDYN_THREADS");
  if (!v || !*v) return 1;
  try {
    const long n = std::stol(v);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    throw UsageError(std::string("MARGINDYN_THREADS must be a positive integer, got '") + v + "'");
  }
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

// Fills in L_f for records that only carry a weights directory. Relative
// paths resolve against the run file's directory.
void resolve_lipschitz(std::vector<RunRecord>& records, const fs::path& run_path, const LipschitzOptions& opts) {
  for (auto& r : records) {
    if (r.lipschitz) continue;
    fs::path dir = *r.weights;
    if (dir.is_relative()) dir = run_path.parent_path() / dir;
    try {
      r.lipschitz = network_lipschitz(read_network(dir), opts).value;
    } catch (const Error& e) {
      throw DataError("epoch " + std::to_string(r.epoch) + ": cannot estimate L_f from '" + dir.string() +
                      "': " + e.what());
    }
  }
}

MarginDynamics load_dynamics(const fs::path& run_path, const LipschitzOptions& opts, Run* out = nullptr) {
  Run run = read_run(run_path);
  resolve_lipschitz(run.records, run_path, opts);
  auto dyn = normalize_run(run.records);
  if (out) *out = std::move(run);
  return dyn;
}

// --------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out;
  std::string weights_dir;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  try {
    cfg = read_train_config(a.config);
    if (a.epochs) cfg.epochs = *a.epochs;
    if (a.seed) cfg.seed = *a.seed;
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }

  const fs::path out = a.out;
  const fs::path weights_root = a.weights_dir;
  EpochCallback on_epoch;
  if (!a.weights_dir.empty()) {
    on_epoch = [&](std::int64_t epoch, const ToyNet& net) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04lld", static_cast<long long>(epoch));
      write_network(weights_root / name, to_network_spec(net));
    };
  }
  TrainResult result = train(cfg, on_epoch);

  if (!a.weights_dir.empty()) {
    // Store weight paths relative to the run file when possible.
    const fs::path base = fs::absolute(out).parent_path();
    for (auto& r : result.records) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04lld", static_cast<long long>(r.epoch));
      r.weights = fs::absolute(weights_root / name).lexically_relative(base).generic_string();
    }
  }

  RunManifest m;
  m.num_classes = cfg.data.num_classes;
  m.n_train = cfg.data.n_train;
  m.n_test = cfg.data.n_test;
  m.normalization_method = to_string(cfg.norm_method);
  m.creator = "margindyn train-toy";
  m.notes = serialize_train_config(cfg);
  write_run(out, m, result.records);

  if (!result.records.empty()) {
    const auto& last = result.records.back();
    std::cout << "epochs " << result.records.size() << "  train_error " << format_double(last.train_error.value_or(0))
              << "  test_error " << format_double(last.test_error.value_or(0)) << "  L_f "
              << format_double(last.lipschitz.value_or(0)) << "  train_loss "
              << format_double(last.train_loss.value_or(0)) << "\n";
  }
  if (result.failure) {
    std::cerr << "error: training diverged: " << *result.failure << " (partial run written)\n";
    return kExitNumeric;
  }
  return kExitOk;
}

// --------------------------------------------------------------------------

struct EstimateArgs {
  std::string network;
  std::string method = "power";
  std::string bn_fusion = "per-channel";
  bool per_layer = false;
};

int cmd_estimate(const EstimateArgs& a) {
  LipschitzOptions opts;
  opts.method = lipschitz_method_from_string(a.method);
  opts.bn_fusion = a.bn_fusion == "scalar-max" ? BnFusion::kScalarMax : BnFusion::kPerChannel;
  const auto net = read_network(a.network);
  const auto res = network_lipschitz(net, opts);
  std::cout << "L_f " << format_double(res.value) << "  (method " << a.method << ")\n";
  if (a.per_layer) {
    std::printf("%-24s %-16s %14s %6s %s\n", "layer", "method", "norm", "iters", "converged");
    for (const auto& l : res.layers) {
      std::printf("%-24s %-16s %14.8g %6zu %s\n", l.layer_id.c_str(), to_string(l.method).c_str(), l.value,
                  l.iterations_used, l.converged ? "yes" : "no");
    }
  }
  return kExitOk;
}

// --------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string run;
  std::string out;
  double q = 0.95;
  std::string gamma = "auto";
  double ch = 0.0;
  double delta = 0.05;
  double tau = 1e-3;
  double input_bound = 1.0;
  std::size_t depth = 1;
  std::size_t window = kDefaultSmoothingWindow;
  double prominence = kDefaultProminence;
  std::size_t grid_size = 40;
  bool no_heatmap = false;
  bool no_svg = false;
  std::string method = "power";
};

// Writes the bundle. `out` is either a directory or a path ending in .json,
// in which case the CSV/SVG files go next to it.
void write_bundle(const AnalysisReport& rep, const fs::path& out, bool svg) {
  if (out.extension() != ".json") {
    write_report(rep, out, svg);
    std::cout << "report written to " << (out / "report.json").string() << "\n";
    return;
  }
  fs::path dir = out.parent_path();
  if (dir.empty()) dir = ".";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  write_file_atomic(out, report_to_json(rep));
  write_file_atomic(dir / "curves.csv", curves_to_csv(rep));
  if (rep.heatmap) {
    write_file_atomic(dir / "heatmap.csv", heatmap_to_csv(*rep.heatmap));
    if (svg) write_file_atomic(dir / "heatmap.svg", heatmap_to_svg(*rep.heatmap));
  }
  std::cout << "report written to " << out.string() << "\n";
}

int cmd_analyze(const AnalyzeArgs& a) {
  AnalysisOptions o;
  if (a.gamma == "auto") {
    o.auto_select = true;
  } else {
    try {
      std::size_t pos = 0;
      o.gamma = std::stod(a.gamma, &pos);
      if (pos != a.gamma.size()) throw std::invalid_argument(a.gamma);
    } catch (const std::exception&) {
      throw UsageError("--gamma expects 'auto' or a number, got '" + a.gamma + "'");
    }
  }
  if (!(a.q > 0.0 && a.q <= 1.0)) throw UsageError("--q must lie in (0, 1]");
  o.q = a.q;
  o.complexity = a.ch;
  o.delta = a.delta;
  o.tau = a.tau;
  o.input_bound = a.input_bound;
  o.depth = a.depth;
  o.window = a.window;
  o.prominence = a.prominence;
  o.grid_size = a.grid_size;
  o.heatmap = !a.no_heatmap;
  o.threads = env_threads();

  LipschitzOptions lo;
  lo.method = lipschitz_method_from_string(a.method);
  Run run;
  const auto dyn = load_dynamics(a.run, lo, &run);
  o.num_classes = run.manifest.num_classes;

  const auto rep = analyze(dyn, o);
  for (const auto& n : rep.notes) std::cerr << "note: " << n << "\n";
  std::cout << "gamma " << format_double(rep.gamma) << " (" << rep.gamma_source << ")  q " << format_double(rep.q);
  if (rep.stop_quantile) std::cout << "  stop(q) epoch " << rep.stop_quantile->epoch;
  if (rep.stop_gamma) std::cout << "  stop(gamma) epoch " << rep.stop_gamma->epoch;
  if (rep.dilemma) std::cout << "  dilemma " << (rep.dilemma->flag ? "yes" : "no");
  std::cout << "\n";
  write_bundle(rep, a.out, !a.no_svg);
  return kExitOk;
}

// --------------------------------------------------------------------------

struct HeatmapArgs {
  std::string run;
  std::string out;
  std::size_t grid_size = 40;
  std::string method = "power";
};

int cmd_heatmap(const HeatmapArgs& a) {
  if (a.grid_size < 1) throw UsageError("--grid-size must be >= 1");
  LipschitzOptions lo;
  lo.method = lipschitz_method_from_string(a.method);
  const auto dyn = load_dynamics(a.run, lo);
  if (!dyn.has_test()) throw DataError("heatmap needs test margins in every epoch");
  if (dyn.size() < 2) throw DataError("heatmap needs at least two epochs");
  const auto grid = default_gamma_grid(dyn, a.grid_size);
  HeatmapOptions ho;
  ho.threads = env_threads();
  const auto h = correlation_heatmap(dyn, grid, grid, ho);
  const fs::path out = a.out;
  write_file_atomic(out, out.extension() == ".svg" ? heatmap_to_svg(h) : heatmap_to_csv(h));
  std::cout << grid.size() << "x" << grid.size() << " heatmap written to " << out.string() << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------------

struct ReportArgs {
  std::string report;
  std::string out;
  bool no_svg = false;
};

int cmd_report(const ReportArgs& a) {
  std::ifstream in(a.report, std::ios::binary);
  if (!in) throw IoError("cannot open '" + a.report + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const auto rep = report_from_json(ss.str());
  const fs::path dir = a.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create '" + dir.string() + "'");
  write_file_atomic(dir / "curves.csv", curves_to_csv(rep));
  if (rep.heatmap) {
    write_file_atomic(dir / "heatmap.csv", heatmap_to_csv(*rep.heatmap));
    if (!a.no_svg) write_file_atomic(dir / "heatmap.svg", heatmap_to_svg(*rep.heatmap));
  }
  std::cout << "rendered " << rep.curves.size() << " epochs into " << dir.string() << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------------

struct ValidateArgs {
  std::string run;
  std::string network;
};

int cmd_validate(const ValidateArgs& a) {
  if (a.run.empty() == a.network.empty()) throw UsageError("validate takes exactly one of --run or --network");
  if (!a.network.empty()) {
    const auto net = read_network(a.network);
    std::cout << "ok: network with " << net.layers.size() << " layers, depth " << net.depth() << "\n";
    return kExitOk;
  }
  const Run run = read_run(a.run);
  std::size_t i = 0;
  for (const auto& r : run.records) {
    ++i;
    if (run.manifest.n_train && r.train_margins.size() != run.manifest.n_train) {
      throw ValidationError("record " + std::to_string(i) + " (epoch " + std::to_string(r.epoch) +
                            "): field 'train_margins' has " + std::to_string(r.train_margins.size()) +
                            " entries, manifest n_train is " + std::to_string(run.manifest.n_train));
    }
    if (run.manifest.n_test && r.test_margins && r.test_margins->size() != run.manifest.n_test) {
      throw ValidationError("record " + std::to_string(i) + " (epoch " + std::to_string(r.epoch) +
                            "): field 'test_margins' has " + std::to_string(r.test_margins->size()) +
                            " entries, manifest n_test is " + std::to_string(run.manifest.n_test));
    }
  }
  std::cout << "ok: run with " << run.records.size() << " epochs, K=" << run.manifest.num_classes << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lipschitz-normalized margin dynamics of training runs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "margindyn 0.1.0");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train-toy", "Train the toy network and write a run file");
  train_cmd->add_option("--config", ta.config, "Training config (JSON)")->required();
  train_cmd->add_option("--out", ta.out, "Output run file (JSON Lines)")->required();
  train_cmd->add_option("--weights-dir", ta.weights_dir, "Write per-epoch network snapshots here");
  train_cmd->add_option("--epochs", ta.epochs, "Override the number of epochs");
  train_cmd->add_option("--seed", ta.seed, "Override the training seed");

  EstimateArgs ea;
  auto* est_cmd = app.add_subcommand("estimate", "Estimate the Lipschitz constant of a network");
  est_cmd->add_option("--network", ea.network, "Network directory with layers.json")->required();
  est_cmd->add_option("--method", ea.method, "l1 or power")->check(CLI::IsMember({"l1", "power"}));
  est_cmd->add_option("--bn-fusion", ea.bn_fusion, "per-channel or scalar-max")
      ->check(CLI::IsMember({"per-channel", "scalar-max"}));
  est_cmd->add_flag("--per-layer", ea.per_layer, "Print the per-layer table");

  AnalyzeArgs aa;
  auto* an_cmd = app.add_subcommand("analyze", "Analyze a run and write the report bundle");
  an_cmd->add_option("--run", aa.run, "Run file")->required();
  an_cmd->add_option("--out", aa.out, "report.json path or output directory")->required();
  an_cmd->add_option("--q", aa.q, "Quantile level")->capture_default_str();
  an_cmd->add_option("--gamma", aa.gamma, "'auto' or a margin threshold")->capture_default_str();
  an_cmd->add_option("--ch", aa.ch, "Complexity constant C_H")->capture_default_str()->check(CLI::NonNegativeNumber);
  an_cmd->add_option("--delta", aa.delta, "Confidence parameter")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  an_cmd->add_option("--tau", aa.tau, "Quantile-bound tau")->capture_default_str()->check(CLI::PositiveNumber);
  an_cmd->add_option("--input-bound", aa.input_bound, "Input norm bound M")->capture_default_str()
      ->check(CLI::PositiveNumber);
  an_cmd->add_option("--depth", aa.depth, "Network depth l")->capture_default_str();
  an_cmd->add_option("--window", aa.window, "Smoothing window (epochs)")->capture_default_str()
      ->check(CLI::PositiveNumber);
  an_cmd->add_option("--prominence", aa.prominence, "Relative peak prominence")->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  an_cmd->add_option("--grid-size", aa.grid_size, "Heatmap grid size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  an_cmd->add_flag("--no-heatmap", aa.no_heatmap, "Skip the correlation heatmap");
  an_cmd->add_flag("--no-svg", aa.no_svg, "Skip heatmap.svg");
  an_cmd->add_option("--method", aa.method, "Estimator for records given as weights")
      ->check(CLI::IsMember({"l1", "power"}));

  HeatmapArgs ha;
  auto* hm_cmd = app.add_subcommand("heatmap", "Spearman heatmap of test vs train margin errors");
  hm_cmd->add_option("--run", ha.run, "Run file")->required();
  hm_cmd->add_option("--out", ha.out, "Output .csv or .svg")->required();
  hm_cmd->add_option("--grid-size", ha.grid_size, "Grid size")->capture_default_str();
  hm_cmd->add_option("--method", ha.method, "Estimator for records given as weights")
      ->check(CLI::IsMember({"l1", "power"}));

  ReportArgs ra;
  auto* rep_cmd = app.add_subcommand("report", "Re-render CSV/SVG files from a report.json");
  rep_cmd->add_option("--report", ra.report, "report.json")->required();
  rep_cmd->add_option("--out", ra.out, "Output directory")->required();
  rep_cmd->add_flag("--no-svg", ra.no_svg, "Skip heatmap.svg");

  ValidateArgs va;
  auto* val_cmd = app.add_subcommand("validate", "Check a run file or network directory");
  val_cmd->add_option("--run", va.run, "Run file");
  val_cmd->add_option("--network", va.network, "Network directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*est_cmd) return cmd_estimate(ea);
    if (*an_cmd) return cmd_analyze(aa);
    if (*hm_cmd) return cmd_heatmap(ha);
    if (*rep_cmd) return cmd_report(ra);
    if (*val_cmd) return cmd_validate(va);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: ";
    if (e.line() > 0) std::cerr << "line " << e.line() << ": ";
    std::cerr << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
