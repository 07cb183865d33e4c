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

// Runs the installed binary end to end.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <random>
#include <regex>

#include "json.hpp"
#include "margindyn/snapshot_io.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace margindyn;
using testing_support::slurp;
using testing_support::spit;
using testing_support::TempDir;

namespace {

struct Outcome {
  int code = -1;
  std::string output;
};

Outcome run_cli(const std::string& args, const TempDir& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string("\"") + MARGINDYN_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.output = slurp(log);
  return o;
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

double printed_lipschitz(const std::string& output) {
  std::smatch m;
  if (!std::regex_search(output, m, std::regex(R"(L_f (\S+))"))) return std::nan("");
  return std::stod(m[1]);
}

void write_tiny_config(const std::filesystem::path& path) {
  spit(path, R"({"base":"small","n_train":60,"n_test":40,"epochs":3,"hidden_widths":[4]})");
}

void write_fixture_run(const std::filesystem::path& path, std::size_t epochs = 25) {
  RunManifest m;
  m.num_classes = 3;
  m.n_train = 40;
  m.n_test = 30;
  write_run(path, m, testing_support::overfitting_run(epochs, 10, 40, 30));
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d;
  for (auto& v : t.values()) v = d(rng);
  return t;
}

}  // namespace

// --- train-toy --------------------------------------------------------------

TEST(CliTrain, EpochsOverrideGivesOneRecord) {
  TempDir dir("cli");
  write_tiny_config(dir / "cfg.json");
  const auto o = run_cli("train-toy --config " + q(dir / "cfg.json") + " --out " + q(dir / "run.jsonl") + " --epochs 1", dir);
  ASSERT_EQ(o.code, 0) << o.output;
  const auto run = read_run(dir / "run.jsonl");
  ASSERT_EQ(run.records.size(), 1u);
  EXPECT_EQ(run.records[0].train_margins.size(), 60u);
  EXPECT_EQ(run.records[0].test_margins->size(), 40u);
  EXPECT_EQ(run.manifest.num_classes, 3u);
}

TEST(CliTrain, SameSeedGivesIdenticalFiles) {
  TempDir dir("cli");
  write_tiny_config(dir / "cfg.json");
  ASSERT_EQ(run_cli("train-toy --config " + q(dir / "cfg.json") + " --out " + q(dir / "a.jsonl") + " --seed 5", dir).code, 0);
  ASSERT_EQ(run_cli("train-toy --config " + q(dir / "cfg.json") + " --out " + q(dir / "b.jsonl") + " --seed 5", dir).code, 0);
  ASSERT_EQ(run_cli("train-toy --config " + q(dir / "cfg.json") + " --out " + q(dir / "c.jsonl") + " --seed 6", dir).code, 0);
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  EXPECT_NE(slurp(dir / "a.jsonl"), slurp(dir / "c.jsonl"));
}

TEST(CliTrain, InvalidConfigExitsWithUsageCode) {
  TempDir dir("cli");
  spit(dir / "bad.json", R"({"base":"small","learning_rate":-0.1})");
  auto o = run_cli("train-toy --config " + q(dir / "bad.json") + " --out " + q(dir / "run.jsonl"), dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find("learning"), std::string::npos) << o.output;
  EXPECT_FALSE(std::filesystem::exists(dir / "run.jsonl"));
  spit(dir / "typo.json", R"({"base":"small","epoch":3})");
  EXPECT_EQ(run_cli("train-toy --config " + q(dir / "typo.json") + " --out " + q(dir / "run.jsonl"), dir).code, 2);
  EXPECT_EQ(run_cli("train-toy --out " + q(dir / "run.jsonl"), dir).code, 2);
}

TEST(CliTrain, WeightSnapshotsReproduceRecordedLipschitz) {
  TempDir dir("cli");
  write_tiny_config(dir / "cfg.json");
  ASSERT_EQ(run_cli("train-toy --config " + q(dir / "cfg.json") + " --out " + q(dir / "run.jsonl") + " --weights-dir " +
                        q(dir / "w"),
                    dir)
                .code,
            0);
  const auto run = read_run(dir / "run.jsonl");
  ASSERT_EQ(run.records.size(), 3u);
  for (const auto& r : run.records) {
    ASSERT_TRUE(r.weights && r.lipschitz);
    const auto net = read_network(dir.path() / *r.weights);
    LipschitzOptions opt;
    EXPECT_NEAR(network_lipschitz(net, opt).value, *r.lipschitz, 1e-9 * *r.lipschitz);
  }
  // A run that only references weights is analyzable.
  auto stripped = run.records;
  for (auto& r : stripped) r.lipschitz.reset();
  write_run(dir / "weights_only.jsonl", run.manifest, stripped);
  const auto o = run_cli("analyze --run " + q(dir / "weights_only.jsonl") + " --out " + q(dir / "rep"), dir);
  EXPECT_EQ(o.code, 0) << o.output;
}

// --- estimate ---------------------------------------------------------------

TEST(CliEstimate, IdentityLayerHasUnitConstant) {
  TempDir dir("cli");
  write_tensor(dir / "eye.mten", Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  spit(dir / "layers.json", R"({"num_classes":3,"layers":[{"id":"eye","kind":"dense","weight":"eye.mten"}]})");
  const auto o = run_cli("estimate --network " + q(dir.path()) + " --method power", dir);
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NEAR(printed_lipschitz(o.output), 1.0, 1e-6);
}

TEST(CliEstimate, TwoLayerProduct) {
  TempDir dir("cli");
  // diag-like 2x3 and 3x2 factors with known spectral norms 3 and 2.
  write_tensor(dir / "a.mten", Tensor::matrix(3, 2, {2, 0, 0, 1, 0, 0}));
  write_tensor(dir / "b.mten", Tensor::matrix(2, 3, {0, 0, 3, 1, 0, 0}));
  spit(dir / "layers.json", R"({"num_classes":2,"layers":[
      {"id":"a","kind":"dense","weight":"a.mten"},
      {"id":"relu","kind":"activation"},
      {"id":"b","kind":"dense","weight":"b.mten"}]})");
  const auto o = run_cli("estimate --network " + q(dir.path()) + " --method power --per-layer", dir);
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NEAR(printed_lipschitz(o.output), 6.0, 1e-5);
  EXPECT_NE(o.output.find("a "), std::string::npos);
  EXPECT_NE(o.output.find("b "), std::string::npos);
}

TEST(CliEstimate, ResidualFixtureMatchesHandComposition) {
  TempDir dir("cli");
  std::mt19937_64 rng(31);
  const ConvKernel k1{random_tensor(rng, {2, 2, 3}), 1, {1}};
  const ConvKernel k2{random_tensor(rng, {2, 2, 3}), 1, {1}};
  const ConvKernel ks{random_tensor(rng, {2, 2, 1}), 1, {}};
  NetworkSpec net;
  net.num_classes = 2;
  net.input_shape = {2, 6};
  net.layers.push_back(LayerSpec::residual(
      "block", {LayerSpec::convolution("proj", ks)},
      {LayerSpec::convolution("m1", k1), LayerSpec::activation("relu"), LayerSpec::convolution("m2", k2)}, 1.0));
  const auto head = random_tensor(rng, {2, 12});
  net.layers.push_back(LayerSpec::activation("relu_out"));
  net.layers.push_back(LayerSpec::dense("head", head));
  write_network(dir.path(), net);

  PowerIterationOptions p;
  p.max_iters = 50000;
  p.tol = 1e-15;
  const Shape in{2, 6};
  const double expected =
      residual_block_bound(power_iteration_conv(ks, in, p).value,
                           {power_iteration_conv(k1, in, p).value, power_iteration_conv(k2, in, p).value}, 1.0) *
      oracle::spectral_norm(head);
  const auto o = run_cli("estimate --network " + q(dir.path()) + " --method power", dir);
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NEAR(printed_lipschitz(o.output), expected, 1e-4 * expected);
}

TEST(CliEstimate, L1MethodIsAnUpperBound) {
  TempDir dir("cli");
  std::mt19937_64 rng(2);
  write_tensor(dir / "w.mten", random_tensor(rng, {4, 5}));
  spit(dir / "layers.json", R"({"num_classes":4,"layers":[{"id":"w","kind":"dense","weight":"w.mten"}]})");
  const auto l1 = run_cli("estimate --network " + q(dir.path()) + " --method l1", dir);
  const auto pw = run_cli("estimate --network " + q(dir.path()) + " --method power", dir);
  ASSERT_EQ(l1.code, 0);
  ASSERT_EQ(pw.code, 0);
  EXPECT_GE(printed_lipschitz(l1.output), printed_lipschitz(pw.output) * (1 - 1e-6));
  EXPECT_EQ(run_cli("estimate --network " + q(dir.path()) + " --method svd", dir).code, 2);
}

// --- analyze / heatmap / report ----------------------------------------------

TEST(CliAnalyze, WritesReportBundle) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  const auto o = run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "out" / "report.json") +
                             " --grid-size 6",
                         dir);
  ASSERT_EQ(o.code, 0) << o.output;
  for (const char* f : {"report.json", "curves.csv", "heatmap.csv", "heatmap.svg"})
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / f)) << f;
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  EXPECT_EQ(j["n_epochs"], 25);
  EXPECT_EQ(j["gamma_source"], "auto");
  EXPECT_EQ(j["heatmap"]["rho"].size(), 6u);
  EXPECT_EQ(j["bounds"]["params"]["num_classes"], 3);
}

TEST(CliAnalyze, GammaZeroReproducesTrainError) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  ASSERT_EQ(run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "out") + " --gamma 0", dir).code, 0);
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  for (const auto& row : j["curves"]) EXPECT_EQ(row["train_margin_error"], row["train_error"]);
}

TEST(CliAnalyze, SingleEpochRunHasNoTransition) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl", 1 + 11);
  auto run = read_run(dir / "run.jsonl");
  run.records.resize(1);
  write_run(dir / "one.jsonl", run.manifest, run.records);
  ASSERT_EQ(run_cli("analyze --run " + q(dir / "one.jsonl") + " --out " + q(dir / "out"), dir).code, 0);
  const auto j = nlohmann::json::parse(slurp(dir / "out" / "report.json"));
  for (const auto& p : j["phases"]) EXPECT_TRUE(p["transition_epoch"].is_null());
}

TEST(CliAnalyze, TrainOnlyRunExplainsFallback) {
  TempDir dir("cli");
  RunManifest m;
  m.num_classes = 2;
  auto recs = testing_support::overfitting_run(10, 4, 20, 5);
  for (auto& r : recs) r.test_margins.reset();
  write_run(dir / "run.jsonl", m, recs);
  const auto o = run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "out"), dir);
  ASSERT_EQ(o.code, 0) << o.output;
  EXPECT_NE(o.output.find("test margins"), std::string::npos) << o.output;
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / "heatmap.csv"));
}

TEST(CliAnalyze, BadFlagsAreUsageErrors) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  EXPECT_EQ(run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "o") + " --gamma abc", dir).code, 2);
  EXPECT_EQ(run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "o") + " --delta 2", dir).code, 2);
  EXPECT_EQ(run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "o") + " --q 1.5", dir).code, 2);
  EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
  EXPECT_FALSE(std::filesystem::exists(dir / "o"));
}

TEST(CliHeatmap, GridSizeOneGivesSingleCell) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  ASSERT_EQ(run_cli("heatmap --run " + q(dir / "run.jsonl") + " --out " + q(dir / "h.csv") + " --grid-size 1", dir).code, 0);
  const auto csv = slurp(dir / "h.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), ','), 2);
  ASSERT_EQ(run_cli("heatmap --run " + q(dir / "run.jsonl") + " --out " + q(dir / "h.svg") + " --grid-size 3", dir).code, 0);
  const auto svg = slurp(dir / "h.svg");
  std::size_t rects = 0;
  for (auto pos = svg.find("<rect"); pos != std::string::npos; pos = svg.find("<rect", pos + 1)) ++rects;
  EXPECT_EQ(rects, 9u);
}

TEST(CliReport, ReRendersBundleFromJson) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  ASSERT_EQ(run_cli("analyze --run " + q(dir / "run.jsonl") + " --out " + q(dir / "a") + " --grid-size 5", dir).code, 0);
  ASSERT_EQ(run_cli("report --report " + q(dir / "a" / "report.json") + " --out " + q(dir / "b"), dir).code, 0);
  for (const char* f : {"curves.csv", "heatmap.csv", "heatmap.svg"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

// --- validate ---------------------------------------------------------------

TEST(CliValidate, ValidRunExitsZero) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl");
  const auto o = run_cli("validate --run " + q(dir / "run.jsonl"), dir);
  EXPECT_EQ(o.code, 0) << o.output;
}

TEST(CliValidate, CorruptedLineExitsOneWithLineNumber) {
  TempDir dir("cli");
  write_fixture_run(dir / "run.jsonl", 12);
  auto text = slurp(dir / "run.jsonl");
  std::size_t pos = 0;
  for (int i = 0; i < 6; ++i) pos = text.find('\n', pos) + 1;
  text.replace(pos, 1, "[");
  spit(dir / "bad.jsonl", text);
  const auto o = run_cli("validate --run " + q(dir / "bad.jsonl"), dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("line 7"), std::string::npos) << o.output;
}

TEST(CliValidate, MarginCountMismatchIsReported) {
  TempDir dir("cli");
  RunManifest m;
  m.num_classes = 2;
  m.n_train = 41;
  write_run(dir / "run.jsonl", m, testing_support::overfitting_run(5, 2, 40, 5));
  const auto o = run_cli("validate --run " + q(dir / "run.jsonl"), dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("n_train"), std::string::npos) << o.output;
}

TEST(CliValidate, ShapeMismatchNetworkNamesLayer) {
  TempDir dir("cli");
  write_tensor(dir / "a.mten", Tensor({4, 3}));
  write_tensor(dir / "b.mten", Tensor({2, 5}));
  spit(dir / "layers.json", R"({"num_classes":2,"layers":[
      {"id":"encoder","kind":"dense","weight":"a.mten"},
      {"id":"head","kind":"dense","weight":"b.mten"}]})");
  const auto o = run_cli("validate --network " + q(dir.path()), dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("head"), std::string::npos) << o.output;
}

TEST(CliValidate, RequiresExactlyOneTarget) {
  TempDir dir("cli");
  EXPECT_EQ(run_cli("validate", dir).code, 2);
}
