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

#include "margindyn/trainer.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <random>

#include "margindyn/errors.hpp"
#include "margindyn/margins.hpp"
#include "oracles.hpp"

using namespace margindyn;

namespace {

Dataset random_batch(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t classes) {
  Dataset d;
  d.inputs = Tensor({n, dim});
  std::normal_distribution<double> g;
  for (auto& v : d.inputs.values()) v = g(rng);
  std::uniform_int_distribution<std::size_t> y(0, classes - 1);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(y(rng));
  d.clean_labels = d.labels;
  return d;
}

// Central differences on one parameter tensor, compared component-wise.
void check_gradient(ToyNet& net, Tensor& param, const Tensor& analytic, const Dataset& d) {
  std::vector<std::size_t> rows(d.labels.size());
  std::iota(rows.begin(), rows.end(), 0);
  const double h = 1e-5;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double saved = param[i];
    param[i] = saved + h;
    const double up = loss(net, d.inputs, d.labels, rows);
    param[i] = saved - h;
    const double down = loss(net, d.inputs, d.labels, rows);
    param[i] = saved;
    const double fd = (up - down) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic[i]), 1e-4});
    EXPECT_LT(std::abs(fd - analytic[i]) / scale, 1e-4) << "component " << i;
  }
}

std::vector<double> normalized_margins(const ToyNet& net, const Dataset& d, LipschitzMethod method) {
  LipschitzOptions opts;
  opts.method = method;
  const double lf = network_lipschitz(to_network_spec(net), opts).value;
  auto m = compute_margins(net, d);
  for (auto& v : m) v /= lf;
  return m;
}

}  // namespace

TEST(Blobs, CorruptionCounts) {
  BlobSpec spec;
  spec.n_train = 200;
  spec.n_test = 50;
  auto clean = make_blobs(spec, 0.0);
  EXPECT_EQ(clean.train.labels, clean.train.clean_labels);

  auto all = make_blobs(spec, 1.0);
  for (std::size_t i = 0; i < all.train.labels.size(); ++i) EXPECT_NE(all.train.labels[i], all.train.clean_labels[i]);
  EXPECT_EQ(all.test.labels, all.test.clean_labels);

  auto tenth = make_blobs(spec, 0.1);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < tenth.train.labels.size(); ++i)
    flipped += tenth.train.labels[i] != tenth.train.clean_labels[i] ? 1 : 0;
  EXPECT_EQ(flipped, 20u);
}

TEST(Blobs, DeterministicAndBalanced) {
  BlobSpec spec;
  spec.n_train = 99;
  spec.n_test = 30;
  auto a = make_blobs(spec, 0.1);
  auto b = make_blobs(spec, 0.1);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.train.labels, b.train.labels);
  std::vector<int> counts(3, 0);
  for (auto y : a.train.clean_labels) ++counts[y];
  for (int c : counts) EXPECT_EQ(c, 33);
}

TEST(Blobs, WellSeparatedBlobsAreLinearlySeparable) {
  BlobSpec spec;
  spec.separation = 10.0;
  spec.n_train = 600;
  spec.n_test = 600;
  auto data = make_blobs(spec, 0.0);
  // Least-squares one-vs-all linear classifier with intercept.
  const auto& x = data.train.inputs;
  const std::size_t n = x.dim(0), d = x.dim(1);
  Eigen::MatrixXd a(n, d + 1);
  Eigen::MatrixXd y = Eigen::MatrixXd::Constant(n, 3, -1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) a(i, j) = x.at(i, j);
    a(i, d) = 1.0;
    y(i, data.train.labels[i]) = 1.0;
  }
  Eigen::MatrixXd w = a.colPivHouseholderQr().solve(y);
  std::size_t correct = 0;
  const auto& xt = data.test.inputs;
  for (std::size_t i = 0; i < xt.dim(0); ++i) {
    Eigen::RowVectorXd row(d + 1);
    for (std::size_t j = 0; j < d; ++j) row(j) = xt.at(i, j);
    row(d) = 1.0;
    Eigen::RowVectorXd s = row * w;
    Eigen::Index best;
    s.maxCoeff(&best);
    correct += static_cast<std::size_t>(best) == data.test.labels[i] ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(xt.dim(0)), 0.99);
}

TEST(Forward, SingleLinearLayerIsMatvec) {
  ToyNet net;
  net.input_dim = 3;
  net.weights = {Tensor::matrix(2, 3, {1, 2, 3, -1, 0, 4})};
  const std::vector<double> x{0.5, -1, 2};
  auto out = forward(net, x);
  auto ref = oracle::naive_matvec(net.weights[0], x);
  EXPECT_EQ(out, ref);
}

TEST(Loss, ZeroWeightsGiveLogK) {
  Architecture arch;
  arch.hidden_widths = {4};
  auto net = init_network(arch, 5, 3, 1);
  for (auto& w : net.weights) w = Tensor(w.shape());
  Dataset d;
  d.inputs = Tensor({2, 5});
  d.labels = {0, 2};
  const std::vector<std::size_t> rows{0, 1};
  EXPECT_NEAR(loss(net, d.inputs, d.labels, rows), std::log(3.0), 1e-15);
  const auto logits = forward(net, std::vector<double>(5, 0.0));
  for (double v : logits) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, MatchesFiniteDifferencesOnRandomNets) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    Architecture arch;
    arch.hidden_widths = trial % 3 == 0 ? std::vector<std::size_t>{5} : std::vector<std::size_t>{4, 3};
    arch.conv_channels = trial % 4 == 1 ? 2 : 0;
    arch.bias = trial % 2 == 1;
    const std::size_t dim = 6, classes = 3;
    auto net = init_network(arch, dim, classes, static_cast<std::uint64_t>(trial));
    // Zero biases put dead units exactly on the ReLU kink.
    std::uniform_real_distribution<double> bias_dist(-0.3, 0.3);
    for (auto& b : net.biases)
      for (auto& v : b.values()) v = bias_dist(rng);
    auto data = random_batch(rng, 7, dim, classes);
    std::vector<std::size_t> rows(data.labels.size());
    std::iota(rows.begin(), rows.end(), 0);
    auto g = backward(net, data.inputs, data.labels, rows);
    EXPECT_NEAR(g.loss, loss(net, data.inputs, data.labels, rows), 1e-12);
    SCOPED_TRACE("trial " + std::to_string(trial));
    for (std::size_t l = 0; l < net.weights.size(); ++l) check_gradient(net, net.weights[l], g.weights[l], data);
    for (std::size_t l = 0; l < net.biases.size(); ++l) {
      SCOPED_TRACE("bias " + std::to_string(l));
      check_gradient(net, net.biases[l], g.biases[l], data);
    }
    if (net.conv) check_gradient(net, net.conv->weights, *g.conv, data);
  }
}

TEST(Train, ZeroLearningRateFreezesWeights) {
  auto cfg = canonical_config("small");
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  cfg.data.n_train = 60;
  cfg.data.n_test = 30;
  std::vector<ToyNet> snaps;
  train(cfg, [&](std::int64_t, const ToyNet& net) { snaps.push_back(net); });
  ASSERT_EQ(snaps.size(), 3u);
  for (const auto& s : snaps) EXPECT_EQ(s.weights, snaps[0].weights);
}

TEST(Train, DeterministicForFixedSeed) {
  auto cfg = canonical_config("small");
  cfg.epochs = 4;
  cfg.data.n_train = 90;
  cfg.data.n_test = 30;
  auto a = train(cfg);
  auto b = train(cfg);
  ASSERT_EQ(a.records.size(), 4u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].train_margins, b.records[i].train_margins);
    EXPECT_EQ(a.records[i].lipschitz, b.records[i].lipschitz);
    EXPECT_EQ(a.records[i].epoch, static_cast<std::int64_t>(i + 1));
    EXPECT_EQ(a.records[i].train_margins.size(), 90u);
    EXPECT_EQ(a.records[i].test_margins->size(), 30u);
  }
  cfg.seed = 1;
  EXPECT_NE(train(cfg).records.back().train_margins, a.records.back().train_margins);
}

TEST(Train, FitsSeparableBlobs) {
  TrainConfig cfg;
  cfg.architecture.hidden_widths = {64};
  cfg.data.separation = 10.0;
  cfg.data.n_test = 100;
  cfg.corrupt_fraction = 0.0;
  cfg.epochs = 200;
  auto res = train(cfg);
  ASSERT_FALSE(res.failure.has_value());
  EXPECT_LT(*res.records.back().train_error, 0.01);
}

TEST(Train, DivergenceReturnsPartialRun) {
  auto cfg = canonical_config("small");
  cfg.learning_rate = 1e200;
  cfg.epochs = 50;
  cfg.data.n_train = 60;
  cfg.data.n_test = 30;
  auto res = train(cfg);
  EXPECT_TRUE(res.failure.has_value());
  EXPECT_LT(res.records.size(), 50u);
}

TEST(Train, RecordedTrainErrorMatchesMargins) {
  auto cfg = canonical_config("small");
  cfg.epochs = 2;
  cfg.data.n_train = 60;
  cfg.data.n_test = 30;
  for (const auto& r : train(cfg).records) {
    EXPECT_DOUBLE_EQ(*r.train_error, oracle::cdf(r.train_margins, 0.0));
    EXPECT_DOUBLE_EQ(*r.test_error, oracle::cdf(*r.test_margins, 0.0));
  }
}

TEST(Homogeneity, ScalingOneLayerLeavesNormalizedMarginsUnchanged) {
  auto cfg = canonical_config("small");
  cfg.epochs = 5;
  cfg.data.n_train = 120;
  cfg.data.n_test = 30;
  cfg.architecture.conv_channels = 2;
  auto res = train(cfg);
  const auto data = make_blobs(cfg.data, cfg.corrupt_fraction);
  for (auto method : {LipschitzMethod::kPower, LipschitzMethod::kL1}) {
    const auto base = normalized_margins(res.final_net, data.train, method);
    const std::size_t n_layers = res.final_net.weights.size() + 1;
    for (std::size_t layer = 0; layer < n_layers; ++layer) {
      for (double c : {0.1, 10.0}) {
        ToyNet scaled_net = res.final_net;
        if (layer == 0) {
          scaled_net.conv->weights = scaled(scaled_net.conv->weights, c);
        } else {
          scaled_net.weights[layer - 1] = scaled(scaled_net.weights[layer - 1], c);
        }
        const auto m = normalized_margins(scaled_net, data.train, method);
        for (std::size_t i = 0; i < m.size(); ++i) {
          EXPECT_LE(std::abs(m[i] - base[i]), 1e-6 * std::abs(base[i]) + 1e-15);
        }
      }
    }
  }
}

TEST(Config, Validation) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.corrupt_fraction = 1.5;
  EXPECT_THROW(cfg.validate(), DomainError);
  EXPECT_THROW(canonical_config("medium"), DomainError);
  EXPECT_EQ(canonical_config("large").architecture.hidden_widths, (std::vector<std::size_t>{256, 256}));
}

TEST(NetworkView, MatchesForwardStructure) {
  Architecture arch;
  arch.conv_channels = 2;
  auto net = init_network(arch, 10, 3, 4);
  auto spec = to_network_spec(net);
  validate_network(spec);
  EXPECT_EQ(spec.depth(), 4u);
  EXPECT_EQ(spec.num_classes, 3u);
}
