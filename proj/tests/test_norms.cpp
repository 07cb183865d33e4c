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

#include "margindyn/norms.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "margindyn/errors.hpp"
#include "oracles.hpp"

using namespace margindyn;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d;
  for (auto& v : t.values()) v = d(rng);
  return t;
}

ConvKernel random_kernel(std::mt19937_64& rng, std::size_t c_out, std::size_t c_in, std::size_t k,
                         std::size_t stride, std::size_t pad) {
  return ConvKernel{random_tensor(rng, {c_out, c_in, k}), stride, {pad}};
}

double exact_norm(const ConvKernel& k, const Shape& in) { return oracle::spectral_norm(materialize_operator(k, in)); }

BatchNormParams random_bn(std::mt19937_64& rng, std::size_t channels) {
  std::uniform_real_distribution<double> u(0.1, 2.0);
  BatchNormParams p;
  for (std::size_t c = 0; c < channels; ++c) {
    p.scale.push_back(u(rng) * (c % 2 ? -1.0 : 1.0));
    p.shift.push_back(u(rng));
    p.running_mean.push_back(u(rng));
    p.running_var.push_back(u(rng));
  }
  p.eps = 1e-3;
  return p;
}

}  // namespace

// --- l1 bounds -------------------------------------------------------------

TEST(L1Bound, SingleChannelHandCases) {
  ConvKernel delta{Tensor({1, 1, 3}, {1, 0, 0}), 1, {}};
  EXPECT_DOUBLE_EQ(l1_bound_single_channel(delta), 1.0);
  EXPECT_NEAR(exact_norm(delta, {1, 8}), 1.0, 1e-12);

  ConvKernel w{Tensor({1, 1, 3}, {1, 2, 3}), 1, {}};
  EXPECT_DOUBLE_EQ(l1_bound_single_channel(w), 6.0);
}

TEST(L1Bound, SingleChannelRejectsMultichannel) {
  ConvKernel k{Tensor({2, 1, 3}), 1, {}};
  EXPECT_THROW(l1_bound_single_channel(k), WrongVariantError);
}

TEST(L1Bound, MultichannelReducesToSingleChannel) {
  ConvKernel w{Tensor({1, 1, 3}, {1, -2, 3}), 1, {}};
  EXPECT_DOUBLE_EQ(l1_bound_multichannel(w), l1_bound_single_channel(w));
}

TEST(L1Bound, MultichannelHandCase) {
  // w(1,1,.) = [1,1], w(2,1,.) = [2,0]: sqrt(4 * 2).
  ConvKernel w{Tensor({2, 1, 2}, {1, 1, 2, 0}), 1, {}};
  EXPECT_NEAR(l1_bound_multichannel(w), std::sqrt(8.0), 1e-15);
}

TEST(L1Bound, StrideHandCases) {
  ConvKernel w{Tensor({1, 1, 3}, {1, -1, 1}), 2, {}};
  EXPECT_NEAR(l1_bound_stride(w), std::sqrt(6.0), 1e-15);
  ConvKernel delta{Tensor({1, 1, 1}, {1}), 1, {}};
  EXPECT_DOUBLE_EQ(l1_bound_stride(delta), 1.0);
}

TEST(L1Bound, RandomSingleChannelKernelsAreSound) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    auto k = random_kernel(rng, 1, 1, 1 + trial % 5, 1 + trial % 3, trial % 2);
    const double exact = exact_norm(k, {1, 12});
    EXPECT_GE(l1_bound_single_channel(k), exact * (1 - 1e-12)) << "trial " << trial;
  }
}

TEST(L1Bound, RandomMultichannelKernelsAreSound) {
  std::mt19937_64 rng(102);
  for (int trial = 0; trial < 50; ++trial) {
    auto k = random_kernel(rng, 1 + trial % 3, 1 + (trial / 3) % 3, 1 + trial % 5, 1 + trial % 3, trial % 3);
    const Shape in{k.in_channels(), 12};
    EXPECT_GE(l1_bound_multichannel(k), exact_norm(k, in) * (1 - 1e-12)) << "trial " << trial;
  }
}

TEST(L1Bound, RandomStridedKernelsAreSound) {
  std::mt19937_64 rng(103);
  for (int trial = 0; trial < 50; ++trial) {
    auto k = random_kernel(rng, 1 + trial % 3, 1 + (trial / 3) % 3, 1 + trial % 5, 1 + trial % 3, trial % 2);
    const Shape in{k.in_channels(), 11};
    EXPECT_GE(l1_bound_stride(k), exact_norm(k, in) * (1 - 1e-12)) << "trial " << trial;
  }
}

TEST(L1Bound, TwoDimensionalKernelsAreSound) {
  std::mt19937_64 rng(104);
  for (int trial = 0; trial < 10; ++trial) {
    ConvKernel k{random_tensor(rng, {2, 2, 3, 2}), 1 + static_cast<std::size_t>(trial % 2), {1, 0}};
    const double exact = exact_norm(k, {2, 6, 5});
    EXPECT_GE(l1_bound_multichannel(k), exact * (1 - 1e-12));
    EXPECT_GE(l1_bound_stride(k), exact * (1 - 1e-12));
  }
}

TEST(L1Bound, BestPicksTheSmaller) {
  std::mt19937_64 rng(105);
  auto k = random_kernel(rng, 3, 2, 4, 2, 0);
  auto best = best_l1_bound(k);
  EXPECT_DOUBLE_EQ(best.value, std::min(l1_bound_multichannel(k), l1_bound_stride(k)));
}

TEST(L1Bound, DenseAsConvIsSound) {
  std::mt19937_64 rng(106);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = random_tensor(rng, {3 + static_cast<std::size_t>(trial % 4), 5});
    EXPECT_GE(best_l1_bound(dense_as_conv(w)).value, oracle::spectral_norm(w) * (1 - 1e-12));
  }
}

// --- power iteration -------------------------------------------------------

TEST(PowerIteration, Diagonal) {
  auto est = power_iteration_dense(Tensor::matrix(2, 2, {3, 0, 0, 1}));
  EXPECT_NEAR(est.value, 3.0, 1e-9);
  EXPECT_TRUE(est.converged);
  EXPECT_EQ(est.method, NormMethod::kPowerIteration);
}

TEST(PowerIteration, ZeroOperator) {
  auto est = power_iteration_dense(Tensor({4, 3}));
  EXPECT_EQ(est.value, 0.0);
  EXPECT_TRUE(est.converged);
}

TEST(PowerIteration, RandomMatricesMatchSvd) {
  std::mt19937_64 rng(201);
  std::uniform_int_distribution<std::size_t> size(8, 64);
  PowerIterationOptions opts;
  opts.max_iters = 5000;
  opts.tol = 1e-13;
  for (int trial = 0; trial < 30; ++trial) {
    auto m = random_tensor(rng, {size(rng), size(rng)});
    const double exact = oracle::spectral_norm(m);
    auto est = power_iteration_dense(m, opts);
    EXPECT_LT(std::abs(est.value - exact) / exact, 1e-6) << "trial " << trial;
    EXPECT_LE(est.value, exact * (1 + 1e-12));
  }
}

TEST(PowerIteration, ConvOperatorMatchesSvd) {
  std::mt19937_64 rng(202);
  PowerIterationOptions opts;
  opts.max_iters = 5000;
  opts.tol = 1e-13;
  for (int trial = 0; trial < 10; ++trial) {
    auto k = random_kernel(rng, 2, 3, 3, 1 + trial % 2, 1);
    const Shape in{3, 10};
    const double exact = exact_norm(k, in);
    EXPECT_LT(std::abs(power_iteration_conv(k, in, opts).value - exact) / exact, 1e-6);
  }
}

TEST(PowerIteration, HistoryIsRecordedAndDeterministic) {
  std::mt19937_64 rng(203);
  auto m = random_tensor(rng, {10, 10});
  std::vector<double> h1, h2;
  auto apply = [&](const Tensor& v) { return matvec(m, v); };
  auto adj = [&](const Tensor& v) { return matvec_transposed(m, v); };
  auto a = power_iteration(apply, adj, {10}, {}, &h1);
  auto b = power_iteration(apply, adj, {10}, {}, &h2);
  EXPECT_EQ(h1, h2);
  EXPECT_EQ(a.value, b.value);
  EXPECT_EQ(h1.size(), a.iterations_used);
}

TEST(PowerIteration, NanRaises) {
  auto m = Tensor::matrix(2, 2, {1, NAN, 0, 1});
  EXPECT_THROW(power_iteration_dense(m), NumericError);
}

// --- batch norm and residual rules -----------------------------------------

TEST(BatchNorm, RescaleFactorHandCases) {
  BatchNormParams p;
  p.scale = {0.5, 1.0};
  p.shift = {0, 0};
  p.running_mean = {0, 0};
  p.running_var = {0.24, 0.0};
  p.eps = 0.01;
  auto r = bn_rescale_factor(LayerSpec::batchnorm("bn", p));
  EXPECT_NEAR(r.per_channel[0], 1.0, 1e-15);
  EXPECT_NEAR(r.per_channel[1], 10.0, 1e-12);

  BatchNormParams q;
  q.scale = {1.0};
  q.running_var = {0.0};
  q.eps = 1.0;
  EXPECT_DOUBLE_EQ(bn_rescale_factor(LayerSpec::batchnorm("bn", q)).per_channel[0], 1.0);
}

TEST(BatchNorm, PerChannelNeverExceedsScalarMax) {
  std::mt19937_64 rng(301);
  for (int trial = 0; trial < 30; ++trial) {
    auto k = random_kernel(rng, 3, 2, 3, 1, 1);
    auto bn = LayerSpec::batchnorm("bn", random_bn(rng, 3));
    auto r = bn_rescale_factor(bn);
    const Shape in{2, 10};
    const double per_channel = exact_norm(rescale_output_channels(k, r.per_channel), in);
    EXPECT_LE(per_channel, r.max * exact_norm(k, in) * (1 + 1e-12));
  }
}

TEST(Residual, HandCases) {
  EXPECT_DOUBLE_EQ(residual_block_bound(2.0, {3.0, 4.0}, 1.0), 14.0);
  EXPECT_DOUBLE_EQ(residual_block_bound(2.0, {0.0, 0.0}, 1.0), 2.0);
  EXPECT_DOUBLE_EQ(residual_block_bound(1.0, {1.0, 1.0}, 1.0), 2.0);
  EXPECT_THROW(residual_block_bound(1.0, {}, 1.0), DomainError);
}

// --- whole networks --------------------------------------------------------

TEST(NetworkLipschitz, TwoDenseLayersWithRelu) {
  NetworkSpec net;
  net.layers = {LayerSpec::dense("a", Tensor::matrix(2, 2, {2, 0, 0, 1})), LayerSpec::activation("relu"),
                LayerSpec::dense("b", Tensor::matrix(2, 2, {3, 0, 0, 0.5}))};
  EXPECT_NEAR(network_lipschitz(net).value, 6.0, 1e-8);
}

TEST(NetworkLipschitz, IdentityLayer) {
  NetworkSpec net;
  net.layers = {LayerSpec::dense("id", Tensor::identity(4))};
  EXPECT_NEAR(network_lipschitz(net).value, 1.0, 1e-9);
  // Dense layers get the l1 route as 1x1 convolutions: sqrt(||W||_1 * max|w|)
  // is sound but reads 2 for the 4x4 identity.
  LipschitzOptions l1;
  l1.method = LipschitzMethod::kL1;
  EXPECT_DOUBLE_EQ(network_lipschitz(net, l1).value, 2.0);
}

TEST(NetworkLipschitz, RandomThreeLayerOrdering) {
  std::mt19937_64 rng(401);
  for (int trial = 0; trial < 10; ++trial) {
    NetworkSpec net;
    net.input_shape = {2, 8};
    ConvKernel c1 = random_kernel(rng, 3, 2, 3, 1, 1);
    ConvKernel c2 = random_kernel(rng, 2, 3, 2, 2, 0);
    net.layers = {LayerSpec::convolution("c1", c1), LayerSpec::activation("r1"), LayerSpec::convolution("c2", c2),
                  LayerSpec::activation("r2"), LayerSpec::dense("fc", random_tensor(rng, {3, 8}))};
    validate_network(net);
    const double exact = exact_norm(c1, {2, 8}) * exact_norm(c2, {3, 8}) *
                         oracle::spectral_norm(net.layers[4].weight);
    LipschitzOptions l1;
    l1.method = LipschitzMethod::kL1;
    LipschitzOptions power;
    power.power.max_iters = 5000;
    power.power.tol = 1e-13;
    const double lp = network_lipschitz(net, power).value;
    EXPECT_GE(network_lipschitz(net, l1).value, lp);
    EXPECT_LT(std::abs(lp - exact) / exact, 1e-6);
  }
}

TEST(NetworkLipschitz, BatchNormIsFusedIntoPrecedingLayer) {
  std::mt19937_64 rng(402);
  auto k = random_kernel(rng, 3, 1, 3, 1, 1);
  auto bn = random_bn(rng, 3);
  NetworkSpec net;
  net.input_shape = {1, 9};
  net.layers = {LayerSpec::convolution("conv", k), LayerSpec::batchnorm("bn", bn)};
  LipschitzOptions opts;
  opts.power.max_iters = 5000;
  opts.power.tol = 1e-13;
  auto res = network_lipschitz(net, opts);
  ASSERT_EQ(res.layers.size(), 1u);
  EXPECT_EQ(res.layers[0].layer_id, "conv+bn");
  const auto r = bn_rescale_factor(net.layers[1]);
  EXPECT_NEAR(res.value, exact_norm(rescale_output_channels(k, r.per_channel), {1, 9}), 1e-6 * res.value);

  opts.bn_fusion = BnFusion::kScalarMax;
  EXPECT_GE(network_lipschitz(net, opts).value, res.value * (1 - 1e-9));
}

TEST(NetworkLipschitz, ResidualBlockComposition) {
  std::mt19937_64 rng(403);
  auto k1 = random_kernel(rng, 2, 2, 3, 1, 1);
  auto k2 = random_kernel(rng, 2, 2, 3, 1, 1);
  auto bn1 = random_bn(rng, 2);
  auto bn2 = random_bn(rng, 2);
  NetworkSpec net;
  net.input_shape = {2, 8};
  net.layers = {LayerSpec::residual(
                    "block", {},
                    {LayerSpec::convolution("conv1", k1), LayerSpec::batchnorm("bn1", bn1),
                     LayerSpec::activation("relu"), LayerSpec::convolution("conv2", k2),
                     LayerSpec::batchnorm("bn2", bn2)}),
                LayerSpec::activation("out_relu")};
  validate_network(net);
  // These operators have a nearly degenerate top singular pair, so the
  // iteration needs many steps.
  LipschitzOptions opts;
  opts.power.max_iters = 50000;
  opts.power.tol = 1e-15;
  const double n1 =
      exact_norm(rescale_output_channels(k1, bn_rescale_factor(LayerSpec::batchnorm("", bn1)).per_channel), {2, 8});
  const double n2 =
      exact_norm(rescale_output_channels(k2, bn_rescale_factor(LayerSpec::batchnorm("", bn2)).per_channel), {2, 8});
  const double expected = residual_block_bound(1.0, {n1, n2}, 1.0);
  EXPECT_NEAR(network_lipschitz(net, opts).value, expected, 1e-6 * expected);
}

TEST(NetworkLipschitz, ActivationAndPoolConstantsMultiply) {
  NetworkSpec net;
  net.input_shape = {1, 8};
  net.layers = {LayerSpec::convolution("c", ConvKernel{Tensor({1, 1, 1}, {2.0}), 1, {}}),
                LayerSpec::activation("leaky", 0.5), LayerSpec::pool("pool", 2, 3.0)};
  EXPECT_NEAR(network_lipschitz(net).value, 3.0, 1e-9);
}

TEST(NetworkValidation, NamesTheBadLayer) {
  NetworkSpec net;
  net.layers = {LayerSpec::dense("first", Tensor({3, 4})), LayerSpec::dense("second", Tensor({2, 5}))};
  try {
    validate_network(net);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
  }
}

TEST(NetworkValidation, DepthCountsWeightLayers) {
  NetworkSpec net;
  net.layers = {LayerSpec::dense("a", Tensor({3, 4})), LayerSpec::activation("r"), LayerSpec::dense("b", Tensor({2, 3}))};
  EXPECT_EQ(net.depth(), 2u);
}

TEST(Names, RoundTrip) {
  for (auto k : {LayerKind::kDense, LayerKind::kConv, LayerKind::kBatchNorm, LayerKind::kActivation, LayerKind::kPool,
                 LayerKind::kResidualBlock}) {
    EXPECT_EQ(layer_kind_from_string(to_string(k)), k);
  }
  EXPECT_EQ(lipschitz_method_from_string("l1"), LipschitzMethod::kL1);
  EXPECT_EQ(lipschitz_method_from_string("power"), LipschitzMethod::kPower);
}
