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
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "margindyn/tensor.hpp"

namespace margindyn {

// ---------------------------------------------------------------------------
// Network description

enum class LayerKind { kDense, kConv, kBatchNorm, kActivation, kPool, kResidualBlock };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct BatchNormParams {
  std::vector<double> scale;  // alpha-hat
  std::vector<double> shift;  // beta-hat
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;

  std::size_t channels() const { return scale.size(); }
};

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::kActivation;

  // kDense: weight is (out, in).
  Tensor weight;
  // kConv
  ConvKernel conv;
  // kDense / kConv; never enters the operator norm.
  std::optional<Tensor> bias;
  // kBatchNorm
  BatchNormParams bn;
  // kActivation / kPool: declared Lipschitz constant.
  double lipschitz = 1.0;
  // kPool: non-overlapping window (stride equals window) per spatial dim.
  std::size_t pool_window = 1;
  // kResidualBlock
  std::vector<LayerSpec> shortcut;
  std::vector<LayerSpec> mainstream;
  double inner_lipschitz = 1.0;

  static LayerSpec dense(std::string id, Tensor weight);
  static LayerSpec convolution(std::string id, ConvKernel kernel);
  static LayerSpec batchnorm(std::string id, BatchNormParams params);
  static LayerSpec activation(std::string id, double lipschitz = 1.0);
  static LayerSpec pool(std::string id, std::size_t window, double lipschitz = 1.0);
  static LayerSpec residual(std::string id, std::vector<LayerSpec> shortcut, std::vector<LayerSpec> mainstream,
                            double inner_lipschitz = 1.0);
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
  /// Shape of one input sample, e.g. {d} for dense nets or {C, H, W}.
  Shape input_shape;

  std::size_t depth() const;
};

/// Output shape of one layer for the given input shape; dense layers
/// flatten their input. Throws ShapeError when the layer cannot accept it.
Shape layer_output_shape(const LayerSpec& layer, const Shape& input_shape);

/// Checks per-layer invariants and that layer shapes compose from
/// `input_shape` onward. Throws ValidationError naming the offending layer.
void validate_network(const NetworkSpec& net);

// ---------------------------------------------------------------------------
// Estimates

enum class NormMethod { kL1SingleChannel, kL1Multichannel, kL1Stride, kPowerIteration, kExactOracle };

std::string to_string(NormMethod method);

struct NormEstimate {
  std::string layer_id;
  NormMethod method = NormMethod::kPowerIteration;
  double value = 0.0;
  std::size_t iterations_used = 0;
  bool converged = true;
};

/// Young-type bound ||w||_1; C_in = C_out = 1 only (WrongVariantError otherwise).
double l1_bound_single_channel(const ConvKernel& kernel);
/// sqrt(||w||_1 * max_{i,j} ||w(j,i,.)||_1). An upper bound at any stride.
double l1_bound_multichannel(const ConvKernel& kernel);
/// sqrt(D * ||w||_1 * ||w||_inf) with D = prod_i ceil(k_i / stride).
double l1_bound_stride(const ConvKernel& kernel);

/// Smaller of the multichannel and stride-aware bounds, the tightest l1
/// estimate available for a general kernel.
NormEstimate best_l1_bound(const ConvKernel& kernel);

/// A dense (out x in) matrix viewed as a 1x1 convolution over a single
/// spatial position. Lets the l1 bounds apply to fully connected layers.
ConvKernel dense_as_conv(const Tensor& weight);

struct PowerIterationOptions {
  std::size_t max_iters = 200;
  double tol = 1e-9;
  std::uint64_t seed = 0x5EED;
};

using LinearMap = std::function<Tensor(const Tensor&)>;

/// Top singular value of the operator given by `apply` and its adjoint.
///
/// Iterates v <- A^T A v / ||A^T A v|| from a seeded Gaussian unit vector and
/// reports sigma = ||A v||. Stops when successive estimates differ by less
/// than `tol` relative. A zero operator gives value 0 and converged = true.
/// NaN anywhere raises NumericError.
NormEstimate power_iteration(const LinearMap& apply, const LinearMap& adjoint, const Shape& input_shape,
                             const PowerIterationOptions& options = {});

/// Same, additionally recording the estimate after every iteration.
NormEstimate power_iteration(const LinearMap& apply, const LinearMap& adjoint, const Shape& input_shape,
                             const PowerIterationOptions& options, std::vector<double>* history);

NormEstimate power_iteration_dense(const Tensor& matrix, const PowerIterationOptions& options = {});
NormEstimate power_iteration_conv(const ConvKernel& kernel, const Shape& input_shape,
                                  const PowerIterationOptions& options = {});

struct BnRescale {
  std::vector<double> per_channel;  // |alpha_c| / sqrt(var_c + eps)
  double max = 0.0;
};

BnRescale bn_rescale_factor(const LayerSpec& bn);

/// Multiplies output channel c of the kernel by factors[c].
ConvKernel rescale_output_channels(const ConvKernel& kernel, const std::vector<double>& factors);
Tensor rescale_rows(const Tensor& weight, const std::vector<double>& factors);

/// Shortcut path norm plus inner activation constant times the product of
/// the mainstream block norms. The outer activation constant is shared by
/// both paths and is left out.
double residual_block_bound(double shortcut_norm, const std::vector<double>& main_norms, double inner_lipschitz);

enum class LipschitzMethod { kL1, kPower };

std::string to_string(LipschitzMethod method);
LipschitzMethod lipschitz_method_from_string(const std::string& name);

enum class BnFusion { kPerChannel, kScalarMax };

struct LipschitzOptions {
  LipschitzMethod method = LipschitzMethod::kPower;
  BnFusion bn_fusion = BnFusion::kPerChannel;
  PowerIterationOptions power;
};

struct LipschitzResult {
  double value = 1.0;
  std::vector<NormEstimate> layers;
};

/// Product of per-layer operator norm estimates (biases excluded). Batch
/// norm layers are fused into the preceding conv/dense layer; declared
/// activation/pool constants multiply in; residual blocks are folded with
/// residual_block_bound. Throws EstimationError naming unsupported layers.
LipschitzResult network_lipschitz(const NetworkSpec& net, const LipschitzOptions& options = {});

}  // namespace margindyn
