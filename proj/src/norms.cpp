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

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>

#include "margindyn/errors.hpp"

namespace margindyn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kActivation: return "activation";
    case LayerKind::kPool: return "pool";
    case LayerKind::kResidualBlock: return "residual";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerKind::kDense;
  if (name == "conv") return LayerKind::kConv;
  if (name == "batchnorm") return LayerKind::kBatchNorm;
  if (name == "activation") return LayerKind::kActivation;
  if (name == "pool") return LayerKind::kPool;
  if (name == "residual") return LayerKind::kResidualBlock;
  throw EstimationError("unsupported layer kind '" + name + "'");
}

std::string to_string(NormMethod method) {
  switch (method) {
    case NormMethod::kL1SingleChannel: return "l1_A";
    case NormMethod::kL1Multichannel: return "l1_B1";
    case NormMethod::kL1Stride: return "l1_B2_stride";
    case NormMethod::kPowerIteration: return "power_iteration";
    case NormMethod::kExactOracle: return "exact_oracle";
  }
  return "unknown";
}

std::string to_string(LipschitzMethod method) {
  return method == LipschitzMethod::kL1 ? "l1" : "power";
}

LipschitzMethod lipschitz_method_from_string(const std::string& name) {
  if (name == "l1") return LipschitzMethod::kL1;
  if (name == "power") return LipschitzMethod::kPower;
  throw DomainError("unknown norm method '" + name + "' (expected l1 or power)");
}

LayerSpec LayerSpec::dense(std::string id, Tensor weight) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kDense;
  l.weight = std::move(weight);
  return l;
}

LayerSpec LayerSpec::convolution(std::string id, ConvKernel kernel) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kConv;
  l.conv = std::move(kernel);
  return l;
}

LayerSpec LayerSpec::batchnorm(std::string id, BatchNormParams params) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kBatchNorm;
  l.bn = std::move(params);
  return l;
}

LayerSpec LayerSpec::activation(std::string id, double lipschitz) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kActivation;
  l.lipschitz = lipschitz;
  return l;
}

LayerSpec LayerSpec::pool(std::string id, std::size_t window, double lipschitz) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kPool;
  l.pool_window = window;
  l.lipschitz = lipschitz;
  return l;
}

LayerSpec LayerSpec::residual(std::string id, std::vector<LayerSpec> shortcut, std::vector<LayerSpec> mainstream,
                              double inner_lipschitz) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = LayerKind::kResidualBlock;
  l.shortcut = std::move(shortcut);
  l.mainstream = std::move(mainstream);
  l.inner_lipschitz = inner_lipschitz;
  return l;
}

std::size_t NetworkSpec::depth() const {
  return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) {
    return l.kind == LayerKind::kDense || l.kind == LayerKind::kConv || l.kind == LayerKind::kResidualBlock;
  }));
}

// ---------------------------------------------------------------------------
// Shapes and validation

namespace {

Shape path_output_shape(const std::vector<LayerSpec>& path, Shape shape) {
  for (const auto& layer : path) shape = layer_output_shape(layer, shape);
  return shape;
}

void check_layer_params(const LayerSpec& layer) {
  const auto fail = [&](const std::string& msg) { throw ValidationError("layer '" + layer.id + "': " + msg); };
  switch (layer.kind) {
    case LayerKind::kDense:
      if (layer.weight.rank() != 2) fail("dense weight must be a matrix");
      if (!all_finite(layer.weight.values())) fail("non-finite weight");
      if (layer.bias && layer.bias->size() != layer.weight.dim(0)) fail("bias length does not match output size");
      break;
    case LayerKind::kConv:
      try {
        layer.conv.validate();
      } catch (const Error& e) {
        fail(e.what());
      }
      if (!all_finite(layer.conv.weights.values())) fail("non-finite kernel");
      if (layer.bias && layer.bias->size() != layer.conv.out_channels()) fail("bias length does not match C_out");
      break;
    case LayerKind::kBatchNorm: {
      const auto& bn = layer.bn;
      const auto c = bn.channels();
      if (c == 0) fail("batchnorm needs at least one channel");
      if (bn.running_var.size() != c || (!bn.shift.empty() && bn.shift.size() != c) ||
          (!bn.running_mean.empty() && bn.running_mean.size() != c)) {
        fail("batchnorm parameter lengths disagree");
      }
      if (!(bn.eps > 0.0)) fail("batchnorm eps must be > 0");
      for (double v : bn.running_var)
        if (!(v >= 0.0)) fail("batchnorm running variance must be >= 0");
      break;
    }
    case LayerKind::kActivation:
    case LayerKind::kPool:
      if (!(layer.lipschitz > 0.0) || !std::isfinite(layer.lipschitz)) fail("Lipschitz constant must be > 0");
      if (layer.kind == LayerKind::kPool && layer.pool_window < 1) fail("pool window must be >= 1");
      break;
    case LayerKind::kResidualBlock:
      if (layer.mainstream.empty()) fail("residual block needs a non-empty mainstream path");
      if (!(layer.inner_lipschitz > 0.0)) fail("inner Lipschitz constant must be > 0");
      break;
  }
}

}  // namespace

Shape layer_output_shape(const LayerSpec& layer, const Shape& input_shape) {
  switch (layer.kind) {
    case LayerKind::kDense:
      if (shape_size(input_shape) != layer.weight.dim(1)) {
        throw ShapeError("dense layer '" + layer.id + "' expects " + std::to_string(layer.weight.dim(1)) +
                         " inputs, got " + shape_to_string(input_shape));
      }
      return {layer.weight.dim(0)};
    case LayerKind::kConv:
      try {
        return conv_output_shape(layer.conv, input_shape);
      } catch (const ShapeError& e) {
        throw ShapeError("conv layer '" + layer.id + "': " + e.what());
      }
    case LayerKind::kBatchNorm:
      if (input_shape.empty() || input_shape[0] != layer.bn.channels()) {
        throw ShapeError("batchnorm layer '" + layer.id + "' has " + std::to_string(layer.bn.channels()) +
                         " channels, input is " + shape_to_string(input_shape));
      }
      return input_shape;
    case LayerKind::kActivation:
      return input_shape;
    case LayerKind::kPool: {
      if (input_shape.size() < 2) throw ShapeError("pool layer '" + layer.id + "' needs (C, spatial...) input");
      Shape out = input_shape;
      for (std::size_t i = 1; i < out.size(); ++i) {
        out[i] /= layer.pool_window;
        if (out[i] == 0) throw ShapeError("pool layer '" + layer.id + "' window exceeds input extent");
      }
      return out;
    }
    case LayerKind::kResidualBlock: {
      const auto main_shape = path_output_shape(layer.mainstream, input_shape);
      const auto short_shape = path_output_shape(layer.shortcut, input_shape);
      if (main_shape != short_shape) {
        throw ShapeError("residual block '" + layer.id + "': mainstream output " + shape_to_string(main_shape) +
                         " differs from shortcut output " + shape_to_string(short_shape));
      }
      return main_shape;
    }
  }
  throw EstimationError("unsupported layer kind in '" + layer.id + "'");
}

void validate_network(const NetworkSpec& net) {
  if (net.layers.empty()) throw ValidationError("network has no layers");
  if (net.depth() < 1) throw ValidationError("network has no weight-bearing layers");
  Shape shape = net.input_shape;
  if (shape.empty()) {
    if (net.layers.front().kind != LayerKind::kDense) throw ValidationError("network input_shape is missing");
    shape = {net.layers.front().weight.rank() == 2 ? net.layers.front().weight.dim(1) : 0};
  }
  std::function<void(const std::vector<LayerSpec>&)> check_all = [&](const std::vector<LayerSpec>& layers) {
    for (const auto& l : layers) {
      check_layer_params(l);
      if (l.kind == LayerKind::kResidualBlock) {
        check_all(l.shortcut);
        check_all(l.mainstream);
      }
    }
  };
  check_all(net.layers);
  for (const auto& layer : net.layers) {
    try {
      shape = layer_output_shape(layer, shape);
    } catch (const ShapeError& e) {
      throw ValidationError(std::string("shape mismatch at layer '") + layer.id + "': " + e.what());
    }
  }
  if (net.num_classes != 0 && shape_size(shape) != net.num_classes) {
    throw ValidationError("network output size " + shape_to_string(shape) + " does not match num_classes " +
                          std::to_string(net.num_classes));
  }
}

// ---------------------------------------------------------------------------
// l1-based bounds

double l1_bound_single_channel(const ConvKernel& kernel) {
  kernel.validate();
  if (kernel.in_channels() != 1 || kernel.out_channels() != 1) {
    throw WrongVariantError("single-channel l1 bound needs C_in = C_out = 1; use l1_bound_multichannel");
  }
  return sum_abs(kernel.weights.values());
}

double l1_bound_multichannel(const ConvKernel& kernel) {
  kernel.validate();
  const auto w = kernel.weights.values();
  const auto plane = kernel.weights.size() / (kernel.out_channels() * kernel.in_channels());
  double max_slice = 0.0;
  for (std::size_t s = 0; s < kernel.out_channels() * kernel.in_channels(); ++s) {
    max_slice = std::max(max_slice, sum_abs(w.subspan(s * plane, plane)));
  }
  return std::sqrt(sum_abs(w) * max_slice);
}

double l1_bound_stride(const ConvKernel& kernel) {
  kernel.validate();
  double d = 1.0;
  for (std::size_t i = 0; i < kernel.spatial_rank(); ++i) {
    const auto k = kernel.kernel_extent(i);
    d *= static_cast<double>((k + kernel.stride - 1) / kernel.stride);
  }
  const auto w = kernel.weights.values();
  return std::sqrt(d * sum_abs(w) * max_abs(w));
}

NormEstimate best_l1_bound(const ConvKernel& kernel) {
  const double b1 = l1_bound_multichannel(kernel);
  const double b2 = l1_bound_stride(kernel);
  NormEstimate est;
  est.method = b1 <= b2 ? NormMethod::kL1Multichannel : NormMethod::kL1Stride;
  est.value = std::min(b1, b2);
  return est;
}

ConvKernel dense_as_conv(const Tensor& weight) {
  if (weight.rank() != 2) throw ShapeError("dense_as_conv: expected a matrix");
  ConvKernel k;
  k.weights = weight.reshaped({weight.dim(0), weight.dim(1), 1});
  return k;
}

// ---------------------------------------------------------------------------
// Power iteration

NormEstimate power_iteration(const LinearMap& apply, const LinearMap& adjoint, const Shape& input_shape,
                             const PowerIterationOptions& options) {
  return power_iteration(apply, adjoint, input_shape, options, nullptr);
}

NormEstimate power_iteration(const LinearMap& apply, const LinearMap& adjoint, const Shape& input_shape,
                             const PowerIterationOptions& options, std::vector<double>* history) {
  if (options.max_iters < 1) throw DomainError("power iteration needs max_iters >= 1");
  if (!(options.tol > 0.0)) throw DomainError("power iteration needs tol > 0");

  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor v(input_shape);
  for (auto& x : v.values()) x = normal(rng);
  const auto normalize = [](Tensor& t) {
    const double n = norm2(t.values());
    for (auto& x : t.values()) x /= n;
    return n;
  };
  normalize(v);

  NormEstimate est;
  est.method = NormMethod::kPowerIteration;
  est.converged = false;
  double previous = 0.0;
  for (std::size_t it = 1; it <= options.max_iters; ++it) {
    const Tensor av = apply(v);
    const double sigma = norm2(av.values());
    if (!std::isfinite(sigma)) throw NumericError("power iteration produced a non-finite estimate");
    est.value = sigma;
    est.iterations_used = it;
    if (history) history->push_back(sigma);
    if (sigma == 0.0) {
      est.converged = true;
      return est;
    }
    if (it > 1 && std::abs(sigma - previous) < options.tol * sigma) {
      est.converged = true;
      return est;
    }
    previous = sigma;
    Tensor next = adjoint(av);
    if (!all_finite(next.values())) throw NumericError("power iteration produced a non-finite iterate");
    if (normalize(next) == 0.0) {
      // A^T A v vanished although A v did not: cannot happen for an adjoint pair.
      throw NumericError("power iteration: adjoint annihilated a non-zero image; maps are not adjoint");
    }
    v = std::move(next);
  }
  return est;
}

NormEstimate power_iteration_dense(const Tensor& matrix, const PowerIterationOptions& options) {
  if (matrix.rank() != 2) throw ShapeError("power_iteration_dense: expected a matrix");
  return power_iteration([&](const Tensor& x) { return matvec(matrix, x); },
                         [&](const Tensor& y) { return matvec_transposed(matrix, y); }, {matrix.dim(1)}, options);
}

NormEstimate power_iteration_conv(const ConvKernel& kernel, const Shape& input_shape,
                                  const PowerIterationOptions& options) {
  conv_output_shape(kernel, input_shape);
  return power_iteration([&](const Tensor& x) { return conv_forward(kernel, x); },
                         [&](const Tensor& y) { return conv_adjoint(kernel, y, input_shape); }, input_shape, options);
}

// ---------------------------------------------------------------------------
// Batch norm and residual composition

BnRescale bn_rescale_factor(const LayerSpec& bn) {
  if (bn.kind != LayerKind::kBatchNorm) throw DomainError("bn_rescale_factor: layer '" + bn.id + "' is not batchnorm");
  const auto& p = bn.bn;
  if (p.running_var.size() != p.scale.size()) throw ShapeError("batchnorm '" + bn.id + "': parameter lengths differ");
  BnRescale out;
  out.per_channel.reserve(p.channels());
  for (std::size_t c = 0; c < p.channels(); ++c) {
    const double denom = p.running_var[c] + p.eps;
    if (!(denom > 0.0)) throw NumericError("batchnorm '" + bn.id + "': variance + eps must be positive");
    const double r = std::abs(p.scale[c]) / std::sqrt(denom);
    out.per_channel.push_back(r);
    out.max = std::max(out.max, r);
  }
  return out;
}

ConvKernel rescale_output_channels(const ConvKernel& kernel, const std::vector<double>& factors) {
  if (factors.size() != kernel.out_channels()) throw ShapeError("rescale: one factor per output channel required");
  ConvKernel out = kernel;
  const auto per_channel = kernel.weights.size() / kernel.out_channels();
  auto w = out.weights.values();
  for (std::size_t c = 0; c < factors.size(); ++c)
    for (std::size_t i = 0; i < per_channel; ++i) w[c * per_channel + i] *= factors[c];
  return out;
}

Tensor rescale_rows(const Tensor& weight, const std::vector<double>& factors) {
  if (weight.rank() != 2 || factors.size() != weight.dim(0)) throw ShapeError("rescale: one factor per row required");
  Tensor out = weight;
  for (std::size_t r = 0; r < weight.dim(0); ++r)
    for (std::size_t c = 0; c < weight.dim(1); ++c) out.at(r, c) *= factors[r];
  return out;
}

double residual_block_bound(double shortcut_norm, const std::vector<double>& main_norms, double inner_lipschitz) {
  if (main_norms.empty()) throw DomainError("residual block needs at least one mainstream norm");
  if (shortcut_norm < 0.0 || inner_lipschitz < 0.0) throw DomainError("residual block inputs must be >= 0");
  double product = inner_lipschitz;
  for (double n : main_norms) {
    if (n < 0.0) throw DomainError("residual block inputs must be >= 0");
    product *= n;
  }
  return shortcut_norm + product;
}

// ---------------------------------------------------------------------------
// Whole-network estimate

namespace {

struct PathEstimate {
  std::vector<double> block_norms;  // one per weight layer (BN fused) or standalone BN
  double activation_factor = 1.0;
  Shape output_shape;
};

NormEstimate estimate_weight_layer(const LayerSpec& layer, const LayerSpec* bn, const Shape& input_shape,
                                   const LipschitzOptions& options) {
  std::vector<double> factors;
  double scalar = 1.0;
  if (bn) {
    auto r = bn_rescale_factor(*bn);
    if (options.bn_fusion == BnFusion::kPerChannel) {
      factors = std::move(r.per_channel);
    } else {
      scalar = r.max;
    }
  }

  NormEstimate est;
  if (layer.kind == LayerKind::kDense) {
    const Tensor w = factors.empty() ? layer.weight : rescale_rows(layer.weight, factors);
    est = options.method == LipschitzMethod::kL1 ? best_l1_bound(dense_as_conv(w))
                                                 : power_iteration_dense(w, options.power);
  } else {
    const ConvKernel k = factors.empty() ? layer.conv : rescale_output_channels(layer.conv, factors);
    est = options.method == LipschitzMethod::kL1 ? best_l1_bound(k) : power_iteration_conv(k, input_shape, options.power);
  }
  est.layer_id = bn ? layer.id + "+" + bn->id : layer.id;
  est.value *= scalar;
  return est;
}

PathEstimate estimate_path(const std::vector<LayerSpec>& layers, Shape shape, const LipschitzOptions& options,
                           std::vector<NormEstimate>& log) {
  PathEstimate path;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& layer = layers[i];
    switch (layer.kind) {
      case LayerKind::kDense:
      case LayerKind::kConv: {
        const LayerSpec* bn = nullptr;
        if (i + 1 < layers.size() && layers[i + 1].kind == LayerKind::kBatchNorm) bn = &layers[i + 1];
        auto est = estimate_weight_layer(layer, bn, shape, options);
        shape = layer_output_shape(layer, shape);
        if (bn) ++i;
        path.block_norms.push_back(est.value);
        log.push_back(std::move(est));
        break;
      }
      case LayerKind::kBatchNorm: {
        // Standalone BN acts as a diagonal map; its norm is the largest factor.
        NormEstimate est;
        est.layer_id = layer.id;
        est.method = NormMethod::kExactOracle;
        est.value = bn_rescale_factor(layer).max;
        path.block_norms.push_back(est.value);
        log.push_back(std::move(est));
        break;
      }
      case LayerKind::kActivation:
        path.activation_factor *= layer.lipschitz;
        break;
      case LayerKind::kPool:
        path.activation_factor *= layer.lipschitz;
        shape = layer_output_shape(layer, shape);
        break;
      case LayerKind::kResidualBlock: {
        auto shortcut = estimate_path(layer.shortcut, shape, options, log);
        auto main = estimate_path(layer.mainstream, shape, options, log);
        double shortcut_norm = shortcut.activation_factor;
        for (double n : shortcut.block_norms) shortcut_norm *= n;
        if (main.block_norms.empty()) main.block_norms.push_back(1.0);
        const double bound =
            residual_block_bound(shortcut_norm, main.block_norms, layer.inner_lipschitz * main.activation_factor);
        NormEstimate est;
        est.layer_id = layer.id;
        est.method = options.method == LipschitzMethod::kL1 ? NormMethod::kL1Multichannel : NormMethod::kPowerIteration;
        est.value = bound;
        path.block_norms.push_back(bound);
        log.push_back(std::move(est));
        shape = main.output_shape;
        break;
      }
    }
  }
  path.output_shape = shape;
  return path;
}

}  // namespace

LipschitzResult network_lipschitz(const NetworkSpec& net, const LipschitzOptions& options) {
  if (net.layers.empty()) throw EstimationError("network has no layers");
  Shape shape = net.input_shape;
  if (shape.empty()) {
    // Dense-only networks can infer the input size from the first layer.
    if (net.layers.front().kind == LayerKind::kDense) {
      shape = {net.layers.front().weight.dim(1)};
    } else {
      throw EstimationError("network input_shape is required for layer '" + net.layers.front().id + "'");
    }
  }
  LipschitzResult result;
  const auto path = estimate_path(net.layers, shape, options, result.layers);
  double value = path.activation_factor;
  for (double n : path.block_norms) value *= n;
  result.value = value;
  return result;
}

}  // namespace margindyn
