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

#include "margindyn/norms.hpp"
#include "margindyn/run_record.hpp"
#include "margindyn/tensor.hpp"

namespace margindyn {

struct BlobSpec {
  std::size_t num_classes = 3;
  std::size_t n_train = 600;
  std::size_t n_test = 3000;
  std::size_t dim = 30;
  /// Distance between class centers in units of the per-coordinate noise std.
  double separation = 3.0;
  std::uint64_t seed = 1;

  bool operator==(const BlobSpec&) const = default;
};

struct Dataset {
  Tensor inputs;                    // (n, dim)
  std::vector<std::size_t> labels;  // possibly corrupted
  std::vector<std::size_t> clean_labels;
};

struct BlobData {
  Dataset train;
  Dataset test;  // never corrupted
};

/// Isotropic Gaussian clusters; class k is centred at separation/sqrt(2)
/// along axis k (random unit directions when dim < classes), so centers are
/// `separation` apart. Exactly round(corrupt_fraction * n_train) training
/// labels are moved to a uniformly chosen different class.
BlobData make_blobs(const BlobSpec& spec, double corrupt_fraction);

/// Bias-free (by default) ReLU MLP with an optional 1-D convolutional
/// front-end that treats the input vector as a single-channel signal.
struct ToyNet {
  std::optional<ConvKernel> conv;  // (C, 1, k), stride 1, "same" padding
  std::vector<Tensor> weights;     // dense layers, (out, in)
  std::vector<Tensor> biases;      // empty, or one per dense layer
  std::size_t input_dim = 0;

  std::size_t num_classes() const { return weights.back().dim(0); }
};

struct Architecture {
  std::vector<std::size_t> hidden_widths{8, 8};
  std::size_t conv_channels = 0;  // 0 disables the front-end
  std::size_t conv_kernel = 3;
  bool bias = false;

  bool operator==(const Architecture&) const = default;
};

ToyNet init_network(const Architecture& arch, std::size_t input_dim, std::size_t num_classes, std::uint64_t seed);

/// Logits for one input row.
std::vector<double> forward(const ToyNet& net, std::span<const double> x);

struct Gradients {
  std::optional<Tensor> conv;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
  double loss = 0.0;  // mean softmax cross-entropy over the batch
};

/// Mean cross-entropy gradient over the given rows of `data`.
Gradients backward(const ToyNet& net, const Tensor& inputs, std::span<const std::size_t> labels,
                   std::span<const std::size_t> rows);

/// Mean cross-entropy loss only (used by finite-difference checks).
double loss(const ToyNet& net, const Tensor& inputs, std::span<const std::size_t> labels,
            std::span<const std::size_t> rows);

/// NetworkSpec view of the net for Lipschitz estimation.
NetworkSpec to_network_spec(const ToyNet& net);

struct TrainConfig {
  Architecture architecture;
  BlobSpec data;
  double corrupt_fraction = 0.1;
  std::size_t epochs = 200;
  double learning_rate = 0.04;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LipschitzMethod norm_method = LipschitzMethod::kPower;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Shipped configurations: "small" (hidden width 8) and "large" (256).
TrainConfig canonical_config(const std::string& name);

struct TrainResult {
  std::vector<EpochSnapshot> records;
  /// Set when training stopped early on a non-finite loss.
  std::optional<std::string> failure;
  ToyNet final_net;
};

using EpochCallback = std::function<void(std::int64_t epoch, const ToyNet& net)>;

/// Plain minibatch SGD with seeded shuffling. After every epoch records raw
/// train margins (on the possibly corrupted labels), test margins, the
/// Lipschitz estimate and scalar metrics. Deterministic for a fixed config.
TrainResult train(const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Raw margins of every row of `data` under `net`.
std::vector<double> compute_margins(const ToyNet& net, const Dataset& data);

}  // namespace margindyn
