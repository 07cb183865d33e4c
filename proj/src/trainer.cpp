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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "margindyn/errors.hpp"
#include "margindyn/margins.hpp"

namespace margindyn {

// ---------------------------------------------------------------------------
// Data

namespace {

Tensor sample_centers(std::size_t classes, std::size_t dim, double separation, std::mt19937_64& rng) {
  Tensor centers({classes, dim});
  const double radius = separation / std::sqrt(2.0);
  if (dim >= classes) {
    for (std::size_t k = 0; k < classes; ++k) centers.at(k, k) = radius;
    return centers;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < classes; ++k) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      centers.at(k, j) = normal(rng);
      n2 += centers.at(k, j) * centers.at(k, j);
    }
    const double scale = radius / std::sqrt(n2);
    for (std::size_t j = 0; j < dim; ++j) centers.at(k, j) *= scale;
  }
  return centers;
}

Dataset sample_split(const Tensor& centers, std::size_t n, std::mt19937_64& rng) {
  const std::size_t classes = centers.dim(0), dim = centers.dim(1);
  Dataset d;
  d.inputs = Tensor({n, dim});
  d.labels.resize(n);
  // Balanced classes in shuffled order.
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = i % classes;
  std::shuffle(d.labels.begin(), d.labels.end(), rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) d.inputs.at(i, j) = centers.at(d.labels[i], j) + normal(rng);
  d.clean_labels = d.labels;
  return d;
}

}  // namespace

BlobData make_blobs(const BlobSpec& spec, double corrupt_fraction) {
  if (spec.num_classes < 2) throw DomainError("blobs need at least two classes");
  if (spec.n_train < spec.num_classes) throw DomainError("n_train must be >= number of classes");
  if (spec.dim < 1) throw DomainError("blob dimension must be >= 1");
  if (!(spec.separation >= 0.0) || !std::isfinite(spec.separation)) throw DomainError("separation must be >= 0");
  if (!(corrupt_fraction >= 0.0 && corrupt_fraction <= 1.0)) throw DomainError("corrupt fraction must lie in [0, 1]");

  std::mt19937_64 rng(spec.seed);
  const Tensor centers = sample_centers(spec.num_classes, spec.dim, spec.separation, rng);
  BlobData out;
  out.train = sample_split(centers, spec.n_train, rng);
  if (spec.n_test > 0) out.test = sample_split(centers, spec.n_test, rng);

  const auto n_corrupt = static_cast<std::size_t>(std::llround(corrupt_fraction * static_cast<double>(spec.n_train)));
  std::vector<std::size_t> order(spec.n_train);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<std::size_t> shift(1, spec.num_classes - 1);
  for (std::size_t k = 0; k < n_corrupt; ++k) {
    auto& y = out.train.labels[order[k]];
    y = (y + shift(rng)) % spec.num_classes;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network

ToyNet init_network(const Architecture& arch, std::size_t input_dim, std::size_t num_classes, std::uint64_t seed) {
  if (input_dim < 1 || num_classes < 2) throw DomainError("network needs input_dim >= 1 and >= 2 classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ToyNet net;
  net.input_dim = input_dim;
  std::size_t fan_in = input_dim;
  if (arch.conv_channels > 0) {
    if (arch.conv_kernel < 1 || arch.conv_kernel % 2 == 0) throw DomainError("conv kernel size must be odd");
    ConvKernel k;
    k.weights = Tensor({arch.conv_channels, 1, arch.conv_kernel});
    const double scale = std::sqrt(2.0 / static_cast<double>(arch.conv_kernel));
    for (auto& w : k.weights.values()) w = normal(rng) * scale;
    k.padding = {arch.conv_kernel / 2};
    net.conv = std::move(k);
    fan_in = arch.conv_channels * input_dim;
  }
  std::vector<std::size_t> widths = arch.hidden_widths;
  widths.push_back(num_classes);
  for (auto w : widths) {
    if (w < 1) throw DomainError("layer widths must be >= 1");
    Tensor weight({w, fan_in});
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : weight.values()) v = normal(rng) * scale;
    net.weights.push_back(std::move(weight));
    if (arch.bias) net.biases.emplace_back(Shape{w});
    fan_in = w;
  }
  return net;
}

namespace {

// Per-sample activations kept for the backward pass.
struct Trace {
  Tensor conv_in;                          // (1, d)
  std::vector<double> conv_pre;            // flattened conv output before ReLU
  std::vector<std::vector<double>> acts;   // input to dense layer i
  std::vector<std::vector<double>> pre;    // pre-activation of dense layer i
};

void dense_apply(const Tensor& w, const Tensor* b, const std::vector<double>& x, std::vector<double>& out) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  out.assign(rows, 0.0);
  const double* m = w.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = m + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = acc + (b ? (*b)[r] : 0.0);
  }
}

std::vector<double> run_forward(const ToyNet& net, std::span<const double> x, Trace* trace) {
  if (x.size() != net.input_dim) throw ShapeError("input has " + std::to_string(x.size()) + " features, expected " +
                                                  std::to_string(net.input_dim));
  std::vector<double> h(x.begin(), x.end());
  if (net.conv) {
    Tensor in({1, net.input_dim}, h);
    Tensor z = conv_forward(*net.conv, in);
    if (trace) {
      trace->conv_in = in;
      trace->conv_pre = z.storage();
    }
    h = z.storage();
    for (auto& v : h) v = std::max(v, 0.0);
  }
  std::vector<double> z;
  const std::size_t layers = net.weights.size();
  for (std::size_t i = 0; i < layers; ++i) {
    dense_apply(net.weights[i], net.biases.empty() ? nullptr : &net.biases[i], h, z);
    if (trace) {
      trace->acts.push_back(h);
      trace->pre.push_back(z);
    }
    if (i + 1 < layers) {
      h.resize(z.size());
      for (std::size_t k = 0; k < z.size(); ++k) h[k] = z[k] > 0.0 ? z[k] : 0.0;
    }
  }
  return z;
}

double log_softmax_loss(const std::vector<double>& logits, std::size_t label, std::vector<double>* probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double v : logits) denom += std::exp(v - mx);
  if (probs) {
    probs->resize(logits.size());
    for (std::size_t k = 0; k < logits.size(); ++k) (*probs)[k] = std::exp(logits[k] - mx) / denom;
  }
  return std::log(denom) + mx - logits[label];
}

}  // namespace

std::vector<double> forward(const ToyNet& net, std::span<const double> x) { return run_forward(net, x, nullptr); }

Gradients backward(const ToyNet& net, const Tensor& inputs, std::span<const std::size_t> labels,
                   std::span<const std::size_t> rows) {
  if (rows.empty()) throw DomainError("backward needs at least one row");
  Gradients g;
  for (const auto& w : net.weights) g.weights.emplace_back(w.shape());
  for (const auto& b : net.biases) g.biases.emplace_back(b.shape());
  if (net.conv) g.conv = Tensor(net.conv->weights.shape());

  const double inv_batch = 1.0 / static_cast<double>(rows.size());
  const std::size_t dim = inputs.dim(1);
  std::vector<double> probs, delta, prev;
  for (auto r : rows) {
    Trace trace;
    const auto logits = run_forward(net, inputs.values().subspan(r * dim, dim), &trace);
    const double l = log_softmax_loss(logits, labels[r], &probs);
    if (!std::isfinite(l)) throw NumericError("non-finite loss in backward pass");
    g.loss += l * inv_batch;

    delta = probs;
    delta[labels[r]] -= 1.0;
    for (auto& d : delta) d *= inv_batch;

    for (std::size_t i = net.weights.size(); i-- > 0;) {
      const auto& w = net.weights[i];
      const auto& a = trace.acts[i];
      const std::size_t out = w.dim(0), in = w.dim(1);
      double* gw = g.weights[i].values().data();
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        double* row = gw + o * in;
        for (std::size_t c = 0; c < in; ++c) row[c] += d * a[c];
      }
      if (!g.biases.empty())
        for (std::size_t o = 0; o < out; ++o) g.biases[i][o] += delta[o];

      prev.assign(in, 0.0);
      const double* m = w.values().data();
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        const double* row = m + o * in;
        for (std::size_t c = 0; c < in; ++c) prev[c] += row[c] * d;
      }
      // ReLU subgradient is taken as 0 at 0.
      const auto& gate = i > 0 ? trace.pre[i - 1] : trace.conv_pre;
      if (i > 0 || net.conv) {
        for (std::size_t c = 0; c < in; ++c)
          if (!(gate[c] > 0.0)) prev[c] = 0.0;
      }
      delta.swap(prev);
    }
    if (net.conv) {
      const Tensor cot({net.conv->out_channels(), net.input_dim}, delta);
      axpy(1.0, conv_kernel_gradient(*net.conv, trace.conv_in, cot), *g.conv);
    }
  }
  return g;
}

double loss(const ToyNet& net, const Tensor& inputs, std::span<const std::size_t> labels,
            std::span<const std::size_t> rows) {
  double total = 0.0;
  const std::size_t dim = inputs.dim(1);
  for (auto r : rows) total += log_softmax_loss(forward(net, inputs.values().subspan(r * dim, dim)), labels[r], nullptr);
  return total / static_cast<double>(rows.size());
}

NetworkSpec to_network_spec(const ToyNet& net) {
  NetworkSpec spec;
  spec.num_classes = net.num_classes();
  if (net.conv) {
    spec.input_shape = {1, net.input_dim};
    auto conv = LayerSpec::convolution("conv0", *net.conv);
    spec.layers.push_back(std::move(conv));
    spec.layers.push_back(LayerSpec::activation("relu0"));
  } else {
    spec.input_shape = {net.input_dim};
  }
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    auto layer = LayerSpec::dense("dense" + std::to_string(i), net.weights[i]);
    if (!net.biases.empty()) layer.bias = net.biases[i];
    spec.layers.push_back(std::move(layer));
    if (i + 1 < net.weights.size()) spec.layers.push_back(LayerSpec::activation("relu" + std::to_string(i + 1)));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (epochs < 1) throw DomainError("epochs must be >= 1");
  if (!(corrupt_fraction >= 0.0 && corrupt_fraction <= 1.0)) throw DomainError("corrupt_fraction must lie in [0, 1]");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw DomainError("learning rate must be >= 0");
  if (batch_size < 1) throw DomainError("batch size must be >= 1");
  if (data.num_classes < 2 || data.n_train < data.num_classes) throw DomainError("invalid dataset spec");
  for (auto w : architecture.hidden_widths)
    if (w < 1) throw DomainError("hidden widths must be >= 1");
}

TrainConfig canonical_config(const std::string& name) {
  TrainConfig c;
  if (name == "small") {
    c.architecture.hidden_widths = {8, 8};
  } else if (name == "large") {
    c.architecture.hidden_widths = {256, 256};
  } else {
    throw DomainError("unknown canonical config '" + name + "' (expected small or large)");
  }
  return c;
}

namespace {

// Raw margins plus mean cross-entropy over the whole split, one forward pass.
std::vector<double> margins_and_loss(const ToyNet& net, const Dataset& data, double& mean_loss) {
  const std::size_t n = data.labels.size(), dim = data.inputs.dim(1);
  std::vector<double> out(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto logits = forward(net, data.inputs.values().subspan(i * dim, dim));
    if (!all_finite(logits)) throw NumericError("non-finite logits in forward pass");
    out[i] = margin(logits, data.labels[i]);
    total += log_softmax_loss(logits, data.labels[i], nullptr);
  }
  mean_loss = total / static_cast<double>(n);
  return out;
}

double error_rate(const std::vector<double>& margins) {
  std::size_t wrong = 0;
  for (double m : margins) wrong += margin_error(m, 0.0);
  return static_cast<double>(wrong) / static_cast<double>(margins.size());
}

void sgd_step(ToyNet& net, const Gradients& g, double lr) {
  for (std::size_t i = 0; i < net.weights.size(); ++i) axpy(-lr, g.weights[i], net.weights[i]);
  for (std::size_t i = 0; i < net.biases.size(); ++i) axpy(-lr, g.biases[i], net.biases[i]);
  if (net.conv) axpy(-lr, *g.conv, net.conv->weights);
}

}  // namespace

std::vector<double> compute_margins(const ToyNet& net, const Dataset& data) {
  double unused = 0.0;
  return margins_and_loss(net, data, unused);
}

TrainResult train(const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const auto data = make_blobs(config.data, config.corrupt_fraction);
  TrainResult result;
  result.final_net = init_network(config.architecture, config.data.dim, config.data.num_classes, config.seed);
  ToyNet& net = result.final_net;

  std::mt19937_64 shuffle_rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(config.data.n_train);
  std::iota(order.begin(), order.end(), 0);
  LipschitzOptions lip;
  lip.method = config.norm_method;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    try {
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t len = std::min(config.batch_size, order.size() - start);
        const std::span<const std::size_t> rows(order.data() + start, len);
        const auto g = backward(net, data.train.inputs, data.train.labels, rows);
        sgd_step(net, g, config.learning_rate);
      }
    } catch (const NumericError& e) {
      result.failure = "epoch " + std::to_string(epoch) + ": " + e.what();
      return result;
    }
    EpochSnapshot snap;
    snap.epoch = static_cast<std::int64_t>(epoch);
    double train_loss = 0.0;
    try {
      snap.train_margins = margins_and_loss(net, data.train, train_loss);
      if (!std::isfinite(train_loss)) throw NumericError("training loss diverged");
      if (config.data.n_test > 0) snap.test_margins = compute_margins(net, data.test);
      snap.lipschitz = network_lipschitz(to_network_spec(net), lip).value;
    } catch (const NumericError& e) {
      result.failure = "epoch " + std::to_string(epoch) + ": " + e.what();
      return result;
    }
    snap.train_loss = train_loss;
    snap.train_error = error_rate(snap.train_margins);
    if (snap.test_margins) snap.test_error = error_rate(*snap.test_margins);
    result.records.push_back(std::move(snap));
    if (on_epoch) on_epoch(static_cast<std::int64_t>(epoch), net);
  }
  return result;
}

}  // namespace margindyn
