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

#include "margindyn/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

#include "margindyn/errors.hpp"

namespace margindyn {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

void require_matrix(const Tensor& m, const char* op) {
  if (m.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(m.shape()));
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor eye({n, n});
  for (std::size_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
  return eye;
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

Tensor matvec(const Tensor& matrix, const Tensor& vector) {
  require_matrix(matrix, "matvec");
  const auto rows = matrix.dim(0), cols = matrix.dim(1);
  if (vector.size() != cols) {
    throw ShapeError("matvec: matrix " + shape_to_string(matrix.shape()) + " times vector of length " +
                     std::to_string(vector.size()));
  }
  Tensor out({rows});
  const double* m = matrix.values().data();
  const double* v = vector.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* row = m + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
    out[r] = acc;
  }
  return out;
}

Tensor matvec_transposed(const Tensor& matrix, const Tensor& vector) {
  require_matrix(matrix, "matvec_transposed");
  const auto rows = matrix.dim(0), cols = matrix.dim(1);
  if (vector.size() != rows) {
    throw ShapeError("matvec_transposed: matrix " + shape_to_string(matrix.shape()) + " with vector of length " +
                     std::to_string(vector.size()));
  }
  Tensor out({cols});
  const double* m = matrix.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = vector[r];
    const double* row = m + r * cols;
    for (std::size_t c = 0; c < cols; ++c) out[c] += row[c] * s;
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

Tensor transpose(const Tensor& matrix) {
  require_matrix(matrix, "transpose");
  Tensor out({matrix.dim(1), matrix.dim(0)});
  for (std::size_t i = 0; i < matrix.dim(0); ++i)
    for (std::size_t j = 0; j < matrix.dim(1); ++j) out.at(j, i) = matrix.at(i, j);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> v) {
  // Scaled accumulation keeps tiny and huge vectors from under/overflowing.
  const double scale = max_abs(v);
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double acc = 0.0;
  for (double x : v) {
    const double y = x / scale;
    acc += y * y;
  }
  return scale * std::sqrt(acc);
}

double sum(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc;
}

double sum_abs(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += std::abs(x);
  return acc;
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) {
    const double a = std::abs(x);
    if (a > m || std::isnan(a)) m = a;
  }
  return m;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

Tensor scaled(const Tensor& a, double factor) {
  Tensor out = a;
  for (auto& x : out.values()) x *= factor;
  return out;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

// ---------------------------------------------------------------------------
// Convolution

void ConvKernel::validate() const {
  if (weights.rank() != 3 && weights.rank() != 4) {
    throw ShapeError("conv kernel must have shape (C_out, C_in, k) or (C_out, C_in, kh, kw), got " +
                     shape_to_string(weights.shape()));
  }
  if (stride < 1) throw DomainError("conv stride must be >= 1");
  if (!padding.empty() && padding.size() != spatial_rank()) {
    throw ShapeError("conv padding needs one entry per spatial dimension");
  }
}

namespace {

// 1-D kernels are handled as 2-D kernels with a unit-height leading axis.
struct ConvGeometry {
  std::size_t c_out, c_in;
  std::size_t kh, kw;
  std::size_t ih, iw;
  std::size_t oh, ow;
  std::size_t ph, pw;
  std::size_t stride;
};

std::size_t output_extent(std::size_t in, std::size_t pad, std::size_t k, std::size_t stride) {
  const std::size_t padded = in + 2 * pad;
  if (padded < k) throw ShapeError("conv input (with padding) is smaller than the kernel");
  return (padded - k) / stride + 1;
}

ConvGeometry geometry(const ConvKernel& kernel, const Shape& input_shape) {
  kernel.validate();
  const auto sr = kernel.spatial_rank();
  if (input_shape.size() != sr + 1) {
    throw ShapeError("conv input must have shape (C_in, spatial...) with " + std::to_string(sr) +
                     " spatial dims, got " + shape_to_string(input_shape));
  }
  if (input_shape[0] != kernel.in_channels()) {
    throw ShapeError("conv kernel expects " + std::to_string(kernel.in_channels()) + " input channels, got " +
                     std::to_string(input_shape[0]));
  }
  ConvGeometry g{};
  g.c_out = kernel.out_channels();
  g.c_in = kernel.in_channels();
  g.stride = kernel.stride;
  if (sr == 1) {
    g.kh = 1, g.kw = kernel.kernel_extent(0);
    g.ih = 1, g.iw = input_shape[1];
    g.ph = 0, g.pw = kernel.pad(0);
    g.oh = 1;
  } else {
    g.kh = kernel.kernel_extent(0), g.kw = kernel.kernel_extent(1);
    g.ih = input_shape[1], g.iw = input_shape[2];
    g.ph = kernel.pad(0), g.pw = kernel.pad(1);
    g.oh = output_extent(g.ih, g.ph, g.kh, g.stride);
  }
  g.ow = output_extent(g.iw, g.pw, g.kw, g.stride);
  return g;
}

Shape output_shape_of(const ConvGeometry& g, std::size_t spatial_rank) {
  if (spatial_rank == 1) return {g.c_out, g.ow};
  return {g.c_out, g.oh, g.ow};
}

// Visits every (output index, input index, weight index) triple that
// contributes to the cross-correlation sum, in a fixed order.
template <typename Fn>
void for_each_tap(const ConvGeometry& g, Fn&& fn) {
  const auto kernel_plane = g.kh * g.kw;
  for (std::size_t co = 0; co < g.c_out; ++co) {
    for (std::size_t oy = 0; oy < g.oh; ++oy) {
      for (std::size_t ox = 0; ox < g.ow; ++ox) {
        const std::size_t out_idx = (co * g.oh + oy) * g.ow + ox;
        for (std::size_t ci = 0; ci < g.c_in; ++ci) {
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.ph);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.ih)) continue;
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pw);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.iw)) continue;
              const std::size_t in_idx = (ci * g.ih + static_cast<std::size_t>(iy)) * g.iw + static_cast<std::size_t>(ix);
              const std::size_t w_idx = (co * g.c_in + ci) * kernel_plane + ky * g.kw + kx;
              fn(out_idx, in_idx, w_idx);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Shape conv_output_shape(const ConvKernel& kernel, const Shape& input_shape) {
  return output_shape_of(geometry(kernel, input_shape), kernel.spatial_rank());
}

Tensor conv_forward(const ConvKernel& kernel, const Tensor& input) {
  const auto g = geometry(kernel, input.shape());
  Tensor out(output_shape_of(g, kernel.spatial_rank()));
  const double* w = kernel.weights.values().data();
  const double* x = input.values().data();
  double* y = out.values().data();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { y[o] += w[k] * x[i]; });
  return out;
}

Tensor conv_adjoint(const ConvKernel& kernel, const Tensor& cotangent, const Shape& input_shape) {
  const auto g = geometry(kernel, input_shape);
  if (cotangent.shape() != output_shape_of(g, kernel.spatial_rank())) {
    throw ShapeError("conv_adjoint: cotangent shape " + shape_to_string(cotangent.shape()) + " does not match " +
                     shape_to_string(output_shape_of(g, kernel.spatial_rank())));
  }
  Tensor out(input_shape);
  const double* w = kernel.weights.values().data();
  const double* y = cotangent.values().data();
  double* x = out.values().data();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { x[i] += w[k] * y[o]; });
  return out;
}

Tensor conv_kernel_gradient(const ConvKernel& kernel, const Tensor& input, const Tensor& cotangent) {
  const auto g = geometry(kernel, input.shape());
  if (cotangent.shape() != output_shape_of(g, kernel.spatial_rank())) {
    throw ShapeError("conv_kernel_gradient: cotangent shape mismatch");
  }
  Tensor grad(kernel.weights.shape());
  const double* x = input.values().data();
  const double* y = cotangent.values().data();
  double* gw = grad.values().data();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { gw[k] += x[i] * y[o]; });
  return grad;
}

Tensor materialize_operator(const ConvKernel& kernel, const Shape& input_shape, std::size_t cap) {
  const auto g = geometry(kernel, input_shape);
  const auto n_in = shape_size(input_shape);
  if (n_in > cap) {
    throw OracleSizeError("operator input has " + std::to_string(n_in) + " elements, cap is " + std::to_string(cap));
  }
  const auto out_shape = output_shape_of(g, kernel.spatial_rank());
  const auto n_out = shape_size(out_shape);
  Tensor m({n_out, n_in});
  const double* w = kernel.weights.values().data();
  for_each_tap(g, [&](std::size_t o, std::size_t i, std::size_t k) { m.at(o, i) += w[k]; });
  return m;
}

}  // namespace margindyn
