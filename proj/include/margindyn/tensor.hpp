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

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace margindyn {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  /// Zero-filled tensor. Every dimension must be positive.
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Row-major 2-D access; no bounds checking beyond debug asserts.
  double& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Dense linear algebra. All reductions accumulate left to right in index
// order, so results are bit-reproducible for a given build.

Tensor matvec(const Tensor& matrix, const Tensor& vector);
/// matrixᵀ · vector without forming the transpose.
Tensor matvec_transposed(const Tensor& matrix, const Tensor& vector);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& matrix);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double sum(std::span<const double> v);
double sum_abs(std::span<const double> v);
double max_abs(std::span<const double> v);
bool all_finite(std::span<const double> v);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double factor);
/// y += alpha * x
void axpy(double alpha, const Tensor& x, Tensor& y);

/// Multi-channel convolution kernel of shape (C_out, C_in, k_1[, k_2]).
///
/// Indexing is cross-correlation:
///   out(co, u) = sum_{ci, k} w(co, ci, k) * x_padded(ci, u * stride + k).
/// This is the reflected form of the textbook convolution sum over w(u - v);
/// reflection leaves every singular value unchanged, so norm bounds and
/// estimates computed on either convention agree.
struct ConvKernel {
  Tensor weights;
  std::size_t stride = 1;
  /// Zero padding per spatial dimension; empty means no padding.
  std::vector<std::size_t> padding;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t spatial_rank() const { return weights.rank() - 2; }
  std::size_t kernel_extent(std::size_t axis) const { return weights.dim(2 + axis); }
  std::size_t pad(std::size_t axis) const { return padding.empty() ? 0 : padding.at(axis); }

  /// Throws ShapeError/DomainError when the kernel violates its invariants.
  void validate() const;
};

/// Output shape (C_out, spatial...) for an input of shape (C_in, spatial...).
Shape conv_output_shape(const ConvKernel& kernel, const Shape& input_shape);

Tensor conv_forward(const ConvKernel& kernel, const Tensor& input);
/// Applies the transpose of the linear map x -> conv_forward(kernel, x).
Tensor conv_adjoint(const ConvKernel& kernel, const Tensor& cotangent, const Shape& input_shape);
/// Gradient of <cotangent, conv_forward(w, input)> with respect to w.
Tensor conv_kernel_gradient(const ConvKernel& kernel, const Tensor& input, const Tensor& cotangent);

inline constexpr std::size_t kDefaultOracleCap = 4096;

/// Dense matrix M with M * vec(x) == vec(conv_forward(kernel, x)).
/// Throws OracleSizeError when the input has more than `cap` elements.
Tensor materialize_operator(const ConvKernel& kernel, const Shape& input_shape,
                            std::size_t cap = kDefaultOracleCap);

}  // namespace margindyn
