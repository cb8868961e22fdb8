// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace repr {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

/**
 * Dense row-major array of doubles.
 *
 * Storage is contiguous and owned; copies are deep. A zero extent is allowed
 * so that empty results (an empty null-space basis, say) keep a meaningful
 * shape such as [n, 0].
 */
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Builds a rank-2 tensor from nested rows; every row must have equal length.
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Row i of a rank-2 tensor.
  std::span<double> row(std::size_t i) { return std::span<double>(data_).subspan(i * shape_[1], shape_[1]); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * shape_[1], shape_[1]);
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double v);

  bool operator==(const Tensor& other) const = default;

private:
  Shape shape_;
  std::vector<double> data_;
};

/// Standard product of [m,k] and [k,n]. Each output entry accumulates over k in
/// increasing order.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

/// Max-norm of (a - b); shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

struct QrResult {
  Tensor q; ///< [m, m], orthogonal
  Tensor r; ///< [m, n], upper triangular
};

/// Householder QR of an [m, n] matrix. Rank-deficient input is fine; zero
/// columns give zero diagonal entries in r.
QrResult qr_decompose(const Tensor& a);

/**
 * Orthonormal basis for the span of a sequence of vectors.
 *
 * The columns of `vectors` ([n, m]) are visited in order. Each column is
 * reduced by the reflectors accepted so far; it contributes a new reflector
 * only if its remaining norm exceeds `tol`. Dependent columns are skipped, so
 * the leading `rank` columns of `q` always span exactly the accepted columns
 * and the trailing ones span the orthogonal complement. At most `max_rank`
 * directions are accepted.
 */
struct SpanBasis {
  Tensor q;              ///< [n, n], orthogonal
  std::size_t rank = 0;  ///< number of accepted directions
};
SpanBasis householder_span(const Tensor& vectors, double tol, std::size_t max_rank);

/// Default rank tolerance for null_space_basis: 1e-10 times the largest row norm.
double default_null_tolerance(const Tensor& a);

/// Orthonormal basis [n, d] of {v : a v = 0}. d is n minus the numerical rank
/// of a; d == 0 means no such direction exists.
Tensor null_space_basis(const Tensor& a, double tol);
Tensor null_space_basis(const Tensor& a);

struct RowNormalized {
  Tensor rows;                    ///< nonzero rows scaled to unit L2 norm
  std::vector<bool> zero_rows;    ///< true where the input row was all zero
  bool any_zero = false;
};
RowNormalized row_normalize(const Tensor& a);

} // namespace repr
