// SPDX-License-Identifier: Apache-2.0
#include "repr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "repr/errors.hpp"

namespace repr {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " needs " + std::to_string(shape_product(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Tensor({0, 0});
  const std::size_t cols = rows.front().size();
  std::vector<double> flat;
  flat.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw DimensionError("from_rows: ragged rows");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(flat));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_product(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  // i-p-j order: for each output entry the k terms are still added in
  // increasing p, so results match the naive triple loop bit for bit.
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out.at(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* br = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: rank-2 tensor required, got " + shape_string(a.shape()));
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

namespace {

// Householder vector for x (length len): v with v[0] = 1 implicit handling is
// avoided; we store the full unnormalized v and beta = 2 / (v.v).
struct Reflector {
  std::vector<double> v;
  double beta = 0.0;
  std::size_t offset = 0;
};

Reflector make_reflector(const double* x, std::size_t len, std::size_t offset) {
  Reflector h;
  h.offset = offset;
  h.v.assign(x, x + len);
  const double norm = l2_norm(h.v);
  if (norm == 0.0) return h;
  const double alpha = x[0] >= 0.0 ? -norm : norm;
  h.v[0] -= alpha;
  const double vv = dot(h.v, h.v);
  h.beta = vv > 0.0 ? 2.0 / vv : 0.0;
  return h;
}

// Applies H = I - beta v v^T (acting on rows offset..) to every column of m.
void apply_left(const Reflector& h, Tensor& m) {
  if (h.beta == 0.0) return;
  const std::size_t cols = m.dim(1);
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < h.v.size(); ++i) s += h.v[i] * m.at(h.offset + i, j);
    s *= h.beta;
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < h.v.size(); ++i) m.at(h.offset + i, j) -= s * h.v[i];
  }
}

void apply_left_vector(const Reflector& h, std::vector<double>& x) {
  if (h.beta == 0.0) return;
  double s = 0.0;
  for (std::size_t i = 0; i < h.v.size(); ++i) s += h.v[i] * x[h.offset + i];
  s *= h.beta;
  for (std::size_t i = 0; i < h.v.size(); ++i) x[h.offset + i] -= s * h.v[i];
}

// Q = H_0 H_1 ... H_{r-1}, formed by applying the reflectors to I in reverse.
Tensor accumulate_q(const std::vector<Reflector>& hs, std::size_t m) {
  Tensor q = Tensor::identity(m);
  for (auto it = hs.rbegin(); it != hs.rend(); ++it) apply_left(*it, q);
  return q;
}

} // namespace

QrResult qr_decompose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("qr_decompose: rank-2 tensor required, got " + shape_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor r = a;
  std::vector<Reflector> hs;
  const std::size_t steps = std::min(m - (m > 0 ? 1 : 0), n);
  for (std::size_t k = 0; k < steps; ++k) {
    std::vector<double> col(m - k);
    for (std::size_t i = k; i < m; ++i) col[i - k] = r.at(i, k);
    Reflector h = make_reflector(col.data(), col.size(), k);
    apply_left(h, r);
    for (std::size_t i = k + 1; i < m; ++i) r.at(i, k) = 0.0;
    hs.push_back(std::move(h));
  }
  return {accumulate_q(hs, m), std::move(r)};
}

SpanBasis householder_span(const Tensor& vectors, double tol, std::size_t max_rank) {
  if (vectors.rank() != 2) {
    throw DimensionError("householder_span: rank-2 tensor required, got " + shape_string(vectors.shape()));
  }
  const std::size_t n = vectors.dim(0), m = vectors.dim(1);
  std::vector<Reflector> hs;
  std::size_t rank = 0;
  for (std::size_t j = 0; j < m && rank < std::min(n, max_rank); ++j) {
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = vectors.at(i, j);
    for (const auto& h : hs) apply_left_vector(h, x);
    const double residual = l2_norm(std::span<const double>(x).subspan(rank));
    if (residual <= tol) continue;
    hs.push_back(make_reflector(x.data() + rank, n - rank, rank));
    ++rank;
  }
  return {accumulate_q(hs, n), rank};
}

double default_null_tolerance(const Tensor& a) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) mx = std::max(mx, l2_norm(a.row(i)));
  return mx > 0.0 ? 1e-10 * mx : 1e-300;
}

Tensor null_space_basis(const Tensor& a, double tol) {
  if (a.rank() != 2) throw DimensionError("null_space_basis: rank-2 tensor required, got " + shape_string(a.shape()));
  if (!(tol > 0.0)) throw ConfigError("null_space_basis: tolerance must be positive");
  const std::size_t n = a.dim(1);
  // Rows of a are the columns of a^T; their span is the row space.
  const SpanBasis basis = householder_span(transpose(a), tol, n);
  const std::size_t d = n - basis.rank;
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = basis.q.at(i, basis.rank + j);
  return out;
}

Tensor null_space_basis(const Tensor& a) { return null_space_basis(a, default_null_tolerance(a)); }

RowNormalized row_normalize(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("row_normalize: rank-2 tensor required, got " + shape_string(a.shape()));
  RowNormalized out{a, std::vector<bool>(a.dim(0), false), false};
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    auto row = out.rows.row(i);
    const double norm = l2_norm(row);
    if (norm == 0.0) {
      out.zero_rows[i] = true;
      out.any_zero = true;
      continue;
    }
    for (double& v : row) v /= norm;
  }
  return out;
}

} // namespace repr
