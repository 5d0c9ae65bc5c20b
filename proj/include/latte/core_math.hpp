#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "latte/errors.hpp"

namespace latte {

/// A point in the shared image/text embedding space. Stored unnormalized.
using Vector = std::vector<double>;

/// Dense row-major matrix. Rows are views so embedding tables can be read
/// without copies.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void set_row(std::size_t r, std::span<const double> values) {
    if (values.size() != cols_) throw ConfigError("row width mismatch");
    for (std::size_t c = 0; c < cols_; ++c) (*this)(r, c) = values[c];
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Per-class cosine similarities of one query against a prototype set.
using SimilarityRow = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_nondegenerate(std::span<const double> v, const std::string& where) {
  if (v.empty() || !all_finite(v)) throw DegenerateEmbedding(where + " (empty or non-finite)");
  if (!(norm(v) > 0.0)) throw DegenerateEmbedding(where + " (zero norm)");
}

inline Vector l2_normalize(std::span<const double> v) {
  require_nondegenerate(v, "l2_normalize");
  const double n = norm(v);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  require_nondegenerate(a, "cosine lhs");
  require_nondegenerate(b, "cosine rhs");
  const double c = dot(a, b) / (norm(a) * norm(b));
  // Rounding can push |c| a hair past 1 for parallel vectors.
  return c > 1.0 ? 1.0 : (c < -1.0 ? -1.0 : c);
}

/// Cosine of `query` against every row of `prototypes`.
inline SimilarityRow bank_similarities(std::span<const double> query, const Matrix& prototypes) {
  require_nondegenerate(query, "similarity query");
  SimilarityRow sims(prototypes.rows());
  for (std::size_t c = 0; c < prototypes.rows(); ++c) {
    const auto p = prototypes.row(c);
    require_nondegenerate(p, "prototype " + std::to_string(c));
    sims[c] = cosine(query, p);
  }
  return sims;
}

/// Index of the largest entry; the lowest index wins ties.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

/// Backpropagates a gradient through y = x / ||x||.
/// Given dL/dy and the normalized y, returns dL/dx.
inline Vector normalize_backward(std::span<const double> y, double x_norm,
                                 std::span<const double> grad_y) {
  const double proj = dot(y, grad_y);
  Vector gx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) gx[i] = (grad_y[i] - y[i] * proj) / x_norm;
  return gx;
}

}  // namespace latte
