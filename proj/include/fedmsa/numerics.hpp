#pragma once

// Dense vector / matrix storage and the handful of spectral routines the rest
// of the library needs (spectral norm, symmetric eigenvalues, Cholesky).
// Dimensions in this project stay below ~100, so everything is dense and
// straightforward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedmsa/errors.hpp"

namespace fedmsa {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  static Vector ones(std::size_t n) { return Vector(n, 1.0); }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  Vector& operator+=(const Vector& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Vector& operator-=(const Vector& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Vector& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  Vector& operator/=(double s) {
    for (auto& v : data_) v /= s;
    return *this;
  }

  // this += s * o
  Vector& add_scaled(double s, const Vector& o) {
    require_same(o, "add_scaled");
    for (std::size_t i = 0; i < size(); ++i) data_[i] += s * o.data_[i];
    return *this;
  }

  bool operator==(const Vector&) const = default;

 private:
  void require_same(const Vector& o, const char* op) const {
    if (o.size() != size())
      throw ShapeError(std::string("vector ") + op + ": dimension " +
                       std::to_string(size()) + " vs " +
                       std::to_string(o.size()));
  }

  std::vector<double> data_;
};

inline Vector operator+(Vector a, const Vector& b) { return a += b; }
inline Vector operator-(Vector a, const Vector& b) { return a -= b; }
inline Vector operator*(Vector a, double s) { return a *= s; }
inline Vector operator*(double s, Vector a) { return a *= s; }
inline Vector operator/(Vector a, double s) { return a /= s; }
inline Vector operator-(Vector a) { return a *= -1.0; }

inline double dot(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(const Vector& a) { return dot(a, a); }
inline double norm(const Vector& a) { return std::sqrt(squared_norm(a)); }

inline bool all_finite(const Vector& a) {
  return std::all_of(a.begin(), a.end(),
                     [](double v) { return std::isfinite(v); });
}

inline Vector concat(const Vector& a, const Vector& b) {
  std::vector<double> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return Vector(std::move(out));
}

inline Vector slice(const Vector& a, std::size_t offset, std::size_t count) {
  if (offset + count > a.size()) throw ShapeError("slice out of range");
  return Vector(std::vector<double>(a.begin() + static_cast<std::ptrdiff_t>(offset),
                                    a.begin() + static_cast<std::ptrdiff_t>(offset + count)));
}

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(const Vector& d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }
  static Matrix outer(const Vector& u, const Vector& v) {
    Matrix m(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j) m(i, j) = u[i] * v[j];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  const std::vector<double>& values() const noexcept { return data_; }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  double trace() const {
    if (!square()) throw ShapeError("trace of non-square matrix");
    double s = 0.0;
    for (std::size_t i = 0; i < rows_; ++i) s += (*this)(i, i);
    return s;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  Vector column(std::size_t j) const {
    Vector c(rows_);
    for (std::size_t i = 0; i < rows_; ++i) c[i] = (*this)(i, j);
    return c;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  Matrix& add_scaled(double s, const Matrix& o) {
    require_same(o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    return *this;
  }

  bool operator==(const Matrix&) const = default;

 private:
  void require_same(const Matrix& o, const char* op) const {
    if (o.rows_ != rows_ || o.cols_ != cols_)
      throw ShapeError(std::string("matrix ") + op + ": " + std::to_string(rows_) +
                       "x" + std::to_string(cols_) + " vs " +
                       std::to_string(o.rows_) + "x" + std::to_string(o.cols_));
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Vector operator*(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size())
    throw ShapeError("matvec: " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " times " +
                     std::to_string(x.size()));
  Vector y(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

// a^T x without forming the transpose.
inline Vector transpose_times(const Matrix& a, const Vector& x) {
  if (a.rows() != x.size()) throw ShapeError("transpose_times: dimension mismatch");
  Vector y(a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) y[j] += a(i, j) * x[i];
  return y;
}

inline Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

inline bool is_symmetric(const Matrix& a) {
  if (!a.square()) return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-12 * std::max(1.0, std::abs(a(i, j))))
        return false;
  return true;
}

inline void require_symmetric(const Matrix& a, const char* who) {
  if (!a.square())
    throw ShapeError(std::string(who) + ": matrix is not square");
  if (!is_symmetric(a))
    throw ShapeError(std::string(who) + ": matrix is not symmetric");
}

// Exact (A + A^T)/2, used to scrub round-off asymmetry from products.
inline Matrix symmetrized(const Matrix& a) {
  if (!a.square()) throw ShapeError("symmetrized: matrix is not square");
  Matrix s(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s(i, j) = 0.5 * (a(i, j) + a(j, i));
  return s;
}

namespace detail {

// Power iteration on a symmetric PSD matrix from a fixed start vector.
// Stops once the eigen-residual ||M v - lambda v|| drops below tol * lambda.
inline double power_iteration_psd(const Matrix& m, Vector v, double tol) {
  constexpr int kMaxIterations = 10000;
  v /= norm(v);
  for (int it = 0; it < kMaxIterations; ++it) {
    Vector w = m * v;
    const double wn = norm(w);
    if (wn == 0.0) return 0.0;
    const double lambda = dot(v, w);
    Vector residual = w;
    residual.add_scaled(-lambda, v);
    if (norm(residual) <= tol * std::abs(lambda)) return lambda;
    v = w / wn;
  }
  throw ConvergenceError("power iteration did not converge in 10000 iterations");
}

}  // namespace detail

// Largest singular value of a square matrix via power iteration on A^T A.
// Starts from the all-ones vector; a second fixed start vector (alternating
// signs, increasing magnitude) covers the case where all-ones is orthogonal to
// the top singular direction.
inline double spectral_norm(const Matrix& a, double tol = 1e-10) {
  if (!a.square()) throw ShapeError("spectral_norm: matrix is not square");
  if (!(tol > 0.0)) throw Error("spectral_norm: tol must be positive");
  const std::size_t n = a.rows();
  if (n == 0) return 0.0;
  const Matrix ata = symmetrized(a.transpose() * a);
  double lambda = detail::power_iteration_psd(ata, Vector::ones(n), tol);
  Vector fallback(n);
  for (std::size_t i = 0; i < n; ++i)
    fallback[i] = (i % 2 == 0 ? 1.0 : -1.0) * (1.0 + static_cast<double>(i) / static_cast<double>(n));
  lambda = std::max(lambda, detail::power_iteration_psd(ata, fallback, tol));
  return std::sqrt(std::max(lambda, 0.0));
}

struct SymmetricEigen {
  Vector values;   // ascending
  Matrix vectors;  // column j pairs with values[j]
};

// Cyclic Jacobi rotations; deterministic sweep order.
inline SymmetricEigen symmetric_eigen(const Matrix& input, double tol = 1e-12) {
  require_symmetric(input, "symmetric_eigen");
  const std::size_t n = input.rows();
  Matrix a = symmetrized(input);
  Matrix v = Matrix::identity(n);
  const double scale = std::max(1.0, a.frobenius_norm());
  constexpr int kMaxSweeps = 100;
  int sweep = 0;
  for (; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= std::min(tol, 1e-14) * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
  }
  if (sweep == kMaxSweeps)
    throw ConvergenceError("symmetric_eigen: Jacobi sweeps did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymmetricEigen out{Vector(n), Matrix(n, n)};
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = v(k, order[j]);
  }
  return out;
}

inline double min_eigenvalue_symmetric(const Matrix& a, double tol = 1e-10) {
  require_symmetric(a, "min_eigenvalue_symmetric");
  if (a.rows() == 0) throw ShapeError("min_eigenvalue_symmetric: empty matrix");
  return symmetric_eigen(a, std::min(tol, 1e-12)).values[0];
}

inline double max_eigenvalue_symmetric(const Matrix& a, double tol = 1e-10) {
  require_symmetric(a, "max_eigenvalue_symmetric");
  if (a.rows() == 0) throw ShapeError("max_eigenvalue_symmetric: empty matrix");
  const auto eig = symmetric_eigen(a, std::min(tol, 1e-12));
  return eig.values[eig.values.size() - 1];
}

// Rebuilds V diag(values) V^T.
// Largest singular value of any (possibly rectangular) matrix from the full
// symmetric eigen-decomposition of A^T A. Slower than spectral_norm but has no
// convergence failure mode; used for instance metadata.
inline double operator_norm(const Matrix& a) {
  if (a.rows() == 0 || a.cols() == 0) return 0.0;
  const auto eig = symmetric_eigen(symmetrized(a.transpose() * a));
  return std::sqrt(std::max(eig.values[eig.values.size() - 1], 0.0));
}

inline Matrix from_eigen(const Matrix& vectors, const Vector& values) {
  const std::size_t n = values.size();
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = vectors(i, k) * values[k];
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * vectors(j, k);
    }
  return symmetrized(out);
}

// Lower-triangular Cholesky factor.
inline Matrix cholesky(const Matrix& a) {
  require_symmetric(a, "cholesky");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0))
      throw DefinitenessError("cholesky: non-positive pivot " + std::to_string(d) +
                              " at column " + std::to_string(j));
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

inline Vector cholesky_solve(const Matrix& l, const Vector& b) {
  const std::size_t n = l.rows();
  if (b.size() != n) throw ShapeError("cholesky_solve: dimension mismatch");
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  Vector x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

inline Vector solve_spd(const Matrix& a, const Vector& b) {
  if (!a.square() || a.rows() != b.size())
    throw ShapeError("solve_spd: dimension mismatch");
  return cholesky_solve(cholesky(a), b);
}

}  // namespace fedmsa
