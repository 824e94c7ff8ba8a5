#include <cmath>

#include <gtest/gtest.h>

#include "fedmsa/numerics.hpp"
#include "fedmsa/rng.hpp"

using namespace fedmsa;

namespace {

Matrix random_matrix(Stream& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

Matrix random_spd(Stream& rng, std::size_t n) {
  const Matrix g = random_matrix(rng, n, n);
  Matrix a = g.transpose() * g;
  for (std::size_t i = 0; i < n; ++i) a(i, i) += 0.1;
  return symmetrized(a);
}

Vector random_unit(Stream& rng, std::size_t n) {
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal();
  return v / norm(v);
}

}  // namespace

TEST(Vector, ArithmeticRequiresEqualDimensions) {
  Vector a{1.0, 2.0};
  Vector b{1.0, 2.0, 3.0};
  EXPECT_THROW(a += b, ShapeError);
  EXPECT_THROW((void)dot(a, b), ShapeError);
  EXPECT_EQ(a + Vector({3.0, 4.0}), (Vector{4.0, 6.0}));
  EXPECT_DOUBLE_EQ(norm(Vector{3.0, 4.0}), 5.0);
}

TEST(Matrix, ProductAndTransposeShapes) {
  Matrix a{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(a.transpose().rows(), 3u);
  const Vector y = a * Vector{1, 1, 1};
  EXPECT_EQ(y, (Vector{6, 15}));
  EXPECT_EQ(transpose_times(a, Vector{1, 1}), (Vector{5, 7, 9}));
  EXPECT_THROW((void)(a * Vector{1, 1}), ShapeError);
  EXPECT_THROW((void)(a * a), ShapeError);
}

TEST(SpectralNorm, Identity) { EXPECT_NEAR(spectral_norm(Matrix::identity(3), 1e-10), 1.0, 1e-10); }

TEST(SpectralNorm, DiagonalWithNegativeEntry) {
  EXPECT_NEAR(spectral_norm(Matrix{{2, 0}, {0, -5}}, 1e-10), 5.0, 5e-10);
}

TEST(SpectralNorm, NilpotentJordanBlock) {
  // A^T A = diag(0, 1), so sigma_max = 1.
  EXPECT_NEAR(spectral_norm(Matrix{{0, 1}, {0, 0}}, 1e-8), 1.0, 1e-8);
}

TEST(SpectralNorm, RejectsNonSquare) {
  EXPECT_THROW((void)spectral_norm(Matrix(2, 3), 1e-10), ShapeError);
}

TEST(SpectralNorm, DominatesRandomRayleighRatios) {
  Stream rng(7, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = random_matrix(rng, 4, 4);
    const double s = spectral_norm(a, 1e-10);
    for (int i = 0; i < 100; ++i) {
      const Vector v = random_unit(rng, 4);
      EXPECT_LE(norm(a * v), s * (1 + 1e-9));
    }
  }
}

TEST(OperatorNorm, MatchesSpectralNormAndHandlesRectangular) {
  Stream rng(3, 1);
  const Matrix a = random_matrix(rng, 5, 5);
  EXPECT_NEAR(operator_norm(a), spectral_norm(a, 1e-12), 1e-8);
  // [[3, 0, 0], [0, 4, 0]] has singular values 3 and 4.
  EXPECT_NEAR(operator_norm(Matrix{{3, 0, 0}, {0, 4, 0}}), 4.0, 1e-12);
}

TEST(MinEigenvalue, Examples) {
  EXPECT_NEAR(min_eigenvalue_symmetric(Matrix::identity(2)), 1.0, 1e-10);
  EXPECT_NEAR(min_eigenvalue_symmetric(Matrix{{3, 0}, {0, -2}}), -2.0, 1e-10);
  // (a + c - sqrt((a - c)^2 + 4 b^2)) / 2 with a = c = 2, b = 1.
  const double closed = (4.0 - std::sqrt(0.0 + 4.0)) / 2.0;
  EXPECT_NEAR(min_eigenvalue_symmetric(Matrix{{2, 1}, {1, 2}}), closed, 1e-10);
}

TEST(MinEigenvalue, RejectsAsymmetricInput) {
  EXPECT_THROW((void)min_eigenvalue_symmetric(Matrix{{1, 2}, {0, 1}}), ShapeError);
}

TEST(MinEigenvalue, BelowRandomRayleighQuotients) {
  Stream rng(11, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix g = random_matrix(rng, 5, 5);
    const Matrix a = symmetrized(g + g.transpose());
    const double lo = min_eigenvalue_symmetric(a);
    for (int i = 0; i < 100; ++i) {
      const Vector v = random_unit(rng, 5);
      EXPECT_LE(lo, dot(v, a * v) + 1e-10);
    }
  }
}

TEST(SymmetricEigen, ReconstructsMatrix) {
  Stream rng(5, 1);
  const Matrix a = random_spd(rng, 6);
  const auto eig = symmetric_eigen(a);
  const Matrix back = from_eigen(eig.vectors, eig.values);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(back(i, j), a(i, j), 1e-10);
  for (std::size_t i = 1; i < 6; ++i) EXPECT_LE(eig.values[i - 1], eig.values[i]);
}

TEST(SolveSpd, Examples) {
  const Vector x1 = solve_spd(Matrix{{2, 0}, {0, 2}}, Vector{4, 2});
  EXPECT_NEAR(x1[0], 2.0, 1e-14);
  EXPECT_NEAR(x1[1], 1.0, 1e-14);
  const Vector x2 = solve_spd(Matrix{{1, 0}, {0, 4}}, Vector{1, 8});
  EXPECT_NEAR(x2[0], 1.0, 1e-14);
  EXPECT_NEAR(x2[1], 2.0, 1e-14);
  // Adjugate: inverse of [[4,1],[1,3]] is [[3,-1],[-1,4]] / 11.
  const Vector x3 = solve_spd(Matrix{{4, 1}, {1, 3}}, Vector{1, 2});
  EXPECT_NEAR(x3[0], (3.0 * 1 - 1.0 * 2) / 11.0, 1e-14);
  EXPECT_NEAR(x3[1], (-1.0 * 1 + 4.0 * 2) / 11.0, 1e-14);
}

TEST(SolveSpd, RejectsIndefinite) {
  EXPECT_THROW((void)solve_spd(Matrix{{1, 0}, {0, -1}}, Vector{1, 1}), DefinitenessError);
}

TEST(SolveSpd, ResidualPropertyOnRandomSystems) {
  Stream rng(13, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_index(8));
    const Matrix a = random_spd(rng, n);
    Vector b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = rng.normal();
    const Vector x = solve_spd(a, b);
    EXPECT_LE(norm(a * x - b), 1e-10 * norm(b));
  }
}
