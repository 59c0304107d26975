#pragma once

#include <cmath>
#include <random>
#include <stdexcept>

#include "bmfact/rng.hpp"
#include "bmfact/types.hpp"

namespace bmfact {

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// Cholesky factor of a symmetric positive definite tridiagonal matrix,
/// stored as the bidiagonal L with A = L L'.
class TridiagCholesky {
 public:
  // diag has length M, sub length M-1 (first sub-diagonal).
  static TridiagCholesky factor(const Vector& diag, const Vector& sub) {
    const Index m = diag.size();
    if (m < 1 || sub.size() != m - 1)
      throw std::invalid_argument("tridiag: inconsistent band lengths");
    TridiagCholesky c;
    c.l_diag_.resize(m);
    c.l_sub_.resize(m - 1);
    double prev = diag(0);
    if (!(prev > 0.0)) throw std::runtime_error("tridiag: matrix not positive definite");
    c.l_diag_(0) = std::sqrt(prev);
    for (Index k = 1; k < m; ++k) {
      c.l_sub_(k - 1) = sub(k - 1) / c.l_diag_(k - 1);
      const double v = diag(k) - c.l_sub_(k - 1) * c.l_sub_(k - 1);
      if (!(v > 0.0)) throw std::runtime_error("tridiag: matrix not positive definite");
      c.l_diag_(k) = std::sqrt(v);
    }
    return c;
  }

  Index size() const { return l_diag_.size(); }

  // Solves A x = b.
  Vector solve(const Vector& b) const { return solve_lt(solve_l(b)); }

  // Solves L x = b (forward substitution).
  Vector solve_l(const Vector& b) const {
    const Index m = size();
    Vector x(m);
    x(0) = b(0) / l_diag_(0);
    for (Index k = 1; k < m; ++k) x(k) = (b(k) - l_sub_(k - 1) * x(k - 1)) / l_diag_(k);
    return x;
  }

  // Solves L' x = b (back substitution).
  Vector solve_lt(const Vector& b) const {
    const Index m = size();
    Vector x(m);
    x(m - 1) = b(m - 1) / l_diag_(m - 1);
    for (Index k = m - 2; k >= 0; --k) x(k) = (b(k) - l_sub_(k) * x(k + 1)) / l_diag_(k);
    return x;
  }

 private:
  Vector l_diag_, l_sub_;
};

/// Gaussian in canonical form with tridiagonal precision: density
/// proportional to exp(-f' P f / 2 + f' b). Sampling and the mean use the
/// banded factorization; covariance() is a dense helper for verification.
class TridiagGaussian {
 public:
  TridiagGaussian(Vector prec_diag, Vector prec_sub, Vector canonical)
      : prec_diag_(std::move(prec_diag)),
        prec_sub_(std::move(prec_sub)),
        canonical_(std::move(canonical)),
        chol_(TridiagCholesky::factor(prec_diag_, prec_sub_)) {}

  Index size() const { return prec_diag_.size(); }

  Vector mean() const { return chol_.solve(canonical_); }

  Vector sample(Rng& rng) const {
    std::normal_distribution<double> nd;
    Vector xi(size());
    for (Index k = 0; k < size(); ++k) xi(k) = nd(rng);
    return mean() + chol_.solve_lt(xi);
  }

  Matrix precision_dense() const {
    const Index m = size();
    Matrix p = Matrix::Zero(m, m);
    for (Index k = 0; k < m; ++k) p(k, k) = prec_diag_(k);
    for (Index k = 0; k + 1 < m; ++k) {
      p(k, k + 1) = prec_sub_(k);
      p(k + 1, k) = prec_sub_(k);
    }
    return p;
  }

  Matrix covariance() const {
    const Index m = size();
    Matrix cov(m, m);
    for (Index k = 0; k < m; ++k) cov.col(k) = chol_.solve(Vector::Unit(m, k));
    return 0.5 * (cov + cov.transpose());
  }

 private:
  Vector prec_diag_, prec_sub_, canonical_;
  TridiagCholesky chol_;
};

/// Gaussian in canonical form with dense SPD precision.
class DenseGaussian {
 public:
  DenseGaussian(Matrix precision, Vector canonical)
      : precision_(std::move(precision)), canonical_(std::move(canonical)) {
    llt_.compute(precision_);
    if (llt_.info() != Eigen::Success)
      throw std::runtime_error("gaussian: precision not positive definite");
  }

  Index size() const { return canonical_.size(); }

  Vector mean() const { return llt_.solve(canonical_); }

  Matrix covariance() const {
    Matrix cov = llt_.solve(Matrix::Identity(size(), size()));
    return 0.5 * (cov + cov.transpose());
  }

  Vector sample(Rng& rng) const {
    std::normal_distribution<double> nd;
    Vector xi(size());
    for (Index k = 0; k < size(); ++k) xi(k) = nd(rng);
    // precision = L L': mean + L^{-T} xi has covariance precision^{-1}.
    return mean() + llt_.matrixU().solve(xi);
  }

  const Matrix& precision() const { return precision_; }

 private:
  Matrix precision_;
  Vector canonical_;
  Eigen::LLT<Matrix> llt_;
};

}  // namespace bmfact
