#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

#include "lilt/rng.hpp"

namespace lilt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class SingularCovarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Symmetric square root / inverse square root of an SPD matrix together with
// its spectral extremes. Everything downstream (instance sampling, the trace
// formula, projections) goes through this one factorization.
struct SpdFactors {
  Matrix sqrt;
  Matrix inv_sqrt;
  Matrix inverse;
  double min_eig = 0.0;
  double max_eig = 0.0;
};

// Eigenvalues below rel_tol * max_eig are treated as singular; all of the
// theory assumes a strictly positive lower spectral bound.
inline SpdFactors spd_factorize(const Matrix& sigma, double rel_tol = 1e-12) {
  if (sigma.rows() != sigma.cols()) {
    throw std::invalid_argument("spd_factorize: matrix must be square");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
  if (es.info() != Eigen::Success) {
    throw std::runtime_error("spd_factorize: eigendecomposition failed");
  }
  const Vector& lam = es.eigenvalues();
  const double max_eig = lam.maxCoeff();
  const double min_eig = lam.minCoeff();
  if (max_eig <= 0.0 || min_eig <= rel_tol * max_eig) {
    throw SingularCovarianceError("singular covariance");
  }
  const Matrix& v = es.eigenvectors();
  SpdFactors f;
  f.sqrt = v * lam.cwiseSqrt().asDiagonal() * v.transpose();
  f.inv_sqrt = v * lam.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
  f.inverse = v * lam.cwiseInverse().asDiagonal() * v.transpose();
  f.min_eig = min_eig;
  f.max_eig = max_eig;
  return f;
}

inline SpdFactors scalar_spd_factors(int d, double s) {
  if (s <= 0.0) {
    throw SingularCovarianceError("singular covariance");
  }
  SpdFactors f;
  f.sqrt = std::sqrt(s) * Matrix::Identity(d, d);
  f.inv_sqrt = (1.0 / std::sqrt(s)) * Matrix::Identity(d, d);
  f.inverse = (1.0 / s) * Matrix::Identity(d, d);
  f.min_eig = s;
  f.max_eig = s;
  return f;
}

// Spectral norm of a symmetric matrix via its eigenvalues.
inline double spectral_norm_sym(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline Matrix symmetric_part(const Matrix& m) {
  return 0.5 * (m + m.transpose());
}

// d x n matrix R with orthonormal rows (R R^T = I_d), from the thin QR of a
// seeded Gaussian n x d matrix. Requires n >= d.
inline Matrix random_orthonormal_rows(int d, int n, Rng& rng) {
  if (n < d) {
    throw std::invalid_argument("random_orthonormal_rows: requires n >= d");
  }
  Matrix g(n, d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < n; ++i) {
      g(i, j) = rng.gaussian();
    }
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, d);
  return q.transpose();
}

inline Vector random_gaussian_vector(int d, Rng& rng) {
  Vector v(d);
  for (int i = 0; i < d; ++i) {
    v(i) = rng.gaussian();
  }
  return v;
}

inline Vector random_unit_vector(int d, Rng& rng) {
  Vector v = random_gaussian_vector(d, rng);
  double nrm = v.norm();
  while (nrm < 1e-12) {
    v = random_gaussian_vector(d, rng);
    nrm = v.norm();
  }
  return v / nrm;
}

inline Matrix random_orthogonal(int d, Rng& rng) {
  Matrix g(d, d);
  for (int j = 0; j < d; ++j) {
    for (int i = 0; i < d; ++i) {
      g(i, j) = rng.gaussian();
    }
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(d, d);
}

// Random SPD matrix with eigenvalues drawn uniformly from [lo, hi] in a
// random orthogonal basis. With pin_extremes, one eigenvalue sits at each
// endpoint so the spectrum spans the whole interval.
inline Matrix random_spd(int d, double lo, double hi, Rng& rng,
                         bool pin_extremes = false) {
  if (!(0.0 < lo && lo <= hi)) {
    throw std::invalid_argument("random_spd: requires 0 < lo <= hi");
  }
  Vector lam(d);
  for (int i = 0; i < d; ++i) {
    lam(i) = rng.uniform(lo, hi);
  }
  if (pin_extremes && d >= 2) {
    lam(0) = lo;
    lam(d - 1) = hi;
  }
  const Matrix q = random_orthogonal(d, rng);
  return q * lam.asDiagonal() * q.transpose();
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace lilt
