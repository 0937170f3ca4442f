#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

namespace lilt {

struct QuadratureRule {
  std::vector<double> nodes;    // in (-1, 1)
  std::vector<double> weights;  // sum to 2
};

// Gauss-Legendre rule via Golub-Welsch: eigenvalues of the Jacobi matrix are
// the nodes, weights are 2 * (first eigenvector component)^2. Exact for
// polynomials of degree <= 2m - 1.
inline QuadratureRule gauss_legendre(int m) {
  if (m < 1) {
    throw std::invalid_argument("gauss_legendre: m >= 1 required");
  }
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(m, m);
  for (int k = 1; k < m; ++k) {
    const double b = k / std::sqrt(4.0 * k * k - 1.0);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  QuadratureRule rule;
  rule.nodes.resize(m);
  rule.weights.resize(m);
  for (int i = 0; i < m; ++i) {
    rule.nodes[i] = es.eigenvalues()(i);
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = 2.0 * v0 * v0;
  }
  return rule;
}

}  // namespace lilt
