#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "lilt/attention.hpp"
#include "lilt/instances.hpp"

namespace lilt {

/// Assumed spectral range of the data covariance: alpha I <= X X^T <= beta I.
struct SpectrumRange {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const {
    if (!(0.0 < alpha && alpha <= beta)) {
      throw std::invalid_argument("spectrum range: requires 0 < alpha <= beta");
    }
  }
  double kappa() const { return beta / alpha; }
};

enum class ChebyshevOrder {
  kNatural,      // roots in index order i = 0..L-1
  kInterleaved,  // large/small pairing, tames intermediate growth at large L
};

// The L roots of the degree-L Chebyshev polynomial affinely mapped into
// (alpha, beta): theta_i = (beta-alpha)/2 cos((2i+1) pi / (2L)) + (beta+alpha)/2.
inline std::vector<double> chebyshev_inverse_steps(SpectrumRange range, int loops,
                                                   ChebyshevOrder order = ChebyshevOrder::kNatural) {
  range.validate();
  if (loops < 1) {
    throw std::invalid_argument("chebyshev_inverse_steps: loops >= 1 required");
  }
  std::vector<double> theta(loops);
  const double mid = 0.5 * (range.beta + range.alpha);
  const double half = 0.5 * (range.beta - range.alpha);
  for (int i = 0; i < loops; ++i) {
    theta[i] = half * std::cos((2 * i + 1) * std::numbers::pi / (2.0 * loops)) + mid;
  }
  if (order == ChebyshevOrder::kInterleaved) {
    std::vector<double> mixed;
    mixed.reserve(loops);
    int lo = 0, hi = loops - 1;
    while (lo <= hi) {
      mixed.push_back(theta[lo++]);
      if (lo <= hi) {
        mixed.push_back(theta[hi--]);
      }
    }
    theta = std::move(mixed);
  }
  return theta;
}

/// Per-layer weights A^(i) = theta_i^{-1} I realizing the Chebyshev
/// iteration at dimension d; the residual after L layers is the scaled
/// Chebyshev polynomial of Sigma, small on the whole range [alpha, beta].
inline RestrictedWeights chebyshev_weights(SpectrumRange range, int loops, int d,
                                           ChebyshevOrder order = ChebyshevOrder::kNatural) {
  const std::vector<double> theta = chebyshev_inverse_steps(range, loops, order);
  std::vector<Matrix> layers;
  layers.reserve(theta.size());
  for (double t : theta) {
    layers.push_back((1.0 / t) * Matrix::Identity(d, d));
  }
  return RestrictedWeights::multilayer(std::move(layers));
}

/// Default depth to hit a worst-case residual eps on [alpha, beta]:
/// ceil(sqrt(beta/alpha) * ln(2/eps) / 2) + 1, from the envelope 2 q^L.
inline int chebyshev_depth_for(SpectrumRange range, double eps) {
  range.validate();
  if (!(eps > 0.0 && eps < 1.0)) {
    throw std::invalid_argument("chebyshev_depth_for: eps in (0,1) required");
  }
  return static_cast<int>(std::ceil(std::sqrt(range.kappa()) * std::log(2.0 / eps) / 2.0)) + 1;
}

/// Looped plain-gradient-descent weights: shared A = (2 beta)^{-1} I applied
/// for `loops` iterations. Residual bound (1 - alpha/(2 beta))^L on the range.
inline RestrictedWeights gd_weights(SpectrumRange range, int loops, int d) {
  range.validate();
  if (loops < 1) {
    throw std::invalid_argument("gd_weights: loops >= 1 required");
  }
  return RestrictedWeights::looped((0.5 / range.beta) * Matrix::Identity(d, d), loops);
}

struct NewtonSchulzResult {
  double prediction = 0.0;
  std::vector<double> residual_per_step;  // ||M_j Sigma - I||_2 for j = 0..L
  Matrix m_final;
};

/// Reference Newton-Schulz inverse iteration M_j = 2 M_{j-1} - M_{j-1} Sigma
/// M_{j-1} with M_0 = beta^{-1} I, which starts inside the contraction region
/// for any Sigma in the range. Converges quadratically; prediction is
/// x_q^T M_L X y.
inline NewtonSchulzResult newton_schulz_solve(const RegressionInstance& inst,
                                              SpectrumRange range, int steps) {
  range.validate();
  if (steps < 1) {
    throw std::invalid_argument("newton_schulz_solve: steps >= 1 required");
  }
  const int d = inst.d();
  const Matrix sigma = inst.covariance();
  const Matrix eye = Matrix::Identity(d, d);

  NewtonSchulzResult out;
  Matrix m = (1.0 / range.beta) * eye;
  double r = spectral_norm_sym(m * sigma - eye);
  if (r >= 1.0) {
    throw std::invalid_argument("initialization outside contraction region");
  }
  out.residual_per_step.push_back(r);
  for (int j = 0; j < steps; ++j) {
    m = 2.0 * m - m * sigma * m;
    out.residual_per_step.push_back(spectral_norm_sym(m * sigma - eye));
  }
  out.prediction = inst.x_q.dot(m * (inst.x * inst.y));
  out.m_final = std::move(m);
  return out;
}

}  // namespace lilt
