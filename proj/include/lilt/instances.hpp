#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lilt/linalg.hpp"
#include "lilt/quadrature.hpp"
#include "lilt/rng.hpp"

namespace lilt {

/// A realizable linear-regression problem: data matrix X (d x n) with the
/// observations as columns, regressor w*, labels y = X^T w*, and a query
/// point x_q. The data covariance is Sigma = X X^T.
struct RegressionInstance {
  Matrix x;       // d x n
  Vector w_star;  // d
  Vector y;       // n
  Vector x_q;     // d

  int d() const { return static_cast<int>(x.rows()); }
  int n() const { return static_cast<int>(x.cols()); }
  Matrix covariance() const { return x * x.transpose(); }
  double target() const { return w_star.dot(x_q); }

  // Realizability up to relative 1e-10; d >= 1 and n >= d so the covariance
  // can be full rank.
  void validate() const {
    if (d() < 1 || n() < d()) {
      throw std::invalid_argument("instance: requires d >= 1 and n >= d");
    }
    if (w_star.size() != d() || x_q.size() != d() || y.size() != n()) {
      throw std::invalid_argument("instance: dimension mismatch");
    }
    const double resid = (y - x.transpose() * w_star).norm();
    if (resid > 1e-10 * std::max(1.0, y.norm())) {
      throw std::invalid_argument("instance: labels are not realizable");
    }
  }
};

/// The (d+1) x (n+1) prompt  [ X  x_q ; y^T  0 ]  fed to the attention stack.
struct PromptMatrix {
  Matrix z;

  int d() const { return static_cast<int>(z.rows()) - 1; }
  int n() const { return static_cast<int>(z.cols()) - 1; }
};

inline PromptMatrix assemble_prompt(const RegressionInstance& inst) {
  inst.validate();
  const int d = inst.d();
  const int n = inst.n();
  Matrix z(d + 1, n + 1);
  z.topLeftCorner(d, n) = inst.x;
  z.topRightCorner(d, 1) = inst.x_q;
  z.bottomLeftCorner(1, n) = inst.y.transpose();
  z(d, n) = 0.0;
  return PromptMatrix{std::move(z)};
}

inline RegressionInstance extract_instance(const PromptMatrix& prompt,
                                           const Vector& w_star) {
  const int d = prompt.d();
  const int n = prompt.n();
  RegressionInstance inst;
  inst.x = prompt.z.topLeftCorner(d, n);
  inst.x_q = prompt.z.topRightCorner(d, 1);
  inst.y = prompt.z.bottomLeftCorner(1, n).transpose();
  inst.w_star = w_star;
  return inst;
}

enum class DistKind { kFixed, kPointMassMixture, kScalarUniform, kWindowedMixture };

struct SigmaComponent {
  Matrix sigma;
  double weight = 1.0;
  SpdFactors factors;
};

struct SigmaSample {
  Matrix sigma;
  SpdFactors factors;
};

/// A sampleable law over SPD covariance matrices with eigenvalues confined to
/// [alpha, beta]. Point-mass mixtures and fixed matrices carry explicit
/// components (with cached factorizations); the scalar families draw
/// Sigma = s I_d with s from a uniform law or a union of windows around
/// given centers.
class CovarianceDistribution {
 public:
  static CovarianceDistribution fixed(Matrix sigma) {
    return point_mass_mixture({{std::move(sigma), 1.0}}, DistKind::kFixed);
  }

  static CovarianceDistribution point_mass_mixture(
      std::vector<std::pair<Matrix, double>> comps) {
    return point_mass_mixture(std::move(comps), DistKind::kPointMassMixture);
  }

  static CovarianceDistribution scalar_uniform(int d, double lo, double hi) {
    if (d < 1 || !(0.0 < lo && lo <= hi)) {
      throw std::invalid_argument("scalar_uniform: requires d >= 1, 0 < lo <= hi");
    }
    CovarianceDistribution dist;
    dist.kind_ = DistKind::kScalarUniform;
    dist.d_ = d;
    dist.lo_ = lo;
    dist.hi_ = hi;
    dist.alpha_ = lo;
    dist.beta_ = hi;
    return dist;
  }

  // Uniform over the union of windows [c_i - w, c_i + w]: first a center
  // uniformly at random, then a uniform offset.
  static CovarianceDistribution windowed_mixture(int d, std::vector<double> centers,
                                                 double window) {
    if (d < 1 || centers.empty() || window < 0.0) {
      throw std::invalid_argument("windowed_mixture: bad parameters");
    }
    double lo = centers[0] - window;
    double hi = centers[0] + window;
    for (double c : centers) {
      lo = std::min(lo, c - window);
      hi = std::max(hi, c + window);
    }
    if (lo <= 0.0) {
      throw std::invalid_argument("windowed_mixture: support must stay positive");
    }
    CovarianceDistribution dist;
    dist.kind_ = DistKind::kWindowedMixture;
    dist.d_ = d;
    dist.centers_ = std::move(centers);
    dist.window_ = window;
    dist.alpha_ = lo;
    dist.beta_ = hi;
    return dist;
  }

  DistKind kind() const { return kind_; }
  int dimension() const { return d_; }
  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  double scalar_lo() const { return lo_; }
  double scalar_hi() const { return hi_; }
  double window() const { return window_; }
  const std::vector<double>& centers() const { return centers_; }

  // True when the law is a finite set of point masses, i.e. expectations are
  // exact finite sums (trace-formula territory).
  bool discrete() const {
    return kind_ == DistKind::kFixed || kind_ == DistKind::kPointMassMixture;
  }

  const std::vector<SigmaComponent>& components() const {
    if (!discrete()) {
      throw std::invalid_argument("components: distribution is not a point mass mixture");
    }
    return components_;
  }

  SigmaSample sample(Rng& rng) const {
    switch (kind_) {
      case DistKind::kFixed:
        return {components_[0].sigma, components_[0].factors};
      case DistKind::kPointMassMixture: {
        const double r = rng.uniform();
        double acc = 0.0;
        for (const auto& c : components_) {
          acc += c.weight;
          if (r < acc) {
            return {c.sigma, c.factors};
          }
        }
        return {components_.back().sigma, components_.back().factors};
      }
      case DistKind::kScalarUniform: {
        const double s = rng.uniform(lo_, hi_);
        return {s * Matrix::Identity(d_, d_), scalar_spd_factors(d_, s)};
      }
      case DistKind::kWindowedMixture: {
        const double c = centers_[rng.integer(centers_.size())];
        const double s = c + rng.uniform(-window_, window_);
        return {s * Matrix::Identity(d_, d_), scalar_spd_factors(d_, s)};
      }
    }
    throw std::logic_error("unreachable");
  }

  /// Exact point-mass rendering. Discrete laws pass through; the scalar
  /// families are replaced by Gauss-Legendre nodes (at least min_nodes per
  /// interval), which is an exact quadrature for any polynomial integrand of
  /// degree < 2 * min_nodes -- the per-depth trace losses are polynomials in
  /// s of degree 2L, so min_nodes >= L + 1 renders them exactly.
  CovarianceDistribution discretized(int min_nodes) const;

  bool matches(const CovarianceDistribution& other) const {
    if (kind_ != other.kind_ || d_ != other.d_) return false;
    if (discrete()) {
      if (components_.size() != other.components_.size()) return false;
      for (std::size_t i = 0; i < components_.size(); ++i) {
        if (components_[i].weight != other.components_[i].weight) return false;
        if (components_[i].sigma != other.components_[i].sigma) return false;
      }
      return true;
    }
    return lo_ == other.lo_ && hi_ == other.hi_ && window_ == other.window_ &&
           centers_ == other.centers_;
  }

 private:
  CovarianceDistribution() = default;

  static CovarianceDistribution point_mass_mixture(
      std::vector<std::pair<Matrix, double>> comps, DistKind kind) {
    if (comps.empty()) {
      throw std::invalid_argument("point_mass_mixture: needs at least one component");
    }
    CovarianceDistribution dist;
    dist.kind_ = kind;
    dist.d_ = static_cast<int>(comps[0].first.rows());
    double total = 0.0;
    double alpha = std::numeric_limits<double>::infinity();
    double beta = 0.0;
    for (auto& [sigma, weight] : comps) {
      if (sigma.rows() != dist.d_ || sigma.cols() != dist.d_) {
        throw std::invalid_argument("point_mass_mixture: dimension mismatch");
      }
      if (weight < 0.0) {
        throw std::invalid_argument("point_mass_mixture: negative weight");
      }
      if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() >
          1e-9 * std::max(1.0, sigma.cwiseAbs().maxCoeff())) {
        throw std::invalid_argument("point_mass_mixture: component not symmetric");
      }
      SigmaComponent comp;
      comp.sigma = std::move(sigma);
      comp.weight = weight;
      comp.factors = spd_factorize(comp.sigma);
      alpha = std::min(alpha, comp.factors.min_eig);
      beta = std::max(beta, comp.factors.max_eig);
      total += weight;
      dist.components_.push_back(std::move(comp));
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw std::invalid_argument("point_mass_mixture: weights must sum to 1");
    }
    dist.alpha_ = alpha;
    dist.beta_ = beta;
    return dist;
  }

  DistKind kind_ = DistKind::kFixed;
  int d_ = 0;
  double alpha_ = 0.0;
  double beta_ = 0.0;
  std::vector<SigmaComponent> components_;  // discrete kinds
  double lo_ = 0.0, hi_ = 0.0;              // scalar_uniform
  std::vector<double> centers_;             // windowed_mixture
  double window_ = 0.0;
};

inline CovarianceDistribution CovarianceDistribution::discretized(int min_nodes) const {
  if (discrete()) {
    return *this;
  }
  if (min_nodes < 1) {
    throw std::invalid_argument("discretized: min_nodes >= 1 required");
  }
  std::vector<std::pair<Matrix, double>> comps;
  const Matrix eye = Matrix::Identity(d_, d_);
  if (kind_ == DistKind::kScalarUniform) {
    const QuadratureRule rule = gauss_legendre(min_nodes);
    const double mid = 0.5 * (lo_ + hi_);
    const double half = 0.5 * (hi_ - lo_);
    if (half == 0.0) {
      comps.emplace_back(lo_ * eye, 1.0);
    } else {
      for (int i = 0; i < min_nodes; ++i) {
        comps.emplace_back((mid + half * rule.nodes[i]) * eye, 0.5 * rule.weights[i]);
      }
    }
  } else {  // windowed mixture
    const double per_center = 1.0 / static_cast<double>(centers_.size());
    if (window_ == 0.0) {
      for (double c : centers_) {
        comps.emplace_back(c * eye, per_center);
      }
    } else {
      const QuadratureRule rule = gauss_legendre(min_nodes);
      for (double c : centers_) {
        for (int i = 0; i < min_nodes; ++i) {
          comps.emplace_back((c + window_ * rule.nodes[i]) * eye,
                             per_center * 0.5 * rule.weights[i]);
        }
      }
    }
  }
  // Guard against quadrature weight rounding upsetting the sum-to-one check.
  double total = 0.0;
  for (const auto& [sigma, w] : comps) {
    total += w;
  }
  for (auto& [sigma, w] : comps) {
    w /= total;
  }
  return point_mass_mixture(std::move(comps));
}

/// Draws a realizable instance with X X^T equal to the sampled Sigma exactly:
/// X = Sigma^{1/2} R with R a random d x n matrix with orthonormal rows,
/// w* ~ N(0, Sigma^{-1}), x_q ~ N(0, Sigma), y = X^T w*.
///
/// The one seed is split into fixed substreams (Sigma, R, w*, x_q) so that
/// runs are bit-reproducible and parallel callers can partition seeds.
inline RegressionInstance sample_instance(const CovarianceDistribution& dist, int n,
                                          std::uint64_t seed) {
  const int d = dist.dimension();
  if (n < d) {
    throw std::invalid_argument("sample_instance: requires n >= d");
  }
  Rng sigma_rng = Rng::substream(seed, 0);
  Rng basis_rng = Rng::substream(seed, 1);
  Rng w_rng = Rng::substream(seed, 2);
  Rng q_rng = Rng::substream(seed, 3);

  const SigmaSample sig = dist.sample(sigma_rng);
  RegressionInstance inst;
  inst.x = sig.factors.sqrt * random_orthonormal_rows(d, n, basis_rng);
  inst.w_star = sig.factors.inv_sqrt * random_gaussian_vector(d, w_rng);
  inst.x_q = sig.factors.sqrt * random_gaussian_vector(d, q_rng);
  inst.y = inst.x.transpose() * inst.w_star;
  return inst;
}

struct DirectionEstimate {
  Vector v;
  double p_hat = 0.0;
  double std_error = 0.0;
};

struct RightSpreadOutReport {
  bool passes = false;
  bool indeterminate = false;
  double eps = 0.0;
  double delta = 0.0;
  std::vector<DirectionEstimate> directions;
};

/// Checks the right-spread-out property: for every direction v the law must
/// put mass at least eps on covariances with ||X^T v||^2 = v^T Sigma v at
/// least (1 - delta) beta. Point-mass mixtures are enumerated exactly; the
/// scalar families are estimated by Monte Carlo, and estimates within two
/// standard errors of eps set the indeterminate flag.
inline RightSpreadOutReport is_right_spread_out(const CovarianceDistribution& dist,
                                                double eps, double delta,
                                                int num_directions, int num_samples,
                                                std::uint64_t seed) {
  if (!(eps > 0.0 && eps <= 1.0) || !(delta >= 0.0 && delta < 1.0)) {
    throw std::invalid_argument("is_right_spread_out: eps in (0,1], delta in [0,1)");
  }
  if (num_directions < 1 || num_samples < 1) {
    throw std::invalid_argument("is_right_spread_out: counts must be >= 1");
  }
  const int d = dist.dimension();
  const double threshold = (1.0 - delta) * dist.beta();
  // Slack for exact-equality hits such as v^T (beta I) v = beta.
  const double compare = threshold * (1.0 - 1e-12);

  RightSpreadOutReport report;
  report.eps = eps;
  report.delta = delta;
  Rng dir_rng = Rng::substream(seed, 17);

  for (int k = 0; k < num_directions; ++k) {
    DirectionEstimate est;
    est.v = random_unit_vector(d, dir_rng);
    if (dist.discrete()) {
      for (const auto& comp : dist.components()) {
        if (est.v.dot(comp.sigma * est.v) >= compare) {
          est.p_hat += comp.weight;
        }
      }
      est.std_error = 0.0;
    } else {
      Rng sample_rng = Rng::substream(seed, 1000 + static_cast<std::uint64_t>(k));
      int hits = 0;
      for (int i = 0; i < num_samples; ++i) {
        const SigmaSample sig = dist.sample(sample_rng);
        if (est.v.dot(sig.sigma * est.v) >= compare) {
          ++hits;
        }
      }
      est.p_hat = static_cast<double>(hits) / num_samples;
      est.std_error = std::sqrt(est.p_hat * (1.0 - est.p_hat) /
                                static_cast<double>(num_samples));
    }
    if (std::abs(est.p_hat - eps) <= 2.0 * est.std_error && est.std_error > 0.0) {
      report.indeterminate = true;
    }
    report.directions.push_back(std::move(est));
  }
  double min_p = 1.0;
  for (const auto& est : report.directions) {
    min_p = std::min(min_p, est.p_hat);
  }
  report.passes = min_p >= eps * (1.0 - 1e-12);
  return report;
}

}  // namespace lilt
