#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lilt/attention.hpp"
#include "lilt/constructions.hpp"
#include "lilt/instances.hpp"
#include "lilt/losses.hpp"
#include "lilt/training.hpp"

namespace lilt {

// ---------------------------------------------------------------------------
// Scaling adversary
// ---------------------------------------------------------------------------

struct ScalingSearchResult {
  double gamma_star = 1.0;
  double relative_error = 0.0;
  // Widest contiguous gamma interval with relative error >= 1/8.
  std::optional<std::pair<double, double>> bad_interval;
  std::vector<std::pair<double, double>> grid;  // (gamma, relative error)
  double gamma_lo = 1.0;
  double gamma_hi = 1.0;
};

namespace detail {

inline RegressionInstance scaled_instance(const RegressionInstance& inst, double gamma) {
  RegressionInstance scaled = inst;
  scaled.x *= gamma;
  scaled.y *= gamma;
  return scaled;
}

// Shared grid sweep: the searched map gamma -> relative prediction error on
// the scaled instance (gamma X, w*, gamma y, x_q). Overflow counts as
// infinite error at that gamma, which is still a witness. Ties at the
// maximum resolve to the smallest gamma.
template <class Predict>
ScalingSearchResult scaling_grid_search(const RegressionInstance& inst, double gamma_lo,
                                        double gamma_hi, int grid_points, bool log_spaced,
                                        Predict&& predict) {
  const double target = inst.target();
  if (std::abs(target) < 1e-8 * inst.w_star.norm() * inst.x_q.norm()) {
    throw std::invalid_argument(
        "scaling_adversary: relative error undefined, |w*^T x_q| is (near) zero");
  }
  if (grid_points < 2) {
    throw std::invalid_argument("scaling_adversary: grid_points >= 2 required");
  }
  ScalingSearchResult result;
  result.gamma_lo = gamma_lo;
  result.gamma_hi = gamma_hi;
  result.grid.reserve(grid_points);

  for (int i = 0; i < grid_points; ++i) {
    const double frac = static_cast<double>(i) / (grid_points - 1);
    const double gamma = log_spaced
                             ? gamma_lo * std::pow(gamma_hi / gamma_lo, frac)
                             : gamma_lo + (gamma_hi - gamma_lo) * frac;
    double err;
    try {
      err = std::abs(predict(scaled_instance(inst, gamma)) - target) / std::abs(target);
    } catch (const NonFiniteError&) {
      err = std::numeric_limits<double>::infinity();
    }
    result.grid.emplace_back(gamma, err);
  }

  result.gamma_star = result.grid[0].first;
  result.relative_error = result.grid[0].second;
  for (const auto& [gamma, err] : result.grid) {
    if (err > result.relative_error) {
      result.relative_error = err;
      result.gamma_star = gamma;
    }
  }

  // Widest contiguous run with error >= 1/8 (the robust interval of the
  // polynomial blow-up lemma).
  double best_width = -1.0;
  std::size_t i = 0;
  while (i < result.grid.size()) {
    if (result.grid[i].second >= 0.125) {
      std::size_t j = i;
      while (j + 1 < result.grid.size() && result.grid[j + 1].second >= 0.125) {
        ++j;
      }
      const double width = result.grid[j].first - result.grid[i].first;
      if (width > best_width) {
        best_width = width;
        result.bad_interval = {result.grid[i].first, result.grid[j].first};
      }
      i = j + 1;
    } else {
      ++i;
    }
  }
  return result;
}

}  // namespace detail

/// Sweeps the scaling gamma over [1, 36 L^2] (the lemma's range for the
/// restricted model) and reports where the prediction for the scaled
/// instance goes bad by a constant factor.
inline ScalingSearchResult scaling_adversary(const RegressionInstance& inst,
                                             const RestrictedWeights& w, int loops,
                                             int grid_points = 4096) {
  w.validate(loops);
  return detail::scaling_grid_search(
      inst, 1.0, 36.0 * loops * loops, grid_points, /*log_spaced=*/false,
      [&](const RegressionInstance& scaled) {
        return forward_restricted(scaled, w, loops).prediction;
      });
}

/// Unrestricted variant: gamma in [1, 2^L], log-spaced.
inline ScalingSearchResult scaling_adversary(const RegressionInstance& inst,
                                             const FullWeights& w, int grid_points = 4096) {
  w.validate();
  return detail::scaling_grid_search(
      inst, 1.0, std::pow(2.0, w.depth()), grid_points, /*log_spaced=*/true,
      [&](const RegressionInstance& scaled) {
        return forward_full(assemble_prompt(scaled), w).prediction;
      });
}

// ---------------------------------------------------------------------------
// Degree oracle
// ---------------------------------------------------------------------------

struct DegreeReport {
  int claimed_degree = 0;
  int fitted_degree = 0;          // smallest degree whose fit passes
  double max_interp_residual = 0.0;  // at held-out nodes, for the claimed degree
  double scale = 0.0;
  bool parity_even = false;
  bool passed = false;
};

namespace detail {

template <class Scalar>
Scalar chebyshev_t(int k, Scalar x) {
  if (x >= Scalar(-1) && x <= Scalar(1)) {
    return std::cos(Scalar(k) * std::acos(x));
  }
  const Scalar ax = std::abs(x);
  const Scalar v = std::cosh(Scalar(k) * std::acosh(ax));
  return (x < Scalar(0) && (k % 2 == 1)) ? -v : v;
}

// Least-squares polynomial fit with zero constant term on [lo, hi], in the
// basis gamma * T_k(m(gamma)) (all basis functions vanish at 0, none of them
// is large on the window, so high degrees stay well conditioned). Returns
// the max abs residual at the held-out nodes.
template <class Scalar>
Scalar fit_zero_constant_polynomial(const std::vector<Scalar>& fit_gamma,
                                    const std::vector<Scalar>& fit_value,
                                    const std::vector<Scalar>& test_gamma,
                                    const std::vector<Scalar>& test_value, int degree,
                                    Scalar lo, Scalar hi, bool even_only) {
  using MatS = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using VecS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  const auto rows = static_cast<Eigen::Index>(fit_gamma.size());

  const auto columns_for = [&](const std::vector<Scalar>& gammas) {
    const auto m = static_cast<Eigen::Index>(gammas.size());
    Eigen::Index cols;
    MatS mat;
    if (!even_only) {
      cols = degree;
      mat.resize(m, cols);
      for (Eigen::Index r = 0; r < m; ++r) {
        const Scalar g = gammas[static_cast<std::size_t>(r)];
        const Scalar t = (Scalar(2) * g - (lo + hi)) / (hi - lo);
        for (Eigen::Index k = 0; k < cols; ++k) {
          mat(r, k) = g * chebyshev_t(static_cast<int>(k), t);
        }
      }
    } else {
      cols = degree / 2;
      mat.resize(m, cols);
      const Scalar lo2 = lo * lo;
      const Scalar hi2 = hi * hi;
      for (Eigen::Index r = 0; r < m; ++r) {
        const Scalar g = gammas[static_cast<std::size_t>(r)];
        const Scalar g2 = g * g;
        const Scalar t = (Scalar(2) * g2 - (lo2 + hi2)) / (hi2 - lo2);
        for (Eigen::Index k = 0; k < cols; ++k) {
          mat(r, k) = g2 * chebyshev_t(static_cast<int>(k), t);
        }
      }
    }
    return mat;
  };

  const MatS a = columns_for(fit_gamma);
  VecS b(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    b(r) = fit_value[static_cast<std::size_t>(r)];
  }
  Eigen::ColPivHouseholderQR<MatS> qr(a);
  const VecS coef = qr.solve(b);

  const MatS at = columns_for(test_gamma);
  Scalar worst = Scalar(0);
  for (Eigen::Index r = 0; r < at.rows(); ++r) {
    const Scalar pred = at.row(r) * coef;
    worst = std::max(worst, std::abs(pred - test_value[static_cast<std::size_t>(r)]));
  }
  return worst;
}

template <class Scalar, class Evaluate>
DegreeReport degree_oracle_impl(int claimed_degree, int gamma_samples, Evaluate&& eval) {
  if (gamma_samples < claimed_degree + 2) {
    throw std::invalid_argument("degree_oracle: gamma_samples >= claimed degree + 2 required");
  }
  const Scalar lo = Scalar(0.5);
  const Scalar hi = Scalar(1.5);
  const auto cheb_nodes = [&](int count, std::vector<Scalar>* gammas,
                              std::vector<Scalar>* values) {
    gammas->resize(count);
    values->resize(count);
    for (int i = 0; i < count; ++i) {
      const Scalar c = std::cos(Scalar(2 * i + 1) / Scalar(2 * count) *
                                Scalar(3.14159265358979323846264338327950288L));
      (*gammas)[i] = Scalar(0.5) * (lo + hi) + Scalar(0.5) * (hi - lo) * c;
      (*values)[i] = eval((*gammas)[i]);
    }
  };

  std::vector<Scalar> fit_gamma, fit_value, test_gamma, test_value;
  cheb_nodes(gamma_samples, &fit_gamma, &fit_value);
  cheb_nodes(gamma_samples + 1, &test_gamma, &test_value);

  DegreeReport report;
  report.claimed_degree = claimed_degree;
  Scalar scale = Scalar(0);
  for (const Scalar v : fit_value) {
    scale = std::max(scale, std::abs(v));
  }
  for (const Scalar v : test_value) {
    scale = std::max(scale, std::abs(v));
  }
  report.scale = static_cast<double>(scale);
  const Scalar tol = Scalar(1e-8) * std::max(scale, Scalar(1e-300));

  const Scalar at_claimed =
      fit_zero_constant_polynomial(fit_gamma, fit_value, test_gamma, test_value,
                                   claimed_degree, lo, hi, /*even_only=*/false);
  report.max_interp_residual = static_cast<double>(at_claimed);
  report.passed = at_claimed <= tol;
  if (!report.passed && claimed_degree > 40) {
    throw std::runtime_error("degree_oracle: use higher precision or smaller L");
  }

  report.fitted_degree = claimed_degree;
  for (int deg = 1; deg <= claimed_degree; ++deg) {
    const Scalar res = fit_zero_constant_polynomial(fit_gamma, fit_value, test_gamma,
                                                    test_value, deg, lo, hi, false);
    if (res <= tol) {
      report.fitted_degree = deg;
      break;
    }
  }
  if (claimed_degree >= 2) {
    const Scalar even_res = fit_zero_constant_polynomial(
        fit_gamma, fit_value, test_gamma, test_value, claimed_degree, lo, hi, true);
    report.parity_even = even_res <= tol;
  }
  return report;
}

}  // namespace detail

/// Fits gamma -> y_q^(L)(gamma X, w*, gamma y, x_q) on positive Chebyshev
/// nodes with a zero-constant-term polynomial of the claimed degree
/// (2L for the restricted model) and reports the held-out residual.
/// Degrees above 40 run in extended precision.
inline DegreeReport degree_oracle(const RegressionInstance& inst, const RestrictedWeights& w,
                                  int loops, int gamma_samples) {
  w.validate(loops);
  const int claimed = 2 * loops;
  const auto eval_double = [&](double gamma) {
    return forward_restricted(detail::scaled_instance(inst, gamma), w, loops).y_q_final;
  };
  if (claimed <= 40) {
    return detail::degree_oracle_impl<double>(claimed, gamma_samples, eval_double);
  }
  const auto eval_long = [&](long double gamma) -> long double {
    using LVec = detail::Vec<long double>;
    using LMat = detail::Mat<long double>;
    const LMat x = gamma * inst.x.cast<long double>();
    const LVec y = gamma * inst.y.cast<long double>();
    const LVec x_q = inst.x_q.cast<long double>();
    std::vector<LVec> y_trace;
    std::vector<long double> yq_trace;
    detail::run_restricted<long double>(x, y, x_q, w, loops, &y_trace, &yq_trace);
    return yq_trace.back();
  };
  return detail::degree_oracle_impl<long double>(claimed, gamma_samples, eval_long);
}

/// Unrestricted variant; the claimed degree is 3^L.
inline DegreeReport degree_oracle(const RegressionInstance& inst, const FullWeights& w,
                                  int gamma_samples) {
  w.validate();
  if (w.depth() > 6) {
    throw std::invalid_argument("degree_oracle: unrestricted depth capped at 6 (degree 3^L)");
  }
  int claimed = 1;
  for (int t = 0; t < w.depth(); ++t) {
    claimed *= 3;
  }
  const int d = inst.d();
  const int n = inst.n();
  const auto eval_long = [&](long double gamma) -> long double {
    using LMat = detail::Mat<long double>;
    LMat z(d + 1, n + 1);
    z.topLeftCorner(d, n) = gamma * inst.x.cast<long double>();
    z.topRightCorner(d, 1) = inst.x_q.cast<long double>();
    z.bottomLeftCorner(1, n) = gamma * inst.y.transpose().cast<long double>();
    z(d, n) = 0.0L;
    std::vector<LMat> trace;
    detail::run_full<long double>(z, w, &trace);
    return trace.back()(d, n);
  };
  if (claimed <= 40) {
    const auto eval_double = [&](double gamma) {
      return static_cast<double>(eval_long(static_cast<long double>(gamma)));
    };
    return detail::degree_oracle_impl<double>(claimed, gamma_samples, eval_double);
  }
  return detail::degree_oracle_impl<long double>(claimed, gamma_samples, eval_long);
}

// ---------------------------------------------------------------------------
// Chebyshev alternation certificate
// ---------------------------------------------------------------------------

struct AlternationCertificate {
  bool passed = false;
  double q_at_zero = 0.0;
  std::vector<double> extrema_values;          // Q_k at the k+1 mapped extrema
  std::pair<double, double> widest_interval{0.0, 0.0};  // |Q_k| >= 1/2 around an extremum
  double interval_width = 0.0;
  double required_width = 0.0;
};

/// Certifies the polynomial blow-up lemma's Chebyshev witness on
/// [lam_min, lam_max]: bounded value at zero, k+1 alternating extrema, and a
/// robust interval of width (pi^2 / 64 k^2)(lam_max - lam_min) on which the
/// polynomial stays large.
inline AlternationCertificate chebyshev_alternation_check(int k, double lam_min,
                                                          double lam_max) {
  if (k < 1 || !(0.0 < lam_min && lam_min < lam_max)) {
    throw std::invalid_argument("chebyshev_alternation_check: bad arguments");
  }
  if (static_cast<double>(k) > std::sqrt(lam_max) / (6.0 * std::sqrt(lam_min))) {
    throw std::invalid_argument(
        "chebyshev_alternation_check: outside the lemma regime k <= sqrt(lam_max/lam_min)/6");
  }
  const auto q = [&](double gamma) {
    return detail::chebyshev_t(k, (2.0 * gamma - (lam_min + lam_max)) / (lam_max - lam_min));
  };

  AlternationCertificate cert;
  cert.q_at_zero = q(0.0);
  bool ok = std::abs(cert.q_at_zero) <= 4.0;

  constexpr double kPi = 3.14159265358979323846264338327950288;
  for (int i = 0; i <= k; ++i) {
    const double x = std::cos(i * kPi / k);
    const double gamma = 0.5 * (lam_max - lam_min) * x + 0.5 * (lam_min + lam_max);
    const double value = q(gamma);
    cert.extrema_values.push_back(value);
    const double expected = (i % 2 == 0) ? 1.0 : -1.0;
    ok = ok && std::abs(value - expected) <= 1e-9;
  }

  // Widest contiguous run with |Q_k| >= 1/2, grid scan + bisection refinement.
  const int points = std::min(400000, 2000 * k * k + 4000);
  const auto above = [&](double gamma) { return std::abs(q(gamma)) >= 0.5; };
  const auto refine = [&](double in, double out) {
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (in + out);
      (above(mid) ? in : out) = mid;
    }
    return in;
  };
  double best_width = -1.0;
  double prev = lam_min;
  bool prev_above = above(prev);
  double run_start = prev_above ? lam_min : 0.0;
  for (int i = 1; i < points; ++i) {
    const double gamma = lam_min + (lam_max - lam_min) * i / (points - 1.0);
    const bool now = above(gamma);
    if (now && !prev_above) {
      run_start = refine(gamma, prev);
    } else if (!now && prev_above) {
      const double run_end = refine(prev, gamma);
      if (run_end - run_start > best_width) {
        best_width = run_end - run_start;
        cert.widest_interval = {run_start, run_end};
      }
    }
    prev = gamma;
    prev_above = now;
  }
  if (prev_above && prev - run_start > best_width) {
    best_width = prev - run_start;
    cert.widest_interval = {run_start, prev};
  }
  cert.interval_width = std::max(0.0, best_width);
  cert.required_width = kPi * kPi / (64.0 * k * k) * (lam_max - lam_min);
  cert.passed = ok && cert.interval_width >= cert.required_width;
  return cert;
}

// ---------------------------------------------------------------------------
// Adaptive termination
// ---------------------------------------------------------------------------

struct TerminationResult {
  std::optional<int> stop_layer;
  double guaranteed_error = 0.0;  // ||x_q||_{Sigma^{-1}} * ||y^(l)||, <= eps at a stop
  double true_error = 0.0;        // |w*^T x_q - prediction at the stop layer|
  double trigger_threshold = 0.0;
};

/// Runs layers until the transformed-label norm certifies a small query
/// residual: stop at the first l with ||y^(l)|| <= eps / ||x_q||_{Sigma^{-1}}
/// (the proof's norm), which guarantees |w*^T x_q - prediction_l| <= eps.
inline TerminationResult termination_monitor(const RegressionInstance& inst,
                                             const RestrictedWeights& w, int l_max,
                                             double eps) {
  if (w.activation != Activation::kLinear || !w.all_u_zero()) {
    throw std::invalid_argument("termination_monitor: needs the linear u = 0 model");
  }
  if (l_max < 1 || eps <= 0.0) {
    throw std::invalid_argument("termination_monitor: l_max >= 1 and eps > 0 required");
  }
  RestrictedWeights weights = w;
  if (!w.shared && l_max < w.depth()) {
    weights.a.resize(l_max);
    weights.u.resize(l_max);
    weights.loops = l_max;
  }
  const int loops = weights.shared ? l_max : weights.depth();

  const SpdFactors factors = spd_factorize(inst.covariance());
  const double xq_dual_norm = std::sqrt(inst.x_q.dot(factors.inverse * inst.x_q));
  const double threshold = eps / xq_dual_norm;

  const RestrictedForward fwd = forward_restricted(inst, weights, loops);
  TerminationResult result;
  result.trigger_threshold = threshold;
  for (int l = 0; l <= loops; ++l) {
    if (fwd.trace.y[l].norm() <= threshold) {
      result.stop_layer = l;
      result.guaranteed_error = xq_dual_norm * fwd.trace.y[l].norm();
      result.true_error = std::abs(-fwd.trace.y_q[l] - inst.target());
      return result;
    }
  }
  return result;  // never triggered within l_max
}

// ---------------------------------------------------------------------------
// Multilayer OOD blow-up
// ---------------------------------------------------------------------------

struct BlowupResult {
  double train_loss = 0.0;
  double ood_loss = 0.0;
  double bound = 0.0;
  bool bound_satisfied = false;
  bool train_right_spread_out = false;  // the (1/L, 0) property of the train law
  RestrictedWeights minimizer;
  CovarianceDistribution train_dist = CovarianceDistribution::scalar_uniform(1, 1.0, 1.0);
  CovarianceDistribution shifted_dist = CovarianceDistribution::scalar_uniform(1, 1.0, 1.0);
};

/// Instantiates the blow-up theorem: a train mixture of L diagonal
/// covariances (L-1 of them pinned just above alpha with distinct entries,
/// one at beta I), whose exact global minimizer is layer t = inverse of
/// component t. Train loss is identically zero, while any law with eps_mass
/// on 8 alpha I <= Sigma <= (1 - delta') beta I costs at least
/// eps_mass * delta' * d * 9^(L-1).
inline BlowupResult multilayer_blowup_experiment(double alpha, double beta, int loops, int d,
                                                 double delta_prime, double eps_mass) {
  if (!(beta / alpha >= 10.0)) {
    throw std::invalid_argument("blowup: requires beta/alpha >= 10");
  }
  if (loops < 1 || d < 1) {
    throw std::invalid_argument("blowup: loops >= 1 and d >= 1 required");
  }
  if (!(delta_prime > 0.0 && delta_prime < 1.0) || !(eps_mass > 0.0 && eps_mass <= 1.0)) {
    throw std::invalid_argument("blowup: delta' in (0,1), eps_mass in (0,1] required");
  }
  if (8.0 * alpha > (1.0 - delta_prime) * beta) {
    throw std::invalid_argument("blowup: shifted band empty, needs 8 alpha <= (1-delta') beta");
  }

  std::vector<std::pair<Matrix, double>> comps;
  std::vector<Matrix> minimizer_layers;
  const double weight = 1.0 / loops;
  for (int t = 0; t < loops - 1; ++t) {
    Vector diag(d);
    for (int i = 0; i < d; ++i) {
      // Distinct entries in (alpha, 1.25 alpha]: keeps every middle layer's
      // OOD factor (1 - 8 alpha a)^2 at 29 or more, comfortably above the 9
      // the bound needs.
      diag(i) = alpha * (1.0 + 0.25 * (t * d + i + 1) / ((loops - 1.0) * d + 1.0));
    }
    comps.push_back({Matrix(diag.asDiagonal()), weight});
    minimizer_layers.push_back(Matrix(diag.cwiseInverse().asDiagonal()));
  }
  comps.push_back({beta * Matrix::Identity(d, d), weight});
  minimizer_layers.push_back((1.0 / beta) * Matrix::Identity(d, d));

  BlowupResult result;
  result.train_dist = CovarianceDistribution::point_mass_mixture(comps);
  result.minimizer = RestrictedWeights::multilayer(std::move(minimizer_layers));
  result.train_loss = loss_trace(result.train_dist, result.minimizer, loops).value;
  result.train_right_spread_out =
      is_right_spread_out(result.train_dist, 1.0 / loops, 0.0, 16, 1, 1).passes;

  const Matrix shifted_sigma = 8.0 * alpha * Matrix::Identity(d, d);
  if (eps_mass >= 1.0) {
    result.shifted_dist = CovarianceDistribution::fixed(shifted_sigma);
  } else {
    result.shifted_dist = CovarianceDistribution::point_mass_mixture(
        {{shifted_sigma, eps_mass}, {comps[0].first, 1.0 - eps_mass}});
  }
  result.ood_loss = loss_trace(result.shifted_dist, result.minimizer, loops).value;
  result.bound = eps_mass * delta_prime * d * std::pow(9.0, loops - 1);
  result.bound_satisfied = result.ood_loss >= result.bound;
  return result;
}

// ---------------------------------------------------------------------------
// Looped robustness
// ---------------------------------------------------------------------------

struct RobustnessResult {
  Matrix a_star;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double delta_prime = 0.0;
  double bound = 0.0;            // proof form: eps' OR d (1 - alpha/beta)^L
  double statement_bound = 0.0;  // statement form: eps' AND (1 - alpha/beta)^(2L)
  bool bound_satisfied = false;
  bool statement_bound_satisfied = false;
  double final_grad_norm = 0.0;
  bool converged = false;  // grad norm <= 1e-6 at the end of training
};

/// Trains the looped model on a right-spread-out law with the spectrum of
/// A^{-1} projected into [alpha, beta] each step, then scores it on a test
/// law supported inside (alpha, (1 - delta') beta) with
/// delta' = delta + ln(d / eps') / L. Asserts the proof's bound
/// eps' OR d (1 - alpha/beta)^L and additionally reports whether the
/// statement's stronger AND-form holds.
inline RobustnessResult looped_robustness_experiment(
    const CovarianceDistribution& train_dist, double rso_eps, double rso_delta, int loops,
    const CovarianceDistribution& test_dist, double eps_prime, int train_steps = 1500,
    double train_lr = 2e-2, std::uint64_t seed = 0) {
  const int d = train_dist.dimension();
  const double alpha = train_dist.alpha();
  const double beta = train_dist.beta();
  if (!(eps_prime > 0.0 && eps_prime <= rso_eps)) {
    throw std::invalid_argument("robustness: requires 0 < eps' <= eps");
  }
  const double delta_prime = rso_delta + std::log(d / eps_prime) / loops;
  if (!(delta_prime <= 1.0 - alpha / beta)) {
    throw std::invalid_argument("robustness: regime violated, delta' > 1 - alpha/beta");
  }
  if (test_dist.dimension() != d || test_dist.alpha() < alpha - 1e-9 ||
      test_dist.beta() > (1.0 - delta_prime) * beta + 1e-9) {
    throw std::invalid_argument(
        "robustness: test law must live inside (alpha, (1 - delta') beta)");
  }

  TrainConfig cfg;
  cfg.d = d;
  cfg.n = 2 * d;
  cfg.loops = loops;
  cfg.looped = true;
  cfg.dist = train_dist;
  cfg.optimizer = OptimizerConfig::adam(train_lr);
  cfg.steps = train_steps;
  cfg.seed = seed;
  cfg.project_inverse_spectrum = SpectrumRange{alpha, beta};
  const TrainResult trained = train(cfg);

  RobustnessResult result;
  result.a_star = trained.weights.a[0];
  result.delta_prime = delta_prime;
  result.train_loss = trained.history.back().loss;
  result.final_grad_norm = trained.history.back().grad_norm;
  result.converged = result.final_grad_norm <= 1e-6;
  result.test_loss = evaluate(trained.weights, loops, test_dist, 0, seed).value;

  const double rate = std::pow(1.0 - alpha / beta, loops);
  result.bound = std::max(eps_prime, d * rate);
  result.statement_bound = std::min(eps_prime, rate * rate);
  result.bound_satisfied = result.test_loss <= result.bound;
  result.statement_bound_satisfied = result.test_loss <= result.statement_bound;
  return result;
}

// ---------------------------------------------------------------------------
// Monotonicity probe
// ---------------------------------------------------------------------------

struct MonotonicityWitness {
  Vector v;        // unit direction
  double scale = 0.0;  // c in Sigma^{1/2} = sqrt(c) v v^T
  std::vector<double> depth_losses;  // prod (gamma_i - 1)^2 + (d - 1) at each depth
};

struct LoopedTailCheck {
  double l0 = 0.0;
  int checked_from = 0;
  int checked_to = 0;
  bool monotone = false;
  bool decreasing_everywhere = false;  // all |1 - beta_j| <= 1
};

namespace detail {

inline std::vector<double> rank_one_depth_losses(const std::vector<double>& gammas, int d) {
  std::vector<double> losses;
  losses.reserve(gammas.size() + 1);
  double prod = 1.0;
  losses.push_back(static_cast<double>(d));
  for (double g : gammas) {
    prod *= (g - 1.0) * (g - 1.0);
    losses.push_back(prod + (d - 1.0));
  }
  return losses;
}

inline bool strictly_non_monotone(const std::vector<double>& seq) {
  bool up = false;
  bool down = false;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    if (seq[i + 1] > seq[i] * (1.0 + 1e-9) + 1e-12) {
      up = true;
    }
    if (seq[i + 1] < seq[i] * (1.0 - 1e-9) - 1e-12) {
      down = true;
    }
  }
  return up && down;
}

}  // namespace detail

/// Closed-form per-depth loss of the looped model at covariance Sigma, and
/// the proof's L0 beyond which the sequence is monotone. Overflow-free: the
/// sequence is evaluated from the eigenvalues of S A S in log space.
inline LoopedTailCheck looped_monotone_tail(const RestrictedWeights& w, const Matrix& sigma,
                                            int extra_depths = 50) {
  if (w.activation != Activation::kLinear || !w.all_u_zero()) {
    throw std::invalid_argument("looped_monotone_tail: needs the linear u = 0 model");
  }
  const Matrix a_sym = symmetric_part(w.a[0]);
  if ((w.a[0] - a_sym).cwiseAbs().maxCoeff() >
      1e-9 * std::max(1.0, w.a[0].cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("looped_monotone_tail: A must be symmetric");
  }
  const SpdFactors f = spd_factorize(sigma);
  Eigen::SelfAdjointEigenSolver<Matrix> es(Matrix(f.sqrt * a_sym * f.sqrt));
  const Vector beta_eigs = es.eigenvalues();
  const int d = static_cast<int>(beta_eigs.size());

  LoopedTailCheck check;
  double l0 = 0.0;
  bool any_expanding = false;
  for (int j = 0; j < d; ++j) {
    const double r = std::abs(1.0 - beta_eigs(j));
    if (r > 1.0 + 1e-12) {
      const double candidate = std::log(d / (r - 1.0)) / std::log(r);
      if (!any_expanding) {
        l0 = candidate;
      } else {
        l0 = std::min(l0, candidate);
      }
      any_expanding = true;
    }
  }
  check.decreasing_everywhere = !any_expanding;
  check.l0 = any_expanding ? std::max(0.0, l0) : 0.0;
  check.checked_from = static_cast<int>(std::ceil(check.l0));
  check.checked_to = check.checked_from + extra_depths;

  // loss(L) = sum_j (1 - beta_j)^(2L), evaluated in log space per term.
  const auto loss_at = [&](int loops) {
    long double total = 0.0L;
    for (int j = 0; j < d; ++j) {
      const long double r = std::abs(1.0L - static_cast<long double>(beta_eigs(j)));
      total += r > 0.0L ? std::exp(2.0L * loops * std::log(r)) : (loops == 0 ? 1.0L : 0.0L);
    }
    return total;
  };
  check.monotone = true;
  if (check.decreasing_everywhere) {
    long double prev = loss_at(0);
    for (int l = 1; l <= extra_depths; ++l) {
      const long double cur = loss_at(l);
      if (cur > prev * (1.0L + 1e-12L)) {
        check.monotone = false;
        break;
      }
      prev = cur;
    }
  } else {
    long double prev = loss_at(check.checked_from);
    for (int l = check.checked_from + 1; l <= check.checked_to; ++l) {
      const long double cur = loss_at(l);
      if (cur < prev * (1.0L - 1e-12L)) {
        check.monotone = false;
        break;
      }
      prev = cur;
    }
  }
  return check;
}

struct MonotonicityReport {
  bool is_looped = false;
  std::optional<MonotonicityWitness> witness;
  // Looped branch: worst L0 over the sampled covariances, all tails monotone.
  double max_l0 = 0.0;
  bool tails_monotone = true;
};

/// For unequal multilayer weights, searches rank-one covariances
/// Sigma = c v v^T where the per-depth loss sequence is provably
/// non-monotone (some c v^T A^(i) v on each side of 2). For equal weights,
/// verifies the monotone tail on sampled covariances.
inline MonotonicityReport monotonicity_probe(const RestrictedWeights& w, int search_directions,
                                             std::uint64_t seed) {
  if (w.activation != Activation::kLinear || !w.all_u_zero()) {
    throw std::invalid_argument("monotonicity_probe: needs the linear u = 0 model");
  }
  const int d = w.dimension();
  const int depth = w.depth();

  MonotonicityReport report;
  bool equal = true;
  if (!w.shared) {
    for (std::size_t t = 1; t < w.a.size(); ++t) {
      if ((w.a[t] - w.a[0]).cwiseAbs().maxCoeff() >
          1e-12 * std::max(1.0, w.a[0].cwiseAbs().maxCoeff())) {
        equal = false;
        break;
      }
    }
  }
  report.is_looped = equal;

  Rng rng = Rng::substream(seed, 23);
  if (equal) {
    const double a_scale = std::max(1e-12, spectral_norm_sym(symmetric_part(w.a[0])));
    for (int k = 0; k < search_directions; ++k) {
      const Matrix sigma = random_spd(d, 0.25 / a_scale, 3.5 / a_scale, rng);
      const LoopedTailCheck check = looped_monotone_tail(w, sigma);
      report.max_l0 = std::max(report.max_l0, check.l0);
      report.tails_monotone = report.tails_monotone && check.monotone;
    }
    return report;
  }

  for (int k = 0; k < search_directions && !report.witness; ++k) {
    const Vector v = random_unit_vector(d, rng);
    std::vector<double> q(depth);
    double q_max = -std::numeric_limits<double>::infinity();
    double q_min_pos = std::numeric_limits<double>::infinity();
    bool any_negative = false;
    for (int t = 0; t < depth; ++t) {
      q[t] = v.dot(symmetric_part(w.layer_a(t)) * v);
      q_max = std::max(q_max, q[t]);
      if (q[t] > 0.0) {
        q_min_pos = std::min(q_min_pos, q[t]);
      }
      any_negative = any_negative || q[t] < 0.0;
    }
    if (!(q_max > 0.0) || !std::isfinite(q_min_pos)) {
      continue;
    }
    // Candidate scalings: place the smallest positive quadratic form inside
    // (0, 2) away from the degenerate value 1, and the largest above 2 when
    // the spread allows it; a negative form makes any c > 0 an increase.
    std::vector<double> candidates;
    if (q_max > q_min_pos * (1.0 + 1e-9)) {
      candidates.push_back(2.0 / std::sqrt(q_min_pos * q_max));
      candidates.push_back(0.5 * (2.0 / q_max + 2.0 / q_min_pos));
      candidates.push_back(1.5 / q_min_pos);
      candidates.push_back(0.5 / q_min_pos);
    }
    if (any_negative) {
      candidates.push_back(1.5 / q_max);
      candidates.push_back(0.5 / q_max);
    }
    for (double c : candidates) {
      if (!(c > 0.0) || !std::isfinite(c)) {
        continue;
      }
      std::vector<double> gammas(depth);
      for (int t = 0; t < depth; ++t) {
        gammas[t] = c * q[t];
      }
      std::vector<double> losses = detail::rank_one_depth_losses(gammas, d);
      if (detail::strictly_non_monotone(losses)) {
        report.witness = MonotonicityWitness{v, c, std::move(losses)};
        break;
      }
    }
  }
  return report;
}

}  // namespace lilt
