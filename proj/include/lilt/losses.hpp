#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lilt/attention.hpp"
#include "lilt/instances.hpp"

namespace lilt {

struct LossReport {
  enum class Method { kTraceFormula, kMonteCarlo };

  double value = 0.0;
  Method method = Method::kTraceFormula;
  long samples = 0;
  double std_error = 0.0;
  long excluded = 0;  // non-finite forward passes dropped in non-strict mode
  std::vector<double> per_layer_values;  // loss truncated at depth t = 0..L
};

// Per-sample seed derivation for Monte-Carlo batches.
inline std::uint64_t splitmix_mix(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t state = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
  return splitmix64(state);
}

namespace detail {

inline void require_trace_applicable(const CovarianceDistribution& dist,
                                     const RestrictedWeights& w) {
  if (!dist.discrete()) {
    throw std::invalid_argument(
        "loss_trace: needs a point-mass law; discretize or use loss_monte_carlo");
  }
  if (w.activation != Activation::kLinear || !w.all_u_zero()) {
    throw std::invalid_argument("loss_trace: closed form needs linear activation and u = 0");
  }
  if (dist.dimension() != w.dimension()) {
    throw std::invalid_argument("loss_trace: dimension mismatch");
  }
}

}  // namespace detail

/// Population loss via the trace formula: with S = Sigma^{1/2} and
/// B^(t) = I - S A^(t) S, the loss at depth L is the Sigma-weighted average
/// of trace(G G^T), G = B^(0) ... B^(L-1). per_layer_values[t] carries the
/// same quantity truncated at depth t (t = 0 gives d).
inline LossReport loss_trace(const CovarianceDistribution& dist,
                             const RestrictedWeights& w, int loops) {
  w.validate(loops);
  detail::require_trace_applicable(dist, w);
  const int d = dist.dimension();
  const Matrix eye = Matrix::Identity(d, d);

  LossReport report;
  report.method = LossReport::Method::kTraceFormula;
  report.per_layer_values.assign(loops + 1, 0.0);
  for (const auto& comp : dist.components()) {
    const Matrix& s = comp.factors.sqrt;
    Matrix prefix = eye;
    report.per_layer_values[0] += comp.weight * static_cast<double>(d);
    for (int t = 0; t < loops; ++t) {
      prefix = prefix * (eye - s * w.layer_a(t) * s);
      report.per_layer_values[t + 1] += comp.weight * prefix.squaredNorm();
    }
  }
  report.value = report.per_layer_values[loops];
  return report;
}

/// Monte-Carlo estimate of the same population loss: draw instances, run the
/// iterated forward pass, and average the squared prediction residual.
/// Valid for ReLU and nonzero u, where no closed form exists. Non-finite
/// passes either propagate (strict) or are excluded and counted.
inline LossReport loss_monte_carlo(const CovarianceDistribution& dist,
                                   const RestrictedWeights& w, int loops, int n,
                                   long samples, std::uint64_t seed,
                                   bool strict = false) {
  w.validate(loops);
  if (samples < 1) {
    throw std::invalid_argument("loss_monte_carlo: samples >= 1 required");
  }
  if (dist.dimension() != w.dimension()) {
    throw std::invalid_argument("loss_monte_carlo: dimension mismatch");
  }
  LossReport report;
  report.method = LossReport::Method::kMonteCarlo;
  double sum = 0.0;
  double sum_sq = 0.0;
  long used = 0;
  for (long i = 0; i < samples; ++i) {
    const RegressionInstance inst =
        sample_instance(dist, n, splitmix_mix(seed, static_cast<std::uint64_t>(i)));
    double sq = 0.0;
    try {
      const RestrictedForward fwd = forward_restricted(inst, w, loops);
      const double r = fwd.prediction - inst.target();
      sq = r * r;
    } catch (const NonFiniteError&) {
      if (strict) {
        throw;
      }
      ++report.excluded;
      continue;
    }
    sum += sq;
    sum_sq += sq * sq;
    ++used;
  }
  if (used == 0) {
    throw std::runtime_error("loss_monte_carlo: every sample was non-finite");
  }
  report.samples = used;
  report.value = sum / static_cast<double>(used);
  const double var =
      std::max(0.0, sum_sq / static_cast<double>(used) - report.value * report.value);
  report.std_error = std::sqrt(var / static_cast<double>(used));
  return report;
}

/// Analytic gradient of loss_trace with respect to each A^(t), by prefix /
/// suffix accumulation of the B products:
///   d/dA^(t) trace(G G^T) = -2 S F^(t)^T G H^(t+1)^T S,
/// with F^(t) = B^(0)..B^(t-1) and H^(t+1) = B^(t+1)..B^(L-1). Looped models
/// get the single gradient summed over t.
inline std::vector<Matrix> loss_gradient(const CovarianceDistribution& dist,
                                         const RestrictedWeights& w, int loops) {
  w.validate(loops);
  detail::require_trace_applicable(dist, w);
  const int d = dist.dimension();
  const Matrix eye = Matrix::Identity(d, d);

  const std::size_t slots = w.shared ? 1 : static_cast<std::size_t>(loops);
  std::vector<Matrix> grads(slots, Matrix::Zero(d, d));

  std::vector<Matrix> b(loops);
  std::vector<Matrix> prefix(loops + 1);
  std::vector<Matrix> suffix(loops + 1);
  for (const auto& comp : dist.components()) {
    const Matrix& s = comp.factors.sqrt;
    for (int t = 0; t < loops; ++t) {
      b[t] = eye - s * w.layer_a(t) * s;
    }
    prefix[0] = eye;
    for (int t = 0; t < loops; ++t) {
      prefix[t + 1] = prefix[t] * b[t];
    }
    suffix[loops] = eye;
    for (int t = loops - 1; t >= 0; --t) {
      suffix[t] = b[t] * suffix[t + 1];
    }
    const Matrix& g = prefix[loops];
    for (int t = 0; t < loops; ++t) {
      const Matrix grad_t =
          -2.0 * comp.weight * (s * prefix[t].transpose() * g * suffix[t + 1].transpose() * s);
      grads[w.shared ? 0 : static_cast<std::size_t>(t)] += grad_t;
    }
  }
  return grads;
}

}  // namespace lilt
