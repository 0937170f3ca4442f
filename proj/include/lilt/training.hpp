#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "lilt/attention.hpp"
#include "lilt/constructions.hpp"
#include "lilt/instances.hpp"
#include "lilt/losses.hpp"

namespace lilt {

struct OptimizerConfig {
  enum class Kind { kPlainGd, kMomentum, kAdam };
  Kind kind = Kind::kAdam;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static OptimizerConfig plain_gd(double lr) { return {Kind::kPlainGd, lr}; }
  static OptimizerConfig momentum(double lr) { return {Kind::kMomentum, lr, 0.9}; }
  static OptimizerConfig adam(double lr) { return {Kind::kAdam, lr, 0.9, 0.999, 1e-8}; }
};

struct TrainConfig {
  int d = 0;
  int n = 0;
  int loops = 1;
  bool looped = false;
  CovarianceDistribution dist = CovarianceDistribution::scalar_uniform(1, 1.0, 1.0);
  OptimizerConfig optimizer = OptimizerConfig::adam(1e-2);
  int steps = 2000;
  long batch = 0;  // 0: exact trace-formula loss on the discretized law
  std::uint64_t seed = 0;
  double init_scale = -1.0;  // < 0: default 0.1 / beta of the law
  int quadrature_nodes = 64;
  int checkpoint_every = 0;
  // Robustness training: clamp eigenvalues of sym(A) into
  // [1/beta, 1/alpha] after every accepted step.
  std::optional<SpectrumRange> project_inverse_spectrum;
};

struct TrainRecord {
  int step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  std::optional<RestrictedWeights> checkpoint;
};

struct TrainResult {
  RestrictedWeights weights;
  std::vector<TrainRecord> history;
  bool aborted = false;
  int lr_halvings = 0;
  double final_lr = 0.0;
};

namespace detail {

// Gradient of the squared residual of one instance w.r.t. each A^(t):
//   d/dA^(t) (pred - target)^2 = 2 r (Sigma F^(t)^T w*) (H^(t+1) x_q)^T
// with F / H the prefix / suffix products of (I - Sigma A^(i)).
inline void accumulate_instance_gradient(const RegressionInstance& inst,
                                         const RestrictedWeights& w, int loops,
                                         double scale, std::vector<Matrix>* grads,
                                         double* loss_accum) {
  const int d = inst.d();
  const Matrix eye = Matrix::Identity(d, d);
  const Matrix sigma = inst.covariance();
  std::vector<Matrix> prefix(loops + 1);
  prefix[0] = eye;
  for (int t = 0; t < loops; ++t) {
    prefix[t + 1] = prefix[t] * (eye - sigma * w.layer_a(t));
  }
  std::vector<Matrix> suffix(loops + 1);
  suffix[loops] = eye;
  for (int t = loops - 1; t >= 0; --t) {
    suffix[t] = (eye - sigma * w.layer_a(t)) * suffix[t + 1];
  }
  const double r = -inst.w_star.dot(prefix[loops] * inst.x_q);
  *loss_accum += scale * r * r;
  for (int t = 0; t < loops; ++t) {
    const Vector left = sigma * (prefix[t].transpose() * inst.w_star);
    const Vector right = suffix[t + 1] * inst.x_q;
    (*grads)[w.shared ? 0 : static_cast<std::size_t>(t)] +=
        (2.0 * r * scale) * (left * right.transpose());
  }
}

inline double gradient_norm(const std::vector<Matrix>& grads) {
  double sq = 0.0;
  for (const auto& g : grads) {
    sq += g.squaredNorm();
  }
  return std::sqrt(sq);
}

inline Matrix clamp_inverse_spectrum(const Matrix& a, SpectrumRange range) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetric_part(a));
  Vector lam = es.eigenvalues();
  for (int i = 0; i < lam.size(); ++i) {
    lam(i) = std::clamp(lam(i), 1.0 / range.beta, 1.0 / range.alpha);
  }
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

class OptimizerState {
 public:
  OptimizerState(const OptimizerConfig& cfg, std::size_t slots, int d)
      : cfg_(cfg),
        m_(slots, Matrix::Zero(d, d)),
        v_(slots, Matrix::Zero(d, d)) {}

  // Folds one gradient into the running state; the actual parameter move is
  // in apply(), so a rejected step can be retried at a smaller rate without
  // re-evaluating the gradient.
  void absorb(const std::vector<Matrix>& grads) {
    ++t_;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      switch (cfg_.kind) {
        case OptimizerConfig::Kind::kPlainGd:
          m_[i] = grads[i];
          break;
        case OptimizerConfig::Kind::kMomentum:
          m_[i] = cfg_.beta1 * m_[i] + grads[i];
          break;
        case OptimizerConfig::Kind::kAdam:
          m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
          v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i].cwiseProduct(grads[i]);
          break;
      }
    }
  }

  std::vector<Matrix> apply(const std::vector<Matrix>& params, double lr) const {
    std::vector<Matrix> out(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      switch (cfg_.kind) {
        case OptimizerConfig::Kind::kPlainGd:
        case OptimizerConfig::Kind::kMomentum:
          out[i] = params[i] - lr * m_[i];
          break;
        case OptimizerConfig::Kind::kAdam: {
          const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
          const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
          const Matrix mhat = m_[i] / c1;
          const Matrix vhat = v_[i] / c2;
          out[i] = params[i] -
                   lr * mhat.cwiseQuotient(Matrix((vhat.array().sqrt() + cfg_.eps).matrix()));
          break;
        }
      }
    }
    return out;
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  int t_ = 0;
};

}  // namespace detail

/// Trains the restricted linear model (u fixed at 0) against the population
/// loss. Point-mass and scalar laws are rendered exactly through the trace
/// formula and its analytic gradient; batch > 0 switches to Monte-Carlo
/// minibatches of sampled instances. A step that increases the exact loss by
/// more than 1% is rejected and the rate halved (at most 20 times), which
/// keeps exact-loss histories non-increasing without per-task tuning.
inline TrainResult train(const TrainConfig& cfg) {
  if (cfg.optimizer.lr <= 0.0 || cfg.steps < 1 || cfg.loops < 1) {
    throw std::invalid_argument("train: lr > 0, steps >= 1, loops >= 1 required");
  }
  if (cfg.d != cfg.dist.dimension()) {
    throw std::invalid_argument("train: config dimension disagrees with the law");
  }
  if (cfg.batch < 0) {
    throw std::invalid_argument("train: batch must be >= 0");
  }
  const bool exact = cfg.batch == 0;
  if (!exact && cfg.n < cfg.d) {
    throw std::invalid_argument("train: Monte-Carlo batches need n >= d");
  }

  const int d = cfg.d;
  const CovarianceDistribution law =
      exact ? cfg.dist.discretized(std::max(cfg.quadrature_nodes, cfg.loops + 1))
            : cfg.dist;

  const double init_scale =
      cfg.init_scale >= 0.0 ? cfg.init_scale : 0.1 / cfg.dist.beta();
  const std::size_t slots = cfg.looped ? 1 : static_cast<std::size_t>(cfg.loops);
  Rng init_rng = Rng::substream(cfg.seed, 7);
  std::vector<Matrix> params(slots);
  for (auto& a : params) {
    Matrix noise(d, d);
    for (int j = 0; j < d; ++j) {
      for (int i = 0; i < d; ++i) {
        noise(i, j) = init_rng.gaussian();
      }
    }
    a = init_scale * Matrix::Identity(d, d) + 0.01 * init_scale * noise;
  }

  auto make_weights = [&](const std::vector<Matrix>& p) {
    RestrictedWeights w;
    w.a = p;
    w.u.assign(p.size(), Vector::Zero(d));
    w.activation = Activation::kLinear;
    w.shared = cfg.looped;
    w.loops = cfg.loops;
    return w;
  };

  auto loss_and_grad = [&](const RestrictedWeights& w, int step,
                           std::vector<Matrix>* grads) {
    if (exact) {
      *grads = loss_gradient(law, w, cfg.loops);
      return loss_trace(law, w, cfg.loops).value;
    }
    grads->assign(slots, Matrix::Zero(d, d));
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(cfg.batch);
    for (long i = 0; i < cfg.batch; ++i) {
      const std::uint64_t inst_seed = splitmix_mix(
          cfg.seed, 0x10000ULL * static_cast<std::uint64_t>(step) + static_cast<std::uint64_t>(i));
      const RegressionInstance inst = sample_instance(law, cfg.n, inst_seed);
      detail::accumulate_instance_gradient(inst, w, cfg.loops, scale, grads, &loss);
    }
    return loss;
  };

  TrainResult result;
  result.history.reserve(cfg.steps + 1);
  double lr = cfg.optimizer.lr;
  int halvings = 0;
  detail::OptimizerState opt(cfg.optimizer, slots, d);

  RestrictedWeights weights = make_weights(params);
  std::vector<Matrix> grads;
  double loss = loss_and_grad(weights, 0, &grads);

  for (int step = 0; step < cfg.steps; ++step) {
    TrainRecord rec{step, loss, detail::gradient_norm(grads), std::nullopt};
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      rec.checkpoint = weights;
    }
    result.history.push_back(std::move(rec));
    if (!std::isfinite(loss)) {
      result.aborted = true;
      break;
    }

    opt.absorb(grads);
    std::vector<Matrix> candidate;
    double cand_loss = 0.0;
    std::vector<Matrix> cand_grads;
    while (true) {
      candidate = opt.apply(params, lr);
      if (cfg.project_inverse_spectrum) {
        for (auto& a : candidate) {
          a = detail::clamp_inverse_spectrum(a, *cfg.project_inverse_spectrum);
        }
      }
      const RestrictedWeights cand_w = make_weights(candidate);
      cand_loss = loss_and_grad(cand_w, step + 1, &cand_grads);
      if (exact && std::isfinite(cand_loss) && cand_loss > loss * 1.01 && halvings < 20) {
        lr *= 0.5;
        ++halvings;
        continue;
      }
      break;
    }
    params = std::move(candidate);
    weights = make_weights(params);
    loss = cand_loss;
    grads = std::move(cand_grads);
  }

  if (!result.aborted) {
    result.history.push_back({cfg.steps, loss, detail::gradient_norm(grads), std::nullopt});
  }
  result.weights = weights;
  result.lr_halvings = halvings;
  result.final_lr = lr;
  return result;
}

/// Held-out loss of a weight set under a covariance law. Linear u = 0 models
/// are scored exactly through the trace formula on the discretized law;
/// everything else falls back to Monte Carlo with the supplied sample count.
inline LossReport evaluate(const RestrictedWeights& w, int loops,
                           const CovarianceDistribution& dist, long samples,
                           std::uint64_t seed, int n = 0) {
  if (w.activation == Activation::kLinear && w.all_u_zero()) {
    return loss_trace(dist.discretized(std::max(64, loops + 1)), w, loops);
  }
  const int cols = n > 0 ? n : 2 * dist.dimension();
  return loss_monte_carlo(dist, w, loops, cols, samples, seed);
}

}  // namespace lilt
