#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "lilt/instances.hpp"
#include "lilt/linalg.hpp"

namespace lilt {

enum class Activation { kLinear, kRelu };

// Raised when a forward pass produces a non-finite entry. The layer index is
// the 0-based layer whose update first overflowed; the blowup experiments
// rely on it.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(int layer_index, const std::string& what)
      : std::runtime_error(what), layer(layer_index) {}
  int layer;
};

/// Weights of the restricted attention pattern: per layer a d x d matrix A
/// (the preconditioner block of Q) and a d-vector u (the only nonzero row of
/// P besides its unit corner). Looped models store a single shared (A, u)
/// pair and the loop count.
struct RestrictedWeights {
  std::vector<Matrix> a;
  std::vector<Vector> u;
  Activation activation = Activation::kLinear;
  bool shared = false;
  int loops = 0;  // depth for shared weights; equals a.size() otherwise

  static RestrictedWeights multilayer(std::vector<Matrix> a_layers,
                                      Activation act = Activation::kLinear) {
    RestrictedWeights w;
    w.a = std::move(a_layers);
    if (w.a.empty()) {
      throw std::invalid_argument("multilayer weights need at least one layer");
    }
    const int d = static_cast<int>(w.a[0].rows());
    w.u.assign(w.a.size(), Vector::Zero(d));
    w.activation = act;
    w.shared = false;
    w.loops = static_cast<int>(w.a.size());
    return w;
  }

  static RestrictedWeights looped(Matrix a_shared, int loop_count,
                                  Activation act = Activation::kLinear) {
    RestrictedWeights w;
    const int d = static_cast<int>(a_shared.rows());
    w.a.push_back(std::move(a_shared));
    w.u.push_back(Vector::Zero(d));
    w.activation = act;
    w.shared = true;
    w.loops = loop_count;
    return w;
  }

  int dimension() const { return static_cast<int>(a.at(0).rows()); }
  int depth() const { return shared ? loops : static_cast<int>(a.size()); }
  const Matrix& layer_a(int t) const { return shared ? a[0] : a.at(t); }
  const Vector& layer_u(int t) const { return shared ? u[0] : u.at(t); }

  bool all_u_zero() const {
    for (const auto& ut : u) {
      if (ut.cwiseAbs().maxCoeff() != 0.0) {
        return false;
      }
    }
    return true;
  }

  void validate(int requested_loops) const {
    if (a.size() != u.size() || a.empty()) {
      throw std::invalid_argument("restricted weights: A/u layer mismatch");
    }
    const int d = dimension();
    for (std::size_t t = 0; t < a.size(); ++t) {
      if (a[t].rows() != d || a[t].cols() != d || u[t].size() != d) {
        throw std::invalid_argument("restricted weights: inconsistent dimensions");
      }
    }
    if (!shared && requested_loops != static_cast<int>(a.size())) {
      throw std::invalid_argument(
          "restricted weights: loop count must equal stored layers for multilayer weights");
    }
    if (requested_loops < 1) {
      throw std::invalid_argument("restricted weights: loop count must be >= 1");
    }
  }
};

/// Unrestricted attention weights: per layer the (d+1) x (d+1) matrices P and
/// Q of the update Z <- Z - P Z M sigma(Z^T Q Z).
struct FullWeights {
  std::vector<Matrix> p;
  std::vector<Matrix> q;
  Activation activation = Activation::kLinear;

  int dimension() const { return static_cast<int>(p.at(0).rows()) - 1; }
  int depth() const { return static_cast<int>(p.size()); }

  void validate() const {
    if (p.size() != q.size() || p.empty()) {
      throw std::invalid_argument("full weights: P/Q layer mismatch");
    }
    const auto rows = p[0].rows();
    for (std::size_t t = 0; t < p.size(); ++t) {
      if (p[t].rows() != rows || p[t].cols() != rows || q[t].rows() != rows ||
          q[t].cols() != rows) {
        throw std::invalid_argument("full weights: inconsistent dimensions");
      }
    }
  }
};

// Restricted weights embedded into the unrestricted parameterization:
// Q = [[A, 0], [0, 0]], P = [[0, 0], [u^T, 1]].
inline FullWeights embed_restricted(const RestrictedWeights& w, int loops) {
  w.validate(loops);
  const int d = w.dimension();
  FullWeights full;
  full.activation = w.activation;
  for (int t = 0; t < loops; ++t) {
    Matrix q = Matrix::Zero(d + 1, d + 1);
    q.topLeftCorner(d, d) = w.layer_a(t);
    Matrix p = Matrix::Zero(d + 1, d + 1);
    p.bottomLeftCorner(1, d) = w.layer_u(t).transpose();
    p(d, d) = 1.0;
    full.q.push_back(std::move(q));
    full.p.push_back(std::move(p));
  }
  return full;
}

/// Per-layer snapshots of a restricted run: the transformed label row y^(t)
/// and the raw corner entry y_q^(t), for t = 0..L.
struct RestrictedTrace {
  std::vector<Vector> y;
  std::vector<double> y_q;
};

struct FullTrace {
  std::vector<Matrix> z;  // t = 0..L
};

// A note on signs: the raw corner entry y_q^(L) of the iteration converges
// to -w*^T x_q; the transformer output is defined as its negation, which is
// what `prediction` carries. Theorem tests always use the residual
// |prediction - w*^T x_q|, never the sign convention.
struct RestrictedForward {
  double prediction = 0.0;
  double y_q_final = 0.0;  // raw corner entry
  RestrictedTrace trace;
};

struct FullForward {
  double prediction = 0.0;
  double y_q_final = 0.0;
  FullTrace trace;
};

namespace detail {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
Mat<Scalar> apply_activation(Mat<Scalar> m, Activation act) {
  if (act == Activation::kRelu) {
    m = m.unaryExpr([](Scalar x) { return x > Scalar(0) ? x : Scalar(0); });
  }
  return m;
}

template <class Scalar>
Vec<Scalar> apply_activation_vec(Vec<Scalar> v, Activation act) {
  if (act == Activation::kRelu) {
    v = v.unaryExpr([](Scalar x) { return x > Scalar(0) ? x : Scalar(0); });
  }
  return v;
}

// Restricted recursion:
//   y^(t+1)^T  = y^(t)^T  - (y^(t)^T + u^T X) sigma(X^T A X)
//   y_q^(t+1)  = y_q^(t)  - (y^(t)^T + u^T X) sigma(X^T A x_q)
// The feature block of the prompt never changes, so only (y, y_q) is carried.
template <class Scalar>
void run_restricted(const Mat<Scalar>& x, const Vec<Scalar>& y0,
                    const Vec<Scalar>& x_q, const RestrictedWeights& w, int loops,
                    std::vector<Vec<Scalar>>* y_trace, std::vector<Scalar>* yq_trace) {
  Vec<Scalar> y = y0;
  Scalar y_q = Scalar(0);
  y_trace->push_back(y);
  yq_trace->push_back(y_q);
  for (int t = 0; t < loops; ++t) {
    const Mat<Scalar> a = w.layer_a(t).template cast<Scalar>();
    const Vec<Scalar> u = w.layer_u(t).template cast<Scalar>();
    const Mat<Scalar> ax = a * x;
    const Mat<Scalar> scores =
        apply_activation<Scalar>(Mat<Scalar>(x.transpose() * ax), w.activation);
    const Vec<Scalar> q_scores =
        apply_activation_vec<Scalar>(Vec<Scalar>(x.transpose() * (a * x_q)), w.activation);
    const Vec<Scalar> row = y + Vec<Scalar>(x.transpose() * u);
    y = y - Vec<Scalar>(scores.transpose() * row);
    y_q = y_q - row.dot(q_scores);
    if (!y.allFinite() || !std::isfinite(static_cast<double>(y_q))) {
      throw NonFiniteError(t, "forward_restricted: non-finite at layer " + std::to_string(t));
    }
    y_trace->push_back(y);
    yq_trace->push_back(y_q);
  }
}

template <class Scalar>
void run_full(const Mat<Scalar>& z0, const FullWeights& w,
              std::vector<Mat<Scalar>>* z_trace) {
  const int n = static_cast<int>(z0.cols()) - 1;
  Mat<Scalar> mask = Mat<Scalar>::Identity(n + 1, n + 1);
  mask(n, n) = Scalar(0);
  Mat<Scalar> z = z0;
  z_trace->push_back(z);
  for (int t = 0; t < w.depth(); ++t) {
    const Mat<Scalar> p = w.p[t].template cast<Scalar>();
    const Mat<Scalar> q = w.q[t].template cast<Scalar>();
    const Mat<Scalar> scores = apply_activation<Scalar>(
        Mat<Scalar>(z.transpose() * q * z), w.activation);
    z = z - p * z * mask * scores;
    if (!z.allFinite()) {
      throw NonFiniteError(t, "forward_full: non-finite at layer " + std::to_string(t));
    }
    z_trace->push_back(z);
  }
}

}  // namespace detail

inline RestrictedForward forward_restricted(const RegressionInstance& inst,
                                            const RestrictedWeights& w, int loops) {
  w.validate(loops);
  if (w.dimension() != inst.d()) {
    throw std::invalid_argument("forward_restricted: dimension mismatch");
  }
  RestrictedForward out;
  detail::run_restricted<double>(inst.x, inst.y, inst.x_q, w, loops, &out.trace.y,
                                 &out.trace.y_q);
  out.y_q_final = out.trace.y_q.back();
  out.prediction = -out.y_q_final;
  return out;
}

inline FullForward forward_full(const PromptMatrix& prompt, const FullWeights& w) {
  w.validate();
  if (w.dimension() != prompt.d()) {
    throw std::invalid_argument("forward_full: dimension mismatch");
  }
  FullForward out;
  detail::run_full<double>(prompt.z, w, &out.trace.z);
  out.y_q_final = out.trace.z.back()(prompt.d(), prompt.n());
  out.prediction = -out.y_q_final;
  return out;
}

/// Closed-form output of the linear restricted model with u = 0:
///   prediction = w*^T (I - prod_{i=0}^{L-1} (I - Sigma A^(i))) x_q,
/// with Sigma = X X^T. Must agree with the iterated forward pass.
inline double closed_form_prediction(const RegressionInstance& inst,
                                     const RestrictedWeights& w, int loops) {
  w.validate(loops);
  if (w.activation != Activation::kLinear || !w.all_u_zero()) {
    throw std::invalid_argument("closed form unavailable: requires linear activation and u = 0");
  }
  const int d = inst.d();
  const Matrix sigma = inst.covariance();
  Matrix prod = Matrix::Identity(d, d);
  for (int t = 0; t < loops; ++t) {
    prod = prod * (Matrix::Identity(d, d) - sigma * w.layer_a(t));
  }
  return inst.w_star.dot((Matrix::Identity(d, d) - prod) * inst.x_q);
}

inline double prediction_residual(const RegressionInstance& inst, double prediction) {
  return std::abs(prediction - inst.target());
}

}  // namespace lilt
