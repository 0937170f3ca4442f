#include "lilt/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace lilt {
namespace {

RegressionInstance instance_with_spectrum(int d, int n, double lo, double hi,
                                          std::uint64_t seed) {
  Rng rng(seed);
  const auto dist = CovarianceDistribution::fixed(random_spd(d, lo, hi, rng));
  RegressionInstance inst = sample_instance(dist, n, seed);
  // The adversary's ratio needs a target away from zero.
  while (std::abs(inst.target()) < 0.1 * inst.w_star.norm() * inst.x_q.norm()) {
    inst = sample_instance(dist, n, ++seed);
  }
  return inst;
}

TEST(ScalingAdversary, ZeroWeightsHaveUnitErrorEverywhere) {
  const RegressionInstance inst = instance_with_spectrum(3, 6, 0.8, 2.0, 1);
  const RestrictedWeights w = RestrictedWeights::looped(Matrix::Zero(3, 3), 2);
  const ScalingSearchResult result = scaling_adversary(inst, w, 2, 512);
  EXPECT_DOUBLE_EQ(result.relative_error, 1.0);
  EXPECT_DOUBLE_EQ(result.gamma_star, 1.0);  // smallest-gamma tie break
  ASSERT_TRUE(result.bad_interval.has_value());
  EXPECT_DOUBLE_EQ(result.bad_interval->first, 1.0);
  EXPECT_DOUBLE_EQ(result.bad_interval->second, 144.0);
}

TEST(ScalingAdversary, ChebyshevWeightsAreAccurateAtOneButBreakUnderScaling) {
  const int loops = 4;
  const SpectrumRange range{1.0, 4.0};
  const RestrictedWeights w = chebyshev_weights(range, loops, 3);
  const RegressionInstance inst = instance_with_spectrum(3, 6, 1.0, 4.0, 3);
  const ScalingSearchResult result = scaling_adversary(inst, w, loops, 2048);
  EXPECT_LE(result.grid[0].second, 0.05);  // in-range accuracy at gamma = 1
  EXPECT_GE(result.relative_error, 0.25);
  EXPECT_LE(result.gamma_star, 36.0 * loops * loops);
}

TEST(ScalingAdversary, UnrestrictedSearchUsesLogSpacedGammas) {
  const RegressionInstance inst = instance_with_spectrum(2, 4, 0.8, 1.5, 5);
  const RestrictedWeights rw = RestrictedWeights::looped(Matrix::Zero(2, 2), 3);
  const FullWeights fw = embed_restricted(rw, 3);
  const ScalingSearchResult result = scaling_adversary(inst, fw, 256);
  EXPECT_DOUBLE_EQ(result.gamma_hi, 8.0);
  EXPECT_DOUBLE_EQ(result.relative_error, 1.0);
}

TEST(ScalingAdversary, RejectsOrthogonalQueries) {
  RegressionInstance inst;
  inst.x = Matrix::Identity(2, 2);
  inst.w_star = Vector::Zero(2);
  inst.w_star(0) = 1.0;
  inst.y = inst.x.transpose() * inst.w_star;
  inst.x_q = Vector::Zero(2);
  inst.x_q(1) = 1.0;  // w*^T x_q = 0
  const RestrictedWeights w = RestrictedWeights::looped(Matrix::Identity(2, 2), 1);
  EXPECT_THROW(scaling_adversary(inst, w, 1, 64), std::invalid_argument);
}

TEST(ScalingAdversary, OverflowCountsAsInfiniteErrorWitness) {
  const RegressionInstance inst = instance_with_spectrum(2, 4, 1.0, 2.0, 7);
  // Large shared step at depth 8: scaled instances overflow double range.
  const RestrictedWeights w = RestrictedWeights::looped(1e40 * Matrix::Identity(2, 2), 8);
  const ScalingSearchResult result = scaling_adversary(inst, w, 8, 512);
  EXPECT_TRUE(std::isinf(result.relative_error));
}

TEST(DegreeOracle, LinearRestrictedSingleLayerIsExactlyQuadratic) {
  const RegressionInstance inst = instance_with_spectrum(3, 6, 0.8, 2.0, 11);
  Rng rng(12);
  const RestrictedWeights w =
      RestrictedWeights::looped(0.3 * random_spd(3, 0.5, 1.5, rng), 1);
  const DegreeReport report = degree_oracle(inst, w, 1, 8);
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.claimed_degree, 2);
  EXPECT_EQ(report.fitted_degree, 2);
  EXPECT_TRUE(report.parity_even);
}

TEST(DegreeOracle, ReluRestrictedStaysWithinTwiceDepth) {
  Rng rng(13);
  for (int loops : {1, 2, 3}) {
    const RegressionInstance inst = instance_with_spectrum(3, 6, 0.8, 2.0, 20 + loops);
    std::vector<Matrix> layers;
    for (int t = 0; t < loops; ++t) {
      Matrix a(3, 3);
      for (int j = 0; j < 3; ++j) {
        for (int i = 0; i < 3; ++i) {
          a(i, j) = 0.3 * rng.gaussian();
        }
      }
      layers.push_back(a);
    }
    const RestrictedWeights w =
        RestrictedWeights::multilayer(std::move(layers), Activation::kRelu);
    const DegreeReport report = degree_oracle(inst, w, loops, 2 * loops + 6);
    EXPECT_TRUE(report.passed) << "L=" << loops
                               << " residual=" << report.max_interp_residual;
    EXPECT_LE(report.fitted_degree, 2 * loops);
    EXPECT_TRUE(report.parity_even);
  }
}

TEST(DegreeOracle, UnrestrictedLinearStaysWithinThreePowDepth) {
  Rng rng(14);
  const RegressionInstance inst = instance_with_spectrum(2, 4, 0.8, 1.5, 31);
  for (int depth : {1, 2}) {
    FullWeights w;
    w.activation = Activation::kLinear;
    for (int t = 0; t < depth; ++t) {
      Matrix p(3, 3), q(3, 3);
      for (int j = 0; j < 3; ++j) {
        for (int i = 0; i < 3; ++i) {
          p(i, j) = 0.25 * rng.gaussian();
          q(i, j) = 0.25 * rng.gaussian();
        }
      }
      w.p.push_back(p);
      w.q.push_back(q);
    }
    const int claimed = depth == 1 ? 3 : 9;
    const DegreeReport report = degree_oracle(inst, w, claimed + 4);
    EXPECT_TRUE(report.passed) << "depth=" << depth;
    EXPECT_LE(report.fitted_degree, claimed);
  }
}

TEST(DegreeOracle, RequiresEnoughSamples) {
  const RegressionInstance inst = instance_with_spectrum(2, 4, 0.8, 1.5, 41);
  const RestrictedWeights w = RestrictedWeights::looped(0.2 * Matrix::Identity(2, 2), 3);
  EXPECT_THROW(degree_oracle(inst, w, 3, 7), std::invalid_argument);  // needs >= 8
}

TEST(AlternationCheck, LinearCaseHasEndpointExtrema) {
  const AlternationCertificate cert = chebyshev_alternation_check(1, 1.0, 100.0);
  EXPECT_TRUE(cert.passed);
  ASSERT_EQ(cert.extrema_values.size(), 2u);
  EXPECT_NEAR(cert.extrema_values[0], 1.0, 1e-12);
  EXPECT_NEAR(cert.extrema_values[1], -1.0, 1e-12);
}

TEST(AlternationCheck, ClassicalT2Identity) {
  EXPECT_DOUBLE_EQ(detail::chebyshev_t(2, 0.0), -1.0);  // T_2(x) = 2x^2 - 1
  EXPECT_DOUBLE_EQ(detail::chebyshev_t(3, -1.0), -1.0);
  EXPECT_NEAR(detail::chebyshev_t(5, 1.5), 61.5, 1e-9);  // 16x^5 - 20x^3 + 5x at 1.5
}

TEST(AlternationCheck, WideRangeWitness) {
  const AlternationCertificate cert = chebyshev_alternation_check(2, 1.0, 400.0);
  EXPECT_TRUE(cert.passed);
  // Q_2(0) = T_2(-401/399) = 162401/159201, frozen from exact rationals.
  EXPECT_NEAR(cert.q_at_zero, 162401.0 / 159201.0, 1e-9);
  EXPECT_LE(std::abs(cert.q_at_zero), 4.0);
  EXPECT_GE(cert.interval_width, cert.required_width);
}

TEST(AlternationCheck, RejectsOutsideRegime) {
  EXPECT_THROW(chebyshev_alternation_check(4, 1.0, 100.0), std::invalid_argument);
}

TEST(Termination, ExactPreconditionerStopsAfterOneLayer) {
  const RegressionInstance inst = instance_with_spectrum(3, 6, 1.0, 2.0, 51);
  const Matrix sigma_inv = spd_factorize(inst.covariance()).inverse;
  const RestrictedWeights w = RestrictedWeights::looped(sigma_inv, 4);
  const TerminationResult result = termination_monitor(inst, w, 4, 1e-3);
  ASSERT_TRUE(result.stop_layer.has_value());
  EXPECT_EQ(*result.stop_layer, 1);
  EXPECT_LE(result.true_error, 1e-10);
}

TEST(Termination, HugeToleranceStopsImmediately) {
  const RegressionInstance inst = instance_with_spectrum(3, 6, 1.0, 2.0, 52);
  const RestrictedWeights w = gd_weights({1.0, 2.0}, 8, 3);
  const SpdFactors f = spd_factorize(inst.covariance());
  const double huge =
      2.0 * inst.y.norm() * std::sqrt(inst.x_q.dot(f.inverse * inst.x_q));
  const TerminationResult result = termination_monitor(inst, w, 8, huge);
  ASSERT_TRUE(result.stop_layer.has_value());
  EXPECT_EQ(*result.stop_layer, 0);
}

TEST(Termination, GuaranteeNeverViolatedAndAdaptsToConditioning) {
  const SpectrumRange range{1.0, 8.0};
  const int l_max = 512;
  const RestrictedWeights w = gd_weights(range, l_max, 4);
  std::vector<int> easy_stops, hard_stops;
  Rng rng(53);
  for (int rep = 0; rep < 200; ++rep) {
    // Easy: kappa = 1 (scalar covariance); hard: spectrum spanning [1, 8].
    const double s = rng.uniform(1.0, 8.0);
    const auto easy = CovarianceDistribution::fixed(s * Matrix::Identity(4, 4));
    const auto hard = CovarianceDistribution::fixed(random_spd(4, 1.0, 8.0, rng, true));
    for (const auto* dist : {&easy, &hard}) {
      RegressionInstance inst = sample_instance(*dist, 8, 6000 + rep);
      if (std::abs(inst.target()) < 1e-8 * inst.w_star.norm() * inst.x_q.norm()) {
        continue;
      }
      const double eps = 1e-3 * std::abs(inst.target());
      const TerminationResult result = termination_monitor(inst, w, l_max, eps);
      ASSERT_TRUE(result.stop_layer.has_value());
      EXPECT_LE(result.true_error, eps);
      EXPECT_LE(result.guaranteed_error, eps);
      (dist == &easy ? easy_stops : hard_stops).push_back(*result.stop_layer);
    }
  }
  const auto median = [](std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  EXPECT_LT(median(easy_stops), median(hard_stops));
}

TEST(Blowup, MatchesTheWorkedExample) {
  // L=3, d=4, delta'=0.5, full mass shifted to 8 alpha I: bound 162.
  const BlowupResult result = multilayer_blowup_experiment(1.0, 16.0, 3, 4, 0.5, 1.0);
  EXPECT_LE(result.train_loss, 1e-9);
  EXPECT_TRUE(result.train_right_spread_out);
  EXPECT_DOUBLE_EQ(result.bound, 0.5 * 4 * 81.0);
  EXPECT_GE(result.ood_loss, result.bound);
  EXPECT_TRUE(result.bound_satisfied);
}

TEST(Blowup, DegenerateSingleLayerBoundFormula) {
  const BlowupResult result = multilayer_blowup_experiment(1.0, 16.0, 1, 3, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(result.bound, 0.5 * 0.5 * 3.0);  // 9^0 = 1
  EXPECT_LE(result.train_loss, 1e-12);
}

TEST(Blowup, GrowsNinefoldPerLayer) {
  double prev = 0.0;
  for (int loops : {2, 3, 4}) {
    const BlowupResult result = multilayer_blowup_experiment(1.0, 16.0, loops, 2, 0.5, 1.0);
    EXPECT_TRUE(result.bound_satisfied);
    if (prev > 0.0) {
      EXPECT_GE(result.ood_loss, 9.0 * prev);
    }
    prev = result.ood_loss;
  }
}

TEST(Blowup, RejectsRegimeViolations) {
  EXPECT_THROW(multilayer_blowup_experiment(1.0, 5.0, 2, 2, 0.5, 1.0), std::invalid_argument);
  EXPECT_THROW(multilayer_blowup_experiment(1.0, 12.0, 2, 2, 0.5, 1.0), std::invalid_argument);
}

TEST(Robustness, FixedBetaTrainLawRecoversInverseBeta) {
  const double beta = 8.0;
  const int d = 3;
  const int loops = 8;
  const auto train_dist = CovarianceDistribution::point_mass_mixture(
      {{Matrix::Identity(d, d), 0.5}, {beta * Matrix::Identity(d, d), 0.5}});
  // (1/2, 0) right-spread-out; test inside (alpha, (1 - delta') beta).
  const double eps_prime = 0.5;
  const double delta_prime = std::log(d / eps_prime) / loops;
  const double top = (1.0 - delta_prime) * beta;
  const auto test_dist = CovarianceDistribution::windowed_mixture(
      d, {1.5, 0.5 * (1.5 + top), top - 0.5}, 0.25);
  const RobustnessResult result = looped_robustness_experiment(
      train_dist, 0.5, 0.0, loops, test_dist, eps_prime, 1200, 2e-2, 3);
  EXPECT_TRUE(result.bound_satisfied)
      << "test loss " << result.test_loss << " bound " << result.bound;
  EXPECT_LE(result.test_loss, result.bound);
}

TEST(Robustness, VacuousEpsilonAlwaysPasses) {
  const int d = 2;
  const auto train_dist = CovarianceDistribution::fixed(4.0 * Matrix::Identity(d, d));
  // A point mass at beta I is (eps, 0) right-spread-out for every eps <= 1;
  // eps' = d makes the proof bound vacuous.
  const double eps_prime = 1.0;
  const int loops = 10;
  const double delta_prime = std::log(d / eps_prime) / loops;
  const auto test_dist = CovarianceDistribution::fixed(
      0.9 * (1.0 - delta_prime) * 4.0 * Matrix::Identity(d, d));
  EXPECT_THROW(looped_robustness_experiment(train_dist, 1.0, 0.0, loops, test_dist,
                                            eps_prime, 400, 2e-2, 4),
               std::invalid_argument);
  // alpha = beta = 4 makes delta' <= 1 - alpha/beta = 0 impossible: regime
  // rejection is the expected behavior for a degenerate train law.
}

TEST(Robustness, ScalarTrainLawBoundHolds) {
  const int d = 4;
  const int loops = 10;
  const double beta = 8.0;
  std::vector<std::pair<Matrix, double>> comps;
  for (double s : {1.0, 3.0, 5.5, beta}) {
    comps.push_back({s * Matrix::Identity(d, d), 0.25});
  }
  const auto train_dist = CovarianceDistribution::point_mass_mixture(comps);
  const double eps_prime = 0.25;
  const double delta_prime = std::log(d / eps_prime) / loops;
  const double top = (1.0 - delta_prime) * beta;
  const auto test_dist =
      CovarianceDistribution::scalar_uniform(d, 1.0, top);
  const RobustnessResult result = looped_robustness_experiment(
      train_dist, 0.25, 0.0, loops, test_dist, eps_prime, 1200, 2e-2, 5);
  EXPECT_TRUE(result.bound_satisfied);
  EXPECT_TRUE(result.converged) << "grad norm " << result.final_grad_norm;
}

TEST(Monotonicity, EqualWeightsAtTheMinimizerAreMonotone) {
  Rng rng(61);
  const Matrix sigma = random_spd(3, 1.0, 2.0, rng);
  const RestrictedWeights w =
      RestrictedWeights::looped(spd_factorize(sigma).inverse, 4);
  const LoopedTailCheck check = looped_monotone_tail(w, sigma);
  EXPECT_TRUE(check.decreasing_everywhere);
  EXPECT_TRUE(check.monotone);
  EXPECT_DOUBLE_EQ(check.l0, 0.0);
}

TEST(Monotonicity, SpecExampleProducesANonMonotoneWitness) {
  // A^(0) = I, A^(1) = 4I in d = 2: some c with c q0 < 2 < c q1 exists and
  // the per-depth sequence must rise after falling (or vice versa).
  const RestrictedWeights w =
      RestrictedWeights::multilayer({Matrix::Identity(2, 2), 4.0 * Matrix::Identity(2, 2)});
  const MonotonicityReport report = monotonicity_probe(w, 64, 1);
  EXPECT_FALSE(report.is_looped);
  ASSERT_TRUE(report.witness.has_value());
  EXPECT_TRUE(detail::strictly_non_monotone(report.witness->depth_losses));
  ASSERT_EQ(report.witness->depth_losses.size(), 3u);
  EXPECT_DOUBLE_EQ(report.witness->depth_losses[0], 2.0);
}

TEST(Monotonicity, WitnessSequenceMatchesTraceFormulaOnRankOneCovariance) {
  Rng rng(62);
  std::vector<Matrix> layers = {random_spd(3, 0.5, 1.0, rng), random_spd(3, 2.0, 4.0, rng)};
  const RestrictedWeights w = RestrictedWeights::multilayer(std::move(layers));
  const MonotonicityReport report = monotonicity_probe(w, 64, 2);
  ASSERT_TRUE(report.witness.has_value());
  const auto& witness = *report.witness;
  // Rank-one Sigma = c v v^T: per-depth trace losses, via raw B products.
  const Matrix sqrt_sigma = std::sqrt(witness.scale) * witness.v * witness.v.transpose();
  Matrix prod = Matrix::Identity(3, 3);
  for (std::size_t t = 0; t < witness.depth_losses.size(); ++t) {
    EXPECT_NEAR(witness.depth_losses[t], prod.squaredNorm(), 1e-9 * (1.0 + prod.squaredNorm()))
        << "depth " << t;
    if (t < 2) {
      prod = prod * (Matrix::Identity(3, 3) -
                     sqrt_sigma * w.layer_a(static_cast<int>(t)) * sqrt_sigma);
    }
  }
}

TEST(Monotonicity, ContractiveLoopedSpectraDecreaseForever) {
  // All |1 - beta_j| <= 1: loss non-increasing in L from the start.
  const Matrix sigma = 2.0 * Matrix::Identity(3, 3);
  const RestrictedWeights w = RestrictedWeights::looped(0.4 * Matrix::Identity(3, 3), 4);
  const LoopedTailCheck check = looped_monotone_tail(w, sigma, 80);
  EXPECT_TRUE(check.decreasing_everywhere);
  EXPECT_TRUE(check.monotone);
}

TEST(Monotonicity, ExpandingLoopedSpectraHaveMonotoneTails) {
  // beta eigenvalue 3 => |1 - 3| = 2 > 1: increasing for L >= L0.
  const Matrix sigma = 3.0 * Matrix::Identity(4, 4);
  const RestrictedWeights w = RestrictedWeights::looped(Matrix::Identity(4, 4), 4);
  const LoopedTailCheck check = looped_monotone_tail(w, sigma, 60);
  EXPECT_FALSE(check.decreasing_everywhere);
  EXPECT_GE(check.l0, 0.0);
  EXPECT_TRUE(check.monotone);
  // L0 = ln(d / (r - 1)) / ln(r) with r = 2, d = 4.
  EXPECT_NEAR(check.l0, std::log(4.0) / std::log(2.0), 1e-12);
}

TEST(Monotonicity, LoopedProbeSamplesCovariances) {
  const RestrictedWeights w = RestrictedWeights::looped(Matrix::Identity(3, 3), 5);
  const MonotonicityReport report = monotonicity_probe(w, 16, 3);
  EXPECT_TRUE(report.is_looped);
  EXPECT_FALSE(report.witness.has_value());
  EXPECT_TRUE(report.tails_monotone);
}

}  // namespace
}  // namespace lilt
