#include "catch_amalgamated.hpp"

#include <cmath>

#include "lsdr/mc.hpp"
#include "test_util.hpp"

using namespace lsdr;
using namespace lsdr::mc;
using Catch::Matchers::WithinAbs;
using estimate::EstimatorKind;

namespace {

McScenario small_scenario(Regime regime, int reps, std::int64_t n) {
  McScenario s;
  s.mixture = synth::MixtureSpec::random(3, 2, 2.0, 1.0, 3);
  s.priors = synth::PriorTruth::from_combined(
      ClassDistribution(Eigen::Vector3d(0.5, 0.3, 0.2)), Eigen::Vector3d(0.4, 0.25, 0.1));
  s.regime = regime;
  s.reps = reps;
  s.n = n;
  s.seed = 17;
  return s;
}

}  // namespace

TEST_CASE("coverage band is the outward binomial quantile", "[mc]") {
  // exact quantiles from the arbitrary-precision oracle
  const auto b200 = coverage_band(200, 0.95);
  CHECK_THAT(b200.lower, WithinAbs(0.895, 1e-12));
  CHECK_THAT(b200.upper, WithinAbs(0.99, 1e-12));
  const auto b500 = coverage_band(500, 0.95);
  CHECK_THAT(b500.lower, WithinAbs(0.916, 1e-12));
  CHECK_THAT(b500.upper, WithinAbs(0.976, 1e-12));
  const auto b1000 = coverage_band(1000, 0.95);
  CHECK_THAT(b1000.lower, WithinAbs(0.927, 1e-12));
  CHECK_THAT(b1000.upper, WithinAbs(0.969, 1e-12));
  CHECK(b500.contains(0.95));
  CHECK_FALSE(b500.contains(0.9));
}

TEST_CASE("log-log slope", "[mc]") {
  const std::vector<double> x{1000, 4000, 16000};
  std::vector<double> y;
  for (double v : x) y.push_back(3.0 * std::pow(v, -0.5));
  CHECK_THAT(loglog_slope(x, y), WithinAbs(-0.5, 1e-12));
  CHECK_THROWS(loglog_slope({1.0}, {1.0}));
}

TEST_CASE("corruptions", "[mc]") {
  Rng rng(4);
  const Matrix p = testing::random_posteriors(5, 3, rng);
  CHECK((temper_posteriors(p, 1.0) - p).cwiseAbs().maxCoeff() < 1e-15);
  const Matrix hot = temper_posteriors(p, 2.0);
  for (Eigen::Index i = 0; i < 5; ++i) {
    CHECK_THAT(hot.row(i).sum(), WithinAbs(1.0, 1e-12));
    // tempering keeps the argmax and flattens the row
    Eigen::Index a, b;
    p.row(i).maxCoeff(&a);
    hot.row(i).maxCoeff(&b);
    CHECK(a == b);
    CHECK(hot.row(i).maxCoeff() <= p.row(i).maxCoeff() + 1e-15);
  }
  const MissingnessMechanism m(Eigen::Vector3d(0.2, 0.4, 0.6), 0.4);
  const auto s = scale_propensity(m, 2.0);
  CHECK_THAT(s[0], WithinAbs(0.4, 1e-15));
  CHECK(s[2] == 1.0);
  CHECK(scale_propensity(m, 1.0).propensity() == m.propensity());
}

TEST_CASE("oracle regime has no relative bias and sane coverage", "[mc]") {
  auto s = small_scenario(Regime::oracle_both, 60, 2000);
  const auto r = run_replications(s);
  CHECK(r.completed == 60);
  CHECK(r.failures == 0);
  const auto& dr = r.summary(EstimatorKind::doubly_robust);
  CHECK(dr.relative_bias.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(dr.coverage.has_value());
  CHECK(dr.coverage->minCoeff() >= 0.8);
  // each component of the DR bias is within 4 standard errors of zero
  for (int c = 0; c < 3; ++c) CHECK(std::abs(dr.bias[c]) <= 4 * dr.bias_se[c]);
  CHECK(r.summary(EstimatorKind::outcome_regression).estimator == EstimatorKind::outcome_regression);
}

TEST_CASE("replications are reproducible and order independent", "[mc]") {
  auto s = small_scenario(Regime::corrupted, 6, 600);
  s.corruption.temperature = 1.5;
  const auto a = run_replication(s, 3);
  const auto b = run_replication(s, 3);
  REQUIRE(a.ok);
  for (std::size_t k = 0; k < a.raw.size(); ++k) CHECK(a.raw[k] == b.raw[k]);
  std::vector<Replication> reps;
  for (int i = 5; i >= 0; --i) reps.push_back(run_replication(s, i));
  const auto fwd = run_replications(s);
  const auto rev = summarize_replications(s, reps);
  CHECK(fwd.summary(EstimatorKind::doubly_robust).bias ==
        rev.summary(EstimatorKind::doubly_robust).bias);
}

TEST_CASE("DR with oracle posterior: bias is zero unclipped and follows the clipping formula",
          "[mc][property]") {
  // With the Bayes posterior and propensity pi_hat = clip(s pi), the DR bias
  // of component c is E[(pi(Y)/pi_hat(Y) - 1)(1(Y=c) - p(c|X))]. It vanishes
  // when pi/pi_hat is constant, i.e. when nothing is clipped.
  auto s = small_scenario(Regime::corrupted, 200, 4000);
  s.corruption.propensity_scale = 2.0;  // max propensity 0.4 -> 0.8, unclipped
  const auto unclipped = run_replications(s).summary(EstimatorKind::doubly_robust);
  for (int c = 0; c < 3; ++c) CHECK(std::abs(unclipped.bias[c]) <= 4 * unclipped.bias_se[c]);

  s.corruption.propensity_scale = 4.0;  // class 0: 0.4 -> 1.0 clipped
  const auto clipped = run_replications(s).summary(EstimatorKind::doubly_robust);

  const auto big = synth::sample_iid(s.mixture, s.priors, 400000, 99);
  const Matrix post =
      synth::bayes_posterior_batch(s.mixture, s.priors.combined_prior, big.data.features());
  const auto pi = s.priors.mechanism();
  const auto pi_hat = scale_propensity(pi, 4.0);
  Vector mean = Vector::Zero(3), mean2 = Vector::Zero(3);
  const double n = static_cast<double>(big.data.size());
  for (std::int64_t i = 0; i < big.data.size(); ++i) {
    const int y = big.truth.hidden_labels[i];
    const double ratio = pi[y] / pi_hat[y] - 1.0;
    for (int c = 0; c < 3; ++c) {
      const double t = ratio * ((y == c ? 1.0 : 0.0) - post(i, c));
      mean[c] += t / n;
      mean2[c] += t * t / n;
    }
  }
  bool any_nonzero = false;
  for (int c = 0; c < 3; ++c) {
    const double formula_se = std::sqrt((mean2[c] - mean[c] * mean[c]) / n);
    CHECK(std::abs(clipped.bias[c] - mean[c]) <= 4 * (clipped.bias_se[c] + formula_se));
    if (std::abs(mean[c]) > 6 * formula_se) any_nonzero = true;
  }
  CHECK(any_nonzero);
}

TEST_CASE("scenario validation", "[mc]") {
  auto s = small_scenario(Regime::oracle_both, 1, 2000);
  CHECK_THROWS(s.validate());
  s.reps = 10;
  s.n = 20;
  CHECK_THROWS(s.validate());
  s.n = 2000;
  s.level = 1.0;
  CHECK_THROWS(s.validate());
  CHECK(parse_regime(to_string(Regime::oracle_propensity_only)) == Regime::oracle_propensity_only);
}
