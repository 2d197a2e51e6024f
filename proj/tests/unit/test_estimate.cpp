#include "catch_amalgamated.hpp"

#include "lsdr/estimate.hpp"
#include "lsdr/synth.hpp"
#include "test_util.hpp"

using namespace lsdr;
using namespace lsdr::estimate;
using Catch::Matchers::WithinAbs;

namespace {

PosteriorFn constant_posterior(const Vector& p) {
  return [p](const Matrix& x) {
    Matrix out(x.rows(), p.size());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = p.transpose();
    return out;
  };
}

/// Posterior read from the first feature column, which stores a row index.
PosteriorFn table_posterior(const Matrix& table) {
  return [table](const Matrix& x) {
    Matrix out(x.rows(), table.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = table.row(static_cast<Eigen::Index>(x(i, 0)));
    return out;
  };
}

Matrix index_features(int n) {
  Matrix x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = i;
  return x;
}

}  // namespace

TEST_CASE("outcome regression", "[estimate]") {
  const auto d = testing::make_dataset(3, index_features(4), {0, -1, 2, -1});
  const NuisancePair uniform{constant_posterior(Vector::Constant(3, 1.0 / 3)),
                             MissingnessMechanism::constant(3, 0.5)};
  const auto r = or_estimate(uniform, d);
  CHECK(r.p_combined.approx_equal(ClassDistribution::uniform(3), 1e-15));
  CHECK_FALSE(r.influence_variance.has_value());
  CHECK_FALSE(r.ci_half_width.has_value());

  // one-hot oracle labels give the empirical class frequencies
  Matrix onehot = Matrix::Zero(4, 3);
  const int truth[] = {0, 1, 2, 2};
  for (int i = 0; i < 4; ++i) onehot(i, truth[i]) = 1.0;
  const NuisancePair oracle{table_posterior(onehot), MissingnessMechanism::constant(3, 0.5)};
  CHECK(or_estimate(oracle, d).p_combined.approx_equal(ClassDistribution(Eigen::Vector3d(0.25, 0.25, 0.5)), 1e-15));
}

TEST_CASE("inverse probability weighting", "[estimate]") {
  const auto d = testing::make_dataset(2, index_features(4), {0, 1, -1, -1});
  const NuisancePair half{constant_posterior(Vector::Constant(2, 0.5)),
                          MissingnessMechanism::constant(2, 0.5)};
  const auto r = ipw_estimate(half, d);
  CHECK_THAT(r.raw[0], WithinAbs(0.5, 1e-15));
  CHECK_THAT(r.raw[1], WithinAbs(0.5, 1e-15));

  const auto d2 = testing::make_dataset(2, index_features(4), {0, -1, -1, -1});
  const auto r2 = ipw_estimate(half, d2);
  CHECK_THAT(r2.raw[0], WithinAbs(0.5, 1e-15));
  CHECK(r2.raw[1] == 0.0);
  CHECK_THAT(r2.raw.sum(), WithinAbs(0.5, 1e-15));

  const auto full = testing::make_dataset(2, index_features(4), {0, 1, 1, 1});
  const NuisancePair one{constant_posterior(Vector::Constant(2, 0.5)), MissingnessMechanism::constant(2, 1.0)};
  CHECK(ipw_estimate(one, full).raw.isApprox(Vector(Eigen::Vector2d(0.25, 0.75))));
}

TEST_CASE("doubly robust estimate", "[estimate]") {
  Rng rng(4);
  const Matrix post = testing::random_posteriors(6, 3, rng);
  const auto full = testing::make_dataset(3, index_features(6), {0, 2, 2, 1, 0, 2});
  const NuisancePair unit{table_posterior(post), MissingnessMechanism::constant(3, 1.0)};
  const auto r = dr_estimate(unit, full);
  CHECK((r.raw - Vector(Eigen::Vector3d(2.0 / 6, 1.0 / 6, 3.0 / 6))).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK_FALSE(r.p_unlabeled.has_value());

  const auto single = testing::make_dataset(3, index_features(1), {-1});
  const NuisancePair any{table_posterior(post), MissingnessMechanism::constant(3, 0.4)};
  CHECK((dr_estimate(any, single).raw - post.row(0).transpose()).norm() <= 1e-15);
}

TEST_CASE("doubly robust report fields", "[estimate]") {
  Rng rng(8);
  const Matrix post = testing::random_posteriors(50, 3, rng);
  std::vector<int> labels(50, -1);
  for (int i = 0; i < 50; i += 3) labels[i] = i % 3;
  const auto d = testing::make_dataset(3, index_features(50), labels);
  const NuisancePair n{table_posterior(post),
                       MissingnessMechanism(Eigen::Vector3d(0.3, 0.4, 0.2), d.p_labeled())};
  const auto r = dr_estimate(n, d);
  REQUIRE(r.influence_variance);
  REQUIRE(r.p_unlabeled);
  CHECK(r.sample_size == 50);
  // plug-in variance of the contributions, no degrees-of-freedom correction
  const Matrix contrib = dr_contributions(n, d);
  const Vector mean = contrib.colwise().mean().transpose();
  for (int c = 0; c < 3; ++c) {
    const double v = (contrib.col(c).array() - mean[c]).square().mean();
    CHECK_THAT((*r.influence_variance)[c], WithinAbs(v, 1e-12));
    CHECK_THAT((*r.ci_half_width)[c], WithinAbs(1.9599639845400542 * std::sqrt(v / 50), 1e-12));
  }
  CHECK((mean - r.raw).norm() <= 1e-14);
  CHECK(r.p_unlabeled->approx_equal(recover_unlabeled_prior(r.p_combined, d.labeled_prior(), d.p_labeled()), 1e-15));
}

TEST_CASE("influence function", "[estimate]") {
  Rng rng(12);
  const Matrix post = testing::random_posteriors(40, 4, rng);
  std::vector<int> labels(40, -1);
  std::uniform_int_distribution<int> cls(0, 3);
  for (int i = 0; i < 40; ++i) labels[i] = i % 2 ? cls(rng) : -1;
  const auto d = testing::make_dataset(4, index_features(40), labels);
  const NuisancePair n{table_posterior(post),
                       MissingnessMechanism(Vector(Eigen::Vector4d(0.2, 0.5, 0.7, 0.9)), 0.5)};
  const ClassDistribution ref(testing::random_simplex(4, rng));

  const auto dec = influence_decomposition(n, d, ref);
  const Matrix phi = influence_values(n, d, ref);
  CHECK((dec.total() - phi).cwiseAbs().maxCoeff() <= 1e-12);
  // the three pieces are as documented
  for (int i = 0; i < 40; ++i) {
    for (int c = 0; c < 4; ++c) {
      CHECK_THAT(dec.marginal(i, c), WithinAbs(post(i, c) - ref[c], 1e-15));
      if (labels[i] < 0) CHECK_THAT(dec.missingness(i, c) + dec.conditional(i, c), WithinAbs(0.0, 1e-15));
    }
  }

  // fully labeled, unit propensity, empirical reference: mean zero
  const auto full = testing::make_dataset(4, index_features(8), {0, 1, 2, 3, 3, 3, 1, 0});
  const NuisancePair unit{table_posterior(post), MissingnessMechanism::constant(4, 1.0)};
  const Matrix phi_full = influence_values(unit, full, full.labeled_prior());
  CHECK(phi_full.colwise().mean().cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("influence values are centred under oracle nuisances", "[estimate][statistical]") {
  const auto mix = synth::MixtureSpec::random(3, 2, 2.0, 1.0, 3);
  const auto priors = synth::PriorTruth::from_combined(
      ClassDistribution(Eigen::Vector3d(0.5, 0.3, 0.2)), Eigen::Vector3d(0.4, 0.25, 0.1));
  const auto sd = synth::sample_iid(mix, priors, 10000, 21);
  const NuisancePair oracle{[&](const Matrix& x) {
                              return synth::bayes_posterior_batch(mix, priors.combined_prior, x);
                            },
                            priors.mechanism()};
  const Matrix phi = influence_values(oracle, sd.data, priors.combined_prior);
  const auto r = dr_estimate(oracle, sd.data);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(phi.col(c).mean()) <= 3 * std::sqrt((*r.influence_variance)[c] / 10000));
  }
  const auto orr = or_estimate(oracle, sd.data);
  const auto big = synth::sample_iid(mix, priors, 100000, 22);
  CHECK(tv_distance(or_estimate(oracle, big.data).p_combined, priors.combined_prior) <= 0.01);
  CHECK(tv_distance(orr.p_combined, priors.combined_prior) <= 0.03);
}

TEST_CASE("confidence intervals", "[estimate]") {
  CHECK_THAT(normal_quantile(0.975), WithinAbs(1.9599639845400542, 1e-12));
  CHECK_THAT(normal_quantile(0.995), WithinAbs(2.5758293035489008, 1e-12));

  EstimateReport r;
  r.raw = Eigen::Vector2d(0.3, 0.7);
  r.p_combined = ClassDistribution(r.raw);
  r.influence_variance = Vector(Eigen::Vector2d(0.0, 0.21));
  r.sample_size = 100;
  const auto ci = confidence_interval(r, 0.99);
  CHECK(ci[0].lower == 0.3);
  CHECK(ci[0].upper == 0.3);
  CHECK_THAT(ci[1].upper - 0.7, WithinAbs(2.5758293035489008 * std::sqrt(0.21 / 100), 1e-12));

  r.sample_size = 1;
  CHECK_THROWS_AS(confidence_interval(r, 0.95), DomainError);
  r.sample_size = 100;
  r.influence_variance.reset();
  CHECK_THROWS(confidence_interval(r, 0.95));
}

TEST_CASE("cross-fitting", "[estimate]") {
  const auto d = testing::random_dataset(60, 2, 3, 0.5, 17);
  int calls = 0;
  NuisanceFitter fitter = [&](const Dataset& train) {
    ++calls;
    return NuisancePair{constant_posterior(Vector(Eigen::Vector3d(0.2, 0.3, 0.5))),
                        MissingnessMechanism::constant(3, train.p_labeled())};
  };
  CHECK_THROWS_AS(dr_estimate(fitter, d, 1, 0), DomainError);
  const auto r0 = dr_estimate(fitter, d, 0, 0);
  CHECK(calls == 1);
  CHECK(r0.cross_fit_folds == 0);
  calls = 0;
  const auto r3 = dr_estimate(fitter, d, 3, 5);
  CHECK(calls == 3);
  CHECK(r3.cross_fit_folds == 3);
  CHECK(r3.sample_size == 60);

  const auto folds = fold_assignment(10, 3, 1);
  CHECK(std::count(folds.begin(), folds.end(), 0) == 4);
  CHECK(std::count(folds.begin(), folds.end(), 2) == 3);
  CHECK(fold_assignment(10, 3, 1) == folds);
}

TEST_CASE("clip events are counted", "[estimate]") {
  const auto d = testing::make_dataset(2, index_features(4), {0, 1, 1, -1});
  const NuisancePair n{constant_posterior(Vector::Constant(2, 0.5)),
                       MissingnessMechanism(Eigen::Vector2d(0.9, 1e-6), 0.75, 1e-3)};
  CHECK(dr_estimate(n, d).clip_events == 2);
  const NuisancePair wide{constant_posterior(Vector::Constant(2, 0.5)),
                          MissingnessMechanism(Eigen::Vector2d(0.7, 0.8), 0.75, 0.5)};
  CHECK(dr_estimate(wide, d).clip_events == 0);
}

TEST_CASE("estimators validate posterior rows", "[estimate]") {
  const auto d = testing::make_dataset(2, index_features(2), {0, -1});
  const NuisancePair bad{constant_posterior(Eigen::Vector2d(0.7, 0.7)), MissingnessMechanism::constant(2, 0.5)};
  CHECK_THROWS(dr_estimate(bad, d));
  CHECK(parse_estimator("dr") == EstimatorKind::doubly_robust);
  CHECK(to_string(EstimatorKind::ipw) == "ipw");
  CHECK_THROWS(parse_estimator("xx"));
}

TEST_CASE("pairwise mean depends only on row order", "[estimate]") {
  Rng rng(3);
  const Matrix m = testing::random_matrix(1001, 3, rng);
  CHECK((pairwise_column_mean(m) - m.colwise().mean().transpose()).norm() <= 1e-14);
}
