#include "catch_amalgamated.hpp"

#include "lsdr/core.hpp"
#include "test_util.hpp"

using namespace lsdr;
using Catch::Matchers::WithinAbs;

namespace {

ClassDistribution dist(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return ClassDistribution(x);
}

Vector vec(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return x;
}

}  // namespace

TEST_CASE("class distributions reject invalid vectors", "[core]") {
  CHECK_THROWS_AS(dist({0.5, 0.6}), DomainError);
  CHECK_THROWS_AS(dist({1.2, -0.2}), DomainError);
  CHECK_THROWS_AS(ClassDistribution(vec({std::nan(""), 1.0})), NumericError);
  CHECK_THROWS_AS(ClassDistribution::from_masses(vec({0.0, 0.0})), DomainError);
  CHECK(ClassDistribution::from_masses(vec({1.0, 3.0})).approx_equal(dist({0.25, 0.75}), 1e-15));
  const std::int64_t counts[] = {1, 3};
  CHECK(ClassDistribution::from_counts(counts).approx_equal(dist({0.25, 0.75}), 1e-15));
}

TEST_CASE("total variation distance", "[core]") {
  CHECK(tv_distance(dist({0.3, 0.7}), dist({0.3, 0.7})) == 0.0);
  CHECK_THAT(tv_distance(dist({0.8, 0.2}), dist({0.2, 0.8})), WithinAbs(0.6, 1e-15));
  CHECK(tv_distance(ClassDistribution::one_hot(3, 0), ClassDistribution::one_hot(3, 1)) == 1.0);
  CHECK_THROWS_AS(tv_distance(dist({0.5, 0.5}), ClassDistribution::uniform(3)), DimensionError);
}

TEST_CASE("simplex projection examples", "[core]") {
  CHECK(project_to_simplex(vec({0.3, 0.7})).approx_equal(dist({0.3, 0.7}), 1e-15));
  CHECK(project_to_simplex(vec({1.2, -0.2})).approx_equal(dist({1.0, 0.0}), 1e-15));
  CHECK(project_to_simplex(vec({0.5, 0.5, 0.5})).approx_equal(ClassDistribution::uniform(3), 1e-15));
  CHECK_THROWS_AS(project_to_simplex(vec({std::nan(""), 0.5})), NumericError);
}

TEST_CASE("simplex projection is the nearest simplex point", "[core][property]") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + trial % 6;
    const Vector v = testing::random_vector(c, rng, 1.0);
    const ClassDistribution p = project_to_simplex(v);
    CHECK_THAT(p.probs().sum(), WithinAbs(1.0, 1e-12));
    CHECK(p.probs().minCoeff() >= 0.0);
    // idempotent
    CHECK(project_to_simplex(p.probs()).approx_equal(p, 1e-12));
    // no random simplex point is closer
    const double best = (p.probs() - v).squaredNorm();
    for (int k = 0; k < 20; ++k) {
      const Vector q = testing::random_simplex(c, rng);
      CHECK(best <= (q - v).squaredNorm() + 1e-12);
    }
  }
}

TEST_CASE("unlabeled prior recovery", "[core]") {
  CHECK(recover_unlabeled_prior(dist({0.5, 0.5}), dist({0.8, 0.2}), 0.5)
            .approx_equal(dist({0.2, 0.8}), 1e-12));
  CHECK(recover_unlabeled_prior(dist({0.8, 0.2}), dist({0.8, 0.2}), 0.5)
            .approx_equal(dist({0.8, 0.2}), 1e-12));
  CHECK(recover_unlabeled_prior(dist({0.3, 0.7}), dist({0.8, 0.2}), 0.5)
            .approx_equal(dist({0.0, 1.0}), 1e-12));
  CHECK_THROWS_AS(recover_unlabeled_prior(dist({0.5, 0.5}), dist({0.5, 0.5}), 1.0), DomainError);
  CHECK_THROWS_AS(recover_unlabeled_prior(dist({0.5, 0.5}), dist({0.5, 0.5}), 0.0), DomainError);
}

TEST_CASE("mixing then recovering returns the unlabeled prior", "[core][property]") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + trial % 8;
    const ClassDistribution pl(testing::random_simplex(c, rng));
    const ClassDistribution pu(testing::random_simplex(c, rng));
    const double a = u(rng);
    const auto back = recover_unlabeled_prior(mix_priors(pl, pu, a), pl, a);
    CHECK((back.probs() - pu.probs()).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("top-1 accuracy", "[core]") {
  const std::vector<int> a{0, 1, 2, 1};
  const std::vector<int> b{2, 0, 1, 0};
  const std::vector<int> c{0, 1, 2, 0};
  CHECK(top1_accuracy(a, a) == 1.0);
  CHECK(top1_accuracy(a, b) == 0.0);
  CHECK(top1_accuracy(a, c) == 0.75);
  CHECK_THROWS(top1_accuracy(a, std::vector<int>{0, 1}));
}

TEST_CASE("missingness mechanism clipping and construction", "[core]") {
  const MissingnessMechanism m(vec({0.0, 0.5, 1.7}), 0.4, 0.01);
  CHECK(m[0] == 0.01);
  CHECK(m[1] == 0.5);
  CHECK(m[2] == 1.0);
  CHECK(m.clipped_low(0));
  CHECK_FALSE(m.clipped_low(1));
  CHECK_THROWS_AS(MissingnessMechanism(vec({0.5}), 0.5, 0.0), DomainError);

  // consistent priors give a constant propensity equal to P(A=1)
  const auto p = dist({0.5, 0.3, 0.2});
  const auto same = MissingnessMechanism::from_distributions(p, p, 0.3);
  for (int c = 0; c < 3; ++c) CHECK_THAT(same[c], WithinAbs(0.3, 1e-15));
}

TEST_CASE("dataset invariants", "[core]") {
  Matrix x(4, 2);
  x << 0, 0, 1, 1, 2, 2, 3, 3;
  const auto d = testing::make_dataset(3, x, {0, -1, 2, 2});
  CHECK(d.size() == 4);
  CHECK(d.num_labeled() == 3);
  CHECK(d.num_unlabeled() == 1);
  CHECK(d.p_labeled() == 0.75);
  CHECK(d.labeled_counts() == std::vector<std::int64_t>{1, 0, 2});
  CHECK(d.labeled_prior().approx_equal(dist({1.0 / 3, 0.0, 2.0 / 3}), 1e-15));
  CHECK_FALSE(d.observation(1).y.has_value());
  CHECK(*d.observation(2).y == 2);

  const std::int64_t rows[] = {1, 3};
  const auto s = d.subset(rows);
  CHECK(s.size() == 2);
  CHECK(s.num_labeled() == 1);
  CHECK(s.x(1)(0) == 3.0);

  CHECK_THROWS_AS(testing::make_dataset(3, x, {0, -1, 3, 2}), DomainError);
  CHECK_THROWS_AS(Dataset(3, x, {1, 0, 1, 1}, {0, 1, 2, 2}), DomainError);
  const auto none = testing::make_dataset(2, x, {-1, -1, -1, -1});
  CHECK_THROWS_AS(none.labeled_prior(), DomainError);
}

TEST_CASE("softmax and log-sum-exp are stable", "[core]") {
  const Vector big = vec({1000.0, 1000.0});
  CHECK_THAT(softmax(big)[0], WithinAbs(0.5, 1e-15));
  CHECK_THAT(log_sum_exp(big), WithinAbs(1000.0 + std::log(2.0), 1e-12));
  CHECK(argmax(vec({0.2, 0.4, 0.4})) == 1);
}
