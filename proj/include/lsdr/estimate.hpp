#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "lsdr/core.hpp"

namespace lsdr::estimate {

/// Maps an N x d feature matrix to N posterior rows P(Y|X) on the simplex.
using PosteriorFn = std::function<Matrix(const Matrix& features)>;

/// The two nuisance components of the doubly-robust estimator.
struct NuisancePair {
  PosteriorFn posterior;
  MissingnessMechanism mechanism;
};

/// Re-estimates the nuisances from a training fold (cross-fitting).
using NuisanceFitter = std::function<NuisancePair(const Dataset& training_fold)>;

enum class EstimatorKind { outcome_regression, ipw, doubly_robust };

EstimatorKind parse_estimator(std::string_view name);
/// "or", "ipw" or "dr".
std::string_view to_string(EstimatorKind kind);

struct EstimateReport {
  EstimatorKind estimator = EstimatorKind::doubly_robust;
  /// Unprojected estimate of P(Y); IPW need not sum to one, DR may leave [0, 1].
  Vector raw;
  ClassDistribution p_combined;
  /// P(Y|A=0) recovered from p_combined; absent when the data are all
  /// labeled or all unlabeled.
  std::optional<ClassDistribution> p_unlabeled;
  /// Plug-in variance of the per-row contributions (no DoF correction).
  std::optional<Vector> influence_variance;
  /// 1.96 * sqrt(V_c / N).
  std::optional<Vector> ci_half_width;
  int cross_fit_folds = 0;
  std::int64_t clip_events = 0;
  std::int64_t sample_size = 0;
};

/// Mean of the model's posteriors over every row.
EstimateReport or_estimate(const NuisancePair& nuisance, const Dataset& data);

/// (1/N) sum over labeled rows of 1(y_i = c) / propensity(y_i).
EstimateReport ipw_estimate(const NuisancePair& nuisance, const Dataset& data);

/// DR with externally supplied nuisances (no sample splitting).
EstimateReport dr_estimate(const NuisancePair& nuisance, const Dataset& data);

/// DR with cross-fitting. folds = 0 fits once on all rows and evaluates on the
/// same rows; folds >= 2 fits on each complement and evaluates on the held
/// out fold, pooling the per-row contributions. folds = 1 is rejected.
EstimateReport dr_estimate(const NuisanceFitter& fitter, const Dataset& data, int folds,
                           std::uint64_t seed);

EstimateReport run_estimator(EstimatorKind kind, const NuisancePair& nuisance,
                             const Dataset& data);

/// Per-row DR contributions
///   P(c|x_i) + 1(a_i = 1) / propensity(y_i) * (1(y_i = c) - P(c|x_i)).
/// Adds the number of clipped propensity lookups to *clip_events when given.
Matrix dr_contributions(const NuisancePair& nuisance, const Dataset& data,
                        std::int64_t* clip_events = nullptr);

/// phi_i(c) = contribution_i(c) - p_reference(c).
Matrix influence_values(const NuisancePair& nuisance, const Dataset& data,
                        const ClassDistribution& p_reference);

/// The three orthogonal pieces of the influence function.
struct InfluenceDecomposition {
  Matrix marginal;     // P(c|X) - P(c)
  Matrix missingness;  // [1(A=1)/propensity(Y) - 1] (1(Y=c) - P(c|X))
  Matrix conditional;  // 1(Y=c) - P(c|X)
  Matrix total() const { return marginal + missingness + conditional; }
};

/// On unlabeled rows 1(Y=c) is unobserved and is read as 0; the second and
/// third pieces then cancel exactly there, as they do for any value of Y.
InfluenceDecomposition influence_decomposition(const NuisancePair& nuisance, const Dataset& data,
                                               const ClassDistribution& p_reference);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// raw(c) +/- z_level * sqrt(V_c / N) around the unprojected estimate.
std::vector<Interval> confidence_interval(const EstimateReport& report, double level);

/// Standard normal quantile.
double normal_quantile(double p);

/// Balanced random fold labels in [0, folds).
std::vector<int> fold_assignment(std::int64_t n, int folds, std::uint64_t seed);

/// Column means by pairwise summation over rows; the result does not depend
/// on how rows were produced, only on their order.
Vector pairwise_column_mean(const Matrix& rows);

}  // namespace lsdr::estimate
