#include "lsdr/estimate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <boost/math/distributions/normal.hpp>

#include "lsdr/rng.hpp"

namespace lsdr::estimate {

EstimatorKind parse_estimator(std::string_view name) {
  if (name == "or") return EstimatorKind::outcome_regression;
  if (name == "ipw") return EstimatorKind::ipw;
  if (name == "dr") return EstimatorKind::doubly_robust;
  throw DomainError("unknown estimator '" + std::string(name) + "'");
}

std::string_view to_string(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::outcome_regression: return "or";
    case EstimatorKind::ipw: return "ipw";
    case EstimatorKind::doubly_robust: return "dr";
  }
  throw DomainError("unknown estimator kind");
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Vector pairwise_sum(const Matrix& rows, Eigen::Index begin, Eigen::Index end) {
  const Eigen::Index n = end - begin;
  if (n <= 8) {
    Vector acc = Vector::Zero(rows.cols());
    for (Eigen::Index i = begin; i < end; ++i) acc += rows.row(i).transpose();
    return acc;
  }
  const Eigen::Index mid = begin + n / 2;
  return pairwise_sum(rows, begin, mid) + pairwise_sum(rows, mid, end);
}

Matrix checked_posteriors(const NuisancePair& nuisance, const Dataset& data) {
  if (!nuisance.posterior) throw DomainError("nuisance pair has no posterior function");
  Matrix post = nuisance.posterior(data.features());
  if (post.rows() != data.size() || post.cols() != data.num_classes()) {
    throw DimensionError("posterior function returned a matrix of the wrong shape");
  }
  if (!post.allFinite() || (post.array() < -1e-12).any() ||
      ((post.rowwise().sum().array() - 1.0).abs() > 1e-6).any()) {
    throw DomainError("posterior function returned rows off the simplex");
  }
  return post;
}

void check_mechanism(const NuisancePair& nuisance, const Dataset& data) {
  require_same_size(nuisance.mechanism.size(), data.num_classes(), "mechanism classes");
}

Vector column_variance(const Matrix& rows, const Vector& mean) {
  Matrix centred = rows.rowwise() - mean.transpose();
  return pairwise_column_mean(centred.array().square().matrix());
}

EstimateReport finish(EstimatorKind kind, Vector raw, const Dataset& data,
                      const Matrix* contributions) {
  EstimateReport report;
  report.estimator = kind;
  report.sample_size = data.size();
  report.p_combined = project_to_simplex(raw);
  report.raw = std::move(raw);
  if (data.num_labeled() > 0 && data.num_unlabeled() > 0) {
    report.p_unlabeled =
        recover_unlabeled_prior(report.p_combined, data.labeled_prior(), data.p_labeled());
  } else if (data.num_labeled() == 0) {
    report.p_unlabeled = report.p_combined;
  }
  if (contributions != nullptr) {
    const Vector variance = column_variance(*contributions, report.raw);
    report.ci_half_width =
        (normal_quantile(0.975) * (variance / static_cast<double>(data.size())).cwiseSqrt())
            .eval();
    report.influence_variance = variance;
  }
  return report;
}

Matrix ipw_contributions(const NuisancePair& nuisance, const Dataset& data,
                         std::int64_t& clip_events) {
  const auto& mech = nuisance.mechanism;
  Matrix rows = Matrix::Zero(data.size(), data.num_classes());
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (!data.is_labeled(i)) continue;
    const int y = data.label(i);
    if (mech.clipped_low(y)) ++clip_events;
    rows(i, y) = 1.0 / mech[y];
  }
  return rows;
}

}  // namespace

Vector pairwise_column_mean(const Matrix& rows) {
  if (rows.rows() == 0) throw DomainError("column mean of an empty matrix");
  return pairwise_sum(rows, 0, rows.rows()) / static_cast<double>(rows.rows());
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

std::vector<int> fold_assignment(std::int64_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw DomainError("fold_assignment: need at least two folds");
  if (n < folds) throw DomainError("fold_assignment: fewer rows than folds");
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "crossfit");
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(n);
  for (std::int64_t k = 0; k < n; ++k) fold[order[k]] = static_cast<int>(k % folds);
  return fold;
}

// ---------------------------------------------------------------------------
// Estimators

EstimateReport or_estimate(const NuisancePair& nuisance, const Dataset& data) {
  if (data.size() == 0) throw DomainError("or_estimate: empty dataset");
  const Matrix post = checked_posteriors(nuisance, data);
  return finish(EstimatorKind::outcome_regression, pairwise_column_mean(post), data, nullptr);
}

EstimateReport ipw_estimate(const NuisancePair& nuisance, const Dataset& data) {
  if (data.size() == 0) throw DomainError("ipw_estimate: empty dataset");
  check_mechanism(nuisance, data);
  std::int64_t clips = 0;
  const Matrix rows = ipw_contributions(nuisance, data, clips);
  EstimateReport report = finish(EstimatorKind::ipw, pairwise_column_mean(rows), data, &rows);
  report.clip_events = clips;
  return report;
}

Matrix dr_contributions(const NuisancePair& nuisance, const Dataset& data,
                        std::int64_t* clip_events) {
  check_mechanism(nuisance, data);
  Matrix rows = checked_posteriors(nuisance, data);
  const auto& mech = nuisance.mechanism;
  std::int64_t clips = 0;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (!data.is_labeled(i)) continue;
    const int y = data.label(i);
    if (mech.clipped_low(y)) ++clips;
    const double weight = 1.0 / mech[y];
    Vector residual = -rows.row(i).transpose();
    residual[y] += 1.0;
    rows.row(i) += weight * residual.transpose();
  }
  if (clip_events != nullptr) *clip_events += clips;
  return rows;
}

EstimateReport dr_estimate(const NuisancePair& nuisance, const Dataset& data) {
  if (data.size() == 0) throw DomainError("dr_estimate: empty dataset");
  std::int64_t clips = 0;
  const Matrix rows = dr_contributions(nuisance, data, &clips);
  EstimateReport report =
      finish(EstimatorKind::doubly_robust, pairwise_column_mean(rows), data, &rows);
  report.clip_events = clips;
  return report;
}

EstimateReport dr_estimate(const NuisanceFitter& fitter, const Dataset& data, int folds,
                           std::uint64_t seed) {
  if (folds == 1 || folds < 0) {
    throw DomainError("dr_estimate: cross-fitting needs 0 or at least 2 folds");
  }
  if (folds == 0) return dr_estimate(fitter(data), data);

  const auto assignment = fold_assignment(data.size(), folds, seed);
  Matrix pooled(data.size(), data.num_classes());
  std::int64_t clips = 0;
  for (int k = 0; k < folds; ++k) {
    std::vector<std::int64_t> train_rows;
    std::vector<std::int64_t> held_rows;
    for (std::int64_t i = 0; i < data.size(); ++i) {
      (assignment[i] == k ? held_rows : train_rows).push_back(i);
    }
    const NuisancePair nuisance = fitter(data.subset(train_rows));
    const Matrix rows = dr_contributions(nuisance, data.subset(held_rows), &clips);
    for (std::size_t r = 0; r < held_rows.size(); ++r) {
      pooled.row(held_rows[r]) = rows.row(static_cast<Eigen::Index>(r));
    }
  }
  EstimateReport report =
      finish(EstimatorKind::doubly_robust, pairwise_column_mean(pooled), data, &pooled);
  report.cross_fit_folds = folds;
  report.clip_events = clips;
  return report;
}

EstimateReport run_estimator(EstimatorKind kind, const NuisancePair& nuisance,
                             const Dataset& data) {
  switch (kind) {
    case EstimatorKind::outcome_regression: return or_estimate(nuisance, data);
    case EstimatorKind::ipw: return ipw_estimate(nuisance, data);
    case EstimatorKind::doubly_robust: return dr_estimate(nuisance, data);
  }
  throw DomainError("unknown estimator kind");
}

// ---------------------------------------------------------------------------
// Influence function

Matrix influence_values(const NuisancePair& nuisance, const Dataset& data,
                        const ClassDistribution& p_reference) {
  require_same_size(p_reference.size(), data.num_classes(), "influence reference");
  Matrix rows = dr_contributions(nuisance, data);
  rows.rowwise() -= p_reference.probs().transpose();
  return rows;
}

InfluenceDecomposition influence_decomposition(const NuisancePair& nuisance, const Dataset& data,
                                               const ClassDistribution& p_reference) {
  require_same_size(p_reference.size(), data.num_classes(), "influence reference");
  check_mechanism(nuisance, data);
  const Matrix post = checked_posteriors(nuisance, data);
  InfluenceDecomposition parts;
  parts.marginal = post.rowwise() - p_reference.probs().transpose();
  parts.conditional = -post;
  parts.missingness = Matrix::Zero(post.rows(), post.cols());
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (data.is_labeled(i)) parts.conditional(i, data.label(i)) += 1.0;
    const double factor =
        data.is_labeled(i) ? 1.0 / nuisance.mechanism[data.label(i)] - 1.0 : -1.0;
    parts.missingness.row(i) = factor * parts.conditional.row(i);
  }
  return parts;
}

std::vector<Interval> confidence_interval(const EstimateReport& report, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence level must lie in (0, 1)");
  if (report.sample_size < 2) throw DomainError("confidence interval needs N >= 2");
  if (!report.influence_variance) {
    throw DomainError("estimator '" + std::string(to_string(report.estimator)) +
                      "' carries no influence variance");
  }
  const double z = normal_quantile(0.5 + level / 2.0);
  const double n = static_cast<double>(report.sample_size);
  std::vector<Interval> out(report.raw.size());
  for (Eigen::Index c = 0; c < report.raw.size(); ++c) {
    const double half = z * std::sqrt((*report.influence_variance)[c] / n);
    out[c] = Interval{report.raw[c] - half, report.raw[c] + half};
  }
  return out;
}

}  // namespace lsdr::estimate
