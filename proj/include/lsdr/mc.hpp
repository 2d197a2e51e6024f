#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/model.hpp"
#include "lsdr/report.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"

namespace lsdr::mc {

/// How the nuisances of each replication are obtained.
///
/// oracle_both             Bayes posterior under the true P(Y), true propensity.
/// oracle_posterior_only   Bayes posterior, constant propensity P(A=1).
/// oracle_propensity_only  true propensity, Bayes posterior under P(Y|A=1).
/// learned_both            plain EM fitted with cross-fitting.
/// corrupted               oracle nuisances distorted per Corruption.
enum class Regime {
  oracle_both,
  oracle_posterior_only,
  oracle_propensity_only,
  learned_both,
  corrupted
};

Regime parse_regime(std::string_view name);
std::string_view to_string(Regime regime);

/// posterior -> p^(1/temperature) renormalized; propensity -> scale * pi,
/// then clipped to [floor, 1]. The identity is temperature = scale = 1.
struct Corruption {
  double temperature = 1.0;
  double propensity_scale = 1.0;
};

Matrix temper_posteriors(const Matrix& posteriors, double temperature);
MissingnessMechanism scale_propensity(const MissingnessMechanism& mechanism, double scale);

struct McScenario {
  synth::MixtureSpec mixture;
  synth::PriorTruth priors;
  Regime regime = Regime::oracle_both;
  Corruption corruption;
  std::int64_t n = 5000;
  int reps = 500;
  std::uint64_t seed = 0;
  double level = 0.95;
  double clip_floor = kDefaultClipFloor;
  int cross_fit = 2;          // learned_both only
  model::TrainConfig train;   // learned_both only

  /// reps >= 2, n >= 10 C, level in (0, 1).
  void validate() const;
};

/// Scenario priors from the long-tail counts of a shift config.
synth::PriorTruth priors_for(const synth::ShiftConfig& shift, int num_classes);

inline constexpr estimate::EstimatorKind kEstimators[] = {
    estimate::EstimatorKind::outcome_regression, estimate::EstimatorKind::ipw,
    estimate::EstimatorKind::doubly_robust};

/// One replication: raw estimates of P(Y), plug-in variances (IPW, DR), and
/// the same estimators under oracle nuisances on the same draw.
struct Replication {
  std::int64_t index = 0;
  bool ok = false;
  std::string failure;
  std::vector<Vector> raw;                      // per estimator
  std::vector<std::optional<Vector>> variance;  // per estimator
  std::vector<Vector> oracle_raw;               // per estimator
};

struct EstimatorSummary {
  estimate::EstimatorKind estimator = estimate::EstimatorKind::doubly_robust;
  Vector bias;            // mean(raw - truth)
  Vector bias_se;         // sd / sqrt(R)
  Vector rmse;
  Vector scaled_variance;         // sample variance of sqrt(N) (raw - truth)
  std::optional<Vector> mean_plugin_variance;
  std::optional<Vector> variance_ratio;  // scaled_variance / mean_plugin_variance
  std::optional<Vector> coverage;
  Vector skewness;         // of the standardized error
  Vector excess_kurtosis;
  Vector relative_bias;    // mean(raw - oracle raw), a control variate
  Vector relative_bias_se;
};

struct Band {
  double lower = 0.0;
  double upper = 1.0;
  bool contains(double v) const { return v >= lower && v <= upper; }
};

/// Binomial(reps, nominal) quantiles at Phi(-sigmas) and Phi(sigmas),
/// divided by reps.
Band coverage_band(int reps, double nominal, double sigmas = 3.0);

struct McReport {
  McScenario scenario;
  ClassDistribution truth;  // P(Y)
  int completed = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;
  std::vector<EstimatorSummary> estimators;  // OR, IPW, DR
  Band band;
  std::vector<Replication> replications;

  const EstimatorSummary& summary(estimate::EstimatorKind kind) const;
};

/// Nuisances for one draw under the scenario's regime.
estimate::NuisancePair regime_nuisance(const McScenario& scenario, Regime regime,
                                       const Dataset& data);

Replication run_replication(const McScenario& scenario, std::int64_t index);

/// Parallel over replications; each uses the stream ("mc", index).
McReport run_replications(const McScenario& scenario);

/// Aggregates replications in index order.
McReport summarize_replications(const McScenario& scenario, std::vector<Replication> reps);

/// Empirical coverage of raw +/- z_level sqrt(V/N) for one estimator.
std::optional<Vector> coverage_at(const McReport& report, estimate::EstimatorKind kind,
                                  double level);

// ---------------------------------------------------------------------------
// Bias decay

struct BiasDecayConfig {
  McScenario base;                 // regime and n are overridden
  std::vector<std::int64_t> n_grid{1000, 4000, 16000};
  double magnitude = 0.5;          // delta = magnitude * N^(-1/4)
  bool corrupt_posterior = true;
  bool corrupt_propensity = true;
  double dr_slope_max = -0.45;
  double or_slope_min = -0.35;
};

struct BiasDecayRow {
  std::int64_t n = 0;
  double delta = 0.0;
  std::vector<double> bias;           // per estimator, L2 norm of mean error
  std::vector<double> relative_bias;  // per estimator, L2 norm of mean(raw - oracle raw)
  std::vector<double> relative_se;    // per estimator, L2 norm of its standard error
  int failures = 0;
};

struct BiasDecayResult {
  BiasDecayConfig config;
  std::vector<BiasDecayRow> rows;
  std::vector<double> slopes;           // relative bias, per estimator
  std::vector<double> plain_slopes;     // raw bias, per estimator
  bool dr_pass = false;
  bool or_pass = false;
};

/// Least-squares slope of log y on log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

BiasDecayResult bias_decay_study(const BiasDecayConfig& config);

// ---------------------------------------------------------------------------
// Shape sweep

struct SweepConfig {
  int num_classes = 10;
  int feature_dim = 8;
  double separation = 5.0;
  double class_cov_scale = 1.0;
  double gamma = 100.0;
  std::int64_t n1 = 500;
  std::int64_t m1 = 4000;
  std::vector<synth::Shape> shapes{std::begin(synth::kAllShapes), std::end(synth::kAllShapes)};
  int seeds = 3;
  std::uint64_t seed = 0;
  std::vector<train::Method> methods{train::Method::mle, train::Method::em,
                                     train::Method::simpro};
  model::TrainConfig stage1;
  model::TrainConfig stage2;
  int cross_fit = 0;              // for the OR / IPW / DR estimates
  std::int64_t n_test = 2000;
  bool record_time = false;
};

/// Records for every (shape, seed, method, estimator): estimators are "or",
/// "ipw", "dr" and "train" (the trainer's own estimate), plus one
/// "labeled-prior" baseline row per (shape, seed) under method "none".
std::vector<report::ExperimentRecord> shape_sweep(const SweepConfig& config);

}  // namespace lsdr::mc
