#include "lsdr/mc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/normal.hpp>

#include "lsdr/parallel.hpp"
#include "lsdr/rng.hpp"

namespace lsdr::mc {

using estimate::EstimatorKind;

Regime parse_regime(std::string_view name) {
  if (name == "oracle-both" || name == "oracle_both") return Regime::oracle_both;
  if (name == "oracle-posterior-only" || name == "oracle_posterior_only") {
    return Regime::oracle_posterior_only;
  }
  if (name == "oracle-propensity-only" || name == "oracle_propensity_only") {
    return Regime::oracle_propensity_only;
  }
  if (name == "learned-both" || name == "learned_both") return Regime::learned_both;
  if (name == "corrupted") return Regime::corrupted;
  throw DomainError("unknown regime '" + std::string(name) + "'");
}

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::oracle_both: return "oracle-both";
    case Regime::oracle_posterior_only: return "oracle-posterior-only";
    case Regime::oracle_propensity_only: return "oracle-propensity-only";
    case Regime::learned_both: return "learned-both";
    case Regime::corrupted: return "corrupted";
  }
  throw DomainError("unknown regime");
}

Matrix temper_posteriors(const Matrix& posteriors, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("temperature must be > 0");
  Matrix out = posteriors.array().pow(1.0 / temperature);
  for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= out.row(i).sum();
  return out;
}

MissingnessMechanism scale_propensity(const MissingnessMechanism& mechanism, double scale) {
  if (!(scale > 0.0)) throw DomainError("propensity scale must be > 0");
  return MissingnessMechanism(mechanism.propensity() * scale, mechanism.p_labeled(),
                              mechanism.clip_floor());
}

void McScenario::validate() const {
  mixture.validate();
  if (reps < 2) throw DomainError("Monte Carlo needs at least 2 replications");
  if (n < 10 * static_cast<std::int64_t>(mixture.num_classes)) {
    throw DomainError("Monte Carlo needs N >= 10 C");
  }
  if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence level must lie in (0, 1)");
  require_same_size(priors.combined_prior.size(), mixture.num_classes, "scenario priors");
  if (regime == Regime::learned_both && cross_fit == 1) {
    throw DomainError("cross_fit must be 0 or >= 2");
  }
}

synth::PriorTruth priors_for(const synth::ShiftConfig& shift, int num_classes) {
  return synth::PriorTruth::from_counts(synth::labeled_counts_for(shift, num_classes),
                                        synth::unlabeled_counts_for(shift, num_classes));
}

const EstimatorSummary& McReport::summary(EstimatorKind kind) const {
  for (const auto& s : estimators) {
    if (s.estimator == kind) return s;
  }
  throw DomainError("report has no summary for this estimator");
}

Band coverage_band(int reps, double nominal, double sigmas) {
  if (reps < 1) throw DomainError("coverage_band: reps must be >= 1");
  boost::math::binomial_distribution<double> binom(reps, nominal);
  const double tail = boost::math::cdf(boost::math::normal_distribution<double>(), -sigmas);
  const double lo = boost::math::quantile(binom, tail);
  const double hi = boost::math::quantile(boost::math::complement(binom, tail));
  return {lo / reps, hi / reps};
}

// ---------------------------------------------------------------------------
// Replications

estimate::NuisancePair regime_nuisance(const McScenario& s, Regime regime, const Dataset& data) {
  const auto mixture = s.mixture;
  auto bayes = [mixture](const ClassDistribution& prior) {
    return estimate::PosteriorFn(
        [mixture, prior](const Matrix& x) { return synth::bayes_posterior_batch(mixture, prior, x); });
  };
  const MissingnessMechanism truth = s.priors.mechanism(s.clip_floor);
  switch (regime) {
    case Regime::oracle_both: return {bayes(s.priors.combined_prior), truth};
    case Regime::oracle_posterior_only:
      return {bayes(s.priors.combined_prior),
              MissingnessMechanism::constant(mixture.num_classes, s.priors.p_labeled, s.clip_floor)};
    case Regime::oracle_propensity_only: return {bayes(s.priors.labeled_prior), truth};
    case Regime::corrupted: {
      const double t = s.corruption.temperature;
      auto oracle = bayes(s.priors.combined_prior);
      estimate::PosteriorFn post = oracle;
      if (t != 1.0) {
        post = [oracle, t](const Matrix& x) { return temper_posteriors(oracle(x), t); };
      }
      return {post, s.corruption.propensity_scale == 1.0
                        ? truth
                        : scale_propensity(truth, s.corruption.propensity_scale)};
    }
    case Regime::learned_both: {
      model::TrainConfig cfg = s.train;
      cfg.clip_floor = s.clip_floor;
      return train::train_em(data, cfg, train::EmVariant::plain).nuisance();
    }
  }
  throw DomainError("unknown regime");
}

Replication run_replication(const McScenario& s, std::int64_t index) {
  Replication rep;
  rep.index = index;
  const std::uint64_t seed = derive_seed(s.seed, "mc", static_cast<std::uint64_t>(index));
  try {
    const auto draw = synth::sample_iid(s.mixture, s.priors, s.n, seed);
    const Dataset& data = draw.data;
    const auto nuisance = regime_nuisance(s, s.regime, data);
    for (auto kind : kEstimators) {
      estimate::EstimateReport r;
      if (kind == EstimatorKind::doubly_robust && s.regime == Regime::learned_both &&
          s.cross_fit >= 2) {
        model::TrainConfig cfg = s.train;
        cfg.clip_floor = s.clip_floor;
        estimate::NuisanceFitter fitter = [cfg](const Dataset& fold) {
          return train::train_em(fold, cfg, train::EmVariant::plain).nuisance();
        };
        r = estimate::dr_estimate(fitter, data, s.cross_fit, derive_seed(seed, "crossfit"));
      } else {
        r = estimate::run_estimator(kind, nuisance, data);
      }
      rep.raw.push_back(r.raw);
      rep.variance.push_back(r.influence_variance);
    }
    if (s.regime == Regime::oracle_both) {
      rep.oracle_raw = rep.raw;
    } else {
      const auto oracle = regime_nuisance(s, Regime::oracle_both, data);
      for (auto kind : kEstimators) rep.oracle_raw.push_back(estimate::run_estimator(kind, oracle, data).raw);
    }
    rep.ok = true;
  } catch (const std::exception& e) {
    rep.ok = false;
    rep.failure = "replication " + std::to_string(index) + ": " + e.what();
    rep.raw.clear();
    rep.variance.clear();
    rep.oracle_raw.clear();
  }
  return rep;
}

namespace {

Vector moment_ratio(const std::vector<Vector>& errors, const Vector& mean, const Vector& sd,
                    int power) {
  Vector acc = Vector::Zero(mean.size());
  for (const auto& e : errors) {
    acc += ((e - mean).array() / sd.array()).pow(power).matrix();
  }
  return acc / static_cast<double>(errors.size());
}

}  // namespace

McReport summarize_replications(const McScenario& s, std::vector<Replication> reps) {
  std::sort(reps.begin(), reps.end(),
            [](const Replication& a, const Replication& b) { return a.index < b.index; });
  McReport out;
  out.scenario = s;
  out.truth = s.priors.combined_prior;
  out.band = coverage_band(s.reps, s.level);
  for (const auto& r : reps) {
    if (r.ok) {
      ++out.completed;
    } else {
      ++out.failures;
      out.failure_messages.push_back(r.failure);
    }
  }
  const int C = s.mixture.num_classes;
  const double n = static_cast<double>(s.n);
  const Vector truth = out.truth.probs();
  for (std::size_t k = 0; k < std::size(kEstimators); ++k) {
    EstimatorSummary sum;
    sum.estimator = kEstimators[k];
    std::vector<Vector> errors;
    std::vector<Vector> relative;
    std::vector<Vector> variances;
    for (const auto& r : reps) {
      if (!r.ok) continue;
      errors.push_back(r.raw[k] - truth);
      relative.push_back(r.raw[k] - r.oracle_raw[k]);
      if (r.variance[k]) variances.push_back(*r.variance[k]);
    }
    const double m = static_cast<double>(errors.size());
    if (errors.size() < 2) {
      out.estimators.push_back(sum);
      continue;
    }
    auto mean_of = [&](const std::vector<Vector>& xs) {
      Vector acc = Vector::Zero(C);
      for (const auto& x : xs) acc += x;
      return Vector(acc / static_cast<double>(xs.size()));
    };
    auto sd_of = [&](const std::vector<Vector>& xs, const Vector& mean) {
      Vector acc = Vector::Zero(C);
      for (const auto& x : xs) acc += (x - mean).cwiseAbs2();
      return Vector((acc / static_cast<double>(xs.size() - 1)).cwiseSqrt());
    };
    sum.bias = mean_of(errors);
    const Vector sd = sd_of(errors, sum.bias);
    sum.bias_se = sd / std::sqrt(m);
    Vector sq = Vector::Zero(C);
    for (const auto& e : errors) sq += e.cwiseAbs2();
    sum.rmse = (sq / m).cwiseSqrt();
    sum.scaled_variance = n * sd.cwiseAbs2();
    sum.relative_bias = mean_of(relative);
    sum.relative_bias_se = sd_of(relative, sum.relative_bias) / std::sqrt(m);
    if (variances.size() == errors.size()) {
      sum.mean_plugin_variance = mean_of(variances);
      sum.variance_ratio = sum.scaled_variance.cwiseQuotient(*sum.mean_plugin_variance);
    }
    const Vector safe_sd = sd.cwiseMax(1e-300);
    sum.skewness = moment_ratio(errors, sum.bias, safe_sd, 3);
    sum.excess_kurtosis = moment_ratio(errors, sum.bias, safe_sd, 4).array() - 3.0;
    out.estimators.push_back(sum);
  }
  out.replications = std::move(reps);
  for (auto& sum : out.estimators) {
    if (sum.mean_plugin_variance) sum.coverage = coverage_at(out, sum.estimator, s.level);
  }
  return out;
}

std::optional<Vector> coverage_at(const McReport& report, EstimatorKind kind, double level) {
  std::size_t k = 0;
  while (k < std::size(kEstimators) && kEstimators[k] != kind) ++k;
  const int C = report.scenario.mixture.num_classes;
  const double z = estimate::normal_quantile(0.5 + level / 2.0);
  const double n = static_cast<double>(report.scenario.n);
  Vector hits = Vector::Zero(C);
  std::int64_t count = 0;
  for (const auto& r : report.replications) {
    if (!r.ok) continue;
    if (!r.variance[k]) return std::nullopt;
    ++count;
    for (int c = 0; c < C; ++c) {
      const double half = z * std::sqrt((*r.variance[k])[c] / n);
      if (std::abs(r.raw[k][c] - report.truth[c]) <= half) hits[c] += 1.0;
    }
  }
  if (count == 0) return std::nullopt;
  return Vector(hits / static_cast<double>(count));
}

McReport run_replications(const McScenario& scenario) {
  scenario.validate();
  std::vector<Replication> reps(scenario.reps);
  parallel_for(scenario.reps, worker_count(),
               [&](std::int64_t r) { reps[r] = run_replication(scenario, r); });
  return summarize_replications(scenario, std::move(reps));
}

// ---------------------------------------------------------------------------
// Bias decay

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_size(static_cast<std::int64_t>(x.size()), static_cast<std::int64_t>(y.size()),
                    "loglog_slope");
  if (x.size() < 2) throw DomainError("loglog_slope needs at least two points");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DomainError("loglog_slope needs positive values");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

BiasDecayResult bias_decay_study(const BiasDecayConfig& config) {
  if (config.n_grid.size() < 3) throw DomainError("bias decay needs at least 3 sample sizes");
  for (std::size_t i = 1; i < config.n_grid.size(); ++i) {
    if (config.n_grid[i] <= config.n_grid[i - 1]) {
      throw DomainError("bias decay grid must be increasing");
    }
  }
  BiasDecayResult out;
  out.config = config;
  std::vector<double> ns;
  std::vector<std::vector<double>> rel(std::size(kEstimators)), plain(std::size(kEstimators));
  for (std::size_t g = 0; g < config.n_grid.size(); ++g) {
    McScenario s = config.base;
    s.n = config.n_grid[g];
    s.seed = derive_seed(config.base.seed, "bias-decay", g);
    s.regime = Regime::corrupted;
    const double delta = config.magnitude * std::pow(static_cast<double>(s.n), -0.25);
    s.corruption.temperature = config.corrupt_posterior ? 1.0 + delta : 1.0;
    s.corruption.propensity_scale = config.corrupt_propensity ? 1.0 + delta : 1.0;
    const McReport report = run_replications(s);
    BiasDecayRow row;
    row.n = s.n;
    row.delta = delta;
    row.failures = report.failures;
    for (std::size_t k = 0; k < std::size(kEstimators); ++k) {
      const auto& sum = report.estimators[k];
      row.bias.push_back(sum.bias.size() ? sum.bias.norm() : 0.0);
      row.relative_bias.push_back(sum.relative_bias.size() ? sum.relative_bias.norm() : 0.0);
      row.relative_se.push_back(sum.relative_bias_se.size() ? sum.relative_bias_se.norm() : 0.0);
      rel[k].push_back(row.relative_bias.back());
      plain[k].push_back(row.bias.back());
    }
    ns.push_back(static_cast<double>(s.n));
    out.rows.push_back(std::move(row));
  }
  for (std::size_t k = 0; k < std::size(kEstimators); ++k) {
    out.slopes.push_back(loglog_slope(ns, rel[k]));
    out.plain_slopes.push_back(loglog_slope(ns, plain[k]));
  }
  out.dr_pass = out.slopes[2] <= config.dr_slope_max;
  out.or_pass = out.slopes[0] >= config.or_slope_min;
  return out;
}

// ---------------------------------------------------------------------------
// Shape sweep

namespace {

std::string canonical_config(const SweepConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "C=" << c.num_classes << ";d=" << c.feature_dim << ";sep=" << c.separation
     << ";s2=" << c.class_cov_scale << ";gamma=" << c.gamma << ";n1=" << c.n1 << ";m1=" << c.m1
     << ";seeds=" << c.seeds << ";seed=" << c.seed << ";cf=" << c.cross_fit
     << ";ntest=" << c.n_test;
  for (const auto* cfg : {&c.stage1, &c.stage2}) {
    os << ";[" << model::to_string(cfg->architecture) << ',' << cfg->hidden_width << ','
       << cfg->learning_rate << ',' << cfg->epochs << ',' << cfg->batch_size << ','
       << cfg->unlabeled_batch_size << ',' << model::to_string(cfg->optimizer) << ','
       << cfg->confidence_threshold << ',' << cfg->warmup_epochs << ',' << cfg->prior_momentum
       << ',' << cfg->mechanism_learning_rate << ',' << cfg->clip_floor << ','
       << cfg->weak_noise << ',' << cfg->strong_noise << ',' << cfg->dr_momentum << ','
       << cfg->cross_fit << ',' << cfg->full_batch << ',' << cfg->per_epoch_mechanism << ']';
  }
  for (auto m : c.methods) os << ';' << train::to_string(m);
  return os.str();
}

}  // namespace

std::vector<report::ExperimentRecord> shape_sweep(const SweepConfig& config) {
  if (config.seeds < 1) throw DomainError("sweep needs at least one seed");
  if (config.shapes.empty()) throw DomainError("sweep needs at least one shape");
  const auto mixture = synth::MixtureSpec::random(config.num_classes, config.feature_dim,
                                                  config.separation, config.class_cov_scale,
                                                  config.seed);
  const std::string hash = report::config_hash(canonical_config(config));
  const std::int64_t jobs = static_cast<std::int64_t>(config.shapes.size()) * config.seeds;
  std::vector<std::vector<report::ExperimentRecord>> slots(jobs);

  parallel_for(jobs, worker_count(), [&](std::int64_t job) {
    const synth::Shape shape = config.shapes[job / config.seeds];
    const int seed_index = static_cast<int>(job % config.seeds);
    const std::uint64_t data_seed = derive_seed(config.seed, "sweep", seed_index);
    const auto shift = synth::ShiftConfig::ladder(shape, config.gamma, config.n1, config.m1,
                                                  data_seed);
    const auto sd = synth::generate(mixture, shift);
    const Dataset& data = sd.data;
    const ClassDistribution truth = sd.truth.priors.unlabeled_prior;
    auto& out = slots[job];
    auto base = [&](std::string method, std::string estimator, double tv) {
      report::ExperimentRecord r;
      r.config_hash = hash;
      r.method = std::move(method);
      r.estimator = std::move(estimator);
      r.shape = std::string(synth::to_string(shape));
      r.gamma_l = shift.gamma_l;
      r.gamma_u = shift.gamma_u;
      r.seed = static_cast<std::uint64_t>(seed_index);
      r.tv = tv;
      return r;
    };
    out.push_back(base("none", "labeled-prior", tv_distance(data.labeled_prior(), truth)));

    model::TrainConfig cfg1 = config.stage1;
    model::TrainConfig cfg2 = config.stage2;
    cfg1.seed = derive_seed(data_seed, "stage1");
    cfg2.seed = derive_seed(data_seed, "stage2");
    train::TrainOptions options;
    options.unlabeled_truth = truth;
    for (auto method : config.methods) {
      const auto start = std::chrono::steady_clock::now();
      const bool two = method == train::Method::two_stage || method == train::Method::dr_risk;
      const auto model = train::train(method, data, two ? cfg1 : cfg2, cfg2, options);
      const double accuracy = report::uniform_test_eval(model, mixture, config.n_test,
                                                        derive_seed(data_seed, "test"));
      const std::string name(train::to_string(method));
      std::vector<std::pair<std::string, ClassDistribution>> estimates;
      estimates.emplace_back("train", model.unlabeled_estimate);
      const auto nuisance = model.nuisance();
      for (auto kind : kEstimators) {
        estimate::EstimateReport r;
        if (kind == EstimatorKind::doubly_robust && config.cross_fit >= 2) {
          estimate::NuisanceFitter fitter = [&](const Dataset& fold) {
            return train::train(method, fold, two ? cfg1 : cfg2, cfg2).nuisance();
          };
          r = estimate::dr_estimate(fitter, data, config.cross_fit,
                                    derive_seed(data_seed, "crossfit"));
        } else {
          r = estimate::run_estimator(kind, nuisance, data);
        }
        estimates.emplace_back(std::string(estimate::to_string(kind)), *r.p_unlabeled);
      }
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      for (const auto& [est, p] : estimates) {
        auto rec = base(name, est, tv_distance(p, truth));
        rec.accuracy = accuracy;
        if (config.record_time) rec.wall_clock_seconds = seconds;
        out.push_back(std::move(rec));
      }
    }
  });

  std::vector<report::ExperimentRecord> records;
  for (auto& slot : slots) {
    for (auto& r : slot) records.push_back(std::move(r));
  }
  return records;
}

}  // namespace lsdr::mc
