// lsdr: synthetic label-shift data, semi-supervised training, class-prior
// estimation and Monte Carlo studies.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/io.hpp"
#include "lsdr/mc.hpp"
#include "lsdr/model.hpp"
#include "lsdr/report.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"

namespace fs = std::filesystem;
using lsdr::io::json;

namespace {

constexpr const char* kRecordsFormat = "lsdr-records/1";
constexpr const char* kAggregateFormat = "lsdr-aggregate/1";
constexpr const char* kSweepFormat = "lsdr-sweep/1";
constexpr const char* kBiasDecayFormat = "lsdr-bias-decay/1";

/// Bad flag combination detected after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rethrows a name-parsing failure as a usage error.
template <class F>
auto parse_name(F&& parse) {
  try {
    return parse();
  } catch (const lsdr::Error& err) {
    throw UsageError(err.what());
  }
}

std::string format_vector(const lsdr::Vector& v) {
  std::ostringstream os;
  os.precision(4);
  os << '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Training flags

struct TrainFlags {
  lsdr::model::TrainConfig base;
  std::string arch = "linear";
  std::string stage1_arch;
  std::string stage2_arch;
  std::string optimizer = "adam";
  std::optional<int> stage1_epochs;
  std::optional<int> stage2_epochs;
  std::string config_file;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "Classifier architecture: linear | mlp1")
        ->capture_default_str();
    app->add_option("--stage1-arch", stage1_arch, "Stage-1 architecture (default --arch)");
    app->add_option("--stage2-arch", stage2_arch, "Stage-2 architecture (default --arch)");
    app->add_option("--hidden", base.hidden_width, "Hidden width for mlp1")->capture_default_str();
    app->add_option("--epochs", base.epochs, "Training epochs")->capture_default_str();
    app->add_option("--stage1-epochs", stage1_epochs, "Stage-1 epochs (default --epochs)");
    app->add_option("--stage2-epochs", stage2_epochs, "Stage-2 epochs (default --epochs)");
    app->add_option("--lr", base.learning_rate, "Learning rate")->capture_default_str();
    app->add_option("--batch-size", base.batch_size, "Labeled rows per step")
        ->capture_default_str();
    app->add_option("--unlabeled-batch-size", base.unlabeled_batch_size,
                    "Unlabeled rows per step")
        ->capture_default_str();
    app->add_option("--optimizer", optimizer, "sgd | adam")->capture_default_str();
    app->add_option("--weight-decay", base.weight_decay, "L2 penalty")->capture_default_str();
    app->add_option("--sgd-momentum", base.sgd_momentum, "heavy-ball momentum for sgd")->capture_default_str();
    app->add_option("--tau", base.confidence_threshold, "Pseudo-label confidence threshold")
        ->capture_default_str();
    app->add_option("--warmup", base.warmup_epochs, "Supervised warm-up epochs")
        ->capture_default_str();
    app->add_option("--prior-momentum", base.prior_momentum,
                    "EMA momentum of the running class priors")
        ->capture_default_str();
    app->add_option("--mechanism-lr", base.mechanism_learning_rate,
                    "Learning rate of the MLE mechanism logits")
        ->capture_default_str();
    app->add_option("--train-clip", base.clip_floor, "Propensity clip floor during training")
        ->capture_default_str();
    app->add_flag("--full-batch", base.full_batch, "Classical full-batch EM / MLE");
    app->add_flag("--per-epoch-mechanism", base.per_epoch_mechanism,
                  "Exact E-step over all rows once per epoch");
    app->add_option("--m-step-iterations", base.m_step_iterations,
                    "Gradient iterations per full-batch epoch")
        ->capture_default_str();
    app->add_option("--weak-noise", base.weak_noise, "Weak augmentation scale")
        ->capture_default_str();
    app->add_option("--strong-noise", base.strong_noise, "Strong augmentation scale")
        ->capture_default_str();
    app->add_option("--stage1-cross-fit", base.cross_fit,
                    "Folds for the stage-1 DR estimate (0 = in-sample)")
        ->capture_default_str();
    app->add_option("--dr-momentum", base.dr_momentum, "Momentum of the batch-update ablation")
        ->capture_default_str();
    app->add_option("--train-config", config_file,
                    "JSON file {\"stage1\": {...}, \"stage2\": {...}} overriding the flags")
        ->check(CLI::ExistingFile);
  }

  /// Resolved configurations for stage 1 and stage 2.
  std::pair<lsdr::model::TrainConfig, lsdr::model::TrainConfig> resolve(
      std::uint64_t seed) const {
    lsdr::model::TrainConfig c1 = base;
    c1.architecture = parse_name([&] { return lsdr::model::parse_architecture(arch); });
    c1.optimizer = parse_name([&] { return lsdr::model::parse_optimizer(optimizer); });
    lsdr::model::TrainConfig c2 = c1;
    if (!stage1_arch.empty()) c1.architecture = lsdr::model::parse_architecture(stage1_arch);
    if (!stage2_arch.empty()) c2.architecture = lsdr::model::parse_architecture(stage2_arch);
    if (stage1_epochs) c1.epochs = *stage1_epochs;
    if (stage2_epochs) c2.epochs = *stage2_epochs;
    c1.seed = lsdr::derive_seed(seed, "stage1");
    c2.seed = lsdr::derive_seed(seed, "stage2");
    if (!config_file.empty()) {
      const json doc = lsdr::io::read_json(config_file);
      auto merge = [&](lsdr::model::TrainConfig& cfg, const char* key) {
        if (!doc.contains(key)) return;
        json merged = lsdr::io::to_json(cfg);
        for (const auto& [k, v] : doc.at(key).items()) merged[k] = v;
        cfg = lsdr::io::train_config_from_json(merged);
      };
      merge(c1, "stage1");
      merge(c2, "stage2");
    }
    c1.validate();
    c2.validate();
    return {c1, c2};
  }
};

// ---------------------------------------------------------------------------
// synth

struct SynthFlags {
  int classes = 10;
  int dim = 8;
  double separation = 3.0;
  double sigma2 = 1.0;
  std::int64_t n1 = 500;
  std::int64_t m1 = 4000;
  double gamma_l = 100.0;
  double gamma_u = 100.0;
  std::string shape = "consistent";
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> mixture_seed;
  std::string out;
};

int cmd_synth(const SynthFlags& f) {
  lsdr::synth::ShiftConfig shift;
  shift.gamma_l = f.gamma_l;
  shift.gamma_u = f.gamma_u;
  shift.shape = parse_name([&] { return lsdr::synth::parse_shape(f.shape); });
  shift.n1 = f.n1;
  shift.m1 = f.m1;
  shift.seed = f.seed;
  shift.validate();
  const std::uint64_t mixture_seed = f.mixture_seed.value_or(f.seed);
  const auto mixture = lsdr::synth::MixtureSpec::random(f.classes, f.dim, f.separation, f.sigma2,
                                                        mixture_seed);
  const auto sd = lsdr::synth::generate(mixture, shift);
  const json config = {{"command", "synth"},
                       {"classes", f.classes},
                       {"dim", f.dim},
                       {"separation", f.separation},
                       {"sigma2", f.sigma2},
                       {"mixture_seed", mixture_seed},
                       {"shift", lsdr::io::to_json(shift)}};
  lsdr::io::write_dataset(f.out, sd.data, sd.truth, config);

  const auto lc = lsdr::synth::labeled_counts_for(shift, f.classes);
  const auto uc = lsdr::synth::unlabeled_counts_for(shift, f.classes);
  std::cout << "wrote " << f.out << ": N = " << sd.data.size() << ", N_l = "
            << sd.data.num_labeled() << ", N_u = " << sd.data.num_unlabeled() << '\n';
  std::cout << "labeled counts:   ";
  for (auto c : lc) std::cout << ' ' << c;
  std::cout << "\nunlabeled counts: ";
  for (auto c : uc) std::cout << ' ' << c;
  const auto& p = sd.truth.priors;
  std::cout << "\nP(Y|A=1) = " << format_vector(p.labeled_prior.probs())
            << "\nP(Y|A=0) = " << format_vector(p.unlabeled_prior.probs())
            << "\nP(Y)     = " << format_vector(p.combined_prior.probs())
            << "\nP(A=1|Y) = " << format_vector(p.propensity) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCmdFlags {
  std::string data;
  std::string method;
  std::string mechanism;
  std::string out;
  std::string history;
  std::uint64_t seed = 0;
  TrainFlags train;
};

int cmd_train(const TrainCmdFlags& f) {
  const auto method = parse_name([&] { return lsdr::train::parse_method(f.method); });
  if (method == lsdr::train::Method::dr_risk) {
    if (f.mechanism.rfind("from:", 0) != 0 || f.mechanism.size() <= 5) {
      throw UsageError("--method dr-risk needs --mechanism from:<stage-1 checkpoint>");
    }
  } else if (!f.mechanism.empty()) {
    throw UsageError("--mechanism only applies to --method dr-risk");
  }
  const auto file = lsdr::io::read_dataset(f.data);
  const auto [cfg1, cfg2] = f.train.resolve(f.seed);
  lsdr::train::TrainOptions options;
  if (file.truth) options.unlabeled_truth = file.truth->priors.unlabeled_prior;

  json config = {{"command", "train"},
                 {"data", f.data},
                 {"method", std::string(lsdr::train::to_string(method))},
                 {"seed", f.seed},
                 {"stage1", lsdr::io::to_json(cfg1)},
                 {"stage2", lsdr::io::to_json(cfg2)}};
  lsdr::train::TrainedModel model;
  if (method == lsdr::train::Method::dr_risk) {
    const std::string source = f.mechanism.substr(5);
    config["mechanism"] = f.mechanism;
    const auto stage1 = lsdr::io::model_from_checkpoint(lsdr::io::read_json(source));
    model = lsdr::train::train_dr_risk(file.data, stage1, cfg2, options);
  } else {
    model = lsdr::train::train(method, file.data, cfg1, cfg2, options);
  }
  lsdr::io::write_json(f.out, lsdr::io::checkpoint(model, config));
  if (!f.history.empty()) {
    json h = json::array();
    for (const auto& r : model.history) h.push_back(lsdr::io::to_json(r));
    lsdr::io::write_json(f.history, {{"format", "lsdr-history/1"}, {"config", config},
                                     {"history", h}});
  }
  std::cout << "trained " << lsdr::train::to_string(method) << " (" << model.history.size()
            << " epochs); P(Y|A=0) estimate " << format_vector(model.unlabeled_estimate.probs());
  if (file.truth) {
    std::cout << ", TV to truth "
              << lsdr::tv_distance(model.unlabeled_estimate, file.truth->priors.unlabeled_prior);
  }
  std::cout << "\nwrote " << f.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateFlags {
  std::string data;
  std::string model;
  std::string estimator = "dr";
  int cross_fit = 0;
  std::optional<double> clip;
  bool oracle = false;
  double level = 0.95;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_estimate(const EstimateFlags& f) {
  if (f.oracle == !f.model.empty()) {
    throw UsageError("give exactly one of --model and --oracle");
  }
  if (f.cross_fit == 1 || f.cross_fit < 0) throw UsageError("--cross-fit must be 0 or >= 2");
  if (!(f.level > 0.0 && f.level < 1.0)) throw UsageError("--level must lie in (0, 1)");
  const auto kind = parse_name([&] { return lsdr::estimate::parse_estimator(f.estimator); });
  if (f.cross_fit >= 2 && kind != lsdr::estimate::EstimatorKind::doubly_robust) {
    throw UsageError("--cross-fit applies to the dr estimator only");
  }
  if (f.cross_fit >= 2 && f.oracle) throw UsageError("oracle nuisances need no cross-fitting");
  const auto file = lsdr::io::read_dataset(f.data);
  const auto clip = [&](lsdr::MissingnessMechanism m) {
    return f.clip ? m.with_clip_floor(*f.clip) : m;
  };

  json config = {{"command", "estimate"},
                 {"data", f.data},
                 {"estimator", std::string(lsdr::estimate::to_string(kind))},
                 {"cross_fit", f.cross_fit},
                 {"clip", f.clip ? json(*f.clip) : json(nullptr)},
                 {"level", f.level},
                 {"seed", f.seed}};
  lsdr::estimate::EstimateReport report;
  if (f.oracle) {
    if (!file.truth) throw UsageError("--oracle needs a dataset with generation metadata");
    config["nuisance"] = "oracle";
    const auto truth = *file.truth;
    lsdr::estimate::NuisancePair nuisance{
        [truth](const lsdr::Matrix& x) {
          return lsdr::synth::bayes_posterior_batch(truth.mixture, truth.priors.combined_prior, x);
        },
        clip(truth.priors.mechanism())};
    report = lsdr::estimate::run_estimator(kind, nuisance, file.data);
  } else {
    config["model"] = f.model;
    const json ckpt = lsdr::io::read_json(f.model);
    const auto model = lsdr::io::model_from_checkpoint(ckpt);
    if (f.cross_fit >= 2) {
      const json& tc = ckpt.at("config");
      const auto method = lsdr::train::parse_method(tc.at("method").get<std::string>());
      if (method == lsdr::train::Method::dr_risk) {
        throw UsageError("cross-fitting cannot retrain a dr-risk checkpoint");
      }
      const auto cfg1 = lsdr::io::train_config_from_json(tc.at("stage1"));
      const auto cfg2 = lsdr::io::train_config_from_json(tc.at("stage2"));
      config["retrain"] = {{"method", std::string(lsdr::train::to_string(method))},
                           {"stage1", tc.at("stage1")},
                           {"stage2", tc.at("stage2")}};
      lsdr::estimate::NuisanceFitter fitter = [&](const lsdr::Dataset& fold) {
        auto n = lsdr::train::train(method, fold, cfg1, cfg2).nuisance();
        n.mechanism = clip(n.mechanism);
        return n;
      };
      report = lsdr::estimate::dr_estimate(fitter, file.data, f.cross_fit,
                                           lsdr::derive_seed(f.seed, "crossfit"));
    } else {
      auto nuisance = model.nuisance();
      nuisance.mechanism = clip(nuisance.mechanism);
      report = lsdr::estimate::run_estimator(kind, nuisance, file.data);
    }
  }

  json doc = {{"format", lsdr::io::kEstimateFormat}, {"config", config},
              {"report", lsdr::io::to_json(report)}};
  if (report.influence_variance) {
    json ci = json::array();
    for (const auto& iv : lsdr::estimate::confidence_interval(report, f.level)) {
      ci.push_back({iv.lower, iv.upper});
    }
    doc["ci"] = {{"level", f.level}, {"intervals", ci}};
  }
  if (file.truth) {
    const auto& t = file.truth->priors;
    json truth = {{"combined_prior", lsdr::io::to_json(t.combined_prior)},
                  {"unlabeled_prior", lsdr::io::to_json(t.unlabeled_prior)},
                  {"tv_combined", lsdr::tv_distance(report.p_combined, t.combined_prior)}};
    if (report.p_unlabeled) {
      truth["tv_unlabeled"] = lsdr::tv_distance(*report.p_unlabeled, t.unlabeled_prior);
    }
    doc["truth"] = truth;
  }
  if (!f.out.empty()) lsdr::io::write_json(f.out, doc);
  std::cout << lsdr::estimate::to_string(kind) << " estimate of P(Y):     "
            << format_vector(report.p_combined.probs()) << '\n';
  if (report.p_unlabeled) {
    std::cout << lsdr::estimate::to_string(kind) << " estimate of P(Y|A=0): "
              << format_vector(report.p_unlabeled->probs()) << '\n';
  }
  if (doc.contains("truth") && doc["truth"].contains("tv_unlabeled")) {
    std::cout << "TV to true P(Y|A=0): " << doc["truth"]["tv_unlabeled"].get<double>() << '\n';
  }
  std::cout << "clip events: " << report.clip_events << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// montecarlo

struct ScenarioFlags {
  int classes = 3;
  int dim = 2;
  double separation = 2.0;
  double sigma2 = 1.0;
  std::string shape = "reversed";
  double gamma_l = 10.0;
  double gamma_u = 10.0;
  std::int64_t n1 = 1000;
  std::int64_t m1 = 2000;
  std::string regime = "oracle-both";
  double temperature = 1.0;
  double propensity_scale = 1.0;
  std::int64_t n = 5000;
  int reps = 500;
  std::uint64_t seed = 0;
  double level = 0.95;
  double clip = lsdr::kDefaultClipFloor;
  int cross_fit = 2;
  TrainFlags train;

  void add(CLI::App* app, bool with_regime) {
    app->add_option("--classes", classes, "Number of classes")->capture_default_str();
    app->add_option("--dim", dim, "Feature dimension")->capture_default_str();
    app->add_option("--separation", separation, "Norm of the class means")
        ->capture_default_str();
    app->add_option("--sigma2", sigma2, "Class covariance scale")->capture_default_str();
    app->add_option("--shape", shape, "Shape defining P(Y|A=0)")->capture_default_str();
    app->add_option("--gamma-l", gamma_l, "Labeled imbalance ratio")->capture_default_str();
    app->add_option("--gamma-u", gamma_u, "Unlabeled imbalance ratio")->capture_default_str();
    app->add_option("--n1", n1, "Labeled head count (fixes P(A=1))")->capture_default_str();
    app->add_option("--m1", m1, "Unlabeled head count (fixes P(A=1))")->capture_default_str();
    if (with_regime) {
      app->add_option("--regime", regime,
                      "oracle-both | oracle-posterior-only | oracle-propensity-only | "
                      "learned-both | corrupted")
          ->capture_default_str();
      app->add_option("--temperature", temperature, "Posterior corruption temperature")
          ->capture_default_str();
      app->add_option("--propensity-scale", propensity_scale, "Propensity corruption factor")
          ->capture_default_str();
      app->add_option("--n", n, "Rows per replication")->capture_default_str();
    }
    app->add_option("--reps", reps, "Replications")->capture_default_str();
    app->add_option("--seed", seed, "Master seed")->capture_default_str();
    app->add_option("--level", level, "Confidence level")->capture_default_str();
    app->add_option("--clip", clip, "Propensity clip floor")->capture_default_str();
    app->add_option("--cross-fit", cross_fit, "Folds for learned nuisances")
        ->capture_default_str();
    train.add(app);
  }

  lsdr::mc::McScenario resolve() const {
    lsdr::mc::McScenario s;
    s.mixture = lsdr::synth::MixtureSpec::random(classes, dim, separation, sigma2,
                                                 lsdr::derive_seed(seed, "mixture"));
    lsdr::synth::ShiftConfig shift;
    shift.shape = lsdr::synth::parse_shape(shape);
    shift.gamma_l = gamma_l;
    shift.gamma_u = gamma_u;
    shift.n1 = n1;
    shift.m1 = m1;
    shift.validate();
    s.priors = lsdr::mc::priors_for(shift, classes);
    s.regime = parse_name([&] { return lsdr::mc::parse_regime(regime); });
    s.corruption = {temperature, propensity_scale};
    s.n = n;
    s.reps = reps;
    s.seed = seed;
    s.level = level;
    s.clip_floor = clip;
    s.cross_fit = cross_fit;
    s.train = train.resolve(seed).first;
    s.validate();
    return s;
  }
};

void write_summary_csv(const fs::path& path, const lsdr::mc::McReport& r, const json& config) {
  std::ostringstream os;
  os.precision(17);
  os << "# format=" << lsdr::io::kMcFormat << "\n# config=" << config.dump() << '\n';
  os << "estimator,class,truth,bias,bias_se,rmse,scaled_variance,mean_plugin_variance,"
        "variance_ratio,coverage,relative_bias,relative_bias_se\n";
  for (const auto& s : r.estimators) {
    for (int c = 0; c < r.truth.size(); ++c) {
      auto opt = [&](const std::optional<lsdr::Vector>& v) {
        std::ostringstream cell;
        cell.precision(17);
        if (v) cell << (*v)[c];
        return cell.str();
      };
      os << lsdr::estimate::to_string(s.estimator) << ',' << c << ',' << r.truth[c] << ','
         << s.bias[c] << ',' << s.bias_se[c] << ',' << s.rmse[c] << ','
         << s.scaled_variance[c] << ',' << opt(s.mean_plugin_variance) << ','
         << opt(s.variance_ratio) << ',' << opt(s.coverage) << ',' << s.relative_bias[c] << ','
         << s.relative_bias_se[c] << '\n';
    }
  }
  lsdr::io::write_text(path, os.str());
}

struct CoverageFlags {
  ScenarioFlags scenario;
  bool allow_partial = false;
  bool replications = false;
  std::string out;
  std::string csv;
};

int cmd_coverage(const CoverageFlags& f) {
  const auto s = f.scenario.resolve();
  const auto report = lsdr::mc::run_replications(s);
  const json config = {{"command", "montecarlo coverage"},
                       {"scenario", lsdr::io::to_json(s)},
                       {"allow_partial", f.allow_partial}};
  json doc = lsdr::io::to_json(report, f.replications);
  doc["format"] = lsdr::io::kMcFormat;
  doc["config"] = config;
  if (!f.out.empty()) lsdr::io::write_json(f.out, doc);
  if (!f.csv.empty()) write_summary_csv(f.csv, report, config);

  std::cout << "regime " << lsdr::mc::to_string(s.regime) << ", N = " << s.n << ", R = "
            << report.completed << " completed, " << report.failures << " failed\n";
  std::cout << "binomial band [" << report.band.lower << ", " << report.band.upper << "]\n";
  for (const auto& e : report.estimators) {
    std::cout << lsdr::estimate::to_string(e.estimator) << ": bias "
              << format_vector(e.bias) << " (se " << format_vector(e.bias_se) << ")";
    if (e.coverage) std::cout << ", coverage " << format_vector(*e.coverage);
    if (e.variance_ratio) std::cout << ", var ratio " << format_vector(*e.variance_ratio);
    std::cout << '\n';
  }
  if (report.failures > 0 && !f.allow_partial) {
    std::cerr << "error: " << report.failures
              << " replications failed; pass --allow-partial to accept\n";
    return 3;
  }
  return 0;
}

struct BiasDecayFlags {
  ScenarioFlags scenario;
  std::vector<std::int64_t> n_grid{1000, 4000, 16000};
  double magnitude = 0.5;
  std::string corrupt = "both";
  double dr_slope_max = -0.45;
  double or_slope_min = -0.35;
  bool allow_partial = false;
  std::string out;
};

int cmd_bias_decay(const BiasDecayFlags& f) {
  lsdr::mc::BiasDecayConfig cfg;
  auto scenario = f.scenario;
  scenario.regime = "corrupted";
  scenario.n = *std::max_element(f.n_grid.begin(), f.n_grid.end());
  cfg.base = scenario.resolve();
  cfg.n_grid = f.n_grid;
  cfg.magnitude = f.magnitude;
  if (f.corrupt != "both" && f.corrupt != "posterior" && f.corrupt != "propensity") {
    throw UsageError("--corrupt must be both, posterior or propensity");
  }
  cfg.corrupt_posterior = f.corrupt != "propensity";
  cfg.corrupt_propensity = f.corrupt != "posterior";
  cfg.dr_slope_max = f.dr_slope_max;
  cfg.or_slope_min = f.or_slope_min;
  if (f.n_grid.size() < 2) throw UsageError("--n-grid needs at least two sizes");
  const auto result = lsdr::mc::bias_decay_study(cfg);
  json doc = lsdr::io::to_json(result);
  doc["format"] = kBiasDecayFormat;
  doc["config"] = {{"command", "montecarlo bias-decay"},
                   {"scenario", lsdr::io::to_json(cfg.base)},
                   {"corrupt", f.corrupt},
                   {"allow_partial", f.allow_partial}};
  if (!f.out.empty()) lsdr::io::write_json(f.out, doc);
  int failures = 0;
  for (const auto& row : result.rows) {
    failures += row.failures;
    std::cout << "N = " << row.n << ", delta = " << row.delta << ": relative bias or/ipw/dr = "
              << row.relative_bias[0] << " / " << row.relative_bias[1] << " / "
              << row.relative_bias[2] << '\n';
  }
  std::cout << "slopes or/ipw/dr = " << result.slopes[0] << " / " << result.slopes[1] << " / "
            << result.slopes[2] << "; dr " << (result.dr_pass ? "passes" : "fails") << ", or "
            << (result.or_pass ? "passes" : "fails") << '\n';
  if (failures > 0 && !f.allow_partial) {
    std::cerr << "error: " << failures << " replications failed; pass --allow-partial to accept\n";
    return 3;
  }
  return 0;
}

struct SweepFlags {
  int classes = 10;
  int dim = 8;
  double separation = 5.0;
  double sigma2 = 1.0;
  double gamma = 100.0;
  std::int64_t n1 = 500;
  std::int64_t m1 = 4000;
  std::vector<std::string> shapes{"all"};
  int seeds = 3;
  std::uint64_t seed = 0;
  std::vector<std::string> methods{"mle", "em", "simpro"};
  int cross_fit = 0;
  std::int64_t n_test = 2000;
  bool record_time = false;
  std::string out_dir = "sweep";
  TrainFlags train;
};

json sweep_config_json(const lsdr::mc::SweepConfig& c) {
  json shapes = json::array();
  for (auto s : c.shapes) shapes.push_back(std::string(lsdr::synth::to_string(s)));
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(std::string(lsdr::train::to_string(m)));
  return {{"command", "montecarlo sweep"},
          {"classes", c.num_classes},
          {"dim", c.feature_dim},
          {"separation", c.separation},
          {"sigma2", c.class_cov_scale},
          {"gamma", c.gamma},
          {"n1", c.n1},
          {"m1", c.m1},
          {"shapes", shapes},
          {"seeds", c.seeds},
          {"seed", c.seed},
          {"methods", methods},
          {"cross_fit", c.cross_fit},
          {"n_test", c.n_test},
          {"record_time", c.record_time},
          {"stage1", lsdr::io::to_json(c.stage1)},
          {"stage2", lsdr::io::to_json(c.stage2)}};
}

std::string csv_preamble(const char* format, const json& config) {
  return std::string("# format=") + format + "\n# config=" + config.dump() + "\n";
}

void write_tables(const fs::path& dir, const std::vector<lsdr::report::AggregateRow>& rows,
                  const json& config) {
  std::ostringstream agg;
  agg << csv_preamble(kAggregateFormat, config);
  lsdr::report::write_aggregate_csv(agg, rows);
  lsdr::io::write_text(dir / "aggregate.csv", agg.str());
  const std::string header = "# config=" + config.dump() + "\n";
  lsdr::io::write_text(dir / "table_tv.txt",
                       header + lsdr::report::table_layout(rows, "tv"));
  lsdr::io::write_text(dir / "table_accuracy.txt",
                       header + lsdr::report::table_layout(rows, "accuracy"));
}

int cmd_sweep(const SweepFlags& f) {
  lsdr::mc::SweepConfig c;
  c.num_classes = f.classes;
  c.feature_dim = f.dim;
  c.separation = f.separation;
  c.class_cov_scale = f.sigma2;
  c.gamma = f.gamma;
  c.n1 = f.n1;
  c.m1 = f.m1;
  c.shapes.clear();
  for (const auto& s : f.shapes) {
    if (s == "all") {
      c.shapes.assign(std::begin(lsdr::synth::kAllShapes), std::end(lsdr::synth::kAllShapes));
    } else {
      c.shapes.push_back(lsdr::synth::parse_shape(s));
    }
  }
  c.seeds = f.seeds;
  c.seed = f.seed;
  c.methods.clear();
  for (const auto& m : f.methods) c.methods.push_back(lsdr::train::parse_method(m));
  if (f.seeds < 1) throw UsageError("--seeds must be >= 1");
  c.cross_fit = f.cross_fit;
  if (c.cross_fit == 1 || c.cross_fit < 0) throw UsageError("--cross-fit must be 0 or >= 2");
  c.n_test = f.n_test;
  c.record_time = f.record_time;
  std::tie(c.stage1, c.stage2) = f.train.resolve(f.seed);

  const auto records = lsdr::mc::shape_sweep(c);
  const json config = sweep_config_json(c);
  const fs::path dir(f.out_dir);
  std::ostringstream rec;
  rec << csv_preamble(kRecordsFormat, config);
  lsdr::report::write_records_csv(rec, records);
  lsdr::io::write_text(dir / "records.csv", rec.str());
  std::vector<std::string> warnings;
  const auto rows = lsdr::report::aggregate(records, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  write_tables(dir, rows, config);
  lsdr::io::write_json(dir / "sweep.json", {{"format", kSweepFormat},
                                            {"config", config},
                                            {"records", records.size()}});
  std::cout << "Total variation to P(Y|A=0)\n" << lsdr::report::table_layout(rows, "tv")
            << "\nTop-1 accuracy (%) on a uniform test set\n"
            << lsdr::report::table_layout(rows, "accuracy");
  return 0;
}

// ---------------------------------------------------------------------------
// eval and report

struct EvalFlags {
  std::string model;
  std::string data;
  std::int64_t n_test = 10000;
  std::uint64_t seed = 0;
  bool no_posthoc = false;
  std::string out;
};

int cmd_eval(const EvalFlags& f) {
  const auto model = lsdr::io::model_from_checkpoint(lsdr::io::read_json(f.model));
  const auto file = lsdr::io::read_dataset(f.data);
  if (!file.truth) throw UsageError("eval needs a dataset with generation metadata");
  const double acc = lsdr::report::uniform_test_eval(model, file.truth->mixture, f.n_test,
                                                     lsdr::derive_seed(f.seed, "test"),
                                                     !f.no_posthoc);
  const json doc = {{"format", lsdr::io::kEvalFormat},
                    {"config", {{"command", "eval"},
                                {"model", f.model},
                                {"data", f.data},
                                {"n_test", f.n_test},
                                {"seed", f.seed},
                                {"posthoc_adjust", !f.no_posthoc}}},
                    {"accuracy", acc}};
  if (!f.out.empty()) lsdr::io::write_json(f.out, doc);
  std::cout << "top-1 accuracy on a uniform test set: " << 100.0 * acc << "%\n";
  return 0;
}

struct ReportFlags {
  std::vector<std::string> records;
  std::string out_dir;
};

int cmd_report(const ReportFlags& f) {
  std::vector<lsdr::report::ExperimentRecord> all;
  for (const auto& path : f.records) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    auto part = lsdr::report::read_records_csv(in);
    all.insert(all.end(), std::make_move_iterator(part.begin()),
               std::make_move_iterator(part.end()));
  }
  std::vector<std::string> warnings;
  const auto rows = lsdr::report::aggregate(all, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  const json config = {{"command", "report"}, {"records", f.records}};
  if (!f.out_dir.empty()) write_tables(f.out_dir, rows, config);
  std::cout << "Total variation to P(Y|A=0)\n" << lsdr::report::table_layout(rows, "tv")
            << "\nTop-1 accuracy (%) on a uniform test set\n"
            << lsdr::report::table_layout(rows, "accuracy");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lsdr: doubly robust class-prior estimation under label shift"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  SynthFlags synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic label-shift dataset");
  s->add_option("--classes", synth.classes, "Number of classes")->capture_default_str();
  s->add_option("--dim", synth.dim, "Feature dimension")->capture_default_str();
  s->add_option("--separation", synth.separation, "Norm of the class means")
      ->capture_default_str();
  s->add_option("--sigma2", synth.sigma2, "Class covariance scale")->capture_default_str();
  s->add_option("--n1", synth.n1, "Labeled head-class count")->capture_default_str();
  s->add_option("--m1", synth.m1, "Unlabeled head-class count")->capture_default_str();
  s->add_option("--gamma-l", synth.gamma_l, "Labeled imbalance ratio")->capture_default_str();
  s->add_option("--gamma-u", synth.gamma_u, "Unlabeled imbalance ratio")->capture_default_str();
  s->add_option("--shape", synth.shape,
                "consistent | uniform | reversed | middle | headtail")
      ->capture_default_str();
  s->add_option("--seed", synth.seed, "Master seed")->capture_default_str();
  s->add_option("--mixture-seed", synth.mixture_seed, "Seed of the class means (default --seed)");
  s->add_option("--out", synth.out, "Output dataset (JSON lines)")->required();

  TrainCmdFlags tr;
  auto* t = app.add_subcommand("train", "Train a classifier and missingness mechanism");
  t->add_option("--data", tr.data, "Dataset file")->required()->check(CLI::ExistingFile);
  t->add_option("--method", tr.method,
                "supervised | mle | em | simpro | dr-risk | two-stage | batch-update")
      ->required();
  t->add_option("--mechanism", tr.mechanism,
                "Stage-1 source for dr-risk, as from:<checkpoint>");
  t->add_option("--seed", tr.seed, "Master seed")->capture_default_str();
  t->add_option("--out", tr.out, "Checkpoint file")->required();
  t->add_option("--history", tr.history, "Per-epoch history file");
  tr.train.add(t);

  EstimateFlags est;
  auto* e = app.add_subcommand("estimate", "Estimate P(Y) and P(Y|A=0)");
  e->add_option("--data", est.data, "Dataset file")->required()->check(CLI::ExistingFile);
  e->add_option("--model", est.model, "Checkpoint supplying the nuisances")
      ->check(CLI::ExistingFile);
  e->add_flag("--oracle", est.oracle, "Use the true posterior and propensity");
  e->add_option("--estimator", est.estimator, "or | ipw | dr")->capture_default_str();
  e->add_option("--cross-fit", est.cross_fit, "Folds (0 = no sample splitting)")
      ->capture_default_str();
  e->add_option("--clip", est.clip, "Propensity clip floor");
  e->add_option("--level", est.level, "Confidence level")->capture_default_str();
  e->add_option("--seed", est.seed, "Seed of the fold assignment")->capture_default_str();
  e->add_option("--out", est.out, "Report file");

  auto* mcapp = app.add_subcommand("montecarlo", "Monte Carlo studies");
  mcapp->require_subcommand(1);
  CoverageFlags cov;
  auto* mcov = mcapp->add_subcommand("coverage", "Bias, variance and CI coverage");
  cov.scenario.add(mcov, true);
  mcov->add_flag("--allow-partial", cov.allow_partial, "Exit 0 despite failed replications");
  mcov->add_flag("--replications", cov.replications, "Include per-replication estimates");
  mcov->add_option("--out", cov.out, "Report file (JSON)");
  mcov->add_option("--csv", cov.csv, "Per-class summary CSV");

  BiasDecayFlags bd;
  auto* mbd = mcapp->add_subcommand("bias-decay", "Bias slope under shrinking corruption");
  bd.scenario.reps = 200;
  bd.scenario.add(mbd, false);
  mbd->add_option("--n-grid", bd.n_grid, "Sample sizes")->delimiter(',')->capture_default_str();
  mbd->add_option("--magnitude", bd.magnitude, "delta = magnitude * N^(-1/4)")
      ->capture_default_str();
  mbd->add_option("--corrupt", bd.corrupt, "both | posterior | propensity")
      ->capture_default_str();
  mbd->add_option("--dr-slope-max", bd.dr_slope_max, "DR slope threshold")
      ->capture_default_str();
  mbd->add_option("--or-slope-min", bd.or_slope_min, "OR slope threshold")
      ->capture_default_str();
  mbd->add_flag("--allow-partial", bd.allow_partial, "Exit 0 despite failed replications");
  mbd->add_option("--out", bd.out, "Report file (JSON)");

  SweepFlags sw;
  auto* msw = mcapp->add_subcommand("sweep", "Methods x estimators over the five shapes");
  msw->add_option("--classes", sw.classes, "Number of classes")->capture_default_str();
  msw->add_option("--dim", sw.dim, "Feature dimension")->capture_default_str();
  msw->add_option("--separation", sw.separation, "Norm of the class means")
      ->capture_default_str();
  msw->add_option("--sigma2", sw.sigma2, "Class covariance scale")->capture_default_str();
  msw->add_option("--gamma", sw.gamma, "Imbalance ratio")->capture_default_str();
  msw->add_option("--n1", sw.n1, "Labeled head-class count")->capture_default_str();
  msw->add_option("--m1", sw.m1, "Unlabeled head-class count")->capture_default_str();
  msw->add_option("--shapes", sw.shapes, "Shapes or 'all'")->delimiter(',')
      ->capture_default_str();
  msw->add_option("--seeds", sw.seeds, "Seeds per shape")->capture_default_str();
  msw->add_option("--seed", sw.seed, "Master seed")->capture_default_str();
  msw->add_option("--methods", sw.methods, "Training methods")->delimiter(',')
      ->capture_default_str();
  msw->add_option("--cross-fit", sw.cross_fit, "Folds for the DR estimate")
      ->capture_default_str();
  msw->add_option("--n-test", sw.n_test, "Uniform test-set size")->capture_default_str();
  msw->add_flag("--record-time", sw.record_time, "Record wall-clock seconds (not reproducible)");
  msw->add_option("--out-dir", sw.out_dir, "Output directory")->capture_default_str();
  sw.train.add(msw);

  EvalFlags ev;
  auto* evapp = app.add_subcommand("eval", "Top-1 accuracy on a fresh uniform test set");
  evapp->add_option("--model", ev.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  evapp->add_option("--data", ev.data, "Dataset whose header gives the mixture")
      ->required()
      ->check(CLI::ExistingFile);
  evapp->add_option("--n-test", ev.n_test, "Test-set size")->capture_default_str();
  evapp->add_option("--seed", ev.seed, "Seed of the test set")->capture_default_str();
  evapp->add_flag("--no-posthoc", ev.no_posthoc, "Skip the uniform-prior adjustment");
  evapp->add_option("--out", ev.out, "Result file");

  ReportFlags rp;
  auto* rpapp = app.add_subcommand("report", "Aggregate record CSVs into tables");
  rpapp->add_option("--records", rp.records, "Record CSV files")
      ->required()
      ->check(CLI::ExistingFile);
  rpapp->add_option("--out-dir", rp.out_dir, "Directory for aggregate.csv and tables");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_estimate(est);
    if (*mcov) return cmd_coverage(cov);
    if (*mbd) return cmd_bias_decay(bd);
    if (*msw) return cmd_sweep(sw);
    if (*evapp) return cmd_eval(ev);
    if (*rpapp) return cmd_report(rp);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
