#include "lsdr/io.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace lsdr::io {

namespace {

json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double get_number(const json& j) {
  if (j.is_null()) return std::nan("");
  return j.get<double>();
}

const json& require(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) {
    throw FormatError(std::string("missing key '") + key + "'");
  }
  return j.at(key);
}

void check_format(const json& j, const char* expected) {
  const auto& f = require(j, "format");
  if (!f.is_string() || f.get<std::string>() != expected) {
    throw FormatError(std::string("expected format ") + expected);
  }
}

json optional_distribution(const std::optional<ClassDistribution>& p) {
  return p ? to_json(*p) : json(nullptr);
}

}  // namespace

// ---------------------------------------------------------------------------
// Basic types

json to_json(const Vector& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v[i]));
  return out;
}

Vector vector_from_json(const json& j) {
  if (!j.is_array()) throw FormatError("expected a numeric array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = get_number(j[i]);
  return v;
}

json to_json(const ClassDistribution& p) { return to_json(p.probs()); }

ClassDistribution distribution_from_json(const json& j) {
  return ClassDistribution(vector_from_json(j));
}

json to_json(const MissingnessMechanism& m) {
  return {{"raw", to_json(m.raw_propensity())},
          {"propensity", to_json(m.propensity())},
          {"p_labeled", m.p_labeled()},
          {"clip_floor", m.clip_floor()}};
}

MissingnessMechanism mechanism_from_json(const json& j) {
  return MissingnessMechanism(vector_from_json(require(j, "raw")),
                              require(j, "p_labeled").get<double>(),
                              require(j, "clip_floor").get<double>());
}

json to_json(const synth::MixtureSpec& m) {
  json means = json::array();
  for (Eigen::Index c = 0; c < m.class_means.rows(); ++c) {
    means.push_back(to_json(Vector(m.class_means.row(c).transpose())));
  }
  return {{"classes", m.num_classes},
          {"dim", m.feature_dim},
          {"means", means},
          {"class_cov_scale", m.class_cov_scale}};
}

synth::MixtureSpec mixture_from_json(const json& j) {
  synth::MixtureSpec m;
  m.num_classes = require(j, "classes").get<int>();
  m.feature_dim = require(j, "dim").get<int>();
  m.class_cov_scale = require(j, "class_cov_scale").get<double>();
  const auto& means = require(j, "means");
  if (!means.is_array() || static_cast<int>(means.size()) != m.num_classes) {
    throw FormatError("mixture means must have one row per class");
  }
  m.class_means = Matrix(m.num_classes, m.feature_dim);
  for (int c = 0; c < m.num_classes; ++c) {
    const Vector row = vector_from_json(means[c]);
    if (row.size() != m.feature_dim) throw FormatError("mixture mean has the wrong dimension");
    m.class_means.row(c) = row.transpose();
  }
  m.validate();
  return m;
}

json to_json(const synth::ShiftConfig& s) {
  return {{"gamma_l", s.gamma_l}, {"gamma_u", s.gamma_u},
          {"shape", std::string(synth::to_string(s.shape))},
          {"n1", s.n1},           {"m1", s.m1},
          {"seed", s.seed}};
}

synth::ShiftConfig shift_from_json(const json& j) {
  synth::ShiftConfig s;
  s.gamma_l = require(j, "gamma_l").get<double>();
  s.gamma_u = require(j, "gamma_u").get<double>();
  s.shape = synth::parse_shape(require(j, "shape").get<std::string>());
  s.n1 = require(j, "n1").get<std::int64_t>();
  s.m1 = require(j, "m1").get<std::int64_t>();
  s.seed = require(j, "seed").get<std::uint64_t>();
  return s;
}

json to_json(const synth::PriorTruth& p) {
  return {{"labeled_prior", to_json(p.labeled_prior)},
          {"unlabeled_prior", to_json(p.unlabeled_prior)},
          {"combined_prior", to_json(p.combined_prior)},
          {"propensity", to_json(p.propensity)},
          {"p_labeled", p.p_labeled}};
}

synth::PriorTruth priors_from_json(const json& j) {
  synth::PriorTruth p;
  p.labeled_prior = distribution_from_json(require(j, "labeled_prior"));
  p.unlabeled_prior = distribution_from_json(require(j, "unlabeled_prior"));
  p.combined_prior = distribution_from_json(require(j, "combined_prior"));
  p.propensity = vector_from_json(require(j, "propensity"));
  p.p_labeled = require(j, "p_labeled").get<double>();
  return p;
}

// ---------------------------------------------------------------------------
// Training

json to_json(const model::TrainConfig& c) {
  return {{"architecture", std::string(model::to_string(c.architecture))},
          {"hidden_width", c.hidden_width},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"unlabeled_batch_size", c.unlabeled_batch_size},
          {"optimizer", std::string(model::to_string(c.optimizer))},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"sgd_momentum", c.sgd_momentum},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"confidence_threshold", c.confidence_threshold},
          {"warmup_epochs", c.warmup_epochs},
          {"prior_momentum", c.prior_momentum},
          {"mechanism_learning_rate", c.mechanism_learning_rate},
          {"clip_floor", c.clip_floor},
          {"per_epoch_mechanism", c.per_epoch_mechanism},
          {"full_batch", c.full_batch},
          {"m_step_iterations", c.m_step_iterations},
          {"weak_noise", c.weak_noise},
          {"strong_noise", c.strong_noise},
          {"cross_fit", c.cross_fit},
          {"dr_momentum", c.dr_momentum}};
}

model::TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("train config must be an object");
  model::TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "architecture") c.architecture = model::parse_architecture(v.get<std::string>());
    else if (key == "hidden_width") c.hidden_width = v.get<int>();
    else if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "epochs") c.epochs = v.get<int>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "unlabeled_batch_size") c.unlabeled_batch_size = v.get<int>();
    else if (key == "optimizer") c.optimizer = model::parse_optimizer(v.get<std::string>());
    else if (key == "beta1") c.beta1 = v.get<double>();
    else if (key == "beta2") c.beta2 = v.get<double>();
    else if (key == "adam_eps") c.adam_eps = v.get<double>();
    else if (key == "sgd_momentum") c.sgd_momentum = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "confidence_threshold") c.confidence_threshold = v.get<double>();
    else if (key == "warmup_epochs") c.warmup_epochs = v.get<int>();
    else if (key == "prior_momentum") c.prior_momentum = v.get<double>();
    else if (key == "mechanism_learning_rate") c.mechanism_learning_rate = v.get<double>();
    else if (key == "clip_floor") c.clip_floor = v.get<double>();
    else if (key == "per_epoch_mechanism") c.per_epoch_mechanism = v.get<bool>();
    else if (key == "full_batch") c.full_batch = v.get<bool>();
    else if (key == "m_step_iterations") c.m_step_iterations = v.get<int>();
    else if (key == "weak_noise") c.weak_noise = v.get<double>();
    else if (key == "strong_noise") c.strong_noise = v.get<double>();
    else if (key == "cross_fit") c.cross_fit = v.get<int>();
    else if (key == "dr_momentum") c.dr_momentum = v.get<double>();
    else throw FormatError("unknown train config key '" + key + "'");
  }
  c.validate();
  return c;
}

json to_json(const model::ClassifierParams& p) {
  return {{"architecture", std::string(model::to_string(p.architecture))},
          {"input_dim", p.input_dim},
          {"hidden_width", p.hidden_width},
          {"num_classes", p.num_classes},
          {"weights", to_json(p.weights)}};
}

model::ClassifierParams classifier_from_json(const json& j) {
  model::ClassifierParams p;
  p.architecture = model::parse_architecture(require(j, "architecture").get<std::string>());
  p.input_dim = require(j, "input_dim").get<int>();
  p.hidden_width = require(j, "hidden_width").get<int>();
  p.num_classes = require(j, "num_classes").get<int>();
  p.weights = vector_from_json(require(j, "weights"));
  p.validate();
  return p;
}

json to_json(const train::EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"loss", number(r.loss)},
          {"marginal_loglik", number(r.marginal_loglik)},
          {"unlabeled_estimate", to_json(r.unlabeled_estimate)},
          {"tv_to_truth", r.tv_to_truth ? number(*r.tv_to_truth) : json(nullptr)},
          {"max_step_drift", number(r.max_step_drift)}};
}

json to_json(const train::TrainedModel& m) {
  json history = json::array();
  for (const auto& r : m.history) history.push_back(to_json(r));
  return {{"method", std::string(train::to_string(m.method))},
          {"classifier", to_json(m.classifier)},
          {"mechanism", to_json(m.mechanism)},
          {"logit_prior", optional_distribution(m.logit_prior)},
          {"population_prior", to_json(m.population_prior)},
          {"unlabeled_estimate", to_json(m.unlabeled_estimate)},
          {"frozen_prior", optional_distribution(m.frozen_prior)},
          {"stage1", m.stage1 ? to_json(*m.stage1) : json(nullptr)},
          {"stage1_estimate", m.stage1_estimate ? to_json(*m.stage1_estimate) : json(nullptr)},
          {"clip_events", m.clip_events},
          {"history", history}};
}

train::TrainedModel trained_model_from_json(const json& j) {
  train::TrainedModel m;
  m.method = train::parse_method(require(j, "method").get<std::string>());
  m.classifier = classifier_from_json(require(j, "classifier"));
  m.mechanism = mechanism_from_json(require(j, "mechanism"));
  if (!require(j, "logit_prior").is_null()) {
    m.logit_prior = distribution_from_json(j.at("logit_prior"));
  }
  m.population_prior = distribution_from_json(require(j, "population_prior"));
  m.unlabeled_estimate = distribution_from_json(require(j, "unlabeled_estimate"));
  if (j.contains("frozen_prior") && !j.at("frozen_prior").is_null()) {
    m.frozen_prior = distribution_from_json(j.at("frozen_prior"));
  }
  if (j.contains("stage1") && !j.at("stage1").is_null()) {
    m.stage1 = std::make_shared<train::TrainedModel>(trained_model_from_json(j.at("stage1")));
  }
  if (j.contains("clip_events")) m.clip_events = j.at("clip_events").get<std::int64_t>();
  if (j.contains("history")) {
    for (const auto& r : j.at("history")) {
      train::EpochRecord e;
      e.epoch = require(r, "epoch").get<int>();
      e.loss = get_number(require(r, "loss"));
      e.marginal_loglik = get_number(require(r, "marginal_loglik"));
      e.unlabeled_estimate = distribution_from_json(require(r, "unlabeled_estimate"));
      if (r.contains("tv_to_truth") && !r.at("tv_to_truth").is_null()) {
        e.tv_to_truth = r.at("tv_to_truth").get<double>();
      }
      if (r.contains("max_step_drift")) e.max_step_drift = get_number(r.at("max_step_drift"));
      m.history.push_back(std::move(e));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const estimate::EstimateReport& r) {
  json out = {{"estimator", std::string(estimate::to_string(r.estimator))},
              {"raw", to_json(r.raw)},
              {"p_combined", to_json(r.p_combined)},
              {"p_unlabeled", optional_distribution(r.p_unlabeled)},
              {"cross_fit_folds", r.cross_fit_folds},
              {"clip_events", r.clip_events},
              {"sample_size", r.sample_size}};
  if (r.influence_variance) {
    out["influence_variance"] = to_json(*r.influence_variance);
    out["ci_half_width"] = to_json(*r.ci_half_width);
    json ci = json::array();
    for (const auto& iv : estimate::confidence_interval(r, 0.95)) {
      ci.push_back({number(iv.lower), number(iv.upper)});
    }
    out["ci95"] = ci;
  }
  return out;
}

json to_json(const mc::McScenario& s) {
  json out = {{"mixture", to_json(s.mixture)},
              {"priors", to_json(s.priors)},
              {"regime", std::string(mc::to_string(s.regime))},
              {"temperature", s.corruption.temperature},
              {"propensity_scale", s.corruption.propensity_scale},
              {"n", s.n},
              {"reps", s.reps},
              {"seed", s.seed},
              {"level", s.level},
              {"clip_floor", s.clip_floor}};
  if (s.regime == mc::Regime::learned_both) {
    out["cross_fit"] = s.cross_fit;
    out["train"] = to_json(s.train);
  }
  return out;
}

json to_json(const mc::McReport& r, bool include_replications) {
  json estimators = json::array();
  auto opt = [](const std::optional<Vector>& v) { return v ? to_json(*v) : json(nullptr); };
  for (const auto& s : r.estimators) {
    estimators.push_back({{"estimator", std::string(estimate::to_string(s.estimator))},
                          {"bias", to_json(s.bias)},
                          {"bias_se", to_json(s.bias_se)},
                          {"rmse", to_json(s.rmse)},
                          {"scaled_variance", to_json(s.scaled_variance)},
                          {"mean_plugin_variance", opt(s.mean_plugin_variance)},
                          {"variance_ratio", opt(s.variance_ratio)},
                          {"coverage", opt(s.coverage)},
                          {"skewness", to_json(s.skewness)},
                          {"excess_kurtosis", to_json(s.excess_kurtosis)},
                          {"relative_bias", to_json(s.relative_bias)},
                          {"relative_bias_se", to_json(s.relative_bias_se)}});
  }
  json out = {{"truth", to_json(r.truth)},
              {"completed", r.completed},
              {"failures", r.failures},
              {"failure_messages", r.failure_messages},
              {"coverage_band", {r.band.lower, r.band.upper}},
              {"estimators", estimators}};
  if (include_replications) {
    json reps = json::array();
    for (const auto& rep : r.replications) {
      json raw = json::array();
      for (const auto& v : rep.raw) raw.push_back(to_json(v));
      reps.push_back({{"index", rep.index}, {"ok", rep.ok}, {"raw", raw}});
    }
    out["replications"] = reps;
  }
  return out;
}

json to_json(const mc::BiasDecayResult& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"n", row.n},
                    {"delta", row.delta},
                    {"bias", row.bias},
                    {"relative_bias", row.relative_bias},
                    {"relative_se", row.relative_se},
                    {"failures", row.failures}});
  }
  return {{"estimators", {"or", "ipw", "dr"}},
          {"magnitude", r.config.magnitude},
          {"n_grid", r.config.n_grid},
          {"rows", rows},
          {"slopes", r.slopes},
          {"plain_slopes", r.plain_slopes},
          {"thresholds", {{"dr_slope_max", r.config.dr_slope_max},
                          {"or_slope_min", r.config.or_slope_min}}},
          {"dr_pass", r.dr_pass},
          {"or_pass", r.or_pass}};
}

// ---------------------------------------------------------------------------
// Files

void write_dataset(const std::filesystem::path& path, const Dataset& data,
                   const std::optional<synth::GroundTruth>& truth, const json& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  json header = {{"format", kDatasetFormat},
                 {"C", data.num_classes()},
                 {"d", data.feature_dim()},
                 {"N", data.size()},
                 {"N_l", data.num_labeled()}};
  if (truth) {
    json t = to_json(truth->priors);
    t["mixture"] = to_json(truth->mixture);
    t["shift"] = truth->shift ? to_json(*truth->shift) : json(nullptr);
    header["truth"] = t;
  } else {
    header["truth"] = nullptr;
  }
  if (!config.is_null()) header["config"] = config;
  out << header.dump() << '\n';
  const bool hidden = truth && static_cast<std::int64_t>(truth->hidden_labels.size()) == data.size();
  for (std::int64_t i = 0; i < data.size(); ++i) {
    json row = {{"x", to_json(Vector(data.x(i).transpose()))},
                {"a", data.is_labeled(i) ? 1 : 0},
                {"y", data.is_labeled(i) ? json(data.label(i)) : json(nullptr)},
                {"hidden_y", hidden ? json(truth->hidden_labels[i]) : json(nullptr)}};
    out << row.dump() << '\n';
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

DatasetFile read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty dataset file " + path.string());
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError("dataset header: " + std::string(e.what()));
  }
  check_format(header, kDatasetFormat);
  const int C = require(header, "C").get<int>();
  const int d = require(header, "d").get<int>();
  std::vector<Vector> rows;
  std::vector<std::uint8_t> labeled;
  std::vector<int> labels;
  std::vector<int> hidden;
  bool all_hidden = true;
  std::int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json r;
    try {
      r = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    Vector x = vector_from_json(require(r, "x"));
    if (x.size() != d) throw FormatError("dataset line " + std::to_string(line_no) + ": bad x");
    const int a = require(r, "a").get<int>();
    if (a != 0 && a != 1) throw FormatError("dataset line " + std::to_string(line_no) + ": bad a");
    const auto& y = require(r, "y");
    rows.push_back(std::move(x));
    labeled.push_back(static_cast<std::uint8_t>(a));
    labels.push_back(a == 1 ? y.get<int>() : -1);
    if (r.contains("hidden_y") && !r.at("hidden_y").is_null()) {
      hidden.push_back(r.at("hidden_y").get<int>());
    } else {
      all_hidden = false;
    }
  }
  Matrix features(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) features.row(i) = rows[i].transpose();
  DatasetFile out;
  out.data = Dataset(C, std::move(features), std::move(labeled), std::move(labels));
  const auto& t = require(header, "truth");
  if (!t.is_null()) {
    synth::GroundTruth g;
    g.priors = priors_from_json(t);
    g.mixture = mixture_from_json(require(t, "mixture"));
    if (t.contains("shift") && !t.at("shift").is_null()) g.shift = shift_from_json(t.at("shift"));
    if (all_hidden) g.hidden_labels = std::move(hidden);
    out.truth = std::move(g);
  }
  return out;
}

void write_json(const std::filesystem::path& path, const json& document) {
  write_text(path, document.dump(2) + "\n");
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw FormatError("failed writing " + path.string());
}

json checkpoint(const train::TrainedModel& model, const json& config) {
  return {{"format", kCheckpointFormat}, {"config", config}, {"model", to_json(model)}};
}

train::TrainedModel model_from_checkpoint(const json& document) {
  check_format(document, kCheckpointFormat);
  return trained_model_from_json(require(document, "model"));
}

}  // namespace lsdr::io
