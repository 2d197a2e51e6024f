#include "lsdr/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "lsdr/rng.hpp"
#include "lsdr/synth.hpp"

namespace lsdr::train {

using model::ClassifierParams;
using model::TrainConfig;

Method parse_method(std::string_view name) {
  if (name == "supervised") return Method::supervised;
  if (name == "mle") return Method::mle;
  if (name == "em") return Method::em;
  if (name == "simpro") return Method::simpro;
  if (name == "dr-risk" || name == "dr_risk") return Method::dr_risk;
  if (name == "two-stage" || name == "two_stage") return Method::two_stage;
  if (name == "batch-update" || name == "batch_update") return Method::batch_update;
  throw DomainError("unknown training method '" + std::string(name) + "'");
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::supervised: return "supervised";
    case Method::mle: return "mle";
    case Method::em: return "em";
    case Method::simpro: return "simpro";
    case Method::dr_risk: return "dr-risk";
    case Method::two_stage: return "two-stage";
    case Method::batch_update: return "batch-update";
  }
  throw DomainError("unknown training method");
}

ClassDistribution smoothed_labeled_prior(const Dataset& data) {
  const auto counts = data.labeled_counts();
  Vector masses(data.num_classes());
  for (int c = 0; c < data.num_classes(); ++c) masses[c] = static_cast<double>(counts[c]) + 1.0;
  return ClassDistribution::from_masses(masses);
}

// ---------------------------------------------------------------------------
// TrainedModel

Matrix TrainedModel::posterior_batch(const Matrix& features) const {
  Matrix z = model::forward_batch(classifier, features);
  if (logit_prior) z.rowwise() += logit_prior->probs().array().log().matrix().transpose();
  return softmax_rows(z);
}

Matrix TrainedModel::uniform_posterior_batch(const Matrix& features) const {
  Matrix z = model::forward_batch(classifier, features);
  if (!logit_prior) z.rowwise() -= population_prior.probs().array().log().matrix().transpose();
  return softmax_rows(z);
}

std::vector<int> TrainedModel::predict_uniform(const Matrix& features) const {
  const Matrix post = uniform_posterior_batch(features);
  std::vector<int> out(post.rows());
  for (Eigen::Index i = 0; i < post.rows(); ++i) out[i] = argmax(post.row(i).transpose());
  return out;
}

estimate::NuisancePair TrainedModel::nuisance() const {
  auto params = classifier;
  Vector shift = Vector::Zero(classifier.num_classes);
  if (logit_prior) shift = logit_prior->probs().array().log();
  estimate::PosteriorFn fn = [params, shift](const Matrix& features) {
    Matrix z = model::forward_batch(params, features);
    z.rowwise() += shift.transpose();
    return softmax_rows(z);
  };
  return {fn, mechanism};
}

// ---------------------------------------------------------------------------
// Likelihood

namespace {

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

Vector log_one_minus(const Vector& propensity) {
  Vector out(propensity.size());
  for (Eigen::Index c = 0; c < propensity.size(); ++c) {
    out[c] = propensity[c] >= 1.0 ? -std::numeric_limits<double>::infinity()
                                  : std::log1p(-propensity[c]);
  }
  return out;
}

}  // namespace

LogLikelihood marginal_loglik(const Matrix& posteriors, const MissingnessMechanism& mechanism,
                              const Dataset& data) {
  require_same_size(posteriors.rows(), data.size(), "marginal_loglik rows");
  require_same_size(posteriors.cols(), data.num_classes(), "marginal_loglik classes");
  require_same_size(mechanism.size(), data.num_classes(), "marginal_loglik mechanism");
  const Vector& pi = mechanism.propensity();
  LogLikelihood out;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    if (data.is_labeled(i)) {
      const int y = data.label(i);
      out.labeled_term += std::log(posteriors(i, y)) + std::log(pi[y]);
    } else {
      const double mass = posteriors.row(i).dot((Vector::Ones(pi.size()) - pi));
      if (!(mass > 0.0)) {
        out.degenerate = true;
        out.unlabeled_term = -std::numeric_limits<double>::infinity();
      } else if (!out.degenerate) {
        out.unlabeled_term += std::log(mass);
      }
    }
  }
  out.value = out.labeled_term + out.unlabeled_term;
  return out;
}

LogLikelihood marginal_loglik(const ClassifierParams& classifier,
                              const MissingnessMechanism& mechanism, const Dataset& data) {
  require_same_size(mechanism.size(), data.num_classes(), "marginal_loglik mechanism");
  const Matrix z = model::forward_batch(classifier, data.features());
  const Vector& pi = mechanism.propensity();
  const Vector l1m = log_one_minus(pi);
  LogLikelihood out;
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const Vector zi = z.row(i).transpose();
    const double lse = log_sum_exp(zi);
    if (data.is_labeled(i)) {
      const int y = data.label(i);
      out.labeled_term += zi[y] - lse + std::log(pi[y]);
    } else {
      const double term = log_sum_exp(zi + l1m) - lse;
      if (!std::isfinite(term)) {
        out.degenerate = true;
        out.unlabeled_term = -std::numeric_limits<double>::infinity();
      } else if (!out.degenerate) {
        out.unlabeled_term += term;
      }
    }
  }
  out.value = out.labeled_term + out.unlabeled_term;
  return out;
}

LogLikAndGrad marginal_loglik_and_grad(const ClassifierParams& classifier,
                                       const Vector& mechanism_logits, const Dataset& data) {
  const int C = data.num_classes();
  require_same_size(mechanism_logits.size(), C, "mechanism logits");
  const Matrix z = model::forward_batch(classifier, data.features());
  Vector pi(C), log_pi(C), log_1m(C);
  for (int c = 0; c < C; ++c) {
    pi[c] = sigmoid(mechanism_logits[c]);
    log_pi[c] = -softplus(-mechanism_logits[c]);
    log_1m[c] = -softplus(mechanism_logits[c]);
  }
  LogLikAndGrad out;
  out.mechanism_grad = Vector::Zero(C);
  Matrix dz(z.rows(), C);
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const Vector zi = z.row(i).transpose();
    const double lse = log_sum_exp(zi);
    const Vector s = (zi.array() - lse).exp();
    if (data.is_labeled(i)) {
      const int y = data.label(i);
      out.value += zi[y] - lse + log_pi[y];
      Vector g = -s;
      g[y] += 1.0;
      dz.row(i) = g.transpose();
      out.mechanism_grad[y] += 1.0 - pi[y];
    } else {
      const Vector shifted = zi + log_1m;
      const double lse_u = log_sum_exp(shifted);
      out.value += lse_u - lse;
      const Vector omega = (shifted.array() - lse_u).exp();
      dz.row(i) = (omega - s).transpose();
      out.mechanism_grad -= omega.cwiseProduct(pi);
    }
  }
  out.classifier_grad = model::backward_batch(classifier, data.features(), dz);
  return out;
}

// ---------------------------------------------------------------------------
// E-step, M-step

Matrix e_step_weights(const Matrix& posteriors, const Vector& factor, std::optional<double> tau) {
  require_same_size(posteriors.cols(), factor.size(), "e_step factor");
  Matrix omega = posteriors.array().rowwise() * factor.transpose().array();
  for (Eigen::Index i = 0; i < omega.rows(); ++i) {
    const double mass = omega.row(i).sum();
    if (!(mass > 0.0) || !std::isfinite(mass)) {
      throw DegenerateError("E-step row " + std::to_string(i) + " has no posterior mass");
    }
    omega.row(i) /= mass;
    if (tau) omega.row(i) = model::pseudo_label(Vector(omega.row(i).transpose()), *tau).transpose();
  }
  return omega;
}

MissingnessMechanism closed_form_mechanism(const Vector& zeta1, const Vector& zeta0,
                                           double p_labeled, double clip_floor) {
  require_same_size(zeta1.size(), zeta0.size(), "closed_form_mechanism");
  Vector raw(zeta1.size());
  for (Eigen::Index c = 0; c < zeta1.size(); ++c) {
    const double denom = zeta1[c] + zeta0[c];
    if (!(denom > 0.0)) {
      throw ClassMassError(static_cast<int>(c),
                           "class " + std::to_string(c) + " has zero labeled and unlabeled mass");
    }
    raw[c] = zeta1[c] / denom;
  }
  return MissingnessMechanism(raw, p_labeled, clip_floor);
}

namespace {

Vector labeled_count_vector(const Dataset& data) {
  const auto counts = data.labeled_counts();
  Vector out(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) out[c] = static_cast<double>(counts[c]);
  return out;
}

Matrix gather(const Matrix& rows, const std::vector<std::int64_t>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), rows.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(k) = rows.row(idx[k]);
  return out;
}

Matrix stack(const Matrix& top, const Matrix& bottom) {
  if (bottom.rows() == 0) return top;
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out << top, bottom;
  return out;
}

Vector stack(const Vector& top, const Vector& bottom) {
  if (bottom.size() == 0) return top;
  Vector out(top.size() + bottom.size());
  out << top, bottom;
  return out;
}

Matrix one_hot_rows(const std::vector<int>& labels, int num_classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= 0) out(i, labels[i]) = 1.0;
  }
  return out;
}

Vector log_prior(const ClassDistribution& p) { return p.probs().array().log(); }

// Labeled rows first, then unlabeled rows, with the full-data weighting.
struct FullBatch {
  Matrix features;
  Matrix labeled_targets;
  Matrix unlabeled_features;
};

FullBatch full_batch(const Dataset& data) {
  const auto li = data.labeled_indices();
  const auto ui = data.unlabeled_indices();
  std::vector<int> labels;
  for (auto i : li) labels.push_back(data.label(i));
  FullBatch fb;
  fb.unlabeled_features = gather(data.features(), ui);
  fb.features = stack(gather(data.features(), li), fb.unlabeled_features);
  fb.labeled_targets = one_hot_rows(labels, data.num_classes());
  return fb;
}

double penalized(double loss, const Vector& w, double weight_decay) {
  return weight_decay == 0.0 ? loss : loss + 0.5 * weight_decay * w.squaredNorm();
}

}  // namespace

void e_step(EmState& state, const Dataset& data) {
  require_same_size(state.mechanism.size(), data.num_classes(), "e_step mechanism");
  const Matrix xu = gather(data.features(), data.unlabeled_indices());
  const Vector factor = Vector::Ones(data.num_classes()) - state.mechanism.propensity();
  if (xu.rows() > 0) {
    state.omega = e_step_weights(softmax_rows(model::forward_batch(state.classifier, xu)), factor);
    state.zeta0 = state.omega.colwise().sum().transpose();
  } else {
    state.omega = Matrix(0, data.num_classes());
    state.zeta0 = Vector::Zero(data.num_classes());
  }
  state.zeta1 = labeled_count_vector(data);
}

double q_function(const EmState& state, const Dataset& data) {
  const FullBatch fb = full_batch(data);
  const Matrix targets = stack(fb.labeled_targets, state.omega);
  const Vector weights = Vector::Ones(targets.rows());
  const auto ce = model::shifted_cross_entropy(state.classifier, fb.features, targets, weights,
                                               Vector::Zero(data.num_classes()));
  const Vector& pi = state.mechanism.propensity();
  const Vector l1m = log_one_minus(pi);
  double mech = 0.0;
  for (int c = 0; c < data.num_classes(); ++c) {
    if (state.zeta1[c] > 0.0) mech += state.zeta1[c] * std::log(pi[c]);
    if (state.zeta0[c] > 0.0) mech += state.zeta0[c] * l1m[c];
  }
  return -ce.loss + mech / static_cast<double>(data.size());
}

void m_step(EmState& state, const Dataset& data, const TrainConfig& cfg) {
  const FullBatch fb = full_batch(data);
  const Matrix targets = stack(fb.labeled_targets, state.omega);
  const Vector weights = Vector::Ones(targets.rows());
  const Vector no_shift = Vector::Zero(data.num_classes());
  auto& w = state.classifier.weights;
  auto objective = [&](const ClassifierParams& p) {
    return model::shifted_cross_entropy(p, fb.features, targets, weights, no_shift);
  };
  double step = 1.0;
  for (int it = 0; it < cfg.m_step_iterations; ++it) {
    const auto current = objective(state.classifier);
    const Vector grad = cfg.weight_decay == 0.0 ? current.gradient
                                                : Vector(current.gradient + cfg.weight_decay * w);
    const double f0 = penalized(current.loss, w, cfg.weight_decay);
    const double g2 = grad.squaredNorm();
    if (g2 < 1e-24) break;
    step = std::min(step * 2.0, 1e3);
    bool accepted = false;
    while (step > 1e-12) {
      ClassifierParams trial = state.classifier;
      trial.weights -= step * grad;
      const double f1 = penalized(objective(trial).loss, trial.weights, cfg.weight_decay);
      if (f1 <= f0 - 1e-4 * step * g2) {
        state.classifier = std::move(trial);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  state.mechanism =
      closed_form_mechanism(state.zeta1, state.zeta0, data.p_labeled(), cfg.clip_floor);
  ++state.iteration;
}

// ---------------------------------------------------------------------------
// Training loop plumbing

namespace {

class CyclicSampler {
 public:
  CyclicSampler(std::int64_t n, Rng rng) : pool_(n), pos_(n), rng_(std::move(rng)) {
    std::iota(pool_.begin(), pool_.end(), 0);
  }

  std::vector<std::int64_t> next(std::int64_t k) {
    std::vector<std::int64_t> out;
    out.reserve(k);
    while (static_cast<std::int64_t>(out.size()) < k) {
      if (pos_ == pool_.size()) {
        std::shuffle(pool_.begin(), pool_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(pool_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::int64_t> pool_;
  std::size_t pos_;
  Rng rng_;
};

struct Context {
  const Dataset& data;
  TrainConfig cfg;
  std::string_view label;
  int C;
  std::int64_t n_l;
  std::int64_t n_u;
  double p_a1;
  std::int64_t b_l;
  std::int64_t b_u;
  double w_l;
  double w_u;
  Matrix x_l;
  Matrix x_u;
  std::vector<int> y_l;
  Vector counts;
  ClassDistribution smoothed_prior;
  CyclicSampler labeled;
  CyclicSampler unlabeled;
  Rng augment;
  ClassifierParams params;
  model::OptimizerState opt;
  model::OptimizerSettings settings;
  bool warm;

  Context(const Dataset& d, const TrainConfig& c, std::string_view name,
          const TrainOptions& options)
      : data(d),
        cfg(c),
        label(name),
        C(d.num_classes()),
        n_l(d.num_labeled()),
        n_u(d.num_unlabeled()),
        p_a1(d.size() > 0 ? d.p_labeled() : 0.0),
        b_l(std::min<std::int64_t>(c.batch_size, d.num_labeled())),
        b_u(std::min<std::int64_t>(c.unlabeled_batch_size, d.num_unlabeled())),
        w_l(0.0),
        w_u(0.0),
        labeled(d.num_labeled(), make_rng(c.seed, "batch/labeled")),
        unlabeled(d.num_unlabeled(), make_rng(c.seed, "batch/unlabeled")),
        augment(make_rng(c.seed, "augment")),
        settings(model::OptimizerSettings::from(c)),
        warm(options.initial_classifier.has_value()) {
    cfg.validate();
    if (n_l < 1) throw DomainError(std::string(name) + ": training needs a labeled row");
    const auto li = d.labeled_indices();
    x_l = gather(d.features(), li);
    x_u = gather(d.features(), d.unlabeled_indices());
    for (auto i : li) y_l.push_back(d.label(i));
    counts = labeled_count_vector(d);
    smoothed_prior = smoothed_labeled_prior(d);
    const double b = static_cast<double>(b_l + b_u);
    w_l = p_a1 * b / static_cast<double>(b_l);
    if (b_u > 0) w_u = (1.0 - p_a1) * b / static_cast<double>(b_u);
    if (options.initial_classifier) {
      params = *options.initial_classifier;
      params.validate();
      require_same_size(params.input_dim, d.feature_dim(), "initial classifier input");
      require_same_size(params.num_classes, C, "initial classifier classes");
    } else {
      params = ClassifierParams::initialize(c.architecture, d.feature_dim(), c.hidden_width, C,
                                            c.seed);
    }
  }

  std::int64_t supervised_steps() const { return (n_l + b_l - 1) / b_l; }
  std::int64_t steps_per_epoch() const {
    const std::int64_t s = supervised_steps();
    return b_u > 0 ? std::max(s, (n_u + b_u - 1) / b_u) : s;
  }

  void apply(const model::LossAndGrad& lg, int epoch, std::int64_t step) {
    if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) {
      std::ostringstream msg;
      msg << label << ": non-finite loss at epoch " << epoch << " step " << step
          << " (loss " << lg.loss << ", |w| " << params.weights.norm() << ")";
      throw TrainingError(msg.str());
    }
    model::optimizer_step(opt, params.weights, lg.gradient, settings);
  }

  // One labeled mini-batch; optionally weakly augmented and logit adjusted.
  double supervised_step(const Vector& shift, bool augmented, int epoch, std::int64_t step) {
    const auto idx = labeled.next(b_l);
    Matrix x = gather(x_l, idx);
    if (augmented) synth::augment_rows(x, cfg.weak_noise, augment);
    std::vector<int> y;
    for (auto i : idx) y.push_back(y_l[i]);
    const auto lg = model::shifted_cross_entropy(params, x, one_hot_rows(y, C),
                                                 Vector::Ones(x.rows()), shift);
    apply(lg, epoch, step);
    return lg.loss;
  }

  void warmup(const Vector& shift, bool augmented) {
    if (warm) return;
    for (int e = 0; e < cfg.warmup_epochs; ++e) {
      for (std::int64_t s = 0; s < supervised_steps(); ++s) supervised_step(shift, augmented, -e, s);
    }
  }

  struct Draw {
    Matrix xl;
    std::vector<int> yl;
    Matrix xu;
    Matrix xu_strong;
  };

  Draw draw(bool augmented) {
    Draw out;
    const auto il = labeled.next(b_l);
    out.xl = gather(x_l, il);
    for (auto i : il) out.yl.push_back(y_l[i]);
    out.xu = b_u > 0 ? gather(x_u, unlabeled.next(b_u)) : Matrix(0, data.feature_dim());
    if (augmented) {
      synth::augment_rows(out.xl, cfg.weak_noise, augment);
      out.xu_strong = out.xu;
      synth::augment_rows(out.xu, cfg.weak_noise, augment);
      synth::augment_rows(out.xu_strong, cfg.strong_noise, augment);
    } else {
      out.xu_strong = out.xu;
    }
    return out;
  }

  Vector batch_weights(Eigen::Index rows_l, Eigen::Index rows_u) const {
    return stack(Vector(Vector::Constant(rows_l, w_l)), Vector(Vector::Constant(rows_u, w_u)));
  }
};

EpochRecord make_record(int epoch, double loss_sum, std::int64_t steps, const Matrix& posteriors,
                        const MissingnessMechanism& mechanism, const Dataset& data,
                        const ClassDistribution& unlabeled_estimate, double drift,
                        const TrainOptions& options) {
  EpochRecord r;
  r.epoch = epoch;
  r.loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
  r.marginal_loglik = marginal_loglik(posteriors, mechanism, data).value;
  r.unlabeled_estimate = unlabeled_estimate;
  if (options.unlabeled_truth) r.tv_to_truth = tv_distance(unlabeled_estimate, *options.unlabeled_truth);
  r.max_step_drift = drift;
  return r;
}

ClassDistribution column_mean_distribution(const Matrix& rows) {
  return ClassDistribution::from_masses(rows.colwise().sum().transpose());
}

// Exact E-step estimate of P(Y|A=0) for a plain classifier and the matching
// population prior.
void finish_plain(TrainedModel& out, const Context& ctx) {
  if (ctx.n_u > 0) {
    const Vector factor = Vector::Ones(ctx.C) - out.mechanism.propensity();
    const Matrix omega =
        e_step_weights(softmax_rows(model::forward_batch(out.classifier, ctx.x_u)), factor);
    out.unlabeled_estimate = column_mean_distribution(omega);
    out.population_prior =
        mix_priors(ctx.data.labeled_prior(), out.unlabeled_estimate, ctx.p_a1);
  } else {
    out.unlabeled_estimate = ctx.smoothed_prior;
    out.population_prior = ctx.smoothed_prior;
  }
}

ClassDistribution implied_unlabeled_prior(const MissingnessMechanism& mechanism,
                                          const Vector& counts, const ClassDistribution& fallback) {
  Vector masses(counts.size());
  for (Eigen::Index c = 0; c < counts.size(); ++c) {
    masses[c] = counts[c] * (1.0 / mechanism[c] - 1.0);
  }
  if (!(masses.sum() > 0.0)) return fallback;
  return ClassDistribution::from_masses(masses);
}

Matrix plain_posteriors(const ClassifierParams& params, const Dataset& data) {
  return softmax_rows(model::forward_batch(params, data.features()));
}

Matrix shifted_posteriors(const ClassifierParams& params, const ClassDistribution& prior,
                          const Dataset& data) {
  Matrix z = model::forward_batch(params, data.features());
  z.rowwise() += log_prior(prior).transpose();
  return softmax_rows(z);
}

}  // namespace

// ---------------------------------------------------------------------------
// Supervised

TrainedModel train_supervised(const Dataset& data, const TrainConfig& cfg,
                              const TrainOptions& options) {
  Context ctx(data, cfg, "supervised", options);
  const Vector no_shift = Vector::Zero(ctx.C);
  TrainedModel out;
  out.method = Method::supervised;
  out.mechanism = MissingnessMechanism::constant(ctx.C, ctx.p_a1, cfg.clip_floor);
  out.unlabeled_estimate = ctx.smoothed_prior;
  out.population_prior = ctx.smoothed_prior;
  ctx.warmup(no_shift, false);
  for (int e = 1; e <= cfg.epochs; ++e) {
    double loss = 0.0;
    const auto steps = ctx.steps_per_epoch();
    for (std::int64_t s = 0; s < steps; ++s) loss += ctx.supervised_step(no_shift, false, e, s);
    out.history.push_back(make_record(e, loss, steps, plain_posteriors(ctx.params, data),
                                      out.mechanism, data, out.unlabeled_estimate, 0.0, options));
  }
  out.classifier = ctx.params;
  return out;
}

// ---------------------------------------------------------------------------
// MLE

namespace {

TrainedModel mle_full_batch(Context& ctx, Vector eta, const TrainOptions& options) {
  const Dataset& data = ctx.data;
  const double n = static_cast<double>(data.size());
  TrainedModel out;
  out.method = Method::mle;
  auto mech_of = [&](const Vector& e) {
    Vector raw(e.size());
    for (Eigen::Index c = 0; c < e.size(); ++c) raw[c] = sigmoid(e[c]);
    return MissingnessMechanism(raw, ctx.p_a1, ctx.cfg.clip_floor);
  };
  double step = 1.0;
  for (int e = 1; e <= ctx.cfg.epochs; ++e) {
    double last = 0.0;
    for (int it = 0; it < ctx.cfg.m_step_iterations; ++it) {
      const auto cur = marginal_loglik_and_grad(ctx.params, eta, data);
      const double f0 = -cur.value / n;
      last = f0;
      const Vector gw = -cur.classifier_grad / n;
      const Vector ge = -cur.mechanism_grad / n;
      const double g2 = gw.squaredNorm() + ge.squaredNorm();
      if (!std::isfinite(f0)) throw TrainingError("mle: non-finite objective");
      if (g2 < 1e-24) break;
      step = std::min(step * 2.0, 1e3);
      bool accepted = false;
      while (step > 1e-12) {
        ClassifierParams trial = ctx.params;
        trial.weights -= step * gw;
        const Vector eta_trial = eta - step * ge;
        const double f1 = -marginal_loglik_and_grad(trial, eta_trial, data).value / n;
        if (f1 <= f0 - 1e-4 * step * g2) {
          ctx.params = std::move(trial);
          eta = eta_trial;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;
    }
    out.mechanism = mech_of(eta);
    finish_plain(out, ctx);
    out.history.push_back(make_record(e, last, 1, plain_posteriors(ctx.params, data),
                                      out.mechanism, data, out.unlabeled_estimate, 0.0, options));
  }
  out.mechanism = mech_of(eta);
  out.classifier = ctx.params;
  finish_plain(out, ctx);
  return out;
}

}  // namespace

TrainedModel train_mle(const Dataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  Context ctx(data, cfg, "mle", options);
  const int C = ctx.C;
  constexpr double kLogitClamp = 1e-6;
  auto logit = [&](double p) {
    p = std::clamp(p, kLogitClamp, 1.0 - kLogitClamp);
    return std::log(p / (1.0 - p));
  };
  Vector eta(C);
  for (int c = 0; c < C; ++c) {
    eta[c] = logit(options.initial_mechanism ? options.initial_mechanism->raw_propensity()[c]
                                             : ctx.p_a1);
  }
  ctx.warmup(Vector::Zero(C), false);
  if (cfg.full_batch) return mle_full_batch(ctx, eta, options);

  TrainedModel out;
  out.method = Method::mle;
  model::OptimizerState eta_opt;
  model::OptimizerSettings eta_settings = ctx.settings;
  eta_settings.kind = model::OptimizerKind::adam;
  eta_settings.learning_rate = cfg.mechanism_learning_rate;
  eta_settings.weight_decay = 0.0;
  const Vector no_shift = Vector::Zero(C);
  auto current_mechanism = [&]() {
    Vector raw(C);
    for (int c = 0; c < C; ++c) raw[c] = sigmoid(eta[c]);
    return MissingnessMechanism(raw, ctx.p_a1, cfg.clip_floor);
  };

  for (int e = 1; e <= cfg.epochs; ++e) {
    double loss_sum = 0.0;
    const auto steps = ctx.steps_per_epoch();
    for (std::int64_t s = 0; s < steps; ++s) {
      auto batch = ctx.draw(false);
      Vector pi(C), log_pi(C), log_1m(C);
      for (int c = 0; c < C; ++c) {
        pi[c] = sigmoid(eta[c]);
        log_pi[c] = -softplus(-eta[c]);
        log_1m[c] = -softplus(eta[c]);
      }
      Matrix omega(0, C);
      Vector eta_grad = Vector::Zero(C);
      double batch_obj = 0.0;
      const Matrix zl = model::forward_batch(ctx.params, batch.xl);
      for (Eigen::Index i = 0; i < zl.rows(); ++i) {
        const int y = batch.yl[i];
        batch_obj += ctx.p_a1 / ctx.b_l * (zl(i, y) - log_sum_exp(zl.row(i).transpose()) + log_pi[y]);
        eta_grad[y] -= ctx.p_a1 / ctx.b_l * (1.0 - pi[y]);
      }
      if (ctx.b_u > 0) {
        const Matrix zu = model::forward_batch(ctx.params, batch.xu);
        omega.resize(zu.rows(), C);
        for (Eigen::Index i = 0; i < zu.rows(); ++i) {
          const Vector zi = zu.row(i).transpose();
          const Vector shifted = zi + log_1m;
          const double lse_u = log_sum_exp(shifted);
          batch_obj += (1.0 - ctx.p_a1) / ctx.b_u * (lse_u - log_sum_exp(zi));
          omega.row(i) = (shifted.array() - lse_u).exp().matrix().transpose();
        }
        eta_grad += (1.0 - ctx.p_a1) / ctx.b_u * (omega.transpose() * Vector::Ones(zu.rows())).cwiseProduct(pi);
      }
      // The classifier gradient of the marginal likelihood equals the
      // cross-entropy gradient against the current E-step weights.
      const auto lg = model::shifted_cross_entropy(
          ctx.params, stack(batch.xl, batch.xu),
          stack(one_hot_rows(batch.yl, C), omega), ctx.batch_weights(zl.rows(), omega.rows()),
          no_shift);
      ctx.apply(lg, e, s);
      if (ctx.n_u > 0) model::optimizer_step(eta_opt, eta, eta_grad, eta_settings);
      loss_sum -= batch_obj;
    }
    out.mechanism = current_mechanism();
    out.classifier = ctx.params;
    finish_plain(out, ctx);
    out.history.push_back(make_record(e, loss_sum, steps, plain_posteriors(ctx.params, data),
                                      out.mechanism, data, out.unlabeled_estimate, 0.0, options));
  }
  out.mechanism = current_mechanism();
  out.classifier = ctx.params;
  finish_plain(out, ctx);
  return out;
}

// ---------------------------------------------------------------------------
// Plain EM

namespace {

TrainedModel em_plain(const Dataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  Context ctx(data, cfg, "em", options);
  const int C = ctx.C;
  const Vector no_shift = Vector::Zero(C);
  MissingnessMechanism mechanism = options.initial_mechanism
                                       ? options.initial_mechanism->with_clip_floor(cfg.clip_floor)
                                       : MissingnessMechanism::constant(C, ctx.p_a1, cfg.clip_floor);
  ClassDistribution q = options.initial_unlabeled_prior
                            ? *options.initial_unlabeled_prior
                            : (options.initial_mechanism
                                   ? implied_unlabeled_prior(mechanism, ctx.counts, ctx.smoothed_prior)
                                   : ctx.smoothed_prior);
  ctx.warmup(no_shift, false);

  TrainedModel out;
  out.method = Method::em;

  if (cfg.full_batch) {
    EmState state{ctx.params, mechanism, Matrix(), Vector(), Vector(), 0};
    for (int e = 1; e <= cfg.epochs; ++e) {
      e_step(state, data);
      m_step(state, data, cfg);
      out.classifier = state.classifier;
      out.mechanism = state.mechanism;
      finish_plain(out, ctx);
      out.history.push_back(make_record(e, -q_function(state, data), 1,
                                        plain_posteriors(state.classifier, data), state.mechanism,
                                        data, out.unlabeled_estimate, 0.0, options));
    }
    out.classifier = state.classifier;
    out.mechanism = state.mechanism;
    finish_plain(out, ctx);
    return out;
  }

  const double m = cfg.prior_momentum;
  for (int e = 1; e <= cfg.epochs; ++e) {
    double loss_sum = 0.0;
    double drift = 0.0;
    const auto steps = ctx.steps_per_epoch();
    for (std::int64_t s = 0; s < steps; ++s) {
      auto batch = ctx.draw(false);
      Matrix omega(0, C);
      if (ctx.b_u > 0) {
        const Vector factor = Vector::Ones(C) - mechanism.propensity();
        omega = e_step_weights(softmax_rows(model::forward_batch(ctx.params, batch.xu)), factor);
      }
      const auto lg = model::shifted_cross_entropy(
          ctx.params, stack(batch.xl, batch.xu), stack(one_hot_rows(batch.yl, C), omega),
          ctx.batch_weights(batch.xl.rows(), omega.rows()), no_shift);
      ctx.apply(lg, e, s);
      loss_sum += lg.loss;
      if (ctx.b_u > 0 && !cfg.per_epoch_mechanism) {
        const ClassDistribution before = q;
        q = ClassDistribution::from_masses(m * q.probs() +
                                           (1.0 - m) * column_mean_distribution(omega).probs());
        drift = std::max(drift, tv_distance(before, q));
        mechanism = closed_form_mechanism(ctx.counts, static_cast<double>(ctx.n_u) * q.probs(),
                                          ctx.p_a1, cfg.clip_floor);
      }
    }
    if (ctx.n_u > 0 && cfg.per_epoch_mechanism) {
      EmState state{ctx.params, mechanism, Matrix(), Vector(), Vector(), e};
      e_step(state, data);
      const ClassDistribution before = q;
      q = column_mean_distribution(state.omega);
      drift = tv_distance(before, q);
      mechanism = closed_form_mechanism(state.zeta1, state.zeta0, ctx.p_a1, cfg.clip_floor);
    }
    if (ctx.n_u == 0) mechanism = MissingnessMechanism::constant(C, 1.0, cfg.clip_floor);
    out.history.push_back(make_record(e, loss_sum, steps, plain_posteriors(ctx.params, data),
                                      mechanism, data, q, drift, options));
  }
  out.classifier = ctx.params;
  out.mechanism = mechanism;
  finish_plain(out, ctx);
  if (ctx.n_u > 0) out.unlabeled_estimate = q;
  if (ctx.n_u > 0) {
    out.population_prior = mix_priors(data.labeled_prior(), q, ctx.p_a1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// SimPro family

enum class PriorMode { self, frozen, batch_dr };

TrainedModel simpro_loop(const Dataset& data, const TrainConfig& cfg, PriorMode mode,
                         std::optional<ClassDistribution> initial_prior, Method method,
                         const TrainOptions& options) {
  Context ctx(data, cfg, to_string(method), options);
  const int C = ctx.C;
  const double tau = cfg.confidence_threshold;
  const double m = cfg.prior_momentum;
  const double m_dr = cfg.dr_momentum;

  // Uniform start: a head-heavy start suppresses tail pseudo-labels and the
  // thresholded update then cannot recover them.
  ClassDistribution q = initial_prior ? *initial_prior
                                      : (options.initial_unlabeled_prior
                                             ? *options.initial_unlabeled_prior
                                             : ClassDistribution::uniform(C));
  require_same_size(q.size(), C, "initial unlabeled prior");
  ctx.warmup(log_prior(ctx.smoothed_prior), true);

  ClassDistribution running =
      ctx.n_u > 0 ? mix_priors(ctx.smoothed_prior, q, ctx.p_a1) : ctx.smoothed_prior;
  auto derive_mechanism = [&]() {
    return closed_form_mechanism(ctx.counts, static_cast<double>(ctx.n_u) * q.probs(), ctx.p_a1,
                                 cfg.clip_floor);
  };
  MissingnessMechanism mechanism = derive_mechanism();
  const ClassDistribution labeled_prior = data.labeled_prior();

  TrainedModel out;
  out.method = method;
  for (int e = 1; e <= cfg.epochs; ++e) {
    double loss_sum = 0.0;
    double drift = 0.0;
    const auto steps = ctx.steps_per_epoch();
    for (std::int64_t s = 0; s < steps; ++s) {
      auto batch = ctx.draw(true);
      const Vector shift = log_prior(running);
      Matrix pseudo(0, C);
      Vector mass = Vector::Zero(C);
      const ClassDistribution q_before = q;
      if (ctx.b_u > 0) {
        const Matrix zw = model::forward_batch(ctx.params, batch.xu);
        pseudo = e_step_weights(softmax_rows(zw), q.probs(), tau);
        mass = pseudo.colwise().sum().transpose();
        if (mode == PriorMode::batch_dr) {
          // DR estimate of P(Y) from this batch, reweighted to the population
          // labeled fraction, then mapped to P(Y|A=0).
          Matrix zl = model::forward_batch(ctx.params, batch.xl);
          zl.rowwise() += shift.transpose();
          Matrix post_l = softmax_rows(zl);
          Matrix zu = zw;
          zu.rowwise() += shift.transpose();
          const Matrix post_u = softmax_rows(zu);
          Matrix contrib_l = post_l;
          for (Eigen::Index i = 0; i < post_l.rows(); ++i) {
            const int y = batch.yl[i];
            Vector r = -post_l.row(i).transpose();
            r[y] += 1.0;
            contrib_l.row(i) += (r / mechanism[y]).transpose();
          }
          const Vector p_hat =
              ctx.p_a1 * estimate::pairwise_column_mean(contrib_l) +
              (1.0 - ctx.p_a1) * estimate::pairwise_column_mean(post_u);
          const ClassDistribution q_batch =
              recover_unlabeled_prior(project_to_simplex(p_hat), labeled_prior, ctx.p_a1);
          q = ClassDistribution::from_masses(m_dr * q.probs() + (1.0 - m_dr) * q_batch.probs());
          mechanism = derive_mechanism();
        }
      }
      const auto lg = model::shifted_cross_entropy(
          ctx.params, stack(batch.xl, batch.xu_strong), stack(one_hot_rows(batch.yl, C), pseudo),
          ctx.batch_weights(batch.xl.rows(), pseudo.rows()), shift);
      ctx.apply(lg, e, s);
      loss_sum += lg.loss;
      if (mass.sum() > 0.0) {
        const Vector stat = mass / mass.sum();
        if (mode == PriorMode::self) {
          q = ClassDistribution::from_masses(m * q.probs() + (1.0 - m) * stat);
          mechanism = derive_mechanism();
        }
        running = ClassDistribution::from_masses(
            m * running.probs() +
            (1.0 - m) * (ctx.p_a1 * ctx.smoothed_prior.probs() + (1.0 - ctx.p_a1) * stat));
      }
      drift = std::max(drift, tv_distance(q_before, q));
    }
    out.history.push_back(make_record(e, loss_sum, steps,
                                      shifted_posteriors(ctx.params, running, data), mechanism,
                                      data, q, drift, options));
  }
  out.classifier = ctx.params;
  out.mechanism = mechanism;
  out.logit_prior = running;
  out.population_prior = running;
  out.unlabeled_estimate = q;
  return out;
}

}  // namespace

TrainedModel train_em(const Dataset& data, const TrainConfig& cfg, EmVariant variant,
                      const TrainOptions& options) {
  if (variant == EmVariant::plain) return em_plain(data, cfg, options);
  return simpro_loop(data, cfg, PriorMode::self, std::nullopt, Method::simpro, options);
}

TrainedModel train_simpro_frozen(const Dataset& data, const TrainConfig& cfg,
                                 const ClassDistribution& prior, const TrainOptions& options) {
  return simpro_loop(data, cfg, PriorMode::frozen, prior, Method::simpro, options);
}

TrainedModel batch_update_dr(const Dataset& data, const TrainConfig& cfg,
                             const TrainOptions& options) {
  return simpro_loop(data, cfg, PriorMode::batch_dr, std::nullopt, Method::batch_update, options);
}

// ---------------------------------------------------------------------------
// Two-stage

namespace {

constexpr double kFrozenPriorFloor = 1e-4;

estimate::EstimateReport stage1_estimate(const TrainedModel& stage1, const Dataset& data,
                                         const TrainConfig& cfg_stage1) {
  if (cfg_stage1.cross_fit >= 2) {
    estimate::NuisanceFitter fitter = [&](const Dataset& fold) {
      return train_em(fold, cfg_stage1, EmVariant::simpro).nuisance();
    };
    return estimate::dr_estimate(fitter, data, cfg_stage1.cross_fit,
                                 derive_seed(cfg_stage1.seed, "crossfit"));
  }
  return estimate::dr_estimate(stage1.nuisance(), data);
}

}  // namespace

TrainedModel two_stage(const Dataset& data, const TrainConfig& cfg_stage1,
                       const TrainConfig& cfg_stage2, const TrainOptions& options) {
  auto stage1 = std::make_shared<TrainedModel>(train_em(data, cfg_stage1, EmVariant::simpro));
  const auto report = stage1_estimate(*stage1, data, cfg_stage1);
  const ClassDistribution estimate =
      report.p_unlabeled ? *report.p_unlabeled : stage1->unlabeled_estimate;
  const ClassDistribution frozen =
      ClassDistribution::from_masses(estimate.probs().cwiseMax(kFrozenPriorFloor));
  TrainedModel out = train_simpro_frozen(data, cfg_stage2, frozen, options);
  out.method = Method::two_stage;
  out.frozen_prior = frozen;
  out.stage1 = std::move(stage1);
  out.stage1_estimate = report;
  out.clip_events = report.clip_events;
  return out;
}

// ---------------------------------------------------------------------------
// DR risk

DrRiskResult dr_risk_loss_and_grad(const ClassifierParams& classifier,
                                   const MissingnessMechanism& mechanism,
                                   const DrRiskBatch& batch, const Vector& logit_shift,
                                   DrRiskPath path) {
  const Eigen::Index n = batch.features.rows();
  const int C = classifier.num_classes;
  require_same_size(static_cast<std::int64_t>(batch.labels.size()), n, "dr risk labels");
  require_same_size(batch.pseudo_labels.rows(), n, "dr risk pseudo-labels");
  require_same_size(batch.pseudo_labels.cols(), C, "dr risk pseudo-label classes");
  require_same_size(batch.weights.size(), n, "dr risk weights");
  require_same_size(mechanism.size(), C, "dr risk mechanism");

  DrRiskResult out;
  Vector inverse = Vector::Zero(n);  // a_i / propensity(y_i)
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = batch.labels[i];
    if (y < 0) continue;
    if (y >= C) throw DomainError("dr risk label out of range");
    if (mechanism.clipped_low(y)) ++out.clip_events;
    inverse[i] = 1.0 / mechanism[y];
  }
  const Matrix observed = one_hot_rows(batch.labels, C);

  if (path == DrRiskPath::meta_targets) {
    Matrix meta = batch.pseudo_labels;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (inverse[i] != 0.0) meta.row(i) += inverse[i] * (observed.row(i) - batch.pseudo_labels.row(i));
    }
    auto lg = model::shifted_cross_entropy(classifier, batch.features, meta, batch.weights,
                                           logit_shift);
    out.loss = lg.loss;
    out.gradient = std::move(lg.gradient);
    return out;
  }
  const Vector w_obs = batch.weights.cwiseProduct(inverse);
  const auto base = model::shifted_cross_entropy(classifier, batch.features, batch.pseudo_labels,
                                                 batch.weights, logit_shift);
  const auto labeled = model::shifted_cross_entropy(classifier, batch.features, observed, w_obs,
                                                    logit_shift);
  const auto pseudo = model::shifted_cross_entropy(classifier, batch.features,
                                                   batch.pseudo_labels, w_obs, logit_shift);
  out.loss = base.loss + labeled.loss - pseudo.loss;
  out.gradient = base.gradient + labeled.gradient - pseudo.gradient;
  return out;
}

TrainedModel train_dr_risk(const Dataset& data, const TrainConfig& cfg_stage1,
                           const TrainConfig& cfg_stage2, const TrainOptions& options) {
  return train_dr_risk(data, train_em(data, cfg_stage1, EmVariant::simpro), cfg_stage2, options);
}

TrainedModel train_dr_risk(const Dataset& data, const TrainedModel& stage1_model,
                           const TrainConfig& cfg_stage2, const TrainOptions& options) {
  auto stage1 = std::make_shared<TrainedModel>(stage1_model);
  require_same_size(stage1->mechanism.size(), data.num_classes(), "stage-1 mechanism");
  const MissingnessMechanism mechanism = stage1->mechanism;
  const ClassDistribution prior =
      stage1->logit_prior ? *stage1->logit_prior : stage1->population_prior;
  const Vector shift = log_prior(prior);

  Context ctx(data, cfg_stage2, "dr-risk", options);
  const double tau = cfg_stage2.confidence_threshold;
  ctx.warmup(log_prior(ctx.smoothed_prior), true);

  auto pseudo_of = [&](const Matrix& x) {
    Matrix z = model::forward_batch(ctx.params, x);
    z.rowwise() += shift.transpose();
    Matrix post = softmax_rows(z);
    for (Eigen::Index i = 0; i < post.rows(); ++i) {
      post.row(i) = model::pseudo_label(Vector(post.row(i).transpose()), tau).transpose();
    }
    return post;
  };

  TrainedModel out;
  out.method = Method::dr_risk;
  out.mechanism = mechanism;
  out.logit_prior = prior;
  out.population_prior = prior;
  out.unlabeled_estimate = stage1->unlabeled_estimate;
  for (int e = 1; e <= cfg_stage2.epochs; ++e) {
    double loss_sum = 0.0;
    const auto steps = ctx.steps_per_epoch();
    for (std::int64_t s = 0; s < steps; ++s) {
      auto batch = ctx.draw(true);
      DrRiskBatch dr;
      dr.features = stack(batch.xl, batch.xu_strong);
      dr.labels = batch.yl;
      dr.labels.resize(dr.features.rows(), -1);
      dr.pseudo_labels = stack(pseudo_of(batch.xl), pseudo_of(batch.xu));
      dr.weights = ctx.batch_weights(batch.xl.rows(), batch.xu.rows());
      const auto r = dr_risk_loss_and_grad(ctx.params, mechanism, dr, shift);
      ctx.apply({r.loss, r.gradient}, e, s);
      out.clip_events += r.clip_events;
      loss_sum += r.loss;
    }
    out.history.push_back(make_record(e, loss_sum, steps, shifted_posteriors(ctx.params, prior, data),
                                      mechanism, data, out.unlabeled_estimate, 0.0, options));
  }
  out.classifier = ctx.params;
  out.stage1 = std::move(stage1);
  return out;
}

TrainedModel train(Method method, const Dataset& data, const TrainConfig& cfg,
                   const TrainConfig& cfg_stage2, const TrainOptions& options) {
  switch (method) {
    case Method::supervised: return train_supervised(data, cfg, options);
    case Method::mle: return train_mle(data, cfg, options);
    case Method::em: return train_em(data, cfg, EmVariant::plain, options);
    case Method::simpro: return train_em(data, cfg, EmVariant::simpro, options);
    case Method::dr_risk: return train_dr_risk(data, cfg, cfg_stage2, options);
    case Method::two_stage: return two_stage(data, cfg, cfg_stage2, options);
    case Method::batch_update: return batch_update_dr(data, cfg, options);
  }
  throw DomainError("unknown training method");
}

// ---------------------------------------------------------------------------
// Unlabeled objectives

namespace {

Vector cross_entropy_rows(const ClassifierParams& classifier, const Matrix& targets,
                          const Matrix& strong) {
  const Matrix z = model::forward_batch(classifier, strong);
  Vector out(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const Vector zi = z.row(i).transpose();
    const double lse = log_sum_exp(zi);
    double v = 0.0;
    for (Eigen::Index c = 0; c < zi.size(); ++c) {
      if (targets(i, c) != 0.0) v -= targets(i, c) * (zi[c] - lse);
    }
    out[i] = v;
  }
  return out;
}

}  // namespace

Vector fixmatch_unlabeled_terms(const ClassifierParams& classifier, const Matrix& weak,
                                const Matrix& strong, double tau) {
  require_same_size(weak.rows(), strong.rows(), "fixmatch views");
  Matrix targets = softmax_rows(model::forward_batch(classifier, weak));
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    targets.row(i) = model::pseudo_label(Vector(targets.row(i).transpose()), tau).transpose();
  }
  return cross_entropy_rows(classifier, targets, strong);
}

Vector em_unlabeled_terms(const ClassifierParams& classifier,
                          const MissingnessMechanism& mechanism, const Matrix& weak,
                          const Matrix& strong, double tau) {
  require_same_size(weak.rows(), strong.rows(), "em views");
  const Vector factor = Vector::Ones(classifier.num_classes) - mechanism.propensity();
  const Matrix targets =
      e_step_weights(softmax_rows(model::forward_batch(classifier, weak)), factor, tau);
  return cross_entropy_rows(classifier, targets, strong);
}

}  // namespace lsdr::train
