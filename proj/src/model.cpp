#include "lsdr/model.hpp"

#include <cmath>
#include <string>

#include "lsdr/rng.hpp"

namespace lsdr::model {

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>;
using RowMajorMutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Architecture parse_architecture(std::string_view name) {
  if (name == "linear") return Architecture::linear;
  if (name == "mlp1") return Architecture::mlp1;
  throw DomainError("unknown architecture '" + std::string(name) + "'");
}

std::string_view to_string(Architecture arch) {
  return arch == Architecture::linear ? "linear" : "mlp1";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw DomainError("unknown optimizer '" + std::string(name) + "'");
}

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::sgd ? "sgd" : "adam";
}

// ---------------------------------------------------------------------------
// Parameters

std::int64_t ClassifierParams::parameter_count(Architecture arch, int d, int h, int c) {
  if (arch == Architecture::linear) return static_cast<std::int64_t>(c) * d + c;
  return static_cast<std::int64_t>(h) * d + h + static_cast<std::int64_t>(c) * h + c;
}

ClassifierParams ClassifierParams::zeros(Architecture arch, int d, int h, int c) {
  if (d < 1 || c < 2 || (arch == Architecture::mlp1 && h < 1)) {
    throw DimensionError("classifier dims must be positive with at least two classes");
  }
  ClassifierParams p{arch, d, arch == Architecture::mlp1 ? h : 0, c, Vector()};
  p.weights = Vector::Zero(parameter_count(arch, d, p.hidden_width, c));
  return p;
}

ClassifierParams ClassifierParams::initialize(Architecture arch, int d, int h, int c,
                                              std::uint64_t seed) {
  ClassifierParams p = zeros(arch, d, h, c);
  Rng rng = make_rng(seed, "init");
  auto fill = [&](Eigen::Index offset, Eigen::Index count, int fan_in) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    for (Eigen::Index k = 0; k < count; ++k) p.weights[offset + k] = normal(rng);
  };
  if (arch == Architecture::linear) {
    fill(0, static_cast<Eigen::Index>(c) * d, d);
  } else {
    const Eigen::Index w1 = static_cast<Eigen::Index>(p.hidden_width) * d;
    fill(0, w1, d);
    fill(w1 + p.hidden_width, static_cast<Eigen::Index>(c) * p.hidden_width, p.hidden_width);
  }
  return p;
}

void ClassifierParams::validate() const {
  if (input_dim < 1 || num_classes < 2) throw DimensionError("classifier dims invalid");
  if (architecture == Architecture::mlp1 && hidden_width < 1) {
    throw DimensionError("mlp1 needs a positive hidden width");
  }
  const auto expected = parameter_count(architecture, input_dim, hidden_width, num_classes);
  if (weights.size() != expected) {
    throw DimensionError("classifier weight vector has length " +
                         std::to_string(weights.size()) + ", expected " +
                         std::to_string(expected));
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct MlpActivations {
  Matrix hidden;  // N x H after tanh
  Matrix logits;  // N x C
};

MlpActivations mlp_forward(const ClassifierParams& p, const Matrix& x) {
  const int d = p.input_dim;
  const int h = p.hidden_width;
  const int c = p.num_classes;
  const double* w = p.weights.data();
  RowMajorMap w1(w, h, d);
  Eigen::Map<const Vector> b1(w + h * d, h);
  RowMajorMap w2(w + h * d + h, c, h);
  Eigen::Map<const Vector> b2(w + h * d + h + c * h, c);
  MlpActivations act;
  act.hidden = ((x * w1.transpose()).rowwise() + b1.transpose()).array().tanh().matrix();
  act.logits = (act.hidden * w2.transpose()).rowwise() + b2.transpose();
  return act;
}

}  // namespace

Matrix forward_batch(const ClassifierParams& p, const Matrix& features) {
  p.validate();
  require_same_size(p.input_dim, features.cols(), "forward feature dim");
  if (p.architecture == Architecture::linear) {
    const int d = p.input_dim;
    const int c = p.num_classes;
    RowMajorMap w(p.weights.data(), c, d);
    Eigen::Map<const Vector> b(p.weights.data() + c * d, c);
    return (features * w.transpose()).rowwise() + b.transpose();
  }
  return mlp_forward(p, features).logits;
}

Vector forward(const ClassifierParams& p, const Vector& x) {
  const Matrix row = x.transpose();
  return forward_batch(p, row).row(0).transpose();
}

Vector backward_batch(const ClassifierParams& p, const Matrix& features, const Matrix& dlogits) {
  p.validate();
  require_same_size(features.rows(), dlogits.rows(), "backward rows");
  require_same_size(p.num_classes, dlogits.cols(), "backward classes");
  const int d = p.input_dim;
  const int c = p.num_classes;
  Vector grad = Vector::Zero(p.weights.size());
  if (p.architecture == Architecture::linear) {
    RowMajorMutMap gw(grad.data(), c, d);
    gw = dlogits.transpose() * features;
    grad.segment(static_cast<Eigen::Index>(c) * d, c) = dlogits.colwise().sum().transpose();
    return grad;
  }
  const int h = p.hidden_width;
  const MlpActivations act = mlp_forward(p, features);
  RowMajorMap w2(p.weights.data() + h * d + h, c, h);
  RowMajorMutMap gw1(grad.data(), h, d);
  RowMajorMutMap gw2(grad.data() + h * d + h, c, h);
  gw2 = dlogits.transpose() * act.hidden;
  grad.segment(static_cast<Eigen::Index>(h) * d + h + static_cast<Eigen::Index>(c) * h, c) =
      dlogits.colwise().sum().transpose();
  const Matrix dpre =
      ((dlogits * w2).array() * (1.0 - act.hidden.array().square())).matrix();
  gw1 = dpre.transpose() * features;
  grad.segment(static_cast<Eigen::Index>(h) * d, h) = dpre.colwise().sum().transpose();
  return grad;
}

// ---------------------------------------------------------------------------
// Losses

LossAndGrad shifted_cross_entropy(const ClassifierParams& params, const Matrix& features,
                                  const Matrix& targets, const Vector& weights,
                                  const Vector& logit_shift) {
  require_same_size(features.rows(), targets.rows(), "cross entropy targets");
  require_same_size(features.rows(), weights.size(), "cross entropy weights");
  require_same_size(params.num_classes, targets.cols(), "cross entropy classes");
  require_same_size(params.num_classes, logit_shift.size(), "cross entropy shift");
  const Eigen::Index n = features.rows();
  if (n == 0) return {0.0, Vector::Zero(params.weights.size())};

  Matrix logits = forward_batch(params, features);
  logits.rowwise() += logit_shift.transpose();
  Matrix dlogits(n, params.num_classes);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector z = logits.row(i).transpose();
    const double lse = log_sum_exp(z);
    const Vector t = targets.row(i).transpose();
    const double mass = t.sum();
    // -sum_c t_c (z_c - lse), skipping zero targets so -inf logits stay inert.
    double row_loss = 0.0;
    for (int c = 0; c < params.num_classes; ++c) {
      if (t[c] != 0.0) row_loss -= t[c] * (z[c] - lse);
    }
    loss += weights[i] * row_loss;
    const Vector s = (z.array() - lse).exp();
    dlogits.row(i) = (weights[i] * (mass * s - t)).transpose();
  }
  const double scale = 1.0 / static_cast<double>(n);
  return {loss * scale, backward_batch(params, features, dlogits) * scale};
}

LossAndGrad weighted_ce_loss_and_grad(const ClassifierParams& params, const TargetBatch& batch) {
  constexpr double kTol = 1e-9;
  if ((batch.targets.array() < 0.0).any() ||
      (batch.targets.rowwise().sum().array() > 1.0 + kTol).any()) {
    throw DomainError("weighted_ce: targets must be sub-probability vectors");
  }
  return shifted_cross_entropy(params, batch.features, batch.targets, batch.weights,
                               Vector::Zero(params.num_classes));
}

LossAndGrad logit_adjusted_loss_and_grad(const ClassifierParams& params, const TargetBatch& batch,
                                         const ClassDistribution& prior) {
  require_same_size(params.num_classes, prior.size(), "logit adjustment prior");
  if ((prior.probs().array() <= 0.0).any()) {
    throw DomainError("logit adjustment needs a strictly positive prior");
  }
  constexpr double kTol = 1e-9;
  if ((batch.targets.array() < 0.0).any() ||
      (batch.targets.rowwise().sum().array() > 1.0 + kTol).any()) {
    throw DomainError("logit_adjusted: targets must be sub-probability vectors");
  }
  const Vector shift = prior.probs().array().log();
  return shifted_cross_entropy(params, batch.features, batch.targets, batch.weights, shift);
}

ClassDistribution posthoc_adjust(const ClassDistribution& posterior,
                                 const ClassDistribution& from_prior,
                                 const ClassDistribution& to_prior) {
  require_same_size(posterior.size(), from_prior.size(), "posthoc_adjust");
  require_same_size(posterior.size(), to_prior.size(), "posthoc_adjust");
  if ((from_prior.probs().array() <= 0.0).any()) {
    throw DomainError("posthoc_adjust: source prior has a zero entry");
  }
  const Vector masses =
      posterior.probs().cwiseProduct(to_prior.probs()).cwiseQuotient(from_prior.probs());
  return ClassDistribution::from_masses(masses);
}

Vector pseudo_label(const Vector& posterior, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw DomainError("pseudo_label: tau must lie in [0, 1]");
  Vector out = Vector::Zero(posterior.size());
  const int best = argmax(posterior);
  if (posterior[best] >= tau) out[best] = 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Config and optimizer

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be > 0");
  if (!(confidence_threshold >= 0.0 && confidence_threshold <= 1.0)) {
    throw DomainError("confidence threshold must lie in [0, 1]");
  }
  if (epochs < 0 || warmup_epochs < 0) throw DomainError("epoch counts must be >= 0");
  if (batch_size < 1 || unlabeled_batch_size < 1) throw DomainError("batch sizes must be >= 1");
  if (architecture == Architecture::mlp1 && hidden_width < 1) {
    throw DomainError("mlp1 needs hidden_width >= 1");
  }
  if (!(prior_momentum >= 0.0 && prior_momentum <= 1.0) ||
      !(dr_momentum >= 0.0 && dr_momentum <= 1.0)) {
    throw DomainError("momentum coefficients must lie in [0, 1]");
  }
  if (!(clip_floor > 0.0 && clip_floor <= 1.0)) throw DomainError("clip floor must lie in (0, 1]");
  if (cross_fit == 1 || cross_fit < 0) throw DomainError("cross_fit must be 0 or >= 2");
  if (weak_noise < 0.0 || strong_noise < 0.0) throw DomainError("noise scales must be >= 0");
}

OptimizerSettings OptimizerSettings::from(const TrainConfig& cfg) {
  return OptimizerSettings{cfg.optimizer, cfg.learning_rate, cfg.beta1,       cfg.beta2,
                           cfg.adam_eps,  cfg.sgd_momentum,  cfg.weight_decay};
}

void optimizer_step(OptimizerState& state, Vector& params, const Vector& gradient,
                    const OptimizerSettings& s) {
  require_same_size(params.size(), gradient.size(), "optimizer_step");
  Vector g = gradient;
  if (s.weight_decay != 0.0) g += s.weight_decay * params;
  ++state.step;
  if (s.kind == OptimizerKind::sgd) {
    if (s.momentum == 0.0) {
      params -= s.learning_rate * g;
      return;
    }
    if (state.velocity.size() != params.size()) state.velocity = Vector::Zero(params.size());
    state.velocity = s.momentum * state.velocity + g;
    params -= s.learning_rate * state.velocity;
    return;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment = Vector::Zero(params.size());
    state.second_moment = Vector::Zero(params.size());
  }
  state.first_moment = s.beta1 * state.first_moment + (1.0 - s.beta1) * g;
  state.second_moment = s.beta2 * state.second_moment + (1.0 - s.beta2) * g.cwiseAbs2();
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  params.array() -= s.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + s.eps);
}

}  // namespace lsdr::model
