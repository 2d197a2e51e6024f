#pragma once

#include <cstdint>
#include <string_view>

#include "lsdr/core.hpp"

namespace lsdr::model {

enum class Architecture { linear, mlp1 };

Architecture parse_architecture(std::string_view name);
std::string_view to_string(Architecture arch);

/// Flat weights of a softmax classifier.
///
/// linear: W (C x d, row-major) then b (C).
/// mlp1:   W1 (H x d), b1 (H), W2 (C x H), b2 (C); tanh hidden layer.
struct ClassifierParams {
  Architecture architecture = Architecture::linear;
  int input_dim = 0;
  int hidden_width = 0;
  int num_classes = 0;
  Vector weights;

  static std::int64_t parameter_count(Architecture arch, int input_dim, int hidden_width,
                                      int num_classes);
  static ClassifierParams zeros(Architecture arch, int input_dim, int hidden_width,
                                int num_classes);
  /// Gaussian weights with scale 1/sqrt(fan-in), zero biases.
  static ClassifierParams initialize(Architecture arch, int input_dim, int hidden_width,
                                     int num_classes, std::uint64_t seed);

  /// Throws DimensionError if the weight vector does not match the dims.
  void validate() const;
};

Vector forward(const ClassifierParams& params, const Vector& x);
/// Logits for every row of `features` (N x d) as an N x C matrix.
Matrix forward_batch(const ClassifierParams& params, const Matrix& features);
/// Gradient with respect to the weights of sum_i <dlogits_i, logits_i>.
Vector backward_batch(const ClassifierParams& params, const Matrix& features,
                      const Matrix& dlogits);

/// Rows of features with per-row target vectors and weights.
struct TargetBatch {
  Matrix features;  // B x d
  Matrix targets;   // B x C
  Vector weights;   // B

  Eigen::Index size() const { return features.rows(); }
};

struct LossAndGrad {
  double loss = 0.0;
  Vector gradient;
};

/// -1/B sum_i w_i sum_c t_ic log softmax(f(x_i))_c. Targets must be
/// sub-probability vectors so that an all-zero thresholded pseudo-label is
/// admissible.
LossAndGrad weighted_ce_loss_and_grad(const ClassifierParams& params, const TargetBatch& batch);

/// Cross-entropy on softmax(f(x) + log prior). Throws DomainError for a zero
/// prior entry.
LossAndGrad logit_adjusted_loss_and_grad(const ClassifierParams& params, const TargetBatch& batch,
                                         const ClassDistribution& prior);

/// Cross-entropy against arbitrary real targets (entries may be negative or
/// exceed one) with a constant logit shift added before the softmax.
LossAndGrad shifted_cross_entropy(const ClassifierParams& params, const Matrix& features,
                                  const Matrix& targets, const Vector& weights,
                                  const Vector& logit_shift);

/// posterior * to_prior / from_prior, renormalized.
ClassDistribution posthoc_adjust(const ClassDistribution& posterior,
                                 const ClassDistribution& from_prior,
                                 const ClassDistribution& to_prior);

/// One-hot at the argmax (ties to the lowest class) when the maximum is at
/// least tau, otherwise all zeros.
Vector pseudo_label(const Vector& posterior, double tau);
inline Vector pseudo_label(const ClassDistribution& posterior, double tau) {
  return pseudo_label(posterior.probs(), tau);
}

enum class OptimizerKind { sgd, adam };

OptimizerKind parse_optimizer(std::string_view name);
std::string_view to_string(OptimizerKind kind);

/// Hyperparameters shared by every trainer. Not every field applies to every
/// method; see train.hpp.
struct TrainConfig {
  Architecture architecture = Architecture::linear;
  int hidden_width = 32;

  double learning_rate = 0.01;
  int epochs = 30;
  int batch_size = 32;             // labeled rows per step
  int unlabeled_batch_size = 128;  // unlabeled rows per step
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double sgd_momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  double confidence_threshold = 0.95;  // tau
  int warmup_epochs = 5;
  double prior_momentum = 0.999;       // running P(Y) and P(Y|A=0) per mini-batch
  double mechanism_learning_rate = 0.05;  // Adam on the MLE mechanism logits
  double clip_floor = kDefaultClipFloor;
  bool per_epoch_mechanism = false;    // exact E-step over all rows once per epoch
  bool full_batch = false;             // classical EM / full-batch gradient MLE
  int m_step_iterations = 50;          // gradient iterations per full-batch epoch
  double weak_noise = 0.1;
  double strong_noise = 0.5;
  int cross_fit = 0;                   // folds for the DR estimate inside two-stage
  double dr_momentum = 0.99;           // batch-update ablation

  void validate() const;
};

struct OptimizerState {
  Vector first_moment;
  Vector second_moment;
  Vector velocity;
  std::int64_t step = 0;
};

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.0;
  double weight_decay = 0.0;

  static OptimizerSettings from(const TrainConfig& cfg);
};

/// One SGD (optionally with heavy-ball momentum) or Adam update in place.
/// Weight decay is added to the gradient as an L2 term.
void optimizer_step(OptimizerState& state, Vector& params, const Vector& gradient,
                    const OptimizerSettings& settings);

}  // namespace lsdr::model
