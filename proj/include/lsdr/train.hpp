#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/model.hpp"

namespace lsdr::train {

/// Loss became NaN or infinite during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// zeta_c(1) + zeta_c(0) = 0 for some class, so the closed-form mechanism is
/// undefined there.
class ClassMassError : public DegenerateError {
 public:
  ClassMassError(int class_index, const std::string& what)
      : DegenerateError(what), class_index_(class_index) {}
  int class_index() const { return class_index_; }

 private:
  int class_index_;
};

enum class Method { supervised, mle, em, simpro, dr_risk, two_stage, batch_update };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);

enum class EmVariant { plain, simpro };

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;             // mean mini-batch objective
  double marginal_loglik = 0.0;  // over the whole dataset at epoch end
  ClassDistribution unlabeled_estimate;
  std::optional<double> tv_to_truth;
  /// Largest TV between consecutive per-step estimates of P(Y|A=0).
  double max_step_drift = 0.0;
};

struct TrainedModel {
  Method method = Method::supervised;
  model::ClassifierParams classifier;
  MissingnessMechanism mechanism;
  /// When set the classifier models P(Y|X) under a uniform prior and this
  /// prior is added in logit space to obtain the training-population
  /// posterior.
  std::optional<ClassDistribution> logit_prior;
  /// P(Y) of the population the posterior refers to.
  ClassDistribution population_prior;
  /// Training-time estimate of P(Y|A=0).
  ClassDistribution unlabeled_estimate;
  /// E-step prior held fixed in stage 2 of the two-stage algorithm.
  std::optional<ClassDistribution> frozen_prior;
  std::shared_ptr<const TrainedModel> stage1;
  std::optional<estimate::EstimateReport> stage1_estimate;
  std::vector<EpochRecord> history;
  std::int64_t clip_events = 0;

  /// P(Y|X) for the training population (labeled and unlabeled pooled).
  Matrix posterior_batch(const Matrix& features) const;
  /// P(Y|X) under a uniform class prior, as used on a balanced test set.
  Matrix uniform_posterior_batch(const Matrix& features) const;
  std::vector<int> predict_uniform(const Matrix& features) const;
  estimate::NuisancePair nuisance() const;
};

/// Optional starting points and monitoring for the trainers.
struct TrainOptions {
  std::optional<ClassDistribution> unlabeled_truth;         // history TV
  std::optional<model::ClassifierParams> initial_classifier;  // skips warm-up
  std::optional<MissingnessMechanism> initial_mechanism;
  std::optional<ClassDistribution> initial_unlabeled_prior;
};

struct LogLikelihood {
  double value = 0.0;
  double labeled_term = 0.0;
  double unlabeled_term = 0.0;
  /// Some unlabeled row has zero probability of being unlabeled; the
  /// unlabeled term is then -infinity.
  bool degenerate = false;
};

/// sum_labeled [log P(y_i|x_i) + log propensity(y_i)]
///   + sum_unlabeled log sum_c P(c|x_i) (1 - propensity(c)).
LogLikelihood marginal_loglik(const model::ClassifierParams& classifier,
                              const MissingnessMechanism& mechanism, const Dataset& data);
/// Same with the posteriors supplied directly (N x C).
LogLikelihood marginal_loglik(const Matrix& posteriors, const MissingnessMechanism& mechanism,
                              const Dataset& data);

struct LogLikAndGrad {
  double value = 0.0;
  Vector classifier_grad;
  Vector mechanism_grad;  // with respect to the logits eta, propensity = sigmoid(eta)
};

/// The marginal log-likelihood (sum form) with the mechanism parameterized by
/// unconstrained logits, and its gradient.
LogLikAndGrad marginal_loglik_and_grad(const model::ClassifierParams& classifier,
                                       const Vector& mechanism_logits, const Dataset& data);

struct EmState {
  model::ClassifierParams classifier;
  MissingnessMechanism mechanism;
  Matrix omega;  // N_u x C
  Vector zeta1;  // labeled counts
  Vector zeta0;  // column sums of omega
  int iteration = 0;
};

/// Rows of posteriors times `factor`, renormalized. With tau set the rows go
/// through pseudo_label afterwards. Throws DegenerateError for a row with no
/// mass.
Matrix e_step_weights(const Matrix& posteriors, const Vector& factor,
                      std::optional<double> tau = std::nullopt);

/// Exact plain E-step over every unlabeled row; fills omega and zeta.
void e_step(EmState& state, const Dataset& data);

/// propensity(c) = zeta_c(1) / (zeta_c(1) + zeta_c(0)), clipped to [floor, 1].
MissingnessMechanism closed_form_mechanism(const Vector& zeta1, const Vector& zeta0,
                                           double p_labeled, double clip_floor);

/// Expected complete-data log-likelihood (divided by N) given omega.
double q_function(const EmState& state, const Dataset& data);

/// Full-batch plain M-step: backtracking gradient descent on the weighted
/// cross-entropy for m_step_iterations, then the closed-form mechanism.
void m_step(EmState& state, const Dataset& data, const model::TrainConfig& cfg);

/// Supervised cross-entropy on the labeled rows only.
TrainedModel train_supervised(const Dataset& data, const model::TrainConfig& cfg,
                              const TrainOptions& options = {});

TrainedModel train_mle(const Dataset& data, const model::TrainConfig& cfg,
                       const TrainOptions& options = {});

TrainedModel train_em(const Dataset& data, const model::TrainConfig& cfg, EmVariant variant,
                      const TrainOptions& options = {});

/// SimPro with the E-step prior held at `prior`; the logit-adjustment prior
/// keeps its running update.
TrainedModel train_simpro_frozen(const Dataset& data, const model::TrainConfig& cfg,
                                 const ClassDistribution& prior,
                                 const TrainOptions& options = {});

/// SimPro whose E-step prior is a moving average (cfg.dr_momentum) of
/// per-batch DR estimates of P(Y|A=0).
TrainedModel batch_update_dr(const Dataset& data, const model::TrainConfig& cfg,
                             const TrainOptions& options = {});

TrainedModel two_stage(const Dataset& data, const model::TrainConfig& cfg_stage1,
                       const model::TrainConfig& cfg_stage2, const TrainOptions& options = {});

/// Stage 1 is SimPro; stage 2 minimizes the DR risk with the stage-1
/// mechanism and P(Y) held fixed.
TrainedModel train_dr_risk(const Dataset& data, const model::TrainConfig& cfg_stage1,
                           const model::TrainConfig& cfg_stage2,
                           const TrainOptions& options = {});

/// DR-risk training against an existing stage-1 model, whose mechanism and
/// logit-adjustment prior are held fixed. The stage-1 model needs a
/// logit_prior or a population_prior.
TrainedModel train_dr_risk(const Dataset& data, const TrainedModel& stage1,
                           const model::TrainConfig& cfg_stage2,
                           const TrainOptions& options = {});

/// Dispatches on method; cfg_stage2 is used by two_stage and dr_risk.
TrainedModel train(Method method, const Dataset& data, const model::TrainConfig& cfg,
                   const model::TrainConfig& cfg_stage2, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// DR risk

struct DrRiskBatch {
  Matrix features;               // B x d
  std::vector<int> labels;       // -1 where unlabeled
  Matrix pseudo_labels;          // B x C
  Vector weights;                // B
};

enum class DrRiskPath { three_terms, meta_targets };

struct DrRiskResult {
  double loss = 0.0;
  Vector gradient;
  std::int64_t clip_events = 0;
};

/// mean_i w_i [ l(x_i, yhat_i) + a_i / propensity(y_i) (l(x_i, y_i) - l(x_i, yhat_i)) ]
/// where l is cross-entropy on softmax(f(x) + logit_shift). three_terms
/// evaluates the three losses separately; meta_targets evaluates one
/// cross-entropy against yhat + a / propensity(y) (e_y - yhat).
DrRiskResult dr_risk_loss_and_grad(const model::ClassifierParams& classifier,
                                   const MissingnessMechanism& mechanism,
                                   const DrRiskBatch& batch, const Vector& logit_shift,
                                   DrRiskPath path = DrRiskPath::meta_targets);

// ---------------------------------------------------------------------------
// Unlabeled objectives on a fixed batch

/// H(pseudo_label(softmax(f(x_weak)), tau), softmax(f(x_strong))) per row.
Vector fixmatch_unlabeled_terms(const model::ClassifierParams& classifier, const Matrix& weak,
                                const Matrix& strong, double tau);

/// Cross-entropy of softmax(f(x_strong)) against the thresholded E-step
/// weight pseudo_label(omega(x_weak), tau) per row.
Vector em_unlabeled_terms(const model::ClassifierParams& classifier,
                          const MissingnessMechanism& mechanism, const Matrix& weak,
                          const Matrix& strong, double tau);

/// Laplace-smoothed labeled prior (n_c + 1) / (N_l + C).
ClassDistribution smoothed_labeled_prior(const Dataset& data);

}  // namespace lsdr::train
