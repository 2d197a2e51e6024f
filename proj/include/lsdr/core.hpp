#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace lsdr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mismatched vector lengths or matrix shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or otherwise unusable floating-point input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A posterior row or likelihood term that has no probability mass.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kSimplexTolerance = 1e-9;
inline constexpr double kDefaultClipFloor = 1e-3;

/// A probability vector over C classes.
class ClassDistribution {
 public:
  ClassDistribution() = default;

  /// Throws DomainError unless every entry is >= 0 and the entries sum to 1
  /// within kSimplexTolerance.
  explicit ClassDistribution(Vector probs);

  static ClassDistribution uniform(int num_classes);
  static ClassDistribution one_hot(int num_classes, int c);
  /// Normalizes nonnegative masses; throws DomainError if they sum to zero.
  static ClassDistribution from_masses(const Vector& masses);
  static ClassDistribution from_counts(std::span<const std::int64_t> counts);

  int size() const { return static_cast<int>(probs_.size()); }
  double operator[](int c) const { return probs_[c]; }
  const Vector& probs() const { return probs_; }

  bool approx_equal(const ClassDistribution& other, double tol) const;

 private:
  Vector probs_;
};

/// Per-class labeling propensity P(A=1|Y=c) together with P(A=1).
///
/// The raw propensities are kept so that estimators can report how many
/// lookups hit the clip floor; all consumers read the clipped values.
class MissingnessMechanism {
 public:
  MissingnessMechanism() = default;
  MissingnessMechanism(Vector raw_propensity, double p_labeled,
                       double clip_floor = kDefaultClipFloor);

  /// propensity[c] = p_labeled * P(Y=c|A=1) / P(Y=c). Classes with
  /// P(Y=c) = 0 get propensity p_labeled.
  static MissingnessMechanism from_distributions(const ClassDistribution& labeled_prior,
                                                 const ClassDistribution& combined,
                                                 double p_labeled,
                                                 double clip_floor = kDefaultClipFloor);

  /// The consistent-shape mechanism: P(A=1|Y=c) = P(A=1) for every class.
  static MissingnessMechanism constant(int num_classes, double p_labeled,
                                       double clip_floor = kDefaultClipFloor);

  MissingnessMechanism with_clip_floor(double clip_floor) const;

  int size() const { return static_cast<int>(propensity_.size()); }
  double operator[](int c) const { return propensity_[c]; }
  const Vector& propensity() const { return propensity_; }
  const Vector& raw_propensity() const { return raw_; }
  double p_labeled() const { return p_labeled_; }
  double clip_floor() const { return clip_floor_; }
  /// True when the raw propensity of class c was below the clip floor.
  bool clipped_low(int c) const { return raw_[c] < clip_floor_; }

 private:
  Vector raw_;
  Vector propensity_;
  double p_labeled_ = 0.0;
  double clip_floor_ = kDefaultClipFloor;
};

/// One row of a dataset as seen by estimators: the label is present iff a = 1.
struct Observation {
  Vector x;
  std::optional<int> y;
  bool labeled = false;
};

/// Observed data D_t = D_l ∪ D_u. Ground truth for unlabeled rows is never
/// stored here; it lives in synth::GroundTruth.
class Dataset {
 public:
  Dataset() = default;
  /// labels[i] must be in [0, C) when labeled[i] and -1 otherwise.
  Dataset(int num_classes, Matrix features, std::vector<std::uint8_t> labeled,
          std::vector<int> labels);

  int num_classes() const { return num_classes_; }
  int feature_dim() const { return static_cast<int>(features_.cols()); }
  std::int64_t size() const { return features_.rows(); }
  std::int64_t num_labeled() const { return num_labeled_; }
  std::int64_t num_unlabeled() const { return size() - num_labeled_; }
  /// N_l / N.
  double p_labeled() const;

  const Matrix& features() const { return features_; }
  auto x(std::int64_t i) const { return features_.row(i); }
  bool is_labeled(std::int64_t i) const { return labeled_[i] != 0; }
  /// Observed label; -1 for unlabeled rows.
  int label(std::int64_t i) const { return labels_[i]; }
  const std::vector<std::uint8_t>& labeled_mask() const { return labeled_; }
  const std::vector<int>& labels() const { return labels_; }
  Observation observation(std::int64_t i) const;

  std::vector<std::int64_t> labeled_indices() const;
  std::vector<std::int64_t> unlabeled_indices() const;
  /// Per-class counts of visible labels.
  std::vector<std::int64_t> labeled_counts() const;
  /// Empirical P(Y|A=1) from visible labels. Throws DomainError when N_l = 0.
  ClassDistribution labeled_prior() const;

  Dataset subset(std::span<const std::int64_t> rows) const;

 private:
  int num_classes_ = 0;
  Matrix features_;
  std::vector<std::uint8_t> labeled_;
  std::vector<int> labels_;
  std::int64_t num_labeled_ = 0;
};

/// Half the L1 distance.
double tv_distance(const ClassDistribution& p, const ClassDistribution& q);

/// Euclidean projection onto the probability simplex.
ClassDistribution project_to_simplex(const Vector& v);

/// Solves P(Y) = p_a1 P(Y|A=1) + (1 - p_a1) P(Y|A=0) for P(Y|A=0) and
/// projects the result onto the simplex.
ClassDistribution recover_unlabeled_prior(const ClassDistribution& p_combined,
                                          const ClassDistribution& p_labeled_prior,
                                          double p_a1);

/// p_a1 P(Y|A=1) + (1 - p_a1) P(Y|A=0).
ClassDistribution mix_priors(const ClassDistribution& labeled_prior,
                             const ClassDistribution& unlabeled_prior, double p_a1);

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels);

// Numerics shared by the model and estimators.

/// Row-wise softmax of a logit matrix, stabilized by the row max.
Matrix softmax_rows(const Matrix& logits);
Vector softmax(const Vector& logits);
double log_sum_exp(const Vector& v);
/// Index of the largest entry, ties to the lowest index.
int argmax(const Vector& v);

void require_same_size(std::int64_t a, std::int64_t b, const char* what);

}  // namespace lsdr
