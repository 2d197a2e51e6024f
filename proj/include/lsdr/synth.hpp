#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/rng.hpp"

namespace lsdr::synth {

/// Isotropic Gaussian class-conditionals x | y ~ N(mean_y, sigma^2 I). The
/// same P(X|Y) generates labeled and unlabeled rows, so label shift holds by
/// construction.
struct MixtureSpec {
  int num_classes = 0;
  int feature_dim = 0;
  Matrix class_means;            // C x d
  double class_cov_scale = 1.0;  // sigma^2

  /// Throws DomainError when means coincide, sigma^2 <= 0 or shapes disagree.
  void validate() const;
  double sigma() const;

  /// Means are `separation` times independent standard-normal directions
  /// normalized to unit length.
  static MixtureSpec random(int num_classes, int feature_dim, double separation,
                            double class_cov_scale, std::uint64_t seed);
};

enum class Shape { consistent, uniform, reversed, middle, headtail };

Shape parse_shape(std::string_view name);
std::string_view to_string(Shape shape);
inline constexpr Shape kAllShapes[] = {Shape::consistent, Shape::uniform, Shape::reversed,
                                       Shape::middle, Shape::headtail};

struct ShiftConfig {
  double gamma_l = 100.0;
  double gamma_u = 100.0;
  Shape shape = Shape::consistent;
  std::int64_t n1 = 500;
  std::int64_t m1 = 4000;
  std::uint64_t seed = 0;

  void validate() const;
  /// The benchmark ladder: gamma_u = 1 for the uniform shape, gamma_l
  /// otherwise (the permutation supplies the reversal).
  static ShiftConfig ladder(Shape shape, double gamma, std::int64_t n1, std::int64_t m1,
                            std::uint64_t seed);
};

/// counts[c] = round(head * gamma^(-c/(C-1))) for 0-based c, floored at 1.
std::vector<std::int64_t> longtail_counts(std::int64_t head, double gamma, int num_classes);

/// Permutes a non-increasing count vector into one of the five unlabeled
/// shapes. middle: largest counts go to positions closest to the centre
/// (ties to the lower index); headtail: largest counts alternate between the
/// two ends starting at the first class.
std::vector<std::int64_t> apply_shape(std::span<const std::int64_t> counts, Shape shape);

/// Population-level class priors and propensities.
struct PriorTruth {
  ClassDistribution labeled_prior;    // P(Y|A=1)
  ClassDistribution unlabeled_prior;  // P(Y|A=0)
  ClassDistribution combined_prior;   // P(Y)
  Vector propensity;                  // P(A=1|Y)
  double p_labeled = 0.0;             // P(A=1)

  MissingnessMechanism mechanism(double clip_floor = kDefaultClipFloor) const;

  static PriorTruth from_counts(std::span<const std::int64_t> labeled_counts,
                                std::span<const std::int64_t> unlabeled_counts);
  static PriorTruth from_combined(const ClassDistribution& combined, const Vector& propensity);
};

/// Generation metadata kept out of band from the observed Dataset.
struct GroundTruth {
  PriorTruth priors;
  MixtureSpec mixture;
  std::optional<ShiftConfig> shift;
  std::vector<int> hidden_labels;  // true class of every row
};

struct SyntheticData {
  Dataset data;
  GroundTruth truth;
};

/// Fixed per-class counts from the long-tail formula and shape; rows are the
/// labeled block followed by the unlabeled block, each shuffled.
SyntheticData generate(const MixtureSpec& mixture, const ShiftConfig& config);

/// Class counts that `generate` would use.
std::vector<std::int64_t> labeled_counts_for(const ShiftConfig& config, int num_classes);
std::vector<std::int64_t> unlabeled_counts_for(const ShiftConfig& config, int num_classes);

/// i.i.d. draws of (Y, A, X): Y ~ P(Y), A | Y ~ Bernoulli(propensity[Y]),
/// X | Y ~ N(mean_Y, sigma^2 I).
SyntheticData sample_iid(const MixtureSpec& mixture, const PriorTruth& priors, std::int64_t n,
                         std::uint64_t seed);

/// Exact posterior proportional to prior_c * exp(-|x - mean_c|^2 / (2 sigma^2)).
ClassDistribution bayes_posterior(const MixtureSpec& mixture, const ClassDistribution& prior,
                                  const Vector& x);
/// Row-wise Bayes posteriors for a batch of features.
Matrix bayes_posterior_batch(const MixtureSpec& mixture, const ClassDistribution& prior,
                             const Matrix& features);

/// Balanced sample with exactly n / C rows per class (remainder to the
/// lowest classes).
std::pair<Matrix, std::vector<int>> sample_balanced(const MixtureSpec& mixture, std::int64_t n,
                                                    std::uint64_t seed);

enum class AugmentStrength { weak, strong };

struct AugmentScales {
  double weak = 0.0;
  double strong = 0.0;
  /// 0.1 sigma and 0.5 sigma.
  static AugmentScales defaults_for(const MixtureSpec& mixture);
  static AugmentScales defaults_for_sigma(double sigma);
};

/// Feature-space stand-in for image augmentation: x plus isotropic Gaussian
/// noise at the weak or strong scale.
Vector augment(const Vector& x, AugmentStrength strength, const AugmentScales& scales, Rng& rng);
void augment_rows(Matrix& rows, double scale, Rng& rng);

}  // namespace lsdr::synth
