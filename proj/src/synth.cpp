#include "lsdr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace lsdr::synth {

// ---------------------------------------------------------------------------
// MixtureSpec

void MixtureSpec::validate() const {
  if (num_classes < 2) throw DomainError("mixture needs at least two classes");
  if (feature_dim < 1) throw DomainError("mixture needs a positive feature dimension");
  if (class_means.rows() != num_classes || class_means.cols() != feature_dim) {
    throw DimensionError("mixture means must be C x d");
  }
  if (!(class_cov_scale > 0.0)) throw DomainError("mixture variance must be positive");
  for (int a = 0; a < num_classes; ++a) {
    for (int b = a + 1; b < num_classes; ++b) {
      if ((class_means.row(a) - class_means.row(b)).squaredNorm() == 0.0) {
        throw DomainError("mixture class means must be pairwise distinct");
      }
    }
  }
}

double MixtureSpec::sigma() const { return std::sqrt(class_cov_scale); }

MixtureSpec MixtureSpec::random(int num_classes, int feature_dim, double separation,
                                double class_cov_scale, std::uint64_t seed) {
  MixtureSpec spec;
  spec.num_classes = num_classes;
  spec.feature_dim = feature_dim;
  spec.class_cov_scale = class_cov_scale;
  spec.class_means = Matrix(num_classes, feature_dim);
  Rng rng = make_rng(seed, "mixture");
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int c = 0; c < num_classes; ++c) {
    Vector direction(feature_dim);
    for (int j = 0; j < feature_dim; ++j) direction[j] = normal(rng);
    spec.class_means.row(c) = separation * direction.normalized().transpose();
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Shapes and counts

Shape parse_shape(std::string_view name) {
  if (name == "consistent") return Shape::consistent;
  if (name == "uniform") return Shape::uniform;
  if (name == "reversed") return Shape::reversed;
  if (name == "middle") return Shape::middle;
  if (name == "headtail" || name == "head-tail") return Shape::headtail;
  throw DomainError("unknown shape '" + std::string(name) + "'");
}

std::string_view to_string(Shape shape) {
  switch (shape) {
    case Shape::consistent: return "consistent";
    case Shape::uniform: return "uniform";
    case Shape::reversed: return "reversed";
    case Shape::middle: return "middle";
    case Shape::headtail: return "headtail";
  }
  throw DomainError("unknown shape");
}

void ShiftConfig::validate() const {
  if (n1 < 1 || m1 < 1) throw DomainError("head counts n1 and m1 must be at least 1");
  if (!(gamma_l >= 1.0)) throw DomainError("gamma_l must be >= 1");
  if (!(gamma_u > 0.0)) throw DomainError("gamma_u must be > 0");
}

ShiftConfig ShiftConfig::ladder(Shape shape, double gamma, std::int64_t n1, std::int64_t m1,
                                std::uint64_t seed) {
  ShiftConfig cfg;
  cfg.gamma_l = gamma;
  cfg.gamma_u = shape == Shape::uniform ? 1.0 : gamma;
  cfg.shape = shape;
  cfg.n1 = n1;
  cfg.m1 = m1;
  cfg.seed = seed;
  return cfg;
}

std::vector<std::int64_t> longtail_counts(std::int64_t head, double gamma, int num_classes) {
  if (num_classes < 2) throw DomainError("longtail_counts: need at least two classes");
  if (head < 1) throw DomainError("longtail_counts: head count must be >= 1");
  if (!(gamma > 0.0)) throw DomainError("longtail_counts: gamma must be > 0");
  std::vector<std::int64_t> counts(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    const double exponent = -static_cast<double>(c) / static_cast<double>(num_classes - 1);
    const double value = static_cast<double>(head) * std::pow(gamma, exponent);
    counts[c] = std::max<std::int64_t>(1, std::llround(value));
  }
  return counts;
}

namespace {

// 0-based positions in the order that receives counts largest-first.
std::vector<int> placement_order(int n, Shape shape) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const double centre = (n - 1) / 2.0;
  if (shape == Shape::middle) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return std::abs(a - centre) < std::abs(b - centre);
    });
  } else if (shape == Shape::headtail) {
    order.clear();
    for (int lo = 0, hi = n - 1; lo <= hi; ++lo, --hi) {
      order.push_back(lo);
      if (hi != lo) order.push_back(hi);
    }
  }
  return order;
}

}  // namespace

std::vector<std::int64_t> apply_shape(std::span<const std::int64_t> counts, Shape shape) {
  std::vector<std::int64_t> in(counts.begin(), counts.end());
  switch (shape) {
    case Shape::consistent:
    case Shape::uniform:
      return in;
    case Shape::reversed:
      std::reverse(in.begin(), in.end());
      return in;
    case Shape::middle:
    case Shape::headtail: {
      if (!std::is_sorted(in.begin(), in.end(), std::greater<>())) {
        throw DomainError("apply_shape: counts must be non-increasing");
      }
      const auto order = placement_order(static_cast<int>(in.size()), shape);
      std::vector<std::int64_t> out(in.size());
      for (std::size_t k = 0; k < in.size(); ++k) out[order[k]] = in[k];
      return out;
    }
  }
  throw DomainError("apply_shape: unknown shape");
}

std::vector<std::int64_t> labeled_counts_for(const ShiftConfig& config, int num_classes) {
  config.validate();
  return longtail_counts(config.n1, config.gamma_l, num_classes);
}

std::vector<std::int64_t> unlabeled_counts_for(const ShiftConfig& config, int num_classes) {
  config.validate();
  const auto base = longtail_counts(config.m1, config.gamma_u, num_classes);
  if (config.shape != Shape::uniform && config.shape != Shape::consistent &&
      !std::is_sorted(base.begin(), base.end(), std::greater<>())) {
    throw DomainError("shape '" + std::string(to_string(config.shape)) +
                      "' needs gamma_u >= 1; the permutation supplies the reversal");
  }
  return apply_shape(base, config.shape);
}

// ---------------------------------------------------------------------------
// Ground truth

MissingnessMechanism PriorTruth::mechanism(double clip_floor) const {
  return MissingnessMechanism(propensity, p_labeled, clip_floor);
}

PriorTruth PriorTruth::from_counts(std::span<const std::int64_t> labeled_counts,
                                   std::span<const std::int64_t> unlabeled_counts) {
  require_same_size(static_cast<std::int64_t>(labeled_counts.size()),
                    static_cast<std::int64_t>(unlabeled_counts.size()), "PriorTruth");
  const int C = static_cast<int>(labeled_counts.size());
  std::int64_t n_l = 0;
  std::int64_t n_u = 0;
  Vector combined(C);
  Vector propensity(C);
  for (int c = 0; c < C; ++c) {
    n_l += labeled_counts[c];
    n_u += unlabeled_counts[c];
    const auto total = labeled_counts[c] + unlabeled_counts[c];
    combined[c] = static_cast<double>(total);
    propensity[c] = total > 0 ? static_cast<double>(labeled_counts[c]) / total : 0.0;
  }
  PriorTruth truth{ClassDistribution::from_counts(labeled_counts),
                   ClassDistribution::from_counts(unlabeled_counts),
                   ClassDistribution::from_masses(combined), propensity,
                   static_cast<double>(n_l) / static_cast<double>(n_l + n_u)};
  return truth;
}

PriorTruth PriorTruth::from_combined(const ClassDistribution& combined, const Vector& propensity) {
  require_same_size(combined.size(), propensity.size(), "PriorTruth::from_combined");
  const Vector labeled_mass = combined.probs().cwiseProduct(propensity);
  const Vector unlabeled_mass = combined.probs() - labeled_mass;
  const double p_a1 = labeled_mass.sum();
  if (!(p_a1 > 0.0 && p_a1 < 1.0)) throw DomainError("population P(A=1) must lie in (0, 1)");
  return PriorTruth{ClassDistribution::from_masses(labeled_mass),
                    ClassDistribution::from_masses(unlabeled_mass), combined, propensity, p_a1};
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

void draw_features(const MixtureSpec& mixture, std::span<const int> classes, Matrix& out,
                   Rng& rng) {
  std::normal_distribution<double> normal(0.0, mixture.sigma());
  out.resize(static_cast<Eigen::Index>(classes.size()), mixture.feature_dim);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    for (int j = 0; j < mixture.feature_dim; ++j) {
      out(static_cast<Eigen::Index>(i), j) = mixture.class_means(classes[i], j) + normal(rng);
    }
  }
}

}  // namespace

SyntheticData generate(const MixtureSpec& mixture, const ShiftConfig& config) {
  mixture.validate();
  config.validate();
  const int C = mixture.num_classes;
  const auto labeled_counts = labeled_counts_for(config, C);
  const auto unlabeled_counts = unlabeled_counts_for(config, C);

  Rng rng = make_rng(config.seed, "synth");
  std::vector<int> labeled_classes;
  std::vector<int> unlabeled_classes;
  for (int c = 0; c < C; ++c) {
    labeled_classes.insert(labeled_classes.end(), labeled_counts[c], c);
    unlabeled_classes.insert(unlabeled_classes.end(), unlabeled_counts[c], c);
  }
  std::shuffle(labeled_classes.begin(), labeled_classes.end(), rng);
  std::shuffle(unlabeled_classes.begin(), unlabeled_classes.end(), rng);

  std::vector<int> hidden(labeled_classes);
  hidden.insert(hidden.end(), unlabeled_classes.begin(), unlabeled_classes.end());
  Matrix features;
  draw_features(mixture, hidden, features, rng);

  const auto n = static_cast<std::int64_t>(hidden.size());
  const auto n_l = static_cast<std::int64_t>(labeled_classes.size());
  std::vector<std::uint8_t> labeled(n, 0);
  std::vector<int> labels(n, -1);
  for (std::int64_t i = 0; i < n_l; ++i) {
    labeled[i] = 1;
    labels[i] = hidden[i];
  }

  SyntheticData out{Dataset(C, std::move(features), std::move(labeled), std::move(labels)),
                    GroundTruth{PriorTruth::from_counts(labeled_counts, unlabeled_counts), mixture,
                                config, std::move(hidden)}};
  return out;
}

SyntheticData sample_iid(const MixtureSpec& mixture, const PriorTruth& priors, std::int64_t n,
                         std::uint64_t seed) {
  mixture.validate();
  if (n < 1) throw DomainError("sample_iid: n must be positive");
  const int C = mixture.num_classes;
  require_same_size(C, priors.combined_prior.size(), "sample_iid prior");
  Rng rng = make_rng(seed, "iid");
  const Vector& p = priors.combined_prior.probs();
  std::discrete_distribution<int> class_draw(p.data(), p.data() + p.size());
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<int> hidden(n);
  std::vector<std::uint8_t> labeled(n);
  std::vector<int> labels(n, -1);
  for (std::int64_t i = 0; i < n; ++i) {
    hidden[i] = class_draw(rng);
    labeled[i] = unit(rng) < priors.propensity[hidden[i]] ? 1 : 0;
    if (labeled[i]) labels[i] = hidden[i];
  }
  Matrix features;
  draw_features(mixture, hidden, features, rng);
  return SyntheticData{Dataset(C, std::move(features), std::move(labeled), std::move(labels)),
                       GroundTruth{priors, mixture, std::nullopt, std::move(hidden)}};
}

std::pair<Matrix, std::vector<int>> sample_balanced(const MixtureSpec& mixture, std::int64_t n,
                                                    std::uint64_t seed) {
  mixture.validate();
  const int C = mixture.num_classes;
  if (n < C) throw DomainError("sample_balanced: need at least one row per class");
  std::vector<int> classes;
  classes.reserve(n);
  for (int c = 0; c < C; ++c) {
    const std::int64_t count = n / C + (c < n % C ? 1 : 0);
    classes.insert(classes.end(), count, c);
  }
  Rng rng = make_rng(seed, "balanced");
  Matrix features;
  draw_features(mixture, classes, features, rng);
  return {std::move(features), std::move(classes)};
}

// ---------------------------------------------------------------------------
// Posterior and augmentation

Matrix bayes_posterior_batch(const MixtureSpec& mixture, const ClassDistribution& prior,
                             const Matrix& features) {
  require_same_size(mixture.num_classes, prior.size(), "bayes_posterior prior");
  require_same_size(mixture.feature_dim, features.cols(), "bayes_posterior features");
  const double inv_two_var = 0.5 / mixture.class_cov_scale;
  const Vector log_prior = prior.probs().array().log();
  Matrix logits(features.rows(), mixture.num_classes);
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    for (int c = 0; c < mixture.num_classes; ++c) {
      const double sq = (features.row(i) - mixture.class_means.row(c)).squaredNorm();
      logits(i, c) = log_prior[c] - sq * inv_two_var;
    }
  }
  return softmax_rows(logits);
}

ClassDistribution bayes_posterior(const MixtureSpec& mixture, const ClassDistribution& prior,
                                  const Vector& x) {
  const Matrix row = x.transpose();
  const Vector post = bayes_posterior_batch(mixture, prior, row).row(0).transpose();
  return ClassDistribution::from_masses(post);
}

AugmentScales AugmentScales::defaults_for_sigma(double sigma) {
  return AugmentScales{0.1 * sigma, 0.5 * sigma};
}

AugmentScales AugmentScales::defaults_for(const MixtureSpec& mixture) {
  return defaults_for_sigma(mixture.sigma());
}

void augment_rows(Matrix& rows, double scale, Rng& rng) {
  if (scale == 0.0) return;
  std::normal_distribution<double> normal(0.0, scale);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) rows(i, j) += normal(rng);
  }
}

Vector augment(const Vector& x, AugmentStrength strength, const AugmentScales& scales, Rng& rng) {
  Matrix row = x.transpose();
  augment_rows(row, strength == AugmentStrength::weak ? scales.weak : scales.strong, rng);
  return row.row(0).transpose();
}

}  // namespace lsdr::synth
