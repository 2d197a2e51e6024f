#include "lsdr/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

namespace lsdr {

void require_same_size(std::int64_t a, std::int64_t b, const char* what) {
  if (a != b) {
    throw DimensionError(std::string(what) + ": size mismatch (" + std::to_string(a) + " vs " +
                         std::to_string(b) + ")");
  }
}

// ---------------------------------------------------------------------------
// ClassDistribution

ClassDistribution::ClassDistribution(Vector probs) : probs_(std::move(probs)) {
  if (probs_.size() == 0) {
    throw DomainError("class distribution must have at least one class");
  }
  if (!probs_.allFinite()) {
    throw NumericError("class distribution has non-finite entries");
  }
  if ((probs_.array() < 0.0).any()) {
    throw DomainError("class distribution has negative entries");
  }
  if (std::abs(probs_.sum() - 1.0) > kSimplexTolerance) {
    throw DomainError("class distribution does not sum to 1 (sum = " +
                      std::to_string(probs_.sum()) + ")");
  }
}

ClassDistribution ClassDistribution::uniform(int num_classes) {
  if (num_classes < 1) throw DomainError("uniform: need at least one class");
  return ClassDistribution(Vector::Constant(num_classes, 1.0 / num_classes));
}

ClassDistribution ClassDistribution::one_hot(int num_classes, int c) {
  if (c < 0 || c >= num_classes) throw DomainError("one_hot: class index out of range");
  Vector v = Vector::Zero(num_classes);
  v[c] = 1.0;
  return ClassDistribution(std::move(v));
}

ClassDistribution ClassDistribution::from_masses(const Vector& masses) {
  if (!masses.allFinite()) throw NumericError("from_masses: non-finite mass");
  if ((masses.array() < 0.0).any()) throw DomainError("from_masses: negative mass");
  const double total = masses.sum();
  if (!(total > 0.0)) throw DomainError("from_masses: zero total mass");
  return ClassDistribution(masses / total);
}

ClassDistribution ClassDistribution::from_counts(std::span<const std::int64_t> counts) {
  Vector masses(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t c = 0; c < counts.size(); ++c) masses[c] = static_cast<double>(counts[c]);
  return from_masses(masses);
}

bool ClassDistribution::approx_equal(const ClassDistribution& other, double tol) const {
  return size() == other.size() && (probs_ - other.probs_).cwiseAbs().maxCoeff() <= tol;
}

// ---------------------------------------------------------------------------
// MissingnessMechanism

MissingnessMechanism::MissingnessMechanism(Vector raw_propensity, double p_labeled,
                                           double clip_floor)
    : raw_(std::move(raw_propensity)), p_labeled_(p_labeled), clip_floor_(clip_floor) {
  if (!(clip_floor_ > 0.0) || clip_floor_ > 1.0) {
    throw DomainError("clip floor must be in (0, 1]");
  }
  if (!raw_.allFinite()) throw NumericError("propensity has non-finite entries");
  if (!(p_labeled_ >= 0.0 && p_labeled_ <= 1.0)) throw DomainError("P(A=1) must be in [0, 1]");
  propensity_ = raw_.cwiseMax(clip_floor_).cwiseMin(1.0);
}

MissingnessMechanism MissingnessMechanism::from_distributions(
    const ClassDistribution& labeled_prior, const ClassDistribution& combined, double p_labeled,
    double clip_floor) {
  require_same_size(labeled_prior.size(), combined.size(), "from_distributions");
  Vector raw(combined.size());
  for (int c = 0; c < combined.size(); ++c) {
    raw[c] = combined[c] > 0.0 ? p_labeled * labeled_prior[c] / combined[c] : p_labeled;
  }
  return MissingnessMechanism(std::move(raw), p_labeled, clip_floor);
}

MissingnessMechanism MissingnessMechanism::constant(int num_classes, double p_labeled,
                                                    double clip_floor) {
  return MissingnessMechanism(Vector::Constant(num_classes, p_labeled), p_labeled, clip_floor);
}

MissingnessMechanism MissingnessMechanism::with_clip_floor(double clip_floor) const {
  return MissingnessMechanism(raw_, p_labeled_, clip_floor);
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(int num_classes, Matrix features, std::vector<std::uint8_t> labeled,
                 std::vector<int> labels)
    : num_classes_(num_classes),
      features_(std::move(features)),
      labeled_(std::move(labeled)),
      labels_(std::move(labels)) {
  if (num_classes_ < 2) throw DomainError("dataset needs at least two classes");
  require_same_size(features_.rows(), static_cast<std::int64_t>(labeled_.size()),
                    "dataset labeled mask");
  require_same_size(features_.rows(), static_cast<std::int64_t>(labels_.size()),
                    "dataset labels");
  if (!features_.allFinite()) throw NumericError("dataset features must be finite");
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labeled_[i]) {
      if (labels_[i] < 0 || labels_[i] >= num_classes_) {
        throw DomainError("labeled row " + std::to_string(i) + " has label out of range");
      }
      ++num_labeled_;
    } else if (labels_[i] != -1) {
      throw DomainError("unlabeled row " + std::to_string(i) + " carries a visible label");
    }
  }
}

double Dataset::p_labeled() const {
  if (size() == 0) throw DomainError("empty dataset");
  return static_cast<double>(num_labeled_) / static_cast<double>(size());
}

Observation Dataset::observation(std::int64_t i) const {
  Observation obs;
  obs.x = features_.row(i).transpose();
  obs.labeled = is_labeled(i);
  if (obs.labeled) obs.y = labels_[i];
  return obs;
}

std::vector<std::int64_t> Dataset::labeled_indices() const {
  std::vector<std::int64_t> out;
  out.reserve(num_labeled_);
  for (std::int64_t i = 0; i < size(); ++i) {
    if (labeled_[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::int64_t> Dataset::unlabeled_indices() const {
  std::vector<std::int64_t> out;
  out.reserve(num_unlabeled());
  for (std::int64_t i = 0; i < size(); ++i) {
    if (!labeled_[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::int64_t> Dataset::labeled_counts() const {
  std::vector<std::int64_t> counts(num_classes_, 0);
  for (std::int64_t i = 0; i < size(); ++i) {
    if (labeled_[i]) ++counts[labels_[i]];
  }
  return counts;
}

ClassDistribution Dataset::labeled_prior() const {
  if (num_labeled_ == 0) throw DomainError("labeled_prior: dataset has no labeled rows");
  const auto counts = labeled_counts();
  return ClassDistribution::from_counts(counts);
}

Dataset Dataset::subset(std::span<const std::int64_t> rows) const {
  Matrix features(static_cast<Eigen::Index>(rows.size()), feature_dim());
  std::vector<std::uint8_t> labeled(rows.size());
  std::vector<int> labels(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = rows[k];
    if (i < 0 || i >= size()) throw DomainError("subset: row index out of range");
    features.row(static_cast<Eigen::Index>(k)) = features_.row(i);
    labeled[k] = labeled_[i];
    labels[k] = labels_[i];
  }
  return Dataset(num_classes_, std::move(features), std::move(labeled), std::move(labels));
}

// ---------------------------------------------------------------------------
// Simplex arithmetic and metrics

double tv_distance(const ClassDistribution& p, const ClassDistribution& q) {
  require_same_size(p.size(), q.size(), "tv_distance");
  return 0.5 * (p.probs() - q.probs()).cwiseAbs().sum();
}

ClassDistribution project_to_simplex(const Vector& v) {
  if (v.size() == 0) throw DomainError("project_to_simplex: empty vector");
  if (v.hasNaN()) throw NumericError("project_to_simplex: NaN input");
  if (!v.allFinite()) throw NumericError("project_to_simplex: infinite input");
  if ((v.array() >= 0.0).all() && std::abs(v.sum() - 1.0) <= kSimplexTolerance) {
    return ClassDistribution(v);
  }
  // Sort-and-threshold projection: find the largest k with
  // u_k - (sum_{j<=k} u_j - 1) / k > 0 over u sorted descending.
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    cumulative += u[k];
    const double candidate = (cumulative - 1.0) / static_cast<double>(k + 1);
    if (u[k] - candidate > 0.0) theta = candidate;
  }
  Vector out = (v.array() - theta).cwiseMax(0.0);
  // Rounding can leave the sum a few ulps away from 1.
  out /= out.sum();
  return ClassDistribution(std::move(out));
}

ClassDistribution recover_unlabeled_prior(const ClassDistribution& p_combined,
                                          const ClassDistribution& p_labeled_prior,
                                          double p_a1) {
  require_same_size(p_combined.size(), p_labeled_prior.size(), "recover_unlabeled_prior");
  if (!(p_a1 > 0.0 && p_a1 < 1.0)) {
    throw DomainError("recover_unlabeled_prior: P(A=1) must lie in (0, 1)");
  }
  const Vector raw = (p_combined.probs() - p_a1 * p_labeled_prior.probs()) / (1.0 - p_a1);
  return project_to_simplex(raw);
}

ClassDistribution mix_priors(const ClassDistribution& labeled_prior,
                             const ClassDistribution& unlabeled_prior, double p_a1) {
  require_same_size(labeled_prior.size(), unlabeled_prior.size(), "mix_priors");
  if (!(p_a1 >= 0.0 && p_a1 <= 1.0)) throw DomainError("mix_priors: P(A=1) outside [0, 1]");
  Vector mixed = p_a1 * labeled_prior.probs() + (1.0 - p_a1) * unlabeled_prior.probs();
  return ClassDistribution::from_masses(mixed);
}

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  require_same_size(static_cast<std::int64_t>(predictions.size()),
                    static_cast<std::int64_t>(labels.size()), "top1_accuracy");
  if (predictions.empty()) throw DomainError("top1_accuracy: empty input");
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// ---------------------------------------------------------------------------
// Numerics

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double row_max = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - row_max).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

Vector softmax(const Vector& logits) {
  Vector out = (logits.array() - logits.maxCoeff()).exp();
  return out / out.sum();
}

double log_sum_exp(const Vector& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

int argmax(const Vector& v) {
  int best = 0;
  for (int c = 1; c < v.size(); ++c) {
    if (v[c] > v[best]) best = c;
  }
  return best;
}

}  // namespace lsdr
