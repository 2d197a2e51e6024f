#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/model.hpp"
#include "lsdr/rng.hpp"
#include "lsdr/synth.hpp"

namespace lsdr::testing {

/// Central differences of f at x with step h, coordinate by coordinate.
inline Vector numeric_gradient(const std::function<double(const Vector&)>& f, const Vector& x,
                               double h = 1e-6) {
  Vector g(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const Vector& a, const Vector& b) {
  const double scale = std::max(a.norm(), b.norm());
  if (scale == 0.0) return 0.0;
  return (a - b).norm() / scale;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  return random_matrix(n, 1, rng, scale).col(0);
}

/// Random point on the open simplex.
inline Vector random_simplex(int c, Rng& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  Vector v(c);
  for (int i = 0; i < c; ++i) v[i] = g(rng) + 1e-3;
  return v / v.sum();
}

/// Rows of posteriors drawn from random logits.
inline Matrix random_posteriors(Eigen::Index n, int c, Rng& rng) {
  return softmax_rows(random_matrix(n, c, rng, 1.5));
}

inline model::ClassifierParams random_classifier(model::Architecture arch, int d, int h, int c,
                                                 std::uint64_t seed, double scale = 0.7) {
  auto p = model::ClassifierParams::zeros(arch, d, h, c);
  Rng rng(seed);
  p.weights = random_vector(p.weights.size(), rng, scale);
  return p;
}

/// Hand-built dataset: labels[i] = -1 marks an unlabeled row.
inline Dataset make_dataset(int c, const Matrix& x, const std::vector<int>& labels) {
  std::vector<std::uint8_t> labeled(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labeled[i] = labels[i] >= 0 ? 1 : 0;
  return Dataset(c, x, labeled, labels);
}

/// Small random dataset with a given fraction labeled.
inline Dataset random_dataset(int n, int d, int c, double frac_labeled, std::uint64_t seed) {
  Rng rng(seed);
  const Matrix x = random_matrix(n, d, rng);
  std::uniform_int_distribution<int> cls(0, c - 1);
  std::bernoulli_distribution lab(frac_labeled);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = lab(rng) ? cls(rng) : -1;
  return make_dataset(c, x, labels);
}

/// Two classes on a line at -1 and +1 with unit variance.
inline synth::MixtureSpec line_mixture() {
  synth::MixtureSpec m;
  m.num_classes = 2;
  m.feature_dim = 1;
  m.class_means = Matrix(2, 1);
  m.class_means << -1.0, 1.0;
  m.class_cov_scale = 1.0;
  return m;
}

}  // namespace lsdr::testing
