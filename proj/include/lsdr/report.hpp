#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"

namespace lsdr::report {

/// One (method, estimator, shape, seed) outcome.
struct ExperimentRecord {
  std::string config_hash;
  std::string method;
  std::string estimator;
  std::string shape;
  double gamma_l = 0.0;
  double gamma_u = 0.0;
  std::uint64_t seed = 0;
  double tv = 0.0;
  std::optional<double> accuracy;
  std::optional<double> wall_clock_seconds;
};

/// Predicted class per row of a feature matrix.
using Predictor = std::function<std::vector<int>(const Matrix& features)>;

/// Accuracy of `predict` on a fresh balanced sample of n_test rows.
double uniform_test_eval(const Predictor& predict, const synth::MixtureSpec& mixture,
                         std::int64_t n_test, std::uint64_t seed);

/// Accuracy of a trained model on a balanced test set. With posthoc_adjust
/// the posterior is moved to the uniform prior first; without it the raw
/// training-population posterior is used.
double uniform_test_eval(const train::TrainedModel& model, const synth::MixtureSpec& mixture,
                         std::int64_t n_test, std::uint64_t seed, bool posthoc_adjust = true);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample sd; 0 for a single value
  std::int64_t count = 0;
  bool single = false;
};

Summary summarize(std::vector<double> values);

struct AggregateRow {
  std::string method;
  std::string estimator;
  std::string shape;
  double gamma_l = 0.0;
  double gamma_u = 0.0;
  Summary tv;
  std::optional<Summary> accuracy;
};

/// Groups by (method, estimator, shape, gamma_l, gamma_u) in sorted key
/// order. Records with a non-finite TV are dropped; a group left empty is
/// omitted and a warning appended.
std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records,
                                    std::vector<std::string>* warnings = nullptr);

void write_records_csv(std::ostream& out, const std::vector<ExperimentRecord>& records);
/// Skips leading lines that start with '#'.
std::vector<ExperimentRecord> read_records_csv(std::istream& in);
void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows);

/// Text table: one row per (method, estimator), one column per shape, cells
/// "mean ± sd" of the chosen metric ("tv" or "accuracy", percent for the
/// latter).
std::string table_layout(const std::vector<AggregateRow>& rows, std::string_view metric = "tv");

/// FNV-1a 64 of a canonical config string, as 16 hex digits.
std::string config_hash(std::string_view canonical);

}  // namespace lsdr::report
