#include "lsdr/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

namespace lsdr::report {

double uniform_test_eval(const Predictor& predict, const synth::MixtureSpec& mixture,
                         std::int64_t n_test, std::uint64_t seed) {
  if (n_test < mixture.num_classes) throw DomainError("uniform_test_eval: need n_test >= C");
  const auto [features, labels] = synth::sample_balanced(mixture, n_test, seed);
  const auto predictions = predict(features);
  return top1_accuracy(predictions, labels);
}

double uniform_test_eval(const train::TrainedModel& model, const synth::MixtureSpec& mixture,
                         std::int64_t n_test, std::uint64_t seed, bool posthoc_adjust) {
  Predictor predict = [&](const Matrix& x) {
    const Matrix post = posthoc_adjust ? model.uniform_posterior_batch(x) : model.posterior_batch(x);
    std::vector<int> out(post.rows());
    for (Eigen::Index i = 0; i < post.rows(); ++i) out[i] = argmax(post.row(i).transpose());
    return out;
  };
  return uniform_test_eval(predict, mixture, n_test, seed);
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = static_cast<std::int64_t>(values.size());
  if (values.empty()) return s;
  // Sorting first makes the sums independent of record order.
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() == 1) {
    s.single = true;
    return s;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return s;
}

std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records,
                                    std::vector<std::string>* warnings) {
  using Key = std::tuple<std::string, std::string, std::string, double, double>;
  struct Group {
    std::vector<double> tv;
    std::vector<double> accuracy;
    std::int64_t seen = 0;
  };
  std::map<Key, Group> groups;
  for (const auto& r : records) {
    auto& g = groups[Key{r.method, r.estimator, r.shape, r.gamma_l, r.gamma_u}];
    ++g.seen;
    if (!std::isfinite(r.tv)) continue;
    g.tv.push_back(r.tv);
    if (r.accuracy && std::isfinite(*r.accuracy)) g.accuracy.push_back(*r.accuracy);
  }
  std::vector<AggregateRow> rows;
  for (auto& [key, g] : groups) {
    const auto& [method, estimator, shape, gl, gu] = key;
    if (g.tv.empty()) {
      if (warnings) {
        warnings->push_back("group " + method + "/" + estimator + "/" + shape +
                            " has no usable records; omitted");
      }
      continue;
    }
    AggregateRow row{method, estimator, shape, gl, gu, summarize(g.tv), std::nullopt};
    if (!g.accuracy.empty()) row.accuracy = summarize(g.accuracy);
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_optional(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

constexpr const char* kRecordHeader =
    "config_hash,method,estimator,shape,gamma_l,gamma_u,seed,tv,accuracy,wall_clock_seconds";

}  // namespace

void write_records_csv(std::ostream& out, const std::vector<ExperimentRecord>& records) {
  out << kRecordHeader << '\n';
  for (const auto& r : records) {
    out << r.config_hash << ',' << r.method << ',' << r.estimator << ',' << r.shape << ','
        << fmt(r.gamma_l) << ',' << fmt(r.gamma_u) << ',' << r.seed << ',' << fmt(r.tv) << ','
        << fmt(r.accuracy) << ',' << fmt(r.wall_clock_seconds) << '\n';
  }
}

std::vector<ExperimentRecord> read_records_csv(std::istream& in) {
  std::string line;
  // Leading '#' lines carry provenance and are skipped.
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
  }
  if (line != kRecordHeader) {
    throw DomainError("records CSV: unexpected header");
  }
  std::vector<ExperimentRecord> out;
  std::int64_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != 10) {
      throw DomainError("records CSV line " + std::to_string(line_no) + ": expected 10 fields");
    }
    ExperimentRecord r;
    r.config_hash = cells[0];
    r.method = cells[1];
    r.estimator = cells[2];
    r.shape = cells[3];
    r.gamma_l = std::stod(cells[4]);
    r.gamma_u = std::stod(cells[5]);
    r.seed = std::stoull(cells[6]);
    r.tv = std::stod(cells[7]);
    r.accuracy = parse_optional(cells[8]);
    r.wall_clock_seconds = parse_optional(cells[9]);
    out.push_back(std::move(r));
  }
  return out;
}

void write_aggregate_csv(std::ostream& out, const std::vector<AggregateRow>& rows) {
  out << "method,estimator,shape,gamma_l,gamma_u,tv_mean,tv_sd,count,single,"
         "accuracy_mean,accuracy_sd\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.estimator << ',' << r.shape << ',' << fmt(r.gamma_l) << ','
        << fmt(r.gamma_u) << ',' << fmt(r.tv.mean) << ',' << fmt(r.tv.sd) << ',' << r.tv.count
        << ',' << (r.tv.single ? 1 : 0) << ','
        << (r.accuracy ? fmt(r.accuracy->mean) : std::string()) << ','
        << (r.accuracy ? fmt(r.accuracy->sd) : std::string()) << '\n';
  }
}

std::string table_layout(const std::vector<AggregateRow>& rows, std::string_view metric) {
  const bool accuracy = metric == "accuracy";
  if (!accuracy && metric != "tv") throw DomainError("table metric must be tv or accuracy");
  std::vector<std::string> shapes;
  for (auto s : synth::kAllShapes) {
    const std::string name(synth::to_string(s));
    if (std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return r.shape == name; })) {
      shapes.push_back(name);
    }
  }
  for (const auto& r : rows) {
    if (std::find(shapes.begin(), shapes.end(), r.shape) == shapes.end()) shapes.push_back(r.shape);
  }
  std::vector<std::pair<std::string, std::string>> row_keys;
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::string>> cells;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.method, r.estimator);
    if (std::find(row_keys.begin(), row_keys.end(), key) == row_keys.end()) row_keys.push_back(key);
    std::ostringstream cell;
    if (accuracy) {
      if (!r.accuracy) continue;
      cell << std::fixed << std::setprecision(2) << 100.0 * r.accuracy->mean << " ± "
           << 100.0 * r.accuracy->sd;
    } else {
      cell << std::fixed << std::setprecision(4) << r.tv.mean << " ± " << r.tv.sd;
    }
    cells[key][r.shape] = cell.str();
  }
  std::ostringstream out;
  out << std::left << std::setw(26) << "method / estimator";
  for (const auto& s : shapes) out << " | " << std::setw(18) << s;
  out << '\n';
  for (const auto& key : row_keys) {
    out << std::left << std::setw(26) << (key.first + " / " + key.second);
    for (const auto& s : shapes) {
      auto it = cells[key].find(s);
      out << " | " << std::setw(18) << (it == cells[key].end() ? std::string("-") : it->second);
    }
    out << '\n';
  }
  return out.str();
}

std::string config_hash(std::string_view canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace lsdr::report
