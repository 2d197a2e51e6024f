// Acceptance runner: one PASS/FAIL line per criterion.
//
//   lsdr_acceptance [--work-dir DIR] [--cli PATH] [--only 1,3,...]
//                   [--known-failure 7,...]
//
// Exit status is 0 when every selected criterion passes, or fails only where
// listed under --known-failure. A known failure that passes is reported and
// also makes the run fail, so the list cannot go stale.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/io.hpp"
#include "lsdr/mc.hpp"
#include "lsdr/model.hpp"
#include "lsdr/report.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"
#include "test_util.hpp"

#ifndef LSDR_CLI_PATH
#define LSDR_CLI_PATH "lsdr"
#endif

namespace fs = std::filesystem;
using namespace lsdr;
using estimate::EstimatorKind;
using model::Architecture;

namespace {

struct Verdict {
  bool pass = false;
  std::vector<std::string> details;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

std::string fmt(const Vector& v, int precision = 4) {
  std::ostringstream os;
  os << '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) os << (i ? ", " : "") << fmt(v[i], precision);
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared scenario: three classes, propensities below one half so that a x2
// propensity corruption stays inside [0, 1].

mc::McScenario three_class_scenario(int reps, std::int64_t n, std::uint64_t seed) {
  mc::McScenario s;
  s.mixture = synth::MixtureSpec::random(3, 2, 2.0, 1.0, derive_seed(seed, "mixture"));
  s.priors = synth::PriorTruth::from_combined(
      ClassDistribution(Eigen::Vector3d(0.5, 0.3, 0.2)), Eigen::Vector3d(0.4, 0.25, 0.1));
  s.reps = reps;
  s.n = n;
  s.seed = seed;
  return s;
}

// ---------------------------------------------------------------------------
// 1. Gradients

double grad_error(const std::function<double(const Vector&)>& f, const Vector& at,
                  const Vector& analytic) {
  return testing::relative_error(analytic, testing::numeric_gradient(f, at));
}

Verdict criterion_gradients() {
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) {
    worst[name] = std::max(worst[name], err);
  };
  for (auto arch : {Architecture::linear, Architecture::mlp1}) {
    for (int t = 0; t < 10; ++t) {
      Rng rng(derive_seed(1, "gradients", static_cast<std::uint64_t>(t)));
      const int d = 3, h = 5, c = 4, b = 7;
      const auto params = testing::random_classifier(arch, d, h, c, 1000 + t);
      model::TargetBatch batch;
      batch.features = testing::random_matrix(b, d, rng);
      batch.targets = testing::random_posteriors(b, c, rng);
      batch.weights = Vector::Constant(b, 0.7);
      auto with = [&](const Vector& w) {
        auto p = params;
        p.weights = w;
        return p;
      };
      note("weighted CE", grad_error([&](const Vector& w) {
             return model::weighted_ce_loss_and_grad(with(w), batch).loss;
           }, params.weights, model::weighted_ce_loss_and_grad(params, batch).gradient));

      const ClassDistribution prior(testing::random_simplex(c, rng));
      note("logit-adjusted CE", grad_error([&](const Vector& w) {
             return model::logit_adjusted_loss_and_grad(with(w), batch, prior).loss;
           }, params.weights, model::logit_adjusted_loss_and_grad(params, batch, prior).gradient));

      const auto data = testing::random_dataset(12, d, c, 0.4, 2000 + t);
      const Vector eta = testing::random_vector(c, rng);
      const auto ll = train::marginal_loglik_and_grad(params, eta, data);
      note("marginal log-likelihood (classifier)", grad_error([&](const Vector& w) {
             return train::marginal_loglik_and_grad(with(w), eta, data).value;
           }, params.weights, ll.classifier_grad));
      note("marginal log-likelihood (mechanism)", grad_error([&](const Vector& e) {
             return train::marginal_loglik_and_grad(params, e, data).value;
           }, eta, ll.mechanism_grad));

      train::DrRiskBatch dr;
      dr.features = batch.features;
      std::uniform_int_distribution<int> cls(-1, c - 1);
      for (int i = 0; i < b; ++i) dr.labels.push_back(cls(rng));
      dr.pseudo_labels = testing::random_posteriors(b, c, rng);
      dr.weights = Vector::Ones(b);
      const MissingnessMechanism mech(testing::random_simplex(c, rng) * 0.9, 0.3);
      const Vector shift = testing::random_vector(c, rng, 0.5);
      note("DR risk", grad_error([&](const Vector& w) {
             return train::dr_risk_loss_and_grad(with(w), mech, dr, shift).loss;
           }, params.weights, train::dr_risk_loss_and_grad(params, mech, dr, shift).gradient));
    }
  }
  Verdict v{true, {}};
  for (const auto& [name, err] : worst) {
    v.pass = v.pass && err <= 1e-5;
    v.details.push_back(name + ": max relative error " + fmt(err, 3) + " over 20 points");
  }
  return v;
}

// ---------------------------------------------------------------------------
// 2. Algebraic identities

Verdict criterion_identities() {
  Verdict v{true, {}};
  auto check = [&](const std::string& name, double err) {
    v.pass = v.pass && err <= 1e-10;
    v.details.push_back(name + ": max abs deviation " + fmt(err, 3));
  };
  Rng rng(derive_seed(2, "identities"));

  {  // DR collapses to label frequencies
    const int c = 4;
    const auto data = testing::random_dataset(200, 2, c, 1.0, 21);
    const Matrix post = testing::random_posteriors(200, c, rng);
    estimate::NuisancePair np{[post](const Matrix&) { return post; },
                              MissingnessMechanism(Vector::Ones(c), 1.0)};
    const auto r = estimate::dr_estimate(np, data);
    Vector freq = Vector::Zero(c);
    for (std::int64_t i = 0; i < data.size(); ++i) freq[data.label(i)] += 1.0 / 200.0;
    check("DR with full labels and unit propensity = label frequencies",
          (r.raw - freq).cwiseAbs().maxCoeff());
  }
  {  // DR risk paths
    double err = 0.0;
    for (int t = 0; t < 10; ++t) {
      const auto params = testing::random_classifier(Architecture::mlp1, 3, 4, 5, 300 + t);
      train::DrRiskBatch b;
      b.features = testing::random_matrix(11, 3, rng);
      std::uniform_int_distribution<int> cls(-1, 4);
      for (int i = 0; i < 11; ++i) b.labels.push_back(cls(rng));
      b.pseudo_labels = testing::random_posteriors(11, 5, rng);
      b.weights = Vector::Constant(11, 1.1);
      const MissingnessMechanism mech(Eigen::Matrix<double, 5, 1>(0.9, 0.3, 0.05, 0.01, 0.0005),
                                      0.2);
      const Vector shift = testing::random_vector(5, rng, 0.3);
      const auto a = train::dr_risk_loss_and_grad(params, mech, b, shift,
                                                  train::DrRiskPath::three_terms);
      const auto m = train::dr_risk_loss_and_grad(params, mech, b, shift,
                                                  train::DrRiskPath::meta_targets);
      err = std::max({err, std::abs(a.loss - m.loss),
                      (a.gradient - m.gradient).cwiseAbs().maxCoeff()});
    }
    check("DR risk three-term path = meta-pseudo-label path (10 batches)", err);
  }
  {  // influence decomposition
    const int c = 3;
    const auto data = testing::random_dataset(300, 2, c, 0.35, 23);
    const Matrix post = testing::random_posteriors(300, c, rng);
    estimate::NuisancePair np{[post](const Matrix&) { return post; },
                              MissingnessMechanism(Eigen::Vector3d(0.5, 0.3, 0.2), 0.35)};
    const ClassDistribution ref(Eigen::Vector3d(0.3, 0.3, 0.4));
    const auto dec = estimate::influence_decomposition(np, data, ref);
    const Matrix phi = estimate::influence_values(np, data, ref);
    check("influence decomposition sums to phi", (dec.total() - phi).cwiseAbs().maxCoeff());
  }
  {  // prior recovery round trip
    double err = 0.0;
    for (int t = 0; t < 200; ++t) {
      const int c = 2 + t % 9;
      const ClassDistribution pl(testing::random_simplex(c, rng));
      const ClassDistribution pu(testing::random_simplex(c, rng));
      const double a = 0.05 + 0.9 * std::uniform_real_distribution<double>(0, 1)(rng);
      const auto back = recover_unlabeled_prior(mix_priors(pl, pu, a), pl, a);
      err = std::max(err, (back.probs() - pu.probs()).cwiseAbs().maxCoeff());
    }
    check("prior recovery round trip (200 draws)", err);
  }
  return v;
}

// ---------------------------------------------------------------------------
// 3. Double robustness

Verdict criterion_double_robustness() {
  Verdict v{true, {}};
  auto s = three_class_scenario(200, 20000, 3);
  s.regime = mc::Regime::corrupted;

  auto run = [&](const std::string& label, double temperature, double scale,
                 EstimatorKind single) {
    s.corruption = {temperature, scale};
    const auto r = mc::run_replications(s);
    const auto& dr = r.summary(EstimatorKind::doubly_robust);
    const auto& sr = r.summary(single);
    const Vector dr_z = dr.bias.cwiseAbs().cwiseQuotient(dr.bias_se);
    const Vector sr_z = sr.bias.cwiseAbs().cwiseQuotient(sr.bias_se);
    const bool dr_ok = dr_z.maxCoeff() <= 3.0 && r.failures == 0;
    const bool sr_ok = sr_z.maxCoeff() > 5.0;
    v.pass = v.pass && dr_ok && sr_ok;
    v.details.push_back(label + ": DR |bias|/se " + fmt(dr_z, 3) + " (need <= 3), " +
                        std::string(estimate::to_string(single)) + " |bias|/se " +
                        fmt(sr_z, 3) + " (need max > 5), failures " +
                        std::to_string(r.failures));
  };
  run("oracle propensity + posterior at temperature 3", 3.0, 1.0,
      EstimatorKind::outcome_regression);
  run("oracle posterior + propensity x2 (clipped to [eps, 1])", 1.0, 2.0, EstimatorKind::ipw);
  return v;
}

// ---------------------------------------------------------------------------
// 5. Bias decay

Verdict criterion_bias_decay() {
  mc::BiasDecayConfig cfg;
  cfg.base = three_class_scenario(200, 16000, 5);
  cfg.base.regime = mc::Regime::corrupted;
  cfg.n_grid = {1000, 4000, 16000};
  cfg.magnitude = 0.5;
  cfg.dr_slope_max = -0.45;
  cfg.or_slope_min = -0.35;
  const auto r = mc::bias_decay_study(cfg);
  Verdict v{r.dr_pass && r.or_pass, {}};
  for (const auto& row : r.rows) {
    v.details.push_back("N = " + std::to_string(row.n) + ", delta " + fmt(row.delta, 3) +
                        ": |bias - oracle| OR " + fmt(row.relative_bias[0], 3) + ", IPW " +
                        fmt(row.relative_bias[1], 3) + ", DR " + fmt(row.relative_bias[2], 3) +
                        " (DR se " + fmt(row.relative_se[2], 2) + ")");
  }
  v.details.push_back("log-log slope DR " + fmt(r.slopes[2], 3) + " (need <= -0.45), OR " +
                      fmt(r.slopes[0], 3) + " (need >= -0.35), IPW " + fmt(r.slopes[1], 3));
  return v;
}

// ---------------------------------------------------------------------------
// 8. FixMatch reduction

Verdict criterion_fixmatch() {
  double err = 0.0;
  int zero_rows = 0;
  for (int t = 0; t < 10; ++t) {
    Rng rng(derive_seed(8, "fixmatch", static_cast<std::uint64_t>(t)));
    const auto params = testing::random_classifier(Architecture::mlp1, 4, 6, 5, 800 + t, 1.5);
    const Matrix weak = testing::random_matrix(32, 4, rng);
    const Matrix strong = weak + testing::random_matrix(32, 4, rng, 0.5);
    const auto uniform = MissingnessMechanism::constant(5, 0.1 + 0.08 * t);
    for (double tau : {0.5, 0.8, 0.95}) {
      const Vector em = train::em_unlabeled_terms(params, uniform, weak, strong, tau);
      const Vector fm = train::fixmatch_unlabeled_terms(params, weak, strong, tau);
      err = std::max(err, (em - fm).cwiseAbs().maxCoeff());
      zero_rows += static_cast<int>((fm.array() == 0.0).count());
    }
  }
  return {err <= 1e-10,
          {"max term-by-term deviation " + fmt(err, 3) + " over 30 batches of 32 rows (" +
           std::to_string(zero_rows) + " rows thresholded out)"}};
}

// ---------------------------------------------------------------------------
// CLI-driven criteria (4, 6, 7, 9)

class Cli {
 public:
  Cli(std::string exe, fs::path work) : exe_(std::move(exe)), work_(std::move(work)) {}

  // Runs `lsdr args` with cwd = dir; returns the exit status.
  int run(const fs::path& dir, const std::string& args, const std::string& log) const {
    fs::create_directories(dir);
    const std::string cmd = "cd \"" + dir.string() + "\" && \"" + exe_ + "\" " + args + " > \"" +
                            log + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1) return -1;
#ifdef WEXITSTATUS
    return WEXITSTATUS(status);
#else
    return status;
#endif
  }

  const fs::path& work() const { return work_; }

 private:
  std::string exe_;
  fs::path work_;
};

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const char* kCoverageArgs = "montecarlo coverage --reps 500 --n 5000 --out coverage.json";
const char* kSweepArgs =
    "montecarlo sweep --shapes all --seeds 3 "
    "--methods mle,em,simpro,two-stage,batch-update,dr-risk --out-dir sweep";

Verdict criterion_coverage(const Cli& cli) {
  const fs::path dir = cli.work() / "run_a";
  const int rc = cli.run(dir, kCoverageArgs, "coverage.log");
  if (rc != 0) return {false, {"montecarlo coverage exited with " + std::to_string(rc)}};
  const auto doc = io::read_json(dir / "coverage.json");
  const double lo = doc.at("coverage_band")[0].get<double>();
  const double hi = doc.at("coverage_band")[1].get<double>();
  Verdict v{true, {}};
  for (const auto& e : doc.at("estimators")) {
    if (e.at("estimator") != "dr") continue;
    const Vector cov = io::vector_from_json(e.at("coverage"));
    const Vector ratio = io::vector_from_json(e.at("variance_ratio"));
    const bool cov_ok = cov.minCoeff() >= lo && cov.maxCoeff() <= hi;
    const bool ratio_ok = ratio.minCoeff() >= 0.7 && ratio.maxCoeff() <= 1.4;
    v.pass = cov_ok && ratio_ok && doc.at("failures").get<int>() == 0;
    v.details.push_back("DR 95% coverage " + fmt(cov, 4) + ", exact binomial band [" +
                        fmt(lo) + ", " + fmt(hi) + "]");
    v.details.push_back("Var(sqrt(N) error) / mean plug-in E[phi^2] = " + fmt(ratio, 4) +
                        " (need within [0.7, 1.4])");
  }
  return v;
}

struct SweepTables {
  // (method, estimator, shape) -> mean over seeds
  std::map<std::tuple<std::string, std::string, std::string>, double> tv, acc;
};

SweepTables load_sweep(const fs::path& records) {
  std::ifstream in(records);
  const auto rows = report::aggregate(report::read_records_csv(in));
  SweepTables t;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.method, r.estimator, r.shape);
    t.tv[key] = r.tv.mean;
    if (r.accuracy) t.acc[key] = r.accuracy->mean;
  }
  return t;
}

const std::vector<std::string> kShapes{"consistent", "uniform", "reversed", "middle", "headtail"};

Verdict criterion_sweep_tv(const Cli& cli, bool& sweep_ok) {
  const fs::path dir = cli.work() / "run_a";
  const int rc = cli.run(dir, kSweepArgs, "sweep.log");
  sweep_ok = rc == 0;
  if (!sweep_ok) return {false, {"montecarlo sweep exited with " + std::to_string(rc)}};
  const auto t = load_sweep(dir / "sweep" / "records.csv");
  Verdict v{true, {}};
  for (const std::string m : {"mle", "em", "simpro"}) {
    int wins = 0;
    std::string cells;
    for (const auto& s : kShapes) {
      const double tv = t.tv.at({m, "train", s});
      const double base = t.tv.at({"none", "labeled-prior", s});
      if (tv < base) ++wins;
      cells += " " + s + " " + fmt(tv, 3) + "/" + fmt(base, 3);
    }
    v.pass = v.pass && wins >= 4;
    v.details.push_back(m + " beats the labeled-prior baseline on " + std::to_string(wins) +
                        "/5 shapes (need >= 4); TV method/baseline:" + cells);
  }
  int dr_best = 0;
  std::string cells;
  for (const auto& s : kShapes) {
    const double dr = t.tv.at({"simpro", "dr", s});
    const double orv = t.tv.at({"simpro", "or", s});
    const double ipw = t.tv.at({"simpro", "ipw", s});
    if (dr <= orv && dr <= ipw) ++dr_best;
    cells += " " + s + " " + fmt(orv, 3) + "/" + fmt(ipw, 3) + "/" + fmt(dr, 3);
  }
  v.pass = v.pass && dr_best >= 3;
  v.details.push_back("simpro + DR is the minimum TV among OR/IPW/DR on " +
                      std::to_string(dr_best) + "/5 shapes (need >= 3); OR/IPW/DR:" + cells);
  return v;
}

Verdict criterion_sweep_accuracy(const Cli& cli, bool sweep_ok) {
  if (!sweep_ok) return {false, {"sweep artifacts unavailable"}};
  const auto t = load_sweep(cli.work() / "run_a" / "sweep" / "records.csv");
  auto acc = [&](const std::string& m, const std::string& s) {
    return 100.0 * t.acc.at({m, "train", s});
  };
  Verdict v{true, {}};
  int not_worse = 0, better = 0;
  std::string cells;
  for (const auto& s : kShapes) {
    const double two = acc("two-stage", s);
    const double sp = acc("simpro", s);
    if (two >= sp - 0.5) ++not_worse;
    if (two > sp) ++better;
    cells += " " + s + " " + fmt(two, 4) + "/" + fmt(sp, 4);
  }
  const bool a = not_worse == 5 && better >= 3;
  v.details.push_back(std::string(a ? "ok" : "FAILED") +
                      ": two-stage >= simpro - 0.5 on " + std::to_string(not_worse) +
                      "/5 shapes, strictly greater on " + std::to_string(better) +
                      "/5 (need 5 and >= 3); accuracy % two-stage/simpro:" + cells);
  const double bu = acc("batch-update", "consistent");
  const double two_c = acc("two-stage", "consistent");
  const bool b = bu < two_c;
  v.details.push_back(std::string(b ? "ok" : "FAILED") + ": batch-update " + fmt(bu, 4) +
                      " vs two-stage " + fmt(two_c, 4) + " on consistent (need lower)");
  // The comparison set of the ablation: two-stage, batch-update, dr-risk.
  const double dr = acc("dr-risk", "reversed");
  const double two_r = acc("two-stage", "reversed");
  const double bu_r = acc("batch-update", "reversed");
  const bool c = dr < two_r && dr < bu_r;
  v.details.push_back(std::string(c ? "ok" : "FAILED") + ": dr-risk " + fmt(dr, 4) +
                      " vs two-stage " + fmt(two_r, 4) + ", batch-update " + fmt(bu_r, 4) +
                      " on reversed (need lowest)");
  v.pass = a && b && c;
  return v;
}

Verdict criterion_determinism(const Cli& cli) {
  // Every subcommand, run twice from fresh directories with fixed seeds.
  struct Step {
    std::string args;
    std::vector<std::string> outputs;
  };
  const std::vector<Step> steps{
      {"synth --classes 4 --dim 3 --n1 120 --m1 300 --gamma-l 10 --gamma-u 10 --shape reversed "
       "--seed 4 --out data.jsonl",
       {"data.jsonl"}},
      {"train --data data.jsonl --method two-stage --epochs 3 --warmup 1 --seed 5 "
       "--stage2-arch mlp1 --hidden 8 --out model.json --history history.json",
       {"model.json", "history.json"}},
      {"train --data data.jsonl --method dr-risk --mechanism from:model.json --epochs 2 "
       "--warmup 1 --seed 6 --out drrisk.json",
       {"drrisk.json"}},
      {"estimate --data data.jsonl --model model.json --cross-fit 2 --seed 7 --out est.json",
       {"est.json"}},
      {"estimate --data data.jsonl --oracle --estimator ipw --out oracle.json", {"oracle.json"}},
      {"eval --model model.json --data data.jsonl --n-test 500 --seed 8 --out eval.json",
       {"eval.json"}},
      {"montecarlo bias-decay --reps 20 --n-grid 500,1000,2000 --out decay.json",
       {"decay.json"}},
      {"montecarlo coverage --regime learned-both --reps 4 --n 600 --epochs 2 --out learned.json",
       {"learned.json"}},
      {kCoverageArgs, {"coverage.json"}},
      {kSweepArgs,
       {"sweep/records.csv", "sweep/aggregate.csv", "sweep/sweep.json", "sweep/table_tv.txt",
        "sweep/table_accuracy.txt"}},
      {"report --records sweep/records.csv --out-dir report", {"report/aggregate.csv"}},
  };
  Verdict v{true, {}};
  for (const auto& run_dir : {"run_a", "run_b"}) {
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const fs::path dir = cli.work() / run_dir;
      const bool done = fs::exists(dir / steps[i].outputs.front());
      // run_a may already hold the criterion 4 and 6 artifacts.
      if (done && std::string(run_dir) == "run_a" &&
          (steps[i].args == kCoverageArgs || steps[i].args == kSweepArgs)) {
        continue;
      }
      const int rc = cli.run(dir, steps[i].args, "step" + std::to_string(i) + ".log");
      if (rc != 0) {
        v.pass = false;
        v.details.push_back(std::string(run_dir) + ": `lsdr " + steps[i].args + "` exited " +
                            std::to_string(rc));
      }
    }
  }
  for (const auto& step : steps) {
    for (const auto& out : step.outputs) {
      const auto a = file_bytes(cli.work() / "run_a" / out);
      const auto b = file_bytes(cli.work() / "run_b" / out);
      const bool same = !a.empty() && a == b;
      v.pass = v.pass && same;
      v.details.push_back(out + ": " + report::config_hash(a) + (same ? " == " : " != ") +
                          report::config_hash(b));
    }
  }
  return v;
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.insert(std::stoi(tok));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "lsdr_acceptance";
  std::string cli_path = LSDR_CLI_PATH;
  std::set<int> only, known;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << a << " needs a value\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--work-dir") work = value();
    else if (a == "--cli") cli_path = value();
    else if (a == "--only") only = parse_list(value());
    else if (a == "--known-failure") known = parse_list(value());
    else {
      std::cerr << "unknown argument " << a << '\n';
      return 2;
    }
  }
  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);
  const Cli cli(cli_path, fs::absolute(work));

  bool sweep_ok = false;
  const std::vector<std::pair<int, std::pair<std::string, std::function<Verdict()>>>> criteria{
      {1, {"gradient correctness", criterion_gradients}},
      {2, {"algebraic identities", criterion_identities}},
      {3, {"double robustness", criterion_double_robustness}},
      {4, {"asymptotic normality and coverage", [&] { return criterion_coverage(cli); }}},
      {5, {"bias-decay separation", criterion_bias_decay}},
      {6, {"EM estimation quality", [&] { return criterion_sweep_tv(cli, sweep_ok); }}},
      {7, {"two-stage improvement", [&] { return criterion_sweep_accuracy(cli, sweep_ok); }}},
      {8, {"FixMatch reduction", criterion_fixmatch}},
      {9, {"determinism", [&] { return criterion_determinism(cli); }}},
  };

  std::ofstream report_file(work / "acceptance_report.txt");
  auto emit = [&](const std::string& line) {
    std::cout << line << '\n' << std::flush;
    report_file << line << '\n' << std::flush;
  };

  bool ok = true;
  int passed = 0, failed = 0;
  for (const auto& [id, entry] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    if (id == 7 && !only.empty() && !only.count(6)) {
      // criterion 7 reads the sweep run by criterion 6
      criterion_sweep_tv(cli, sweep_ok);
    }
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = entry.second();
    } catch (const std::exception& e) {
      v = {false, {std::string("exception: ") + e.what()}};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool expected_fail = known.count(id) > 0;
    std::string tag = v.pass ? "PASS" : "FAIL";
    if (!v.pass && expected_fail) tag += " (known failure)";
    if (v.pass && expected_fail) tag += " (listed as known failure)";
    emit("criterion " + std::to_string(id) + ": " + tag + "  " + entry.first + "  [" +
         fmt(secs, 3) + " s]");
    for (const auto& d : v.details) emit("    " + d);
    v.pass ? ++passed : ++failed;
    if (v.pass == expected_fail) ok = false;
  }
  emit("summary: " + std::to_string(passed) + " passed, " + std::to_string(failed) +
       " failed; report at " + (work / "acceptance_report.txt").string());
  return ok ? 0 : 1;
}
