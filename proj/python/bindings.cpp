#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lsdr/core.hpp"
#include "lsdr/estimate.hpp"
#include "lsdr/io.hpp"
#include "lsdr/mc.hpp"
#include "lsdr/report.hpp"
#include "lsdr/synth.hpp"
#include "lsdr/train.hpp"

namespace py = pybind11;
using namespace lsdr;

namespace {

// labels use -1 for unlabeled rows
Dataset make_dataset(int num_classes, const Matrix& features, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) {
    throw DomainError("labels and features disagree on the number of rows");
  }
  std::vector<std::uint8_t> mask(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) mask[i] = labels[i] >= 0 ? 1 : 0;
  return Dataset(num_classes, features, std::move(mask), labels);
}

model::TrainConfig config_from(const std::string& text) {
  if (text.empty()) return {};
  return io::train_config_from_json(io::json::parse(text));
}

py::dict generate(int classes, int dim, double separation, double sigma2, std::int64_t n1,
                  std::int64_t m1, double gamma_l, double gamma_u, const std::string& shape,
                  std::uint64_t seed, std::optional<std::uint64_t> mixture_seed) {
  const auto mix =
      synth::MixtureSpec::random(classes, dim, separation, sigma2, mixture_seed.value_or(seed));
  synth::ShiftConfig cfg;
  cfg.n1 = n1;
  cfg.m1 = m1;
  cfg.gamma_l = gamma_l;
  cfg.gamma_u = gamma_u;
  cfg.shape = synth::parse_shape(shape);
  cfg.seed = seed;
  const auto sd = synth::generate(mix, cfg);
  py::dict out;
  out["features"] = sd.data.features();
  out["labels"] = sd.data.labels();
  out["hidden_labels"] = sd.truth.hidden_labels;
  out["num_classes"] = classes;
  out["unlabeled_prior"] = Vector(sd.truth.priors.unlabeled_prior.probs());
  out["labeled_prior"] = Vector(sd.truth.priors.labeled_prior.probs());
  out["propensity"] = sd.truth.priors.propensity;
  out["mixture"] = io::to_json(mix).dump();
  return out;
}

std::string estimate_prior(const std::string& kind, const Matrix& posteriors,
                           const Vector& propensity, const std::vector<int>& labels,
                           double clip_floor) {
  const int c = static_cast<int>(posteriors.cols());
  const auto data = make_dataset(c, Matrix::Zero(posteriors.rows(), 1), labels);
  estimate::NuisancePair np{[posteriors](const Matrix&) { return posteriors; },
                            MissingnessMechanism(propensity, data.p_labeled(), clip_floor)};
  return io::to_json(estimate::run_estimator(estimate::parse_estimator(kind), np, data)).dump();
}

}  // namespace

PYBIND11_MODULE(_lsdr, m) {
  m.doc() = "Label-shift prior estimation with doubly-robust corrections";

  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<io::FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("generate", &generate, py::arg("classes"), py::arg("dim"), py::arg("separation") = 3.0,
        py::arg("sigma2") = 1.0, py::arg("n1") = 500, py::arg("m1") = 4000,
        py::arg("gamma_l") = 100.0, py::arg("gamma_u") = 100.0,
        py::arg("shape") = "consistent", py::arg("seed") = 0,
        py::arg("mixture_seed") = py::none());

  m.def("estimate_prior", &estimate_prior, py::arg("kind"), py::arg("posteriors"),
        py::arg("propensity"), py::arg("labels"), py::arg("clip_floor") = 1e-3,
        "OR / IPW / DR estimate of P(Y) from fixed nuisances; returns the report as JSON");

  m.def("tv_distance", [](const Vector& p, const Vector& q) {
    return tv_distance(ClassDistribution(p), ClassDistribution(q));
  });

  m.def("coverage_band", [](int reps, double nominal) {
    const auto b = mc::coverage_band(reps, nominal);
    return py::make_tuple(b.lower, b.upper);
  }, py::arg("reps"), py::arg("nominal") = 0.95);

  m.def("config_hash", &report::config_hash);

  py::class_<train::TrainedModel>(m, "Model")
      .def_property_readonly("method",
                             [](const train::TrainedModel& t) {
                               return std::string(train::to_string(t.method));
                             })
      .def_property_readonly("propensity",
                             [](const train::TrainedModel& t) {
                               return Vector(t.mechanism.propensity());
                             })
      .def_property_readonly("unlabeled_estimate",
                             [](const train::TrainedModel& t) {
                               return Vector(t.unlabeled_estimate.probs());
                             })
      .def("posterior", &train::TrainedModel::posterior_batch)
      .def("uniform_posterior", &train::TrainedModel::uniform_posterior_batch)
      .def("predict", &train::TrainedModel::predict_uniform)
      .def("estimate",
           [](const train::TrainedModel& t, const std::string& kind, const Matrix& features,
              const std::vector<int>& labels) {
             const auto data =
                 make_dataset(static_cast<int>(t.unlabeled_estimate.size()), features, labels);
             return io::to_json(
                        estimate::run_estimator(estimate::parse_estimator(kind), t.nuisance(), data))
                 .dump();
           },
           py::arg("kind"), py::arg("features"), py::arg("labels"))
      .def("to_json", [](const train::TrainedModel& t) { return io::to_json(t).dump(); });

  m.def("train",
        [](const std::string& method, int num_classes, const Matrix& features,
           const std::vector<int>& labels, const std::string& config,
           const std::string& stage2_config) {
          const auto data = make_dataset(num_classes, features, labels);
          const auto c1 = config_from(config);
          const auto c2 = stage2_config.empty() ? c1 : config_from(stage2_config);
          py::gil_scoped_release release;
          return train::train(train::parse_method(method), data, c1, c2);
        },
        py::arg("method"), py::arg("num_classes"), py::arg("features"), py::arg("labels"),
        py::arg("config") = "", py::arg("stage2_config") = "");
}
