// JSON crosses the boundary as text; the Python package decodes it.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "headlab/data.hpp"
#include "headlab/dissociation.hpp"
#include "headlab/error.hpp"
#include "headlab/experiment.hpp"
#include "headlab/json_io.hpp"
#include "headlab/similarity.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace headlab;

namespace {

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_config_from_json(j, base_dir);
}

Thresholds thresholds(double distinct, double single, double mild) {
  Thresholds t;
  t.distinct = distinct;
  t.single = single;
  t.mild = mild;
  return t;
}

}  // namespace

PYBIND11_MODULE(_headlab, m) {
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);

  m.attr("CONFIG_VERSION") = kConfigVersion;
  m.attr("REPORT_VERSION") = kReportVersion;

  m.def("normalize_config", [](const std::string& text, const fs::path& base_dir) {
    return to_json(parse_config(text, base_dir)).dump();
  });

  m.def(
      "train",
      [](const std::string& config, const fs::path& base_dir, const fs::path& out,
         std::optional<fs::path> resume, std::optional<std::size_t> max_steps) {
        const auto c = parse_config(config, base_dir);
        TrainRunOptions o;
        o.resume = std::move(resume);
        if (max_steps) o.max_steps = *max_steps;
        py::gil_scoped_release release;
        auto r = run_train(c, out, o);
        return std::make_pair(r.report.dump(), r.params_digest);
      },
      py::arg("config"), py::arg("base_dir"), py::arg("out"), py::arg("resume") = py::none(),
      py::arg("max_steps") = py::none());

  m.def("report", [](const std::string& config, const fs::path& base_dir, const fs::path& out) {
    const auto c = parse_config(config, base_dir);
    py::gil_scoped_release release;
    return run_report(c, out).dump();
  });

  m.def("prune_eval", [](const std::string& config, const fs::path& base_dir, const fs::path& checkpoint,
                         const fs::path& out, bool importance_only) {
    const auto c = parse_config(config, base_dir);
    py::gil_scoped_release release;
    return run_prune_eval(c, checkpoint, out, importance_only).dump();
  });

  m.def("transfer", [](const std::string& config, const fs::path& base_dir, const fs::path& out) {
    const auto c = parse_config(config, base_dir);
    py::gil_scoped_release release;
    return run_transfer(c, out).dump();
  });

  m.def("dissociation",
        [](std::vector<std::string> tasks, std::vector<double> base, std::vector<std::vector<double>> pruned,
           double alpha, double distinct, double single, double mild) {
          PerformanceTable t{std::move(tasks), std::move(base), std::move(pruned)};
          return to_json(make_dissociation_report(t, alpha, thresholds(distinct, single, mild))).dump();
        });

  m.def("dissociate_csv", [](const fs::path& table, double alpha, double distinct, double single, double mild,
                             const fs::path& out) {
    return run_dissociate_csv(table, alpha, thresholds(distinct, single, mild), out).dump();
  });

  m.def("similarity", [](const std::vector<std::pair<std::string, fs::path>>& models,
                         std::vector<std::string> probes, std::vector<std::string> metrics,
                         std::optional<fs::path> transfer_csv, std::optional<std::size_t> layer,
                         const std::string& pooling, const std::string& statistic, std::size_t max_len,
                         const fs::path& out) {
    SimilarityRequest r;
    for (const auto& [task, dir] : models) r.models.push_back({task, dir});
    r.probes = std::move(probes);
    r.metrics = std::move(metrics);
    r.transfer_csv = std::move(transfer_csv);
    r.layer = layer;
    r.pooling = pooling_from_string(pooling);
    r.statistic = rdm_statistic_from_string(statistic);
    r.max_len = max_len;
    py::gil_scoped_release release;
    return run_similarity(r, out).dump();
  });

  m.def("ahp", [](const std::vector<std::string>& tasks, const std::vector<std::vector<double>>& transfer) {
    return to_json(ahp(tasks, transfer)).dump();
  });

  m.def("correlate_values", [](const std::vector<double>& x, const std::vector<double>& y) {
    return to_json(correlate(x, y)).dump();
  });

  m.def("correlate", [](const fs::path& similarity_csv, const fs::path& dissociation_csv, const fs::path& out) {
    return run_correlate(similarity_csv, dissociation_csv, out).dump();
  });

  m.def(
      "synth_task",
      [](const std::string& kind, std::size_t size, std::uint64_t seed, std::size_t n_class) {
        const auto t = synth_task(synth_kind_from_string(kind), size, seed, n_class);
        std::vector<std::tuple<std::string, std::optional<std::string>, double>> out;
        out.reserve(t.examples.size());
        for (const auto& e : t.examples) out.emplace_back(e.text_a, e.text_b, e.label);
        return out;
      },
      py::arg("kind"), py::arg("size"), py::arg("seed"), py::arg("n_class") = 4);

  m.def(
      "selfcheck",
      [](std::size_t seeds) {
        std::ostringstream out;
        const bool ok = run_selfcheck(out, seeds);
        return std::make_pair(ok, out.str());
      },
      py::arg("seeds") = 5);
}
