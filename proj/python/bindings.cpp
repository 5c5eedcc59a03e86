#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "dupguard/cli.hpp"
#include "dupguard/error.hpp"
#include "dupguard/metrics.hpp"
#include "dupguard/pipeline.hpp"
#include "dupguard/rng.hpp"
#include "dupguard/scoring.hpp"

namespace py = pybind11;
using namespace dupguard;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

TrajectoryDataset dataset_from_numpy(const FloatArray& features, std::optional<std::vector<std::uint32_t>> labels,
                                     std::optional<std::vector<bool>> poison_mask) {
  if (features.ndim() != 3) throw dupguard::Error(dupguard::ErrorCode::kInvalidArgument, "features must have shape (n, layers, dim)");
  const auto n = features.shape(0), l = features.shape(1), d = features.shape(2);
  TrajectoryDataset ds;
  ds.samples.reserve(static_cast<std::size_t>(n));
  const float* p = features.data();
  for (py::ssize_t i = 0; i < n; ++i) {
    ds.samples.emplace_back(Eigen::Map<const FeatureMatrix>(p + i * l * d, l, d));
  }
  ds.labels = std::move(labels);
  ds.poison_mask = std::move(poison_mask);
  ds.validate();
  return ds;
}

py::array_t<float> dataset_features(const TrajectoryDataset& ds) {
  const auto n = static_cast<py::ssize_t>(ds.size());
  const auto l = static_cast<py::ssize_t>(ds.empty() ? 0 : ds.layers());
  const auto d = static_cast<py::ssize_t>(ds.empty() ? 0 : ds.dim());
  py::array_t<float> out({n, l, d});
  float* p = out.mutable_data();
  for (py::ssize_t i = 0; i < n; ++i) {
    Eigen::Map<FeatureMatrix>(p + i * l * d, l, d) = ds.samples[static_cast<std::size_t>(i)].data();
  }
  return out;
}

py::dict dataset_dict(const TrajectoryDataset& ds) {
  py::dict d;
  d["features"] = dataset_features(ds);
  d["labels"] = ds.labels ? py::cast(*ds.labels) : py::none();
  d["poison_mask"] = ds.poison_mask ? py::cast(*ds.poison_mask) : py::none();
  return d;
}

}  // namespace

PYBIND11_MODULE(_dupguard, m) {
  m.doc() = "Feature-trajectory backdoor detection and unlearning";

  static py::exception<dupguard::Error> error(m, "DupGuardError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const dupguard::Error& e) {
      py::set_error(error, (std::string(error_code_name(e.code())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "write_trajectories",
      [](const std::filesystem::path& path, const FloatArray& features,
         std::optional<std::vector<std::uint32_t>> labels, std::optional<std::vector<bool>> poison_mask) {
        return write_trajectories(dataset_from_numpy(features, std::move(labels), std::move(poison_mask)), path);
      },
      py::arg("path"), py::arg("features"), py::arg("labels") = py::none(), py::arg("poison_mask") = py::none(),
      "Writes an FTRJ file and returns its size in bytes.");
  m.def(
      "read_trajectories", [](const std::filesystem::path& path) { return dataset_dict(read_trajectories(path)); },
      py::arg("path"), "Reads an FTRJ file into a dict of features, labels and poison_mask.");

  m.def(
      "fit_detector",
      [](const FloatArray& calib, const std::vector<std::uint32_t>& calib_labels, const FloatArray& valid,
         std::size_t k, double fusion_alpha, double target_frr, const std::string& aggregate) {
        DetectorConfig cfg;
        cfg.k = k;
        cfg.fusion_alpha = fusion_alpha;
        cfg.target_frr = target_frr;
        cfg.aggregate = aggregate_from_string(aggregate);
        const auto model = fit_detector(dataset_from_numpy(calib, calib_labels, std::nullopt),
                                        dataset_from_numpy(valid, std::nullopt, std::nullopt), cfg);
        return model.to_json().dump();
      },
      py::arg("calib"), py::arg("calib_labels"), py::arg("valid"), py::arg("k") = 3, py::arg("fusion_alpha") = 0.9,
      py::arg("target_frr") = 0.05, py::arg("aggregate") = "mean",
      "Fits a detector and returns it as a JSON string.");
  m.def(
      "detect",
      [](const std::string& detector_json, const FloatArray& features) {
        const auto model = DetectorModel::from_json(nlohmann::json::parse(detector_json));
        const auto batch = detect_batch(dataset_from_numpy(features, std::nullopt, std::nullopt), model);
        const auto n = static_cast<py::ssize_t>(batch.verdicts.size());
        py::array_t<double> md({n}), ss({n}), fused({n});
        py::array_t<bool> flagged({n});
        for (py::ssize_t i = 0; i < n; ++i) {
          const auto& v = batch.verdicts[static_cast<std::size_t>(i)];
          md.mutable_at(i) = v.breakdown.md_z;
          ss.mutable_at(i) = v.breakdown.ss_z;
          fused.mutable_at(i) = v.breakdown.fused;
          flagged.mutable_at(i) = v.is_poisoned;
        }
        py::dict out;
        out["md_z"] = md;
        out["ss_z"] = ss;
        out["fused"] = fused;
        out["is_poisoned"] = flagged;
        return out;
      },
      py::arg("detector_json"), py::arg("features"), "Scores trajectories against a fitted detector.");

  m.def(
      "mahalanobis",
      [](const Eigen::VectorXd& f, const Eigen::VectorXd& centroid, const Eigen::MatrixXd& covariance) {
        LayerStats s;
        s.centroid = centroid;
        Eigen::LLT<Eigen::MatrixXd> llt(covariance);
        if (llt.info() != Eigen::Success) throw dupguard::Error(dupguard::ErrorCode::kNumerical, "covariance is not positive definite");
        s.covariance_factor = llt.matrixL();
        return mahalanobis(f, s);
      },
      py::arg("feature"), py::arg("centroid"), py::arg("covariance"));
  m.def("singular_values", &singular_values, py::arg("matrix"));
  m.def(
      "ss_score", [](const Eigen::MatrixXd& trajectory) { return ss_score(FeatureTrajectory::from_double(trajectory)); },
      py::arg("trajectory"));
  m.def(
      "auc", [](const std::vector<double>& clean, const std::vector<double>& poison) { return auc(clean, poison); },
      py::arg("clean_scores"), py::arg("poison_scores"));
  m.def("derive_seed", &derive_seed, py::arg("seed"), py::arg("name"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"dupguard"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the dupguard tool in-process and returns (exit_code, stdout, stderr).");
}
