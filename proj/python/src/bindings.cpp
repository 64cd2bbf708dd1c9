#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "prinv/cli.hpp"
#include "prinv/error.hpp"
#include "prinv/pipeline.hpp"

namespace py = pybind11;
using namespace prinv;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

PointCloud cloud_from(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw py::value_error("expected an [N, 3] array of points");
  PointCloud c;
  const auto v = a.unchecked<2>();
  c.points.resize(a.shape(0));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) c.points[i] = {v(i, 0), v(i, 1), v(i, 2)};
  return c;
}

std::vector<PointCloud> batch_from(const Array& a) {
  if (a.ndim() == 2) return {cloud_from(a)};
  if (a.ndim() != 3 || a.shape(2) != 3) throw py::value_error("expected [B, N, 3] or [N, 3] points");
  std::vector<PointCloud> out(a.shape(0));
  const auto v = a.unchecked<3>();
  for (py::ssize_t b = 0; b < a.shape(0); ++b) {
    out[b].points.resize(a.shape(1));
    for (py::ssize_t i = 0; i < a.shape(1); ++i) out[b].points[i] = {v(b, i, 0), v(b, i, 1), v(b, i, 2)};
  }
  return out;
}

Array points_array(const std::vector<Vec3>& pts) {
  Array out({py::ssize_t(pts.size()), py::ssize_t(3)});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (int j = 0; j < 3; ++j) w(i, j) = pts[i][j];
  }
  return out;
}

Array matrix_array(const Mat3& m) {
  Array out({3, 3});
  std::copy(m.m.begin(), m.m.end(), out.mutable_data());
  return out;
}

Array matrices_array(const std::vector<Mat3>& ms) {
  Array out({py::ssize_t(ms.size()), py::ssize_t(3), py::ssize_t(3)});
  double* d = out.mutable_data();
  for (const auto& m : ms) d = std::copy(m.m.begin(), m.m.end(), d);
  return out;
}

py::array_t<float> tensor_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::string value_text(const py::handle& v) {
  if (py::isinstance<py::bool_>(v)) return v.cast<bool>() ? "true" : "false";
  if (py::isinstance<py::str>(v)) return v.cast<std::string>();
  if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + value_text(x);
    return s.empty() ? "none" : s;
  }
  return py::str(v).cast<std::string>();
}

KeyValues items_from(const py::dict& d) {
  KeyValues items;
  for (const auto& [k, v] : d) items.emplace_back(k.cast<std::string>(), value_text(v));
  return items;
}

py::dict items_dict(const KeyValues& items) {
  py::dict d;
  for (const auto& [k, v] : items) d[py::str(k)] = v;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Rotation-invariant point cloud network";

  // Translators are tried newest first, so the base class goes in first.
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<NumericalError>(m, "NumericalError", base.ptr());

  m.def(
      "geo_features",
      [](const Array& points, std::vector<std::size_t> scales, std::size_t samples) {
        GeoFeatureConfig cfg{std::move(scales), samples};
        const PointCloud c = cloud_from(points);
        const std::size_t w = geo_feature_width(cfg);
        const auto g = geo_features(c, cfg);
        Array out({py::ssize_t(c.size()), py::ssize_t(w)});
        std::copy(g.begin(), g.end(), out.mutable_data());
        return out;
      },
      py::arg("points"), py::arg("scales") = std::vector<std::size_t>{8, 16, 32},
      py::arg("samples") = kGeoSamples);

  m.def(
      "pca_normalize",
      [](const Array& points) {
        const PcaResult r = pca_normalize(cloud_from(points));
        py::dict d;
        d["normalized"] = points_array(r.normalized.points);
        d["basis"] = matrix_array(r.basis);
        d["eigenvalues"] = std::vector<double>(r.eigenvalues.begin(), r.eigenvalues.end());
        d["relative_gap"] = r.relative_gap;
        d["degenerate"] = r.degenerate;
        return d;
      },
      py::arg("points"));

  m.def(
      "rotation_group",
      [](const std::string& name) { return matrices_array(build_rotation_set(parse_rotation_group(name)).matrices); },
      py::arg("name"), "Matrices of I_R, A4, S4 or A5.");
  m.def(
      "pose_transforms",
      [](const std::string& name) {
        return matrices_array(pose_transforms(build_rotation_set(parse_rotation_group(name))));
      },
      py::arg("name"), "Distinct sign x group products.");
  m.def(
      "random_rotation",
      [](const std::string& mode, std::uint64_t seed) {
        Rng rng(seed);
        return matrix_array(random_rotation(parse_rotation_mode(mode), rng));
      },
      py::arg("mode") = "SO3", py::arg("seed") = 0);

  m.def(
      "synth_dataset",
      [](std::uint64_t seed, std::size_t n_per_class, std::size_t points) {
        SynthOptions o;
        o.n_per_class = n_per_class;
        o.points = points;
        const Dataset d = synth_dataset(seed, o);
        Array pts({py::ssize_t(d.size()), py::ssize_t(points), py::ssize_t(3)});
        py::array_t<int> labels(std::vector<py::ssize_t>{py::ssize_t(d.size())});
        py::array_t<int> parts({py::ssize_t(d.size()), py::ssize_t(points)});
        double* p = pts.mutable_data();
        int* pl = parts.mutable_data();
        std::vector<std::string> splits;
        for (std::size_t i = 0; i < d.size(); ++i) {
          for (const auto& v : d.clouds[i].points) p = std::copy(v.begin(), v.end(), p);
          pl = std::copy(d.clouds[i].labels.begin(), d.clouds[i].labels.end(), pl);
          labels.mutable_data()[i] = d.clouds[i].label;
          splits.push_back(to_string(d.splits[i]));
        }
        py::dict out;
        out["points"] = pts;
        out["labels"] = labels;
        out["part_labels"] = parts;
        out["splits"] = splits;
        out["class_names"] = d.class_names;
        return out;
      },
      py::arg("seed") = 1, py::arg("n_per_class") = 25, py::arg("points") = kDefaultPointCount);

  m.def(
      "load_cloud",
      [](const std::filesystem::path& path, std::size_t points, std::uint64_t seed) {
        Rng rng(seed);
        const PointCloud c = load_cloud(path, points, rng);
        return py::make_tuple(points_array(c.points),
                              c.labels.empty() ? py::object(py::none()) : py::cast(c.labels));
      },
      py::arg("path"), py::arg("points") = kDefaultPointCount, py::arg("seed") = 0,
      "Reads .xyz, or samples an .off mesh; returns (points, labels or None).");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release nogil;
          code = run_cli(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the prinv tool in-process; returns (exit code, stdout, stderr).");

  py::class_<Model>(m, "Model")
      .def(py::init([](const py::dict& config) { return Model(ModelConfig::from_items(items_from(config))); }),
           py::arg("config") = py::dict())
      .def_static(
          "load", [](const std::filesystem::path& p) { return Model::from_checkpoint(read_checkpoint(p)); },
          py::arg("path"))
      .def(
          "save", [](const Model& self, const std::filesystem::path& p) { write_checkpoint(p, self.to_checkpoint()); },
          py::arg("path"))
      .def_property_readonly("config", [](const Model& self) { return items_dict(self.config().items()); })
      .def_property_readonly("num_params",
                             [](const Model& self) { return self.params().learnable_count(); })
      .def(
          "forward",
          [](const Model& self, const Array& points, bool break_selector) {
            const auto batch = batch_from(points);
            Tensor logits;
            {
              py::gil_scoped_release nogil;
              NoGradScope untaped;
              ForwardOptions fo;
              fo.break_selector = break_selector;
              logits = self.forward(batch, fo);
            }
            return tensor_array(logits);
          },
          py::arg("points"), py::arg("break_selector") = false,
          "Eval-mode logits for [B, N, 3] (or a single [N, 3]) points.")
      .def(
          "extractor_passes",
          [](const Model& self, const Array& points) {
            const auto batch = batch_from(points);
            BlockStats stats;
            NoGradScope untaped;
            ForwardOptions fo;
            fo.stats = &stats;
            self.forward(batch, fo);
            return stats.extractor_calls;
          },
          py::arg("points"))
      .def(
          "verify_invariance",
          [](const Model& self, const Array& points, std::size_t rotations, double tolerance,
             std::uint64_t seed, bool break_selector) {
            InvarianceOptions o;
            o.rotations = rotations;
            o.tolerance = tolerance;
            o.seed = seed;
            o.break_selector = break_selector;
            const auto batch = batch_from(points);
            InvarianceReport r;
            {
              py::gil_scoped_release nogil;
              r = verify_invariance(self, batch, o);
            }
            py::dict worst;
            for (const auto& [name, v] : r.worst) worst[py::str(name)] = v;
            py::dict out;
            out["passed"] = r.passed();
            out["checked"] = r.checked;
            out["skipped"] = r.skipped;
            out["worst"] = worst;
            return out;
          },
          py::arg("points"), py::arg("rotations") = 20, py::arg("tolerance") = 1e-4,
          py::arg("seed") = 0, py::arg("break_selector") = false);

  m.def(
      "train",
      [](const py::dict& config) {
        const RunConfig rc = RunConfig::from_items(items_from(config));
        std::optional<TrainResult> r;
        {
          py::gil_scoped_release nogil;
          const Dataset d = load_dataset(rc.data);
          r = train(rc, d);
        }
        py::list epochs;
        for (const auto& e : r->epochs) {
          py::dict row;
          row["epoch"] = e.epoch;
          row["train_loss"] = e.train_loss;
          row["train_accuracy"] = e.train_accuracy;
          row["val_accuracy"] = e.val_accuracy;
          row["lr"] = e.lr;
          epochs.append(row);
        }
        return py::make_tuple(std::move(r->final_model), epochs);
      },
      py::arg("config"), "Trains from run-config keys; returns (final model, per-epoch records).");
}
