#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "roidiff/evalmetrics.hpp"
#include "roidiff/features.hpp"
#include "roidiff/sampler.hpp"
#include "roidiff/schedule.hpp"
#include "roidiff/synthetic.hpp"
#include "roidiff/trainer.hpp"

namespace py = pybind11;
using namespace roidiff;

namespace {

Tensor tensor_from(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  std::vector<long> shape(a.ndim());
  for (int i = 0; i < a.ndim(); ++i) shape[i] = static_cast<long>(a.shape(i));
  Tensor t(shape);
  std::memcpy(t.data(), a.data(), sizeof(float) * t.numel());
  return t;
}

py::array_t<float> array_from(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::memcpy(a.mutable_data(), t.data(), sizeof(float) * t.numel());
  return a;
}

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "metadata-conditioned diffusion pretraining for ROI x time signals";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<CheckpointError>(m, "CheckpointError");

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("steps", &NoiseSchedule::steps)
      .def_readonly("alpha_bar", &NoiseSchedule::alpha_bar)
      .def_readonly("alpha", &NoiseSchedule::alpha)
      .def_readonly("sigma", &NoiseSchedule::sigma);

  m.def("cosine_schedule", &cosine_schedule, py::arg("steps"));

  m.def(
      "forward_noise",
      [](const FloatArray& x0, int t, const FloatArray& eps, const NoiseSchedule& s) {
        return array_from(forward_noise(tensor_from(x0), t, tensor_from(eps), s).x_t);
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("sched"));
  m.def(
      "v_target",
      [](const FloatArray& x0, const FloatArray& eps, int t, const NoiseSchedule& s) {
        return array_from(v_target(tensor_from(x0), tensor_from(eps), t, s));
      },
      py::arg("x0"), py::arg("eps"), py::arg("t"), py::arg("sched"));
  m.def(
      "recover_x0_eps",
      [](const FloatArray& x_t, const FloatArray& v, int t, const NoiseSchedule& s) {
        auto [x0, eps] = recover_x0_eps(tensor_from(x_t), tensor_from(v), t, s);
        return py::make_tuple(array_from(x0), array_from(eps));
      },
      py::arg("x_t"), py::arg("v"), py::arg("t"), py::arg("sched"));
  m.def(
      "diffusion_loss",
      [](const FloatArray& a, const FloatArray& b) {
        return diffusion_loss(tensor_from(a), tensor_from(b));
      },
      py::arg("v_hat"), py::arg("v"));

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_rois", &ModelConfig::n_rois)
      .def_readwrite("n_timepoints", &ModelConfig::n_timepoints)
      .def_readwrite("patch", &ModelConfig::patch)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("cond_dim", &ModelConfig::cond_dim)
      .def_readwrite("p_drop", &ModelConfig::p_drop)
      .def_readwrite("steps", &ModelConfig::steps)
      .def_readwrite("n_diagnoses", &ModelConfig::n_diagnoses)
      .def_readwrite("freq_dim", &ModelConfig::freq_dim)
      .def_property_readonly("tokens", &ModelConfig::tokens);

  py::class_<MetadataRecord>(m, "MetadataRecord")
      .def(py::init<>())
      .def_readwrite("age", &MetadataRecord::age)
      .def_readwrite("sex", &MetadataRecord::sex)
      .def_readwrite("diagnosis", &MetadataRecord::diagnosis)
      .def("fully_missing", &MetadataRecord::fully_missing);

  py::class_<DitModel>(m, "DitModel")
      .def(py::init<ModelConfig, uint64_t>(), py::arg("config"), py::arg("init_seed"))
      .def_property_readonly("config", &DitModel::config)
      .def("n_params", [](const DitModel& mdl) { return mdl.params().size(); })
      .def(
          "forward",
          [](const DitModel& mdl, const FloatArray& x_t, const std::vector<int>& t,
             const std::vector<std::optional<MetadataRecord>>& cond) {
            std::vector<MetadataRecord> recs;
            recs.reserve(cond.size());
            std::vector<const MetadataRecord*> ptrs;
            for (const auto& c : cond) {
              if (c) {
                recs.push_back(*c);
              }
            }
            size_t k = 0;
            for (const auto& c : cond) ptrs.push_back(c ? &recs[k++] : nullptr);
            return array_from(mdl.forward(tensor_from(x_t), t, ptrs, {}, nullptr));
          },
          py::arg("x_t"), py::arg("t"), py::arg("cond"))
      .def(
          "timestep_embed",
          [](const DitModel& mdl, int t) { return array_from(mdl.timestep_embed(t)); },
          py::arg("t"))
      .def(
          "metadata_encode",
          [](const DitModel& mdl, const MetadataRecord& rec) {
            return array_from(mdl.metadata_encode(rec));
          },
          py::arg("record"))
      .def("randomize_all", &DitModel::randomize_all, py::arg("seed"), py::arg("scale"));

  m.def(
      "sample",
      [](const DitModel& mdl, const NoiseSchedule& sched, int batch,
         const std::vector<std::optional<MetadataRecord>>& cond, int n_steps, float guidance,
         uint64_t seed) {
        std::vector<MetadataRecord> recs;
        std::vector<const MetadataRecord*> ptrs;
        for (const auto& c : cond)
          if (c) recs.push_back(*c);
        size_t k = 0;
        for (const auto& c : cond) ptrs.push_back(c ? &recs[k++] : nullptr);
        SampleOptions opt;
        opt.n_steps = n_steps;
        opt.guidance = guidance;
        opt.seed = seed;
        return array_from(sample(mdl, sched, batch, ptrs, opt));
      },
      py::arg("model"), py::arg("sched"), py::arg("batch"),
      py::arg("cond") = std::vector<std::optional<MetadataRecord>>{}, py::arg("n_steps") = 0,
      py::arg("guidance") = 1.0f, py::arg("seed") = 0);

  m.def("save_checkpoint",
        [](const DitModel& mdl, const std::string& path) { save_checkpoint(mdl, path); });
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); });

  m.def(
      "fc",
      [](const FloatArray& x) { return array_from(fc_matrix(tensor_from(x))); },
      py::arg("x"));
  m.def(
      "group_fc",
      [](const std::vector<FloatArray>& xs) {
        std::vector<Tensor> sessions;
        for (const auto& x : xs) sessions.push_back(tensor_from(x));
        return array_from(group_fc(sessions));
      },
      py::arg("sessions"));
  m.def(
      "fc_error",
      [](const FloatArray& a, const FloatArray& b) {
        FcError e = fc_error(tensor_from(a), tensor_from(b));
        return py::make_tuple(e.mae, e.rmse, e.mse);
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "linear_probe",
      [](const FloatArray& feats, const std::vector<float>& labels, const std::string& kind,
         int folds, uint64_t seed) {
        TaskKind k = kind == "regression" ? TaskKind::Regression : TaskKind::Classification;
        ProbeResult r = linear_probe(tensor_from(feats), labels, k, folds, seed);
        py::dict d;
        d["folds"] = r.folds;
        d["fold_primary"] = r.fold_primary;
        if (k == TaskKind::Classification) {
          d["accuracy_mean"] = r.accuracy_mean;
          d["accuracy_std"] = r.accuracy_std;
        } else {
          d["mse_mean"] = r.mse_mean;
          d["r_mean"] = r.r_mean;
        }
        return d;
      },
      py::arg("features"), py::arg("labels"), py::arg("kind") = "classification",
      py::arg("folds") = 5, py::arg("seed") = 0);

  m.def(
      "generate_corpus_dir",
      [](const std::string& out_dir, int n_rois, int session_length, int window,
         int n_networks, int n_sessions, uint64_t seed) {
        GeneratorConfig cfg;
        cfg.n_rois = n_rois;
        cfg.session_length = session_length;
        cfg.window = window;
        cfg.n_networks = n_networks;
        cfg.n_sessions = n_sessions;
        cfg.seed = seed;
        Corpus corpus = generate_corpus(cfg);
        return write_corpus(corpus, out_dir).string();
      },
      py::arg("out_dir"), py::arg("n_rois") = 64, py::arg("session_length") = 200,
      py::arg("window") = 40, py::arg("n_networks") = 4, py::arg("n_sessions") = 100,
      py::arg("seed") = 1);

  m.attr("__version__") = "0.1.0";
}
