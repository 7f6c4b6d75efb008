// Python bindings. Configs and reports cross the boundary as JSON text; the
// package's __init__ turns them into dicts.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "glassbox/checkpoint.hpp"
#include "glassbox/config.hpp"
#include "glassbox/eval.hpp"
#include "glassbox/introspect.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace glassbox;

namespace {

RunConfig parse_config(const std::string& text) {
  return run_config_from_json(text.empty() ? json::object() : json::parse(text));
}

Vocabulary vocab_of(const RunConfig& cfg) { return Vocabulary(cfg.datagen.attribute_names); }

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  auto view = out.mutable_unchecked<2>();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) view(r, c) = m(r, c);
  }
  return out;
}

py::dict mass_dict(const SegmentMass& m) {
  py::dict d;
  d["visual"] = m.visual;
  d["prompt"] = m.prompt;
  d["description"] = m.description;
  return d;
}

struct Corpus {
  RunConfig config;
  CorpusSplit split;
};

}  // namespace

PYBIND11_MODULE(_glassbox, m) {
  m.doc() = "glassbox native core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("_resolve_config", [](const std::string& text) { return run_config_to_json(parse_config(text)).dump(); });
  m.def("_load_config", [](const std::string& path) { return run_config_to_json(load_run_config(path)).dump(); });

  py::class_<SyntheticInstance>(m, "Instance")
      .def_readonly("id", &SyntheticInstance::id)
      .def_readonly("attributes", &SyntheticInstance::attributes)
      .def_readonly("description", &SyntheticInstance::description)
      .def_readonly("quality_level", &SyntheticInstance::quality_level)
      .def_readonly("mos", &SyntheticInstance::mos)
      .def_property_readonly("visual_features", [](const SyntheticInstance& s) { return s.visual_features; })
      .def("__repr__", [](const SyntheticInstance& s) {
        return "<Instance id=" + std::to_string(s.id) + " quality=" + std::to_string(s.quality_level) + ">";
      });

  py::class_<Corpus>(m, "Corpus")
      .def_property_readonly("train", [](const Corpus& c) { return c.split.train; })
      .def_property_readonly("test", [](const Corpus& c) { return c.split.test; })
      .def_property_readonly("token_names", [](const Corpus& c) { return vocab_of(c.config).names(); })
      .def("__repr__", [](const Corpus& c) {
        return "<Corpus train=" + std::to_string(c.split.train.size()) +
               " test=" + std::to_string(c.split.test.size()) + ">";
      });

  m.def("_generate_corpus", [](const std::string& cfg_text) {
    Corpus c;
    c.config = parse_config(cfg_text);
    const auto vocab = vocab_of(c.config);
    c.split = generate_split(c.config.datagen, vocab);
    return c;
  });

  m.def("_build_corpus", [](const std::string& cfg_text, const std::filesystem::path& out) {
    const auto cfg = parse_config(cfg_text);
    const auto manifest = build_corpus(cfg.datagen, out);
    return py::make_tuple(manifest.total, manifest.train, manifest.test);
  });

  py::class_<Checkpoint>(m, "Model")
      .def_readonly("tag", &Checkpoint::tag)
      .def_property_readonly("n_layers", [](const Checkpoint& c) { return c.model.config.n_layers; })
      .def_property_readonly("n_heads", [](const Checkpoint& c) { return c.model.config.n_heads; })
      .def_property_readonly("d_model", [](const Checkpoint& c) { return c.model.config.d_model; })
      .def_property_readonly("parameter_count", [](const Checkpoint& c) { return c.model.params.parameter_count(); })
      .def("save", [](const Checkpoint& c, const std::filesystem::path& path) {
        write_checkpoint_file(path, c.model, c.tag);
      })
      .def_static("load", [](const std::filesystem::path& path) { return read_checkpoint_file(path); })
      .def("__eq__", [](const Checkpoint& a, const Checkpoint& b) { return a.model == b.model && a.tag == b.tag; })
      .def("__repr__", [](const Checkpoint& c) {
        return "<Model " + c.tag + " d_model=" + std::to_string(c.model.config.d_model) +
               " layers=" + std::to_string(c.model.config.n_layers) + ">";
      });

  m.def("_train", [](const std::string& cfg_text, const std::string& regimen, const Corpus& corpus) {
    RunConfig cfg = parse_config(cfg_text);
    cfg.schedule.regimen = parse_regimen(regimen);
    const auto vocab = vocab_of(corpus.config);
    TrainingData data;
    for (const auto& inst : corpus.split.train) {
      if (cfg.schedule.regimen == Regimen::one_stage) {
        data.one_stage.push_back(render_one_stage(inst, vocab));
      } else {
        auto [s1, s2] = render_two_stage(inst, vocab);
        data.stage1.push_back(std::move(s1));
        data.stage2.push_back(std::move(s2));
      }
    }
    TrainResult result;
    {
      py::gil_scoped_release release;
      result = train(data, cfg.schedule, cfg.loss, cfg.optimizer, cfg.model);
    }
    std::vector<std::pair<std::size_t, double>> curve;
    for (const auto& p : result.curve) curve.emplace_back(p.iter, p.loss);
    return py::make_tuple(Checkpoint{std::move(result.model), std::string(regimen_name(cfg.schedule.regimen))},
                          curve);
  });

  m.def("_evaluate", [](const Checkpoint& model, const std::vector<SyntheticInstance>& samples,
                        const std::string& cfg_text, const std::string& mode) {
    const auto cfg = parse_config(cfg_text);
    const auto vocab = vocab_of(cfg);
    const PredictMode pm = mode == "one_stage" ? PredictMode::one_stage
                           : mode == "two_stage" || mode == "two_stage_pipeline"
                               ? PredictMode::two_stage_pipeline
                               : throw std::invalid_argument("unknown mode '" + mode + "'");
    EvalReport rep;
    {
      py::gil_scoped_release release;
      rep = evaluate(model.model, samples, cfg.plan, pm, vocab, model.tag);
    }
    return report_to_json(rep, vocab).dump();
  });

  m.def(
      "_logit_lens",
      [](const Checkpoint& model, const SyntheticInstance& inst, const std::string& regimen,
         std::optional<std::size_t> position, const std::string& layers, std::size_t k) {
        const auto input = probe_sequence(inst, parse_regimen(regimen));
        const auto trace = forward(model.model, input);
        const auto range = parse_layer_range(layers, model.model.config);
        const std::size_t pos = position.value_or(input.quality_position.value_or(input.size() - 1));
        const auto lens = logit_lens(model.model, trace, pos, range, k);
        const Vocabulary vocab(DatagenConfig{}.attribute_names);
        py::list out;
        for (const auto& layer : lens.layers) {
          py::list top;
          for (const auto& c : layer.top) {
            const std::string name = c.token < vocab.size() ? vocab.name(c.token) : std::to_string(c.token);
            top.append(py::make_tuple(name, c.probability));
          }
          out.append(py::make_tuple(layer.layer, top));
        }
        return out;
      },
      py::arg("model"), py::arg("instance"), py::arg("regimen"), py::arg("position") = py::none(),
      py::arg("layers") = "auto", py::arg("k") = 4);

  m.def(
      "_attention_map",
      [](const Checkpoint& model, const std::vector<SyntheticInstance>& samples, const std::string& regimen) {
        AttentionMap map;
        {
          py::gil_scoped_release release;
          map = average_attention_map(model.model, samples, parse_regimen(regimen));
        }
        py::dict d;
        d["mean"] = to_numpy(map.mean);
        d["samples"] = map.samples;
        d["quality_position"] = map.quality_position;
        d["quality_mass"] = mass_dict(map.quality_mass);
        return d;
      },
      py::arg("model"), py::arg("samples"), py::arg("regimen"));

  m.def("default_probe_range", [](std::size_t n_layers) {
    ModelConfig c;
    c.n_layers = n_layers;
    const auto r = default_probe_range(c);
    return py::make_tuple(r.first, r.last);
  });

  m.def("srcc", [](const std::vector<double>& a, const std::vector<double>& b) { return srcc(a, b); });
  m.def("plcc", [](const std::vector<double>& a, const std::vector<double>& b) { return plcc(a, b); });
  m.def("average_ranks", [](const std::vector<double>& x) { return average_ranks(x); });
  m.def("label_smoothing_nll", [](const std::vector<double>& p, std::size_t target, double epsilon) {
    return label_smoothing_nll(p, target, epsilon);
  });
}
