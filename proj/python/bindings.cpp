#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "attnsteer/pipeline.hpp"

namespace py = pybind11;
using namespace attnsteer;

namespace {

// json <-> python through the json module keeps the binding small.
py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }
json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

LabeledEmbeddings labeled(const MatrixD& X, const VectorD& y, int block) {
  LabeledEmbeddings d;
  d.X = X;
  d.y = y;
  d.block = block;
  return d;
}

py::dict vector_dict(const ConceptVector& cv) {
  py::dict d;
  d["direction"] = cv.direction;
  d["block"] = cv.block;
  d["method"] = cv.method;
  d["orientation"] = cv.orientation;
  d["pearson"] = cv.pearson;
  d["hyperparams"] = to_py(cv.hyperparams);
  return d;
}

}  // namespace

PYBIND11_MODULE(_attnsteer, m) {
  m.doc() = "attention-guided concept vectors and steering";

  static py::exception<Error> error(m, "Error", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, py::str(e.what()));
    }
  });

  py::class_<Vocab>(m, "Vocab")
      .def("__len__", &Vocab::size)
      .def("id", &Vocab::id)
      .def("token", &Vocab::token)
      .def("hash", &Vocab::hash);
  m.def("tokenize", [](const std::string& text, const Vocab& v) { return tokenize(text, v); });
  m.def("detokenize", [](const std::vector<TokenId>& ids, const Vocab& v) { return detokenize(ids, v); });

  py::class_<RenderedPrompt>(m, "RenderedPrompt")
      .def_readonly("token_ids", &RenderedPrompt::token_ids)
      .def_readonly("prefix_begin", &RenderedPrompt::prefix_begin)
      .def_readonly("prefix_end", &RenderedPrompt::prefix_end)
      .def("position", [](const RenderedPrompt& p, const std::string& marker) {
        return p.position(marker_from_name(marker));
      });
  m.def("render_prompt", [](const std::string& prefix, const std::string& body, const Vocab& v) {
    return render_prompt(tokenize(prefix, v), tokenize(body, v), v);
  });

  py::class_<SuiteConcept>(m, "SuiteConcept")
      .def_property_readonly("concept_id", [](const SuiteConcept& c) { return c.spec.concept_id; })
      .def_property_readonly("concept_class", [](const SuiteConcept& c) { return c.spec.concept_class; })
      .def_property_readonly("signal_tokens", [](const SuiteConcept& c) { return c.spec.signal_tokens; })
      .def_readonly("prefix_text", &SuiteConcept::prefix_text)
      .def_readonly("probe_questions", &SuiteConcept::probe_questions)
      .def_readonly("judge_threshold", &SuiteConcept::judge_threshold);
  py::class_<SyntheticSuite>(m, "SyntheticSuite")
      .def_readonly("vocab", &SyntheticSuite::vocab)
      .def_readonly("concepts", &SyntheticSuite::concepts)
      .def_readonly("statements", &SyntheticSuite::statements)
      .def_readonly("question_template", &SyntheticSuite::question_template);
  m.def("default_suite", [] { return make_default_suite(); });

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("n_blocks", &ModelConfig::n_blocks)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("max_context", &ModelConfig::max_context)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate);
  py::class_<ModelParams>(m, "ModelParams")
      .def_static("initialize", &ModelParams::initialize)
      .def("parameter_count", &ModelParams::parameter_count);
  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("config", &Checkpoint::config)
      .def_readonly("params", &Checkpoint::params);
  m.def("load_checkpoint", [](const std::string& path) { return load_checkpoint(path); });

  py::class_<ForwardTrace>(m, "ForwardTrace")
      .def("hidden", [](const ForwardTrace& t, int block) { return MatrixF(t.hidden_at(block)); })
      .def("attention", [](const ForwardTrace& t, int block, int head) { return MatrixF(t.attention_at(block, head)); })
      .def_property_readonly("n_blocks", &ForwardTrace::n_blocks)
      .def_property_readonly("n_heads", &ForwardTrace::n_heads);

  m.def(
      "forward",
      [](const std::vector<TokenId>& tokens, const ModelParams& p, const ModelConfig& c) {
        auto r = forward(tokens, p, c);
        return py::make_tuple(r.logits, std::move(r.trace));
      },
      py::arg("tokens"), py::arg("params"), py::arg("config"));
  m.def(
      "generate",
      [](const std::vector<TokenId>& tokens, const ModelParams& p, const ModelConfig& c,
         const std::map<int, VectorF>& vectors, float coefficient, int max_new) {
        SteeringSpec spec;
        spec.vectors = vectors;
        spec.coefficient = coefficient;
        DecodeOptions d;
        d.max_new = max_new;
        return generate(tokens, p, c, vectors.empty() ? nullptr : &spec, d);
      },
      py::arg("tokens"), py::arg("params"), py::arg("config"), py::arg("vectors") = std::map<int, VectorF>{},
      py::arg("coefficient") = 0.0f, py::arg("max_new") = 16);

  m.def("attention_to_prefix", [](const ForwardTrace& t, int block, int position, int begin, int end) {
    return attention_to_prefix(t, block, position, begin, end);
  });

  m.def("diff_in_means", [](const MatrixD& X, const VectorD& y) { return vector_dict(diff_in_means(labeled(X, y, 1))); });
  m.def("pca_pairs", [](const MatrixD& X, const VectorD& y, std::uint64_t seed) {
    return vector_dict(pca_pairs(labeled(X, y, 1), seed));
  });
  m.def("ridge_regression", [](const MatrixD& X, const VectorD& y) {
    return vector_dict(ridge_regression(labeled(X, y, 1)));
  });
  m.def("logistic_regression", [](const MatrixD& X, const VectorD& y) {
    return vector_dict(logistic_regression(labeled(X, y, 1)));
  });
  m.def(
      "rfm",
      [](const MatrixD& X, const VectorD& y, double bandwidth, double ridge, int iterations) {
        RfmOptions o;
        o.bandwidth = bandwidth;
        o.ridge = ridge;
        o.iterations = iterations;
        auto [cv, st] = rfm(labeled(X, y, 1), o);
        py::dict d = vector_dict(cv);
        d["M"] = st.M;
        return d;
      },
      py::arg("X"), py::arg("y"), py::arg("bandwidth") = 10.0, py::arg("ridge") = 1e-3, py::arg("iterations") = 5);
  m.def("laplace_kernel", &laplace_kernel);
  m.def("top_eigenvector", [](const MatrixD& S) {
    const auto e = top_eigenvector(S);
    return py::make_tuple(e.value, e.vector, e.residual);
  });

  m.def(
      "permutation_test",
      [](const std::vector<float>& row, int position, int begin, int end, int n_permutations, std::uint64_t seed) {
        PermutationTestConfig c;
        c.n_permutations = n_permutations;
        const auto r = permutation_test(row, position, begin, end, c, seed);
        return py::make_tuple(r.p_value, r.observed, r.exact);
      },
      py::arg("row"), py::arg("position"), py::arg("prefix_begin"), py::arg("prefix_end"),
      py::arg("n_permutations") = 500, py::arg("seed") = 0);
  m.def("rank_blocks", [](const std::vector<double>& scores, int k, bool top) {
    return rank_blocks(scores, k, top ? RankDirection::Top : RankDirection::Bottom);
  });

  m.def("keyword_judge", [](const std::vector<TokenId>& response, const std::vector<TokenId>& signal, double threshold) {
    KeywordRubric r;
    r.signal_tokens.insert(signal.begin(), signal.end());
    r.threshold = threshold;
    return keyword_judge(response, r);
  });
  m.def("steering_score", [](const std::vector<double>& coefs, const std::vector<std::vector<int>>& verdicts) {
    return steering_score("", "", "", coefs, verdicts).score;
  });

  m.def("default_config", [] { return to_py(ExperimentConfig::defaults().to_json()); });
  m.def("config_hash", [](const py::object& cfg) { return ExperimentConfig::from_json(from_py(cfg)).hash(); });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](const py::object& cfg) { return std::make_unique<Pipeline>(ExperimentConfig::from_json(from_py(cfg))); }))
      .def_property_readonly("run_dir", [](const Pipeline& p) { return p.run_dir().string(); })
      .def("concept_ids", &Pipeline::concept_ids)
      .def("train", &Pipeline::train, py::call_guard<py::gil_scoped_release>())
      .def("enrich", &Pipeline::enrich, py::call_guard<py::gil_scoped_release>())
      .def("extract", [](Pipeline& p, const std::string& name) {
        const MethodConfig m = name.empty() ? p.config().method : p.config().method_named(name);
        py::gil_scoped_release r;
        p.extract(m);
      }, py::arg("method") = "")
      .def("steer", [](Pipeline& p, const std::string& name) {
        const MethodConfig m = name.empty() ? p.config().method : p.config().method_named(name);
        py::gil_scoped_release r;
        p.steer(m);
      }, py::arg("method") = "")
      .def("eval", [](Pipeline& p, const std::string& name) {
        const MethodConfig m = name.empty() ? p.config().method : p.config().method_named(name);
        std::vector<SteeringScore> s;
        {
          py::gil_scoped_release r;
          s = p.eval(m);
        }
        py::dict out;
        for (const auto& x : s) out[py::str(x.concept_id)] = x.score;
        return out;
      }, py::arg("method") = "")
      .def("sweep", &Pipeline::sweep, py::call_guard<py::gil_scoped_release>())
      .def("report", [](const Pipeline& p) { return to_py(p.report()); })
      .def("verify_manifest", &Pipeline::verify_manifest);
}
