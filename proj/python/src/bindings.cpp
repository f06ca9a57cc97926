#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "cli.hpp"
#include "steerlm/analysis.hpp"
#include "steerlm/datasets.hpp"
#include "steerlm/error.hpp"
#include "steerlm/prompting.hpp"
#include "steerlm/reference.hpp"
#include "steerlm/steering.hpp"
#include "steerlm/version.hpp"

namespace py = pybind11;
using namespace steerlm;

namespace {

std::vector<QueryRecord> to_records(const std::vector<std::pair<std::string, std::string>>& items) {
    std::vector<QueryRecord> out;
    for (const auto& [id, prompt] : items) out.push_back({id, prompt, QueryLabel::Harmful, std::nullopt});
    return out;
}

py::dict trace_dict(const GenerationTrace& t) {
    py::dict d;
    d["prompt_token_ids"] = t.prompt_token_ids;
    d["generated_token_ids"] = t.generated_token_ids;
    d["decoded_text"] = py::bytes(t.decoded_text).attr("decode")("utf-8", "replace");
    d["finish_reason"] = to_string(t.finish);
    std::vector<std::vector<double>> dists;
    for (const auto& s : t.per_step_distributions) dists.push_back(s.probs);
    d["distributions"] = dists;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "steerlm engine bindings";
    m.attr("__version__") = kVersion;

    auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    auto load = py::register_exception<LoadError>(m, "LoadError", base.ptr());
    py::register_exception<MissingTensorError>(m, "MissingTensorError", load.ptr());
    py::register_exception<ShapeMismatchError>(m, "ShapeMismatchError", load.ptr());
    py::register_exception<HashMismatchError>(m, "HashMismatchError", load.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<BoundsError>(m, "BoundsError", base.ptr());
    py::register_exception<IncompatibleError>(m, "IncompatibleError", base.ptr());
    py::register_exception<TemplateError>(m, "TemplateError", base.ptr());
    py::register_exception<DataError>(m, "DataError", base.ptr());

    py::class_<Model, std::shared_ptr<Model>>(m, "Model")
        .def_property_readonly("content_hash", &Model::content_hash)
        .def_property_readonly("config", [](const Model& self) { return self.config().to_json().dump(); })
        .def_property_readonly("n_layers", [](const Model& self) { return self.config().n_layers; })
        .def_property_readonly("hidden_dim", [](const Model& self) { return self.config().hidden_dim; })
        .def("encode", [](const Model& self, const std::string& text) { return self.tokenizer().encode(text); })
        .def("decode", [](const Model& self, const std::vector<TokenId>& ids) {
            return py::bytes(self.tokenizer().decode(ids)).attr("decode")("utf-8", "replace");
        });

    m.def("load_model", [](const std::string& path) { return std::const_pointer_cast<Model>(Model::load(path)); },
          py::arg("path"));

    m.def(
        "forward_capture",
        [](const Model& model, const std::vector<TokenId>& ids, const std::vector<int>& layers, int64_t position) {
            if (position < 0) position = static_cast<int64_t>(ids.size()) + position;
            auto r = forward_capture(model, ids, layers, position);
            return py::make_tuple(r.logits, r.record.layers);
        },
        py::arg("model"), py::arg("token_ids"), py::arg("layers"), py::arg("position") = -1);

    py::class_<SteeringVectorSet, std::shared_ptr<SteeringVectorSet>>(m, "SteeringVectorSet")
        .def_readonly("vectors", &SteeringVectorSet::vectors)
        .def_readonly("model_hash", &SteeringVectorSet::model_hash)
        .def_readonly("template_id", &SteeringVectorSet::template_id)
        .def_readonly("dataset_fingerprint", &SteeringVectorSet::dataset_fingerprint)
        .def_readonly("n_examples", &SteeringVectorSet::n_examples)
        .def_property_readonly("n_layers", &SteeringVectorSet::n_layers)
        .def_property_readonly("hidden_dim", &SteeringVectorSet::hidden_dim)
        .def("save", [](const SteeringVectorSet& s, const std::string& path) { save_vectors(s, path); })
        .def("__eq__", [](const SteeringVectorSet& a, const SteeringVectorSet& b) { return a == b; });

    m.def("load_vectors", [](const std::string& path) { return std::make_shared<SteeringVectorSet>(load_vectors(path)); });

    m.def(
        "extract_vectors",
        [](const Model& model, const std::vector<std::pair<std::string, std::string>>& queries, int jobs) {
            ExtractOptions opts;
            opts.jobs = jobs;
            auto recs = to_records(queries);
            py::gil_scoped_release release;
            return std::make_shared<SteeringVectorSet>(
                extract_vectors(model, recs, SafetyTemplate::defaults(), ChatTemplate::defaults(), opts));
        },
        py::arg("model"), py::arg("queries"), py::arg("jobs") = 1,
        "Steering vectors from (id, prompt) pairs using the default templates.");

    m.def(
        "generate",
        [](const Model& model, const std::vector<TokenId>& prompt_ids, double temperature, int max_new_tokens,
           uint64_t seed, std::shared_ptr<SteeringVectorSet> vectors, std::vector<int> layers, double lambda,
           bool record_distributions) {
            GenerationConfig g;
            g.temperature = temperature;
            g.max_new_tokens = max_new_tokens;
            g.seed = seed;
            TraceConfig tc;
            tc.record_distributions = record_distributions;
            GenerationTrace t;
            if (vectors) {
                auto plan = make_plan(vectors, std::set<int>(layers.begin(), layers.end()), lambda);
                t = generate(model, prompt_ids, g, &plan, tc);
            } else {
                t = generate(model, prompt_ids, g, static_cast<const Intervention*>(nullptr), tc);
            }
            return trace_dict(t);
        },
        py::arg("model"), py::arg("prompt_ids"), py::arg("temperature") = 0.0, py::arg("max_new_tokens") = 32,
        py::arg("seed") = 0, py::arg("vectors") = nullptr, py::arg("layers") = std::vector<int>{},
        py::arg("lam") = 0.0, py::arg("record_distributions") = false);

    m.def("wrap_safety", [](const std::string& query, const std::string& base_system) {
        auto p = wrap_safety(query, SafetyTemplate::defaults(), ChatTemplate::defaults(), base_system);
        py::dict d;
        d["original"] = p.original_rendered;
        d["safety"] = p.safety_rendered;
        d["template_id"] = p.template_id;
        return d;
    }, py::arg("query"), py::arg("base_system") = "");

    m.def("split_response", [](const std::string& text) {
        auto s = split_response(text);
        return py::make_tuple(s.reasoning, s.answer, s.has_split);
    });
    m.def("detect_awareness", [](const std::string& text) { return detect_awareness(text, WordLists::defaults()).aware; });
    m.def("detect_refusal", [](const std::string& text) { return detect_refusal(text, WordLists::defaults()); });
    m.def("compute_gap", [](const std::vector<std::pair<std::string, std::string>>& responses) {
        std::vector<Response> rs;
        for (const auto& [id, text] : responses) rs.push_back({id, split_response(text)});
        auto g = compute_gap(rs, WordLists::defaults());
        py::dict d;
        d["n"] = g.n;
        d["p_aware"] = g.p_aware;
        d["p_compliance"] = g.p_compliance;
        d["gap"] = g.gap;
        return d;
    });

    m.def(
        "split_corpus",
        [](const std::vector<std::pair<std::string, std::string>>& items, size_t n_ex, size_t n_val, uint64_t seed) {
            auto s = split_corpus(to_records(items), n_ex, n_val, seed);
            std::vector<std::string> a, b;
            for (const auto& r : s.extraction) a.push_back(r.id);
            for (const auto& r : s.validation) b.push_back(r.id);
            return py::make_tuple(a, b, s.fingerprint);
        });

    m.def("reference_deviation", [](const Model& model, const std::string& pack_dir) {
        auto devs = compare_with_reference(model, ReferencePack::load(pack_dir));
        std::vector<py::tuple> out;
        for (const auto& d : devs) out.push_back(py::make_tuple(d.prompt, d.max_logit_error, d.max_hidden_error));
        return out;
    });

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = cli::run(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        "Runs a steerlm command line in-process; returns (exit_code, stdout, stderr).");
}
