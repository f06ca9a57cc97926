#include "steerlm/vectors.hpp"

#include <cmath>

#include "binio.hpp"
#include "steerlm/error.hpp"

namespace steerlm {

void SteeringVectorSet::validate() const {
    if (vectors.empty()) throw ConfigError("steering vectors: no layers");
    const size_t h = vectors.front().size();
    if (h == 0) throw ConfigError("steering vectors: zero hidden size");
    for (size_t l = 0; l < vectors.size(); ++l) {
        if (vectors[l].size() != h) {
            throw ConfigError("steering vectors: layer " + std::to_string(l) + " has " + std::to_string(vectors[l].size()) +
                              " values, expected " + std::to_string(h));
        }
    }
}

std::string encode_vectors(const SteeringVectorSet& set) {
    set.validate();
    nlohmann::json header = {{"model_hash", set.model_hash},
                             {"template_id", set.template_id},
                             {"dataset_fingerprint", set.dataset_fingerprint},
                             {"n_examples", set.n_examples},
                             {"n_layers", set.n_layers()},
                             {"hidden_dim", set.hidden_dim()}};
    std::string payload;
    payload.reserve(static_cast<size_t>(set.n_layers()) * set.hidden_dim() * sizeof(double));
    for (const auto& v : set.vectors) detail::put_raw(payload, v.data(), v.size());
    return detail::make_container(header, payload);
}

SteeringVectorSet decode_vectors(std::string_view bytes, const std::string& source) {
    auto c = detail::split_container(bytes, source);
    SteeringVectorSet set;
    int64_t n_layers = 0, hidden = 0;
    try {
        set.model_hash = c.header.at("model_hash").get<std::string>();
        set.template_id = c.header.at("template_id").get<std::string>();
        set.dataset_fingerprint = c.header.at("dataset_fingerprint").get<std::string>();
        set.n_examples = c.header.at("n_examples").get<int64_t>();
        n_layers = c.header.at("n_layers").get<int64_t>();
        hidden = c.header.at("hidden_dim").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(source + ": " + e.what());
    }
    if (n_layers < 1 || hidden < 1) throw ParseError(source + ": n_layers and hidden_dim must be >= 1");
    const uint64_t expected = static_cast<uint64_t>(n_layers) * static_cast<uint64_t>(hidden) * sizeof(double);
    if (c.payload.size() != expected) {
        throw ParseError(source + ": payload is " + std::to_string(c.payload.size()) + " bytes, expected " +
                         std::to_string(expected));
    }
    set.vectors.assign(static_cast<size_t>(n_layers), std::vector<double>(static_cast<size_t>(hidden)));
    for (int64_t l = 0; l < n_layers; ++l) {
        detail::get_raw(c.payload.substr(static_cast<size_t>(l * hidden) * sizeof(double)), set.vectors[l].data(),
                        static_cast<size_t>(hidden));
    }
    return set;
}

void save_vectors(const SteeringVectorSet& set, const std::filesystem::path& path) {
    detail::write_file(path, encode_vectors(set));
}

SteeringVectorSet load_vectors(const std::filesystem::path& path) {
    return decode_vectors(detail::read_file(path), path.string());
}

SteeringPlan make_plan(std::shared_ptr<const SteeringVectorSet> set, std::set<int> layers, double lambda,
                       InjectionSite site) {
    if (!set) throw ConfigError("steering plan: no vector set");
    if (!std::isfinite(lambda)) throw ConfigError("steering plan: lambda must be finite");
    for (int l : layers) {
        if (l < 0 || l >= set->n_layers()) {
            throw BoundsError("steering plan: layer " + std::to_string(l) + " is outside the vector set's layers [0, " +
                              std::to_string(set->n_layers()) + ")");
        }
    }
    return SteeringPlan{std::move(layers), lambda, std::move(set), site};
}

const char* to_string(InjectionSite site) {
    return site == InjectionSite::LastPosition ? "last_position" : "all_positions";
}

nlohmann::json plan_to_json(const SteeringPlan& plan) {
    return {{"layers", std::vector<int>(plan.layers.begin(), plan.layers.end())},
            {"lambda", plan.lambda},
            {"site", to_string(plan.site)},
            {"model_hash", plan.vectors ? nlohmann::json(plan.vectors->model_hash) : nlohmann::json(nullptr)}};
}

SteeringPlan plan_from_json(const nlohmann::json& j, std::shared_ptr<const SteeringVectorSet> set) {
    std::set<int> layers;
    double lambda = 0.0;
    InjectionSite site = InjectionSite::AllPositions;
    try {
        for (int l : j.at("layers").get<std::vector<int>>()) layers.insert(l);
        lambda = j.at("lambda").get<double>();
        const std::string s = j.value("site", "all_positions");
        if (s == "last_position") site = InjectionSite::LastPosition;
        else if (s != "all_positions") throw ParseError("steering plan: unknown site '" + s + "'");
        if (set && j.contains("model_hash") && j["model_hash"].is_string() &&
            j["model_hash"].get<std::string>() != set->model_hash) {
            throw IncompatibleError("steering plan was written for vectors of model " +
                                    j["model_hash"].get<std::string>() + ", vector set is for " + set->model_hash);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("steering plan: ") + e.what());
    }
    return make_plan(std::move(set), std::move(layers), lambda, site);
}

void save_plan(const SteeringPlan& plan, const std::filesystem::path& path) {
    detail::write_file(path, plan_to_json(plan).dump(2) + "\n");
}

SteeringPlan load_plan(const std::filesystem::path& path, std::shared_ptr<const SteeringVectorSet> set) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("steering plan '" + path.string() + "': " + e.what());
    }
    return plan_from_json(j, std::move(set));
}

Intervention compile_intervention(const Model& model, std::span<const SteeringPlan> plans) {
    const ModelConfig& cfg = model.config();
    Intervention iv;
    iv.deltas.assign(static_cast<size_t>(cfg.n_layers), {});
    bool first = true;
    for (const SteeringPlan& plan : plans) {
        if (!plan.vectors) throw ConfigError("steering plan: no vector set");
        const SteeringVectorSet& vs = *plan.vectors;
        const std::string both = " (vectors for model " + vs.model_hash + ", running model " + model.content_hash() + ")";
        for (int l : plan.layers) {
            if (l >= cfg.n_layers) {
                throw IncompatibleError("steering plan layer " + std::to_string(l) + " does not exist in a model with " +
                                        std::to_string(cfg.n_layers) + " layers" + both);
            }
        }
        if (vs.n_layers() != cfg.n_layers || vs.hidden_dim() != cfg.hidden_dim) {
            throw IncompatibleError("steering vectors are " + std::to_string(vs.n_layers()) + " x " +
                                    std::to_string(vs.hidden_dim()) + " but the model is " + std::to_string(cfg.n_layers) +
                                    " x " + std::to_string(cfg.hidden_dim) + both);
        }
        if (vs.model_hash != model.content_hash()) throw IncompatibleError("steering vectors were extracted from another model" + both);
        if (!first && plan.site != iv.site) throw ConfigError("steering plans disagree on injection site");
        iv.site = plan.site;
        iv.vector_set_model_hash = vs.model_hash;
        iv.lambda += plan.lambda;
        first = false;
        for (int l : plan.layers) {
            auto& d = iv.deltas[static_cast<size_t>(l)];
            if (d.empty()) d.assign(static_cast<size_t>(cfg.hidden_dim), 0.0);
            const auto& v = vs.vectors[static_cast<size_t>(l)];
            for (size_t i = 0; i < d.size(); ++i) d[i] += plan.lambda * v[i];
        }
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        if (!iv.deltas[static_cast<size_t>(l)].empty()) iv.layers.push_back(l);
    }
    return iv;
}

Intervention compile_intervention(const Model& model, const SteeringPlan& plan) {
    return compile_intervention(model, std::span<const SteeringPlan>(&plan, 1));
}

GenerationTrace generate(const Model& model, std::span<const TokenId> prompt_ids, const GenerationConfig& gen,
                         const SteeringPlan* plan, const TraceConfig& trace) {
    if (plan == nullptr) return generate(model, prompt_ids, gen, static_cast<const Intervention*>(nullptr), trace);
    Intervention iv = compile_intervention(model, *plan);
    return generate(model, prompt_ids, gen, &iv, trace);
}

}  // namespace steerlm
