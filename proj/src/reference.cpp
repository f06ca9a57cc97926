#include "steerlm/reference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "binio.hpp"
#include "steerlm/error.hpp"
#include "steerlm/runtime.hpp"

namespace steerlm {

namespace {

std::vector<double> read_array(const std::filesystem::path& dir, const nlohmann::json& entry,
                               std::vector<int64_t>& shape) {
    const auto file = entry.at("file").get<std::string>();
    shape = entry.at("shape").get<std::vector<int64_t>>();
    const size_t n = std::accumulate(shape.begin(), shape.end(), size_t{1},
                                     [](size_t a, int64_t b) { return a * static_cast<size_t>(b); });
    const std::string bytes = detail::read_file(dir / file);
    if (bytes.size() != n * sizeof(double)) {
        throw ParseError("reference array '" + file + "': " + std::to_string(bytes.size()) + " bytes, expected " +
                         std::to_string(n * sizeof(double)));
    }
    std::vector<double> out(n);
    detail::get_raw(bytes, out.data(), n);
    return out;
}

}  // namespace

ReferencePack ReferencePack::load(const std::filesystem::path& dir) {
    nlohmann::json index;
    try {
        index = nlohmann::json::parse(detail::read_file(dir / "index.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("reference index: " + std::string(e.what()));
    }
    ReferencePack pack;
    try {
        if (index.value("format", "") != "steerlm-refpack") throw ParseError("reference index: unknown format");
        if (index.value("dtype", "") != "f64") throw ParseError("reference index: dtype must be f64");
        pack.model_hash = index.at("model_hash").get<std::string>();
        for (const auto& p : index.at("prompts")) {
            ReferencePrompt r;
            r.name = p.at("name").get<std::string>();
            r.token_ids = p.at("token_ids").get<std::vector<TokenId>>();
            std::vector<int64_t> shape;
            r.logits = read_array(dir, p.at("logits"), shape);
            if (shape.size() != 1) throw ParseError("reference '" + r.name + "': logits must be 1-D");
            auto flat = read_array(dir, p.at("hidden"), shape);
            if (shape.size() != 2) throw ParseError("reference '" + r.name + "': hidden states must be 2-D");
            for (int64_t l = 0; l < shape[0]; ++l) {
                auto first = flat.begin() + l * shape[1];
                r.hidden.emplace_back(first, first + shape[1]);
            }
            pack.prompts.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("reference index: " + std::string(e.what()));
    }
    return pack;
}

std::vector<ReferenceDeviation> compare_with_reference(const Model& model, const ReferencePack& pack) {
    if (pack.model_hash != model.content_hash()) {
        throw IncompatibleError("reference pack is for model " + pack.model_hash + ", loaded model is " +
                                model.content_hash());
    }
    const auto& cfg = model.config();
    std::vector<int> layers(static_cast<size_t>(cfg.n_layers));
    std::iota(layers.begin(), layers.end(), 0);
    std::vector<ReferenceDeviation> out;
    for (const auto& p : pack.prompts) {
        if (p.logits.size() != static_cast<size_t>(cfg.vocab_size) || p.hidden.size() != layers.size()) {
            throw IncompatibleError("reference '" + p.name + "' does not match the model dimensions");
        }
        auto r = forward_capture(model, p.token_ids, layers, static_cast<int64_t>(p.token_ids.size()) - 1);
        ReferenceDeviation d;
        d.prompt = p.name;
        for (size_t i = 0; i < p.logits.size(); ++i)
            d.max_logit_error = std::max(d.max_logit_error, std::fabs(static_cast<double>(r.logits[i]) - p.logits[i]));
        for (int l : layers) {
            const auto& got = r.record.layers.at(l);
            const auto& want = p.hidden[static_cast<size_t>(l)];
            if (want.size() != got.size()) throw IncompatibleError("reference '" + p.name + "': hidden size differs");
            for (size_t i = 0; i < got.size(); ++i)
                d.max_hidden_error = std::max(d.max_hidden_error, std::fabs(static_cast<double>(got[i]) - want[i]));
        }
        out.push_back(d);
    }
    return out;
}

}  // namespace steerlm
