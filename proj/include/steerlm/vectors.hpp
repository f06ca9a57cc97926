#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "steerlm/runtime.hpp"

namespace steerlm {

/// Per-layer steering vectors (mean safety-prompted state minus mean
/// original state) with provenance. One vector for every layer.
struct SteeringVectorSet {
    std::vector<std::vector<double>> vectors;  // [layer][hidden_dim]
    std::string model_hash;
    std::string template_id;
    std::string dataset_fingerprint;
    int64_t n_examples = 0;

    int n_layers() const { return static_cast<int>(vectors.size()); }
    int hidden_dim() const { return vectors.empty() ? 0 : static_cast<int>(vectors.front().size()); }
    void validate() const;

    bool operator==(const SteeringVectorSet&) const = default;
};

/// File layout: u64 LE header length, JSON header {model_hash, template_id,
/// dataset_fingerprint, n_examples, n_layers, hidden_dim}, then
/// n_layers * hidden_dim little-endian f64 values, layer-major.
std::string encode_vectors(const SteeringVectorSet& set);
SteeringVectorSet decode_vectors(std::string_view bytes, const std::string& source = "vector file");
void save_vectors(const SteeringVectorSet& set, const std::filesystem::path& path);
SteeringVectorSet load_vectors(const std::filesystem::path& path);

struct SteeringPlan {
    std::set<int> layers;
    double lambda = 0.0;
    std::shared_ptr<const SteeringVectorSet> vectors;
    InjectionSite site = InjectionSite::AllPositions;
};

/// Throws BoundsError when a layer is outside the set's layer domain.
SteeringPlan make_plan(std::shared_ptr<const SteeringVectorSet> set, std::set<int> layers, double lambda,
                       InjectionSite site = InjectionSite::AllPositions);

/// Plan file: {"layers": [...], "lambda": x, "site": "all_positions" |
/// "last_position", "model_hash": <vector set's model>}. Doubles are written
/// in shortest round-trip form, so lambda survives save/load bit-exactly.
nlohmann::json plan_to_json(const SteeringPlan& plan);
SteeringPlan plan_from_json(const nlohmann::json& j, std::shared_ptr<const SteeringVectorSet> set);
void save_plan(const SteeringPlan& plan, const std::filesystem::path& path);
SteeringPlan load_plan(const std::filesystem::path& path, std::shared_ptr<const SteeringVectorSet> set);

const char* to_string(InjectionSite site);

/// Checks each plan against `model` (model hash, layer count, hidden size)
/// and sums lambda * v per layer in double. Plans must agree on the site.
Intervention compile_intervention(const Model& model, std::span<const SteeringPlan> plans);
Intervention compile_intervention(const Model& model, const SteeringPlan& plan);

GenerationTrace generate(const Model& model, std::span<const TokenId> prompt_ids, const GenerationConfig& gen,
                         const SteeringPlan* plan, const TraceConfig& trace = {});

}  // namespace steerlm
