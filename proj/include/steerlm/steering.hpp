#pragma once

#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "steerlm/analysis.hpp"
#include "steerlm/datasets.hpp"
#include "steerlm/prompting.hpp"
#include "steerlm/vectors.hpp"

namespace steerlm {

struct ExtractOptions {
    int jobs = 1;
    std::string base_system;
};

/// Mean last-prompt-token state of safety-wrapped queries minus that of the
/// plain queries, for every layer. Queries are folded in (id, prompt) order
/// with pairwise summation in double, so the result does not depend on the
/// input order.
SteeringVectorSet extract_vectors(const Model& model, std::span<const QueryRecord> harmful, const SafetyTemplate& safety,
                                  const ChatTemplate& chat, const ExtractOptions& options = {});

struct SweepOptions {
    double over_refusal_cap = 0.10;
    bool safety_prompt = true;  // run validation through the safety-wrapped prompt
    InjectionSite site = InjectionSite::AllPositions;
    std::string base_system;
    int jobs = 1;
};

struct SweepCell {
    std::vector<int> layers;
    double lambda = 0.0;
    double refusal_rate = 0.0;       // proxy refusals on the validation harmful set
    double over_refusal_rate = 0.0;  // proxy refusals on the benign probe set
    double mean_length = 0.0;        // generated tokens per validation query
    std::string outputs_digest;      // SHA-256 over every generated token id
};

struct SweepReport {
    SweepCell baseline;  // same prompts, no steering
    std::vector<SweepCell> cells;
    size_t selected = 0;
    bool selected_within_cap = true;
    double over_refusal_cap = 0.10;
};

/// Cell selection: highest refusal rate among cells whose over-refusal rate
/// is within the cap; ties go to smaller |lambda|, then fewer layers, then
/// grid order. When no cell satisfies the cap, the lowest over-refusal rate
/// wins (same tie-breaks) and `selected_within_cap` is false.
size_t select_cell(std::span<const SweepCell> cells, double over_refusal_cap, bool* within_cap = nullptr);

SweepReport sweep(const Model& model, std::shared_ptr<const SteeringVectorSet> vectors,
                  std::span<const QueryRecord> validation_harmful, std::span<const QueryRecord> benign_probe,
                  std::span<const std::set<int>> layer_grid, std::span<const double> lambda_grid,
                  const GenerationConfig& gen, const WordLists& words, const SafetyTemplate& safety,
                  const ChatTemplate& chat, const SweepOptions& options = {});

}  // namespace steerlm
