#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "steerlm/model.hpp"

namespace steerlm {

/// Reference outputs for one prompt, computed outside the engine in 64-bit.
struct ReferencePrompt {
    std::string name;
    std::vector<TokenId> token_ids;
    std::vector<double> logits;               // [vocab_size]
    std::vector<std::vector<double>> hidden;  // [n_layers][hidden_dim], last token, block outputs
};

/// A reference pack directory holds `index.json`
///   {"format": "steerlm-refpack", "version": 1, "dtype": "f64", "model_hash",
///    "prompts": [{"name", "token_ids", "logits": {"file", "shape"}, "hidden": {"file", "shape"}}]}
/// and one raw little-endian f64 file per array.
struct ReferencePack {
    std::string model_hash;
    std::vector<ReferencePrompt> prompts;

    static ReferencePack load(const std::filesystem::path& dir);
};

struct ReferenceDeviation {
    std::string prompt;
    double max_logit_error = 0.0;
    double max_hidden_error = 0.0;
};

/// Runs every pack prompt through the engine and reports the largest
/// absolute element error per prompt. Throws IncompatibleError when the
/// pack was produced for a different bundle.
std::vector<ReferenceDeviation> compare_with_reference(const Model& model, const ReferencePack& pack);

}  // namespace steerlm
