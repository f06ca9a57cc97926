#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "steerlm/analysis.hpp"
#include "steerlm/datasets.hpp"
#include "steerlm/model.hpp"
#include "steerlm/vectors.hpp"

namespace steerlm::testing {

std::filesystem::path data_dir();
std::filesystem::path golden_dir();

const TokenizerSpec& tokenizer_spec();

// Committed tiny bundles: tiny_s7 (2 layers), tiny_s11 (3, tied), tiny_s23 (4, no qk-norm).
ModelHandle tiny_model(const std::string& name);
std::vector<std::string> tiny_model_names();

// In-memory random model with the shared tokenizer.
ModelConfig small_config(int n_layers);
TensorMap random_tensors(const ModelConfig& config, uint64_t seed);
ModelHandle random_model(uint64_t seed, int n_layers = 2);

// Blocks are identities (zero output projections). Every prompt that ends in
// the assistant header yields " harmful" first; the next token is "." unless
// the residual carries enough of a planted direction, which raises the logit
// of " cannot". The planted direction is the steering vector at every layer.
struct RiggedModel {
    ModelHandle model;
    std::shared_ptr<const SteeringVectorSet> vectors;
    TokenId harmful = 0, cannot = 0, period = 0, end = 0, newline = 0;
    double slope = 0.0;  // " cannot" logit gain per unit lambda, before the final norm
};
const RiggedModel& rigged_model();

// Golden metric corpus.
struct GoldenRow {
    std::string id, dataset, text;
    bool expect_aware = false, expect_refusal = false, should_refuse = false;
};
std::vector<GoldenRow> golden_responses();

// Golden traces ("steered" or "baseline"): pieces mapped to ids, sparse
// distributions expanded over the tokenizer with the remainder on "Z".
struct GoldenTrace {
    std::string id, dataset;
    std::vector<TokenId> generated;
    std::vector<StepDistribution> distributions;
};
std::vector<GoldenTrace> golden_traces(const std::string& which);
TokenId piece_id(const std::string& piece);

// Short random queries with random ids (duplicates possible across calls).
std::vector<QueryRecord> random_corpus(std::mt19937_64& rng, size_t n);

// Steering vectors by explicit per-query capture and a plain double average,
// using the default templates.
std::vector<std::vector<double>> brute_force_vectors(const Model& m, std::span<const QueryRecord> queries);

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// Fresh empty directory under the system temp dir.
std::filesystem::path temp_dir(const std::string& tag);

std::string read_text(const std::filesystem::path& p);
void write_text(const std::filesystem::path& p, const std::string& text);

}  // namespace steerlm::testing
