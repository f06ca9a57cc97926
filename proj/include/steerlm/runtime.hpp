#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerlm/model.hpp"

namespace steerlm {

/// Residual-stream vectors at the output of selected decoder blocks for one
/// token position. Captures are taken after any steering injection.
struct HiddenStateRecord {
    int64_t position = 0;
    std::map<int, std::vector<float>> layers;

    bool operator==(const HiddenStateRecord&) const = default;
};

enum class InjectionSite {
    AllPositions,  // every token processed by a forward step (prefill and decode)
    LastPosition,  // only the final token of each forward step
};

/// Additive residual-stream edits applied at block outputs. `deltas[l]` is
/// either empty (layer untouched) or a hidden_dim vector that is added as
/// h = float(double(h) + delta). Built from steering plans; see vectors.hpp.
struct Intervention {
    std::vector<std::vector<double>> deltas;
    InjectionSite site = InjectionSite::AllPositions;
    std::vector<int> layers;  // layers with a delta, ascending
    double lambda = 0.0;      // informational, for traces
    std::string vector_set_model_hash;

    bool empty() const { return layers.empty(); }
};

struct ForwardResult {
    std::vector<float> logits;  // next-token logits after the last input token
    HiddenStateRecord record;
};

/// Full (uncached) forward over `token_ids`, capturing `capture_layers` at
/// `capture_position`. Bit-reproducible for identical inputs.
ForwardResult forward_capture(const Model& model, std::span<const TokenId> token_ids, std::span<const int> capture_layers,
                              int64_t capture_position, const Intervention* intervention = nullptr);

struct GenerationConfig {
    double temperature = 0.6;
    int max_new_tokens = 32768;
    uint64_t seed = 0;
    bool greedy = false;

    bool is_greedy() const { return greedy || temperature == 0.0; }
    void validate() const;
};

struct TraceConfig {
    bool record_distributions = false;
    int top_k = 0;  // 0 keeps the full distribution
};

/// Model distribution (softmax of raw logits over the tokenizer ids,
/// temperature 1) before sampling a generated token. Either `probs` (full) or `top` (top-k) is populated.
struct StepDistribution {
    std::vector<double> probs;
    std::vector<std::pair<TokenId, double>> top;

    bool full() const { return !probs.empty(); }
};

enum class FinishReason { MaxTokens, EndOfMessage, ContextFull };
const char* to_string(FinishReason r);

struct SteeringSummary {
    std::vector<int> layers;
    double lambda = 0.0;
    std::string model_hash;
};

struct GenerationTrace {
    std::vector<TokenId> prompt_token_ids;
    std::vector<TokenId> generated_token_ids;  // includes the stop token when one ended generation
    std::string decoded_text;                  // == detokenize(generated_token_ids)
    std::vector<StepDistribution> per_step_distributions;  // aligned with generated_token_ids
    std::optional<SteeringSummary> steering_applied;
    FinishReason finish = FinishReason::MaxTokens;
};

GenerationTrace generate(const Model& model, std::span<const TokenId> prompt_ids, const GenerationConfig& gen,
                         const Intervention* intervention = nullptr, const TraceConfig& trace = {});

struct CapturedGeneration {
    GenerationTrace trace;
    // records[0] is the last prompt position; records[k] the position of
    // generated token k-1. Each is the state whose logits produced the next token.
    std::vector<HiddenStateRecord> records;
};

CapturedGeneration capture_during_generation(const Model& model, std::span<const TokenId> prompt_ids,
                                             const GenerationConfig& gen, std::span<const int> capture_layers,
                                             const Intervention* intervention = nullptr, const TraceConfig& trace = {});

/// Numerically stable softmax in 64-bit; `temperature` divides the logits.
std::vector<double> softmax(std::span<const float> logits, double temperature = 1.0);

/// Lowest index among the maximal logits.
TokenId argmax(std::span<const float> logits);

/// Incremental decoding state: one per generation session. Owns its KV
/// cache; the model is shared read-only.
class Session {
public:
    explicit Session(const Model& model, const Intervention* intervention = nullptr);

    // Processes `tokens` at the next positions and returns logits after the
    // last one. When `capture_layers` is non-empty, the record for the last
    // processed position is written to `record`.
    std::vector<float> step(std::span<const TokenId> tokens, std::span<const int> capture_layers = {},
                            HiddenStateRecord* record = nullptr, int64_t capture_position = -1);

    int64_t position() const noexcept { return n_past_; }

private:
    const Model& model_;
    const Intervention* intervention_;
    std::vector<std::vector<float>> k_cache_;  // per layer, [position][kv_dim]
    std::vector<std::vector<float>> v_cache_;
    int64_t n_past_ = 0;
};

}  // namespace steerlm
