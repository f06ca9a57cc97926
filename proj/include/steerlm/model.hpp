#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "steerlm/tokenizer.hpp"

namespace steerlm {

/// Architecture of a pre-norm decoder-only transformer with rotary grouped
/// query attention and a SiLU-gated feed-forward block.
struct ModelConfig {
    int n_layers = 0;
    int hidden_dim = 0;
    int n_heads = 0;
    int n_kv_heads = 0;
    int head_dim = 0;
    int ffn_dim = 0;
    int vocab_size = 0;
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;
    int max_context = 0;
    bool qk_norm = true;          // per-head RMSNorm on queries and keys
    bool tie_embeddings = false;  // output projection shares the embedding table

    void validate() const;
    int q_dim() const { return n_heads * head_dim; }
    int kv_dim() const { return n_kv_heads * head_dim; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> values;  // row-major

    size_t numel() const;
};

using TensorMap = std::map<std::string, Tensor>;

struct TensorRequirement {
    std::string name;
    std::vector<int64_t> shape;
};

/// Every tensor the engine expects for `config`, in canonical order.
std::vector<TensorRequirement> required_tensors(const ModelConfig& config);

namespace tensor_names {
std::string embed();
std::string final_norm();
std::string lm_head();
std::string layer(int l, const std::string& suffix);
}  // namespace tensor_names

class Model;
using ModelHandle = std::shared_ptr<const Model>;

/// Immutable model: configuration, weights, tokenizer and content hash.
///
/// A bundle on disk is a directory holding `model.bin` (length-prefixed JSON
/// header + raw little-endian f32 payload), `tokenizer.json` and
/// `model.sha256`, the SHA-256 over model.bin followed by tokenizer.json.
class Model {
public:
    struct LayerWeights {
        const float* attn_norm;
        const float* wq;
        const float* wk;
        const float* wv;
        const float* wo;
        const float* q_norm;  // null without qk_norm
        const float* k_norm;
        const float* ffn_norm;
        const float* w_gate;
        const float* w_up;
        const float* w_down;
    };

    static ModelHandle load(const std::filesystem::path& bundle_dir);
    // Builds a model in memory; the content hash is what write_bundle would
    // produce for the same inputs.
    static ModelHandle from_parts(ModelConfig config, TensorMap tensors, TokenizerSpec tokenizer);

    const ModelConfig& config() const noexcept { return config_; }
    const Tokenizer& tokenizer() const noexcept { return tokenizer_; }
    const std::string& content_hash() const noexcept { return content_hash_; }
    const TensorMap& tensors() const noexcept { return tensors_; }

    const float* embedding() const noexcept { return embed_; }
    const float* final_norm() const noexcept { return final_norm_; }
    const float* lm_head() const noexcept { return lm_head_; }
    const LayerWeights& layer(int l) const { return layers_.at(static_cast<size_t>(l)); }

private:
    Model() = default;
    void bind();

    ModelConfig config_;
    TensorMap tensors_;
    Tokenizer tokenizer_;
    std::string content_hash_;
    const float* embed_ = nullptr;
    const float* final_norm_ = nullptr;
    const float* lm_head_ = nullptr;
    std::vector<LayerWeights> layers_;
};

/// Serializes the `model.bin` bytes (tensors laid out in name order).
std::string encode_model_bin(const ModelConfig& config, const TensorMap& tensors);

/// Writes a bundle directory and returns its content hash.
std::string write_bundle(const std::filesystem::path& bundle_dir, const ModelConfig& config, const TensorMap& tensors,
                         const TokenizerSpec& tokenizer);

}  // namespace steerlm
