#include "steerlm/model.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <sstream>

#include "binio.hpp"
#include "steerlm/digest.hpp"
#include "steerlm/error.hpp"

namespace steerlm {

namespace {

constexpr const char* kModelFile = "model.bin";
constexpr const char* kTokenizerFile = "tokenizer.json";
constexpr const char* kHashFile = "model.sha256";

std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ']';
    return os.str();
}

std::string trim(std::string s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    size_t i = 0;
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    return s.substr(i);
}

}  // namespace

void ModelConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1, got " + std::to_string(v));
    };
    positive(n_layers, "n_layers");
    positive(hidden_dim, "hidden_dim");
    positive(n_heads, "n_heads");
    positive(n_kv_heads, "n_kv_heads");
    positive(head_dim, "head_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(max_context, "max_context");
    if (n_heads % n_kv_heads != 0) {
        throw ConfigError("model config: n_heads (" + std::to_string(n_heads) + ") is not a multiple of n_kv_heads (" +
                          std::to_string(n_kv_heads) + ")");
    }
    if (head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even for rotary embeddings");
    if (!(norm_eps > 0.0)) throw ConfigError("model config: norm_eps must be > 0");
    if (!(rope_theta > 0.0)) throw ConfigError("model config: rope_theta must be > 0");
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layers", n_layers},     {"hidden_dim", hidden_dim}, {"n_heads", n_heads},
            {"n_kv_heads", n_kv_heads}, {"head_dim", head_dim},     {"ffn_dim", ffn_dim},
            {"vocab_size", vocab_size}, {"rope_theta", rope_theta}, {"norm_eps", norm_eps},
            {"max_context", max_context}, {"qk_norm", qk_norm},     {"tie_embeddings", tie_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.n_kv_heads = j.at("n_kv_heads").get<int>();
        c.head_dim = j.at("head_dim").get<int>();
        c.ffn_dim = j.at("ffn_dim").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.rope_theta = j.at("rope_theta").get<double>();
        c.norm_eps = j.at("norm_eps").get<double>();
        c.max_context = j.at("max_context").get<int>();
        c.qk_norm = j.value("qk_norm", true);
        c.tie_embeddings = j.value("tie_embeddings", false);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    return c;
}

size_t Tensor::numel() const {
    return std::accumulate(shape.begin(), shape.end(), size_t{1},
                           [](size_t a, int64_t b) { return a * static_cast<size_t>(b); });
}

namespace tensor_names {
std::string embed() { return "model.embed_tokens.weight"; }
std::string final_norm() { return "model.norm.weight"; }
std::string lm_head() { return "lm_head.weight"; }
std::string layer(int l, const std::string& suffix) { return "model.layers." + std::to_string(l) + "." + suffix; }
}  // namespace tensor_names

std::vector<TensorRequirement> required_tensors(const ModelConfig& c) {
    using namespace tensor_names;
    const int64_t h = c.hidden_dim, q = c.q_dim(), kv = c.kv_dim(), f = c.ffn_dim, v = c.vocab_size, hd = c.head_dim;
    std::vector<TensorRequirement> req;
    req.push_back({embed(), {v, h}});
    for (int l = 0; l < c.n_layers; ++l) {
        req.push_back({layer(l, "input_layernorm.weight"), {h}});
        req.push_back({layer(l, "self_attn.q_proj.weight"), {q, h}});
        req.push_back({layer(l, "self_attn.k_proj.weight"), {kv, h}});
        req.push_back({layer(l, "self_attn.v_proj.weight"), {kv, h}});
        req.push_back({layer(l, "self_attn.o_proj.weight"), {h, q}});
        if (c.qk_norm) {
            req.push_back({layer(l, "self_attn.q_norm.weight"), {hd}});
            req.push_back({layer(l, "self_attn.k_norm.weight"), {hd}});
        }
        req.push_back({layer(l, "post_attention_layernorm.weight"), {h}});
        req.push_back({layer(l, "mlp.gate_proj.weight"), {f, h}});
        req.push_back({layer(l, "mlp.up_proj.weight"), {f, h}});
        req.push_back({layer(l, "mlp.down_proj.weight"), {h, f}});
    }
    req.push_back({final_norm(), {h}});
    if (!c.tie_embeddings) req.push_back({lm_head(), {v, h}});
    return req;
}

namespace {

void check_tensors(const ModelConfig& config, const TensorMap& tensors) {
    auto req = required_tensors(config);
    for (const auto& r : req) {
        auto it = tensors.find(r.name);
        if (it == tensors.end()) throw MissingTensorError(r.name);
        if (it->second.shape != r.shape) {
            throw ShapeMismatchError(r.name, "expected " + shape_str(r.shape) + ", got " + shape_str(it->second.shape));
        }
        if (it->second.values.size() != it->second.numel()) {
            throw ShapeMismatchError(r.name, "holds " + std::to_string(it->second.values.size()) + " values for shape " +
                                                 shape_str(r.shape));
        }
    }
    if (tensors.size() != req.size()) {
        for (const auto& [name, t] : tensors) {
            bool known = std::any_of(req.begin(), req.end(), [&](const auto& r) { return r.name == name; });
            if (!known) throw LoadError("unexpected tensor '" + name + "' for this configuration");
        }
    }
}

}  // namespace

std::string encode_model_bin(const ModelConfig& config, const TensorMap& tensors) {
    nlohmann::json dir = nlohmann::json::object();
    std::string payload;
    for (const auto& [name, t] : tensors) {
        dir[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", payload.size()}};
        detail::put_raw(payload, t.values.data(), t.values.size());
    }
    nlohmann::json header = {{"config", config.to_json()}, {"tensors", std::move(dir)}};
    return detail::make_container(header, payload);
}

std::string write_bundle(const std::filesystem::path& bundle_dir, const ModelConfig& config, const TensorMap& tensors,
                         const TokenizerSpec& tokenizer) {
    config.validate();
    check_tensors(config, tensors);
    std::string bin = encode_model_bin(config, tensors);
    std::string tok = tokenizer.serialize();
    std::string hash = Sha256().update(bin).update(tok).hex_digest();
    std::filesystem::create_directories(bundle_dir);
    detail::write_file(bundle_dir / kModelFile, bin);
    detail::write_file(bundle_dir / kTokenizerFile, tok);
    detail::write_file(bundle_dir / kHashFile, hash + "\n");
    return hash;
}

void Model::bind() {
    namespace tn = tensor_names;
    auto ptr = [&](const std::string& name) { return tensors_.at(name).values.data(); };
    embed_ = ptr(tn::embed());
    final_norm_ = ptr(tn::final_norm());
    lm_head_ = config_.tie_embeddings ? embed_ : ptr(tn::lm_head());
    layers_.clear();
    for (int l = 0; l < config_.n_layers; ++l) {
        LayerWeights w{};
        w.attn_norm = ptr(tn::layer(l, "input_layernorm.weight"));
        w.wq = ptr(tn::layer(l, "self_attn.q_proj.weight"));
        w.wk = ptr(tn::layer(l, "self_attn.k_proj.weight"));
        w.wv = ptr(tn::layer(l, "self_attn.v_proj.weight"));
        w.wo = ptr(tn::layer(l, "self_attn.o_proj.weight"));
        if (config_.qk_norm) {
            w.q_norm = ptr(tn::layer(l, "self_attn.q_norm.weight"));
            w.k_norm = ptr(tn::layer(l, "self_attn.k_norm.weight"));
        }
        w.ffn_norm = ptr(tn::layer(l, "post_attention_layernorm.weight"));
        w.w_gate = ptr(tn::layer(l, "mlp.gate_proj.weight"));
        w.w_up = ptr(tn::layer(l, "mlp.up_proj.weight"));
        w.w_down = ptr(tn::layer(l, "mlp.down_proj.weight"));
        layers_.push_back(w);
    }
}

ModelHandle Model::from_parts(ModelConfig config, TensorMap tensors, TokenizerSpec tokenizer) {
    config.validate();
    check_tensors(config, tensors);
    std::shared_ptr<Model> m(new Model());
    std::string tok_bytes = tokenizer.serialize();
    m->content_hash_ = Sha256().update(encode_model_bin(config, tensors)).update(tok_bytes).hex_digest();
    m->tokenizer_ = Tokenizer(std::move(tokenizer));
    if (m->tokenizer_.size() > static_cast<size_t>(config.vocab_size)) {
        throw ConfigError("tokenizer has " + std::to_string(m->tokenizer_.size()) + " tokens but vocab_size is " +
                          std::to_string(config.vocab_size));
    }
    m->config_ = config;
    m->tensors_ = std::move(tensors);
    m->bind();
    return m;
}

ModelHandle Model::load(const std::filesystem::path& bundle_dir) {
    if (!std::filesystem::is_directory(bundle_dir)) {
        throw LoadError("model bundle '" + bundle_dir.string() + "' does not exist or is not a directory");
    }
    const std::string bin = detail::read_file(bundle_dir / kModelFile);
    const std::string tok = detail::read_file(bundle_dir / kTokenizerFile);
    const std::string stored_hash = trim(detail::read_file(bundle_dir / kHashFile));

    auto container = detail::split_container(bin, (bundle_dir / kModelFile).string());
    ModelConfig config;
    try {
        config = ModelConfig::from_json(container.header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model header: ") + e.what());
    }
    config.validate();

    const nlohmann::json* dir = nullptr;
    if (auto it = container.header.find("tensors"); it != container.header.end() && it->is_object()) dir = &*it;
    if (dir == nullptr) throw ParseError("model header: missing tensor directory");

    TensorMap tensors;
    for (const auto& r : required_tensors(config)) {
        auto it = dir->find(r.name);
        if (it == dir->end()) throw MissingTensorError(r.name);
        Tensor t;
        uint64_t offset = 0;
        try {
            if (it->at("dtype").get<std::string>() != "f32") {
                throw ShapeMismatchError(r.name, "unsupported dtype " + it->at("dtype").dump());
            }
            t.shape = it->at("shape").get<std::vector<int64_t>>();
            offset = it->at("offset").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("model header entry for '" + r.name + "': " + e.what());
        }
        if (t.shape != r.shape) {
            throw ShapeMismatchError(r.name, "expected " + shape_str(r.shape) + ", header declares " + shape_str(t.shape));
        }
        const uint64_t nbytes = t.numel() * sizeof(float);
        if (offset > container.payload.size() || nbytes > container.payload.size() - offset) {
            throw ShapeMismatchError(r.name, "payload holds " +
                                                 std::to_string(container.payload.size() > offset
                                                                    ? (container.payload.size() - offset) / sizeof(float)
                                                                    : 0) +
                                                 " values past offset " + std::to_string(offset) + ", shape " +
                                                 shape_str(r.shape) + " needs " + std::to_string(t.numel()));
        }
        t.values.resize(t.numel());
        detail::get_raw(container.payload.substr(offset), t.values.data(), t.values.size());
        tensors.emplace(r.name, std::move(t));
    }
    if (dir->size() != tensors.size()) {
        for (const auto& [name, _] : dir->items()) {
            if (!tensors.contains(name)) throw LoadError("unexpected tensor '" + name + "' for this configuration");
        }
    }

    const std::string computed = Sha256().update(bin).update(tok).hex_digest();
    if (computed != stored_hash) throw HashMismatchError(stored_hash, computed);

    std::shared_ptr<Model> m(new Model());
    m->tokenizer_ = Tokenizer(TokenizerSpec::parse(tok));
    if (m->tokenizer_.size() > static_cast<size_t>(config.vocab_size)) {
        throw ConfigError("tokenizer has " + std::to_string(m->tokenizer_.size()) + " tokens but vocab_size is " +
                          std::to_string(config.vocab_size));
    }
    m->config_ = config;
    m->tensors_ = std::move(tensors);
    m->content_hash_ = computed;
    m->bind();
    return m;
}

}  // namespace steerlm
