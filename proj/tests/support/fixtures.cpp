#include "fixtures.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include <unistd.h>

#include "steerlm/error.hpp"
#include "steerlm/prompting.hpp"

namespace steerlm::testing {

namespace fs = std::filesystem;

fs::path data_dir() { return fs::path(STEERLM_TEST_DATA); }
fs::path golden_dir() { return data_dir() / "golden"; }

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

const TokenizerSpec& tokenizer_spec() {
    static const TokenizerSpec spec = TokenizerSpec::parse(read_text(data_dir() / "tokenizer.json"));
    return spec;
}

std::vector<std::string> tiny_model_names() { return {"tiny_s7", "tiny_s11", "tiny_s23"}; }

ModelHandle tiny_model(const std::string& name) {
    static std::mutex mu;
    static std::map<std::string, ModelHandle> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = cache[name];
    if (!slot) slot = Model::load(data_dir() / "models" / name);
    return slot;
}

ModelConfig small_config(int n_layers) {
    ModelConfig c;
    c.n_layers = n_layers;
    c.hidden_dim = 32;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 8;
    c.ffn_dim = 64;
    c.vocab_size = 512;
    c.max_context = 512;
    return c;
}

TensorMap random_tensors(const ModelConfig& config, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    TensorMap t;
    for (const auto& r : required_tensors(config)) {
        Tensor x;
        x.shape = r.shape;
        x.values.resize(x.numel());
        const bool is_norm = r.shape.size() == 1;
        const float scale = is_norm ? 0.1f : 1.0f / std::sqrt(static_cast<float>(r.shape.back()));
        for (auto& v : x.values) v = is_norm ? 1.0f + scale * normal(rng) : scale * normal(rng);
        t.emplace(r.name, std::move(x));
    }
    return t;
}

ModelHandle random_model(uint64_t seed, int n_layers) {
    auto cfg = small_config(n_layers);
    return Model::from_parts(cfg, random_tensors(cfg, seed), tokenizer_spec());
}

namespace {

RiggedModel build_rigged() {
    RiggedModel r;
    ModelConfig cfg = small_config(2);
    cfg.qk_norm = false;
    Tokenizer tok(tokenizer_spec());
    auto single = [&](const std::string& text) {
        auto ids = tok.encode(text);
        if (ids.size() != 1) throw Error("rigged model: '" + text + "' is not a single token");
        return ids[0];
    };
    r.harmful = single(" harmful");
    r.cannot = single(" cannot");
    r.period = single(".");
    r.end = *tok.special_id("<|im_end|>");
    r.newline = *tok.byte_id('\n');

    const int H = cfg.hidden_dim;
    TensorMap t;
    for (const auto& req : required_tensors(cfg)) {
        Tensor x;
        x.shape = req.shape;
        x.values.assign(x.numel(), req.shape.size() == 1 ? 1.0f : 0.0f);
        t.emplace(req.name, std::move(x));
    }
    // One-hot embeddings by role; everything else shares a generic slot.
    enum Slot { kNewline = 0, kHarmful = 1, kPeriod = 2, kCannot = 3, kEnd = 4, kOther = 5, kPlanted = 31 };
    auto& emb = t.at(tensor_names::embed()).values;
    for (int id = 0; id < cfg.vocab_size; ++id) {
        int slot = kOther;
        if (id == r.newline) slot = kNewline;
        else if (id == r.harmful) slot = kHarmful;
        else if (id == r.period) slot = kPeriod;
        else if (id == r.cannot) slot = kCannot;
        else if (id == r.end) slot = kEnd;
        emb[static_cast<size_t>(id) * H + slot] = 1.0f;
    }
    r.slope = 3.0;
    auto& head = t.at(tensor_names::lm_head()).values;
    auto set = [&](TokenId row, int col, float v) { head[static_cast<size_t>(row) * H + col] = v; };
    set(r.harmful, kNewline, 10.0f);  // after the header: " harmful"
    set(r.period, kHarmful, 1.0f);    // then "." by default
    set(r.cannot, kPlanted, static_cast<float>(r.slope));
    set(r.end, kPeriod, 5.0f);
    set(r.end, kCannot, 5.0f);

    r.model = Model::from_parts(cfg, std::move(t), tokenizer_spec());
    auto vs = std::make_shared<SteeringVectorSet>();
    vs->vectors.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(static_cast<size_t>(H), 0.0));
    for (auto& v : vs->vectors) v[kPlanted] = 1.0;
    vs->model_hash = r.model->content_hash();
    vs->template_id = "planted";
    vs->dataset_fingerprint = "planted";
    vs->n_examples = 1;
    r.vectors = vs;
    return r;
}

}  // namespace

const RiggedModel& rigged_model() {
    static const RiggedModel r = build_rigged();
    return r;
}

std::vector<GoldenRow> golden_responses() {
    std::vector<GoldenRow> rows;
    std::istringstream in(read_text(golden_dir() / "responses.jsonl"));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        rows.push_back({j.at("id"), j.at("dataset"), j.at("text"), j.at("expect_aware"), j.at("expect_refusal"),
                        j.at("should_refuse")});
    }
    return rows;
}

TokenId piece_id(const std::string& piece) {
    static const Tokenizer tok(tokenizer_spec());
    for (size_t id = 0; id < tok.size(); ++id) {
        if (!tok.is_special(static_cast<TokenId>(id)) && tok.piece(static_cast<TokenId>(id)) == piece) {
            return static_cast<TokenId>(id);
        }
    }
    throw Error("no token with piece '" + piece + "'");
}

std::vector<GoldenTrace> golden_traces(const std::string& which) {
    const size_t n = Tokenizer(tokenizer_spec()).size();
    const TokenId filler = piece_id("Z");
    std::vector<GoldenTrace> out;
    const auto doc = nlohmann::json::parse(read_text(golden_dir() / "traces.json"));
    for (const auto& j : doc.at(which)) {
        GoldenTrace t;
        t.id = j.at("id");
        t.dataset = j.at("dataset");
        for (const auto& p : j.at("pieces")) t.generated.push_back(piece_id(p.get<std::string>()));
        for (const auto& d : j.at("distributions")) {
            StepDistribution s;
            s.probs.assign(n, 0.0);
            double rest = 1.0;
            for (const auto& e : d) {
                s.probs[static_cast<size_t>(piece_id(e.at(0).get<std::string>()))] += e.at(1).get<double>();
                rest -= e.at(1).get<double>();
            }
            s.probs[static_cast<size_t>(filler)] += rest;
            t.distributions.push_back(std::move(s));
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<QueryRecord> random_corpus(std::mt19937_64& rng, size_t n) {
    static const std::vector<std::string> words = {"how", "to", "make", "a", "bomb", "steal", "car", "write", "poem",
                                                   "hack", "bank", "cook", "rice", "lie", "my", "boss", "quickly"};
    std::vector<QueryRecord> out;
    for (size_t i = 0; i < n; ++i) {
        std::string p;
        for (size_t w = 0, k = 2 + rng() % 6; w < k; ++w) p += (w ? " " : "") + words[rng() % words.size()];
        out.push_back({"id" + std::to_string(rng() % 100000), p + "?", QueryLabel::Harmful, {}});
    }
    return out;
}

std::vector<std::vector<double>> brute_force_vectors(const Model& m, std::span<const QueryRecord> queries) {
    const int L = m.config().n_layers, H = m.config().hidden_dim;
    std::vector<int> layers(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) layers[static_cast<size_t>(l)] = l;
    std::vector<std::vector<double>> ss(static_cast<size_t>(L), std::vector<double>(static_cast<size_t>(H))), so = ss;
    for (const auto& q : queries) {
        auto p = wrap_safety(q.prompt, SafetyTemplate::defaults(), ChatTemplate::defaults());
        auto a = m.tokenizer().encode(p.safety_rendered);
        auto b = m.tokenizer().encode(p.original_rendered);
        auto ra = forward_capture(m, a, layers, static_cast<int64_t>(a.size()) - 1);
        auto rb = forward_capture(m, b, layers, static_cast<int64_t>(b.size()) - 1);
        for (int l = 0; l < L; ++l)
            for (int i = 0; i < H; ++i) {
                ss[l][i] += ra.record.layers.at(l)[i];
                so[l][i] += rb.record.layers.at(l)[i];
            }
    }
    const double n = static_cast<double>(queries.size());
    for (int l = 0; l < L; ++l)
        for (int i = 0; i < H; ++i) ss[l][i] = ss[l][i] / n - so[l][i] / n;
    return ss;
}

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return INFINITY;
    double d = 0.0;
    for (size_t l = 0; l < a.size(); ++l) {
        if (a[l].size() != b[l].size()) return INFINITY;
        for (size_t i = 0; i < a[l].size(); ++i) d = std::max(d, std::abs(a[l][i] - b[l][i]));
    }
    return d;
}

fs::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    fs::path p = fs::temp_directory_path() /
                 ("steerlm_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace steerlm::testing
