#include "steerlm/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "steerlm/error.hpp"

namespace steerlm {

namespace {

// out[r] = sum_c W[r, c] * x[c], accumulated in double.
void matvec(const float* w, const float* x, float* out, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const float* row = w + static_cast<size_t>(r) * cols;
        double acc = 0.0;
        for (int c = 0; c < cols; ++c) acc += static_cast<double>(row[c]) * static_cast<double>(x[c]);
        out[r] = static_cast<float>(acc);
    }
}

void rmsnorm(const float* x, const float* weight, float* out, int n, double eps) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) ss += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    const double inv = 1.0 / std::sqrt(ss / n + eps);
    for (int i = 0; i < n; ++i) out[i] = static_cast<float>(static_cast<double>(x[i]) * inv * static_cast<double>(weight[i]));
}

// Rotate-half rotary embedding: pairs (i, i + head_dim/2).
void rope(float* v, int head_dim, int64_t pos, double theta) {
    const int half = head_dim / 2;
    for (int i = 0; i < half; ++i) {
        const double inv_freq = std::pow(theta, -2.0 * i / head_dim);
        const double angle = static_cast<double>(pos) * inv_freq;
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = v[i], b = v[i + half];
        v[i] = static_cast<float>(a * c - b * s);
        v[i + half] = static_cast<float>(b * c + a * s);
    }
}

void check_layers(std::span<const int> layers, int n_layers) {
    for (int l : layers) {
        if (l < 0 || l >= n_layers) {
            throw BoundsError("capture layer " + std::to_string(l) + " outside [0, " + std::to_string(n_layers) + ")");
        }
    }
}

}  // namespace

const char* to_string(FinishReason r) {
    switch (r) {
        case FinishReason::MaxTokens: return "max_tokens";
        case FinishReason::EndOfMessage: return "end_of_message";
        case FinishReason::ContextFull: return "context_full";
    }
    return "unknown";
}

void GenerationConfig::validate() const {
    if (max_new_tokens < 1) throw ConfigError("generation: max_new_tokens must be >= 1");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw ConfigError("generation: temperature must be >= 0");
}

std::vector<double> softmax(std::span<const float> logits, double temperature) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    double m = -std::numeric_limits<double>::infinity();
    for (float v : logits) m = std::max(m, static_cast<double>(v) / temperature);
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) / temperature - m);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

TokenId argmax(std::span<const float> logits) {
    size_t best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;
    }
    return static_cast<TokenId>(best);
}

Session::Session(const Model& model, const Intervention* intervention)
    : model_(model), intervention_(intervention), k_cache_(model.config().n_layers), v_cache_(model.config().n_layers) {
    if (intervention_ && !intervention_->empty() &&
        intervention_->deltas.size() != static_cast<size_t>(model.config().n_layers)) {
        throw IncompatibleError("intervention covers " + std::to_string(intervention_->deltas.size()) +
                                " layers, model has " + std::to_string(model.config().n_layers));
    }
}

std::vector<float> Session::step(std::span<const TokenId> tokens, std::span<const int> capture_layers,
                                 HiddenStateRecord* record, int64_t capture_position) {
    const ModelConfig& cfg = model_.config();
    const int H = cfg.hidden_dim, QD = cfg.q_dim(), KD = cfg.kv_dim(), F = cfg.ffn_dim, HD = cfg.head_dim;
    const int T = static_cast<int>(tokens.size());
    const int64_t p0 = n_past_;
    if (T == 0) throw BoundsError("forward: empty token list");
    if (p0 + T > cfg.max_context) {
        throw BoundsError("forward: " + std::to_string(p0 + T) + " tokens exceed max_context " +
                          std::to_string(cfg.max_context));
    }
    for (TokenId id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) throw BoundsError("forward: token id " + std::to_string(id) + " out of vocab");
    }
    check_layers(capture_layers, cfg.n_layers);
    if (capture_position < 0) capture_position = p0 + T - 1;
    if (!capture_layers.empty() && (capture_position < p0 || capture_position >= p0 + T)) {
        throw BoundsError("forward: capture position " + std::to_string(capture_position) + " outside [" +
                          std::to_string(p0) + ", " + std::to_string(p0 + T) + ")");
    }
    const int capture_t = static_cast<int>(capture_position - p0);

    std::vector<float> x(static_cast<size_t>(T) * H);
    for (int t = 0; t < T; ++t) {
        const float* e = model_.embedding() + static_cast<size_t>(tokens[t]) * H;
        std::copy(e, e + H, x.begin() + static_cast<ptrdiff_t>(t) * H);
    }

    std::vector<float> xn(static_cast<size_t>(T) * H), q(static_cast<size_t>(T) * QD), attn(static_cast<size_t>(T) * QD),
        proj(static_cast<size_t>(T) * H), gate(F), up(F);
    std::vector<double> scores;
    const int group = cfg.n_heads / cfg.n_kv_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(HD));

    if (record) {
        record->position = capture_position;
        record->layers.clear();
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const Model::LayerWeights& w = model_.layer(l);
        auto& kc = k_cache_[l];
        auto& vc = v_cache_[l];
        kc.resize(static_cast<size_t>(p0 + T) * KD);
        vc.resize(static_cast<size_t>(p0 + T) * KD);

        for (int t = 0; t < T; ++t) {
            const int64_t pos = p0 + t;
            float* xt = &xn[static_cast<size_t>(t) * H];
            rmsnorm(&x[static_cast<size_t>(t) * H], w.attn_norm, xt, H, cfg.norm_eps);
            float* qt = &q[static_cast<size_t>(t) * QD];
            float* kt = &kc[static_cast<size_t>(pos) * KD];
            float* vt = &vc[static_cast<size_t>(pos) * KD];
            matvec(w.wq, xt, qt, QD, H);
            matvec(w.wk, xt, kt, KD, H);
            matvec(w.wv, xt, vt, KD, H);
            if (cfg.qk_norm) {
                for (int h = 0; h < cfg.n_heads; ++h) rmsnorm(qt + h * HD, w.q_norm, qt + h * HD, HD, cfg.norm_eps);
                for (int h = 0; h < cfg.n_kv_heads; ++h) rmsnorm(kt + h * HD, w.k_norm, kt + h * HD, HD, cfg.norm_eps);
            }
            for (int h = 0; h < cfg.n_heads; ++h) rope(qt + h * HD, HD, pos, cfg.rope_theta);
            for (int h = 0; h < cfg.n_kv_heads; ++h) rope(kt + h * HD, HD, pos, cfg.rope_theta);
        }

        // Causal attention; position p0 + t attends to [0, p0 + t].
        for (int t = 0; t < T; ++t) {
            const int64_t n_keys = p0 + t + 1;
            scores.resize(static_cast<size_t>(n_keys));
            for (int h = 0; h < cfg.n_heads; ++h) {
                const float* qh = &q[static_cast<size_t>(t) * QD + static_cast<size_t>(h) * HD];
                const int kvh = h / group;
                double m = -std::numeric_limits<double>::infinity();
                for (int64_t s = 0; s < n_keys; ++s) {
                    const float* ks = &kc[static_cast<size_t>(s) * KD + static_cast<size_t>(kvh) * HD];
                    double dot = 0.0;
                    for (int i = 0; i < HD; ++i) dot += static_cast<double>(qh[i]) * static_cast<double>(ks[i]);
                    scores[s] = dot * scale;
                    m = std::max(m, scores[s]);
                }
                double sum = 0.0;
                for (int64_t s = 0; s < n_keys; ++s) {
                    scores[s] = std::exp(scores[s] - m);
                    sum += scores[s];
                }
                float* out = &attn[static_cast<size_t>(t) * QD + static_cast<size_t>(h) * HD];
                for (int i = 0; i < HD; ++i) {
                    double acc = 0.0;
                    for (int64_t s = 0; s < n_keys; ++s) {
                        acc += (scores[s] / sum) * static_cast<double>(vc[static_cast<size_t>(s) * KD + static_cast<size_t>(kvh) * HD + i]);
                    }
                    out[i] = static_cast<float>(acc);
                }
            }
        }

        for (int t = 0; t < T; ++t) {
            float* xt = &x[static_cast<size_t>(t) * H];
            float* pt = &proj[static_cast<size_t>(t) * H];
            matvec(w.wo, &attn[static_cast<size_t>(t) * QD], pt, H, QD);
            for (int i = 0; i < H; ++i) xt[i] += pt[i];

            float* nt = &xn[static_cast<size_t>(t) * H];
            rmsnorm(xt, w.ffn_norm, nt, H, cfg.norm_eps);
            matvec(w.w_gate, nt, gate.data(), F, H);
            matvec(w.w_up, nt, up.data(), F, H);
            for (int i = 0; i < F; ++i) {
                const double g = gate[i];
                gate[i] = static_cast<float>(g / (1.0 + std::exp(-g)) * static_cast<double>(up[i]));
            }
            matvec(w.w_down, gate.data(), pt, H, F);
            for (int i = 0; i < H; ++i) xt[i] += pt[i];
        }

        if (intervention_ && !intervention_->deltas.empty() && !intervention_->deltas[l].empty()) {
            const std::vector<double>& d = intervention_->deltas[l];
            const int first = intervention_->site == InjectionSite::LastPosition ? T - 1 : 0;
            for (int t = first; t < T; ++t) {
                float* xt = &x[static_cast<size_t>(t) * H];
                for (int i = 0; i < H; ++i) {
                    if (d[i] != 0.0) xt[i] = static_cast<float>(static_cast<double>(xt[i]) + d[i]);
                }
            }
        }

        if (record && std::find(capture_layers.begin(), capture_layers.end(), l) != capture_layers.end()) {
            const float* xt = &x[static_cast<size_t>(capture_t) * H];
            record->layers[l] = std::vector<float>(xt, xt + H);
        }
    }

    n_past_ = p0 + T;

    std::vector<float> normed(H), logits(cfg.vocab_size);
    rmsnorm(&x[static_cast<size_t>(T - 1) * H], model_.final_norm(), normed.data(), H, cfg.norm_eps);
    matvec(model_.lm_head(), normed.data(), logits.data(), cfg.vocab_size, H);
    return logits;
}

ForwardResult forward_capture(const Model& model, std::span<const TokenId> token_ids, std::span<const int> capture_layers,
                              int64_t capture_position, const Intervention* intervention) {
    if (token_ids.empty()) throw BoundsError("forward_capture: empty token list");
    if (capture_position < 0 || capture_position >= static_cast<int64_t>(token_ids.size())) {
        throw BoundsError("forward_capture: capture position " + std::to_string(capture_position) + " outside [0, " +
                          std::to_string(token_ids.size()) + ")");
    }
    Session session(model, intervention);
    ForwardResult r;
    r.record.position = capture_position;
    r.logits = session.step(token_ids, capture_layers, &r.record, capture_position);
    return r;
}

namespace {

class Sampler {
public:
    explicit Sampler(const GenerationConfig& gen) : gen_(gen), rng_(gen.seed) {}

    TokenId sample(std::span<const float> logits) {
        if (gen_.is_greedy()) return argmax(logits);
        auto p = softmax(logits, gen_.temperature);
        const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
        double cum = 0.0;
        TokenId last_nonzero = 0;
        for (size_t i = 0; i < p.size(); ++i) {
            if (p[i] <= 0.0) continue;
            cum += p[i];
            last_nonzero = static_cast<TokenId>(i);
            if (u < cum) return static_cast<TokenId>(i);
        }
        return last_nonzero;
    }

private:
    GenerationConfig gen_;
    std::mt19937_64 rng_;
};

StepDistribution record_distribution(std::span<const float> logits, const TraceConfig& trace) {
    StepDistribution d;
    auto p = softmax(logits, 1.0);
    if (trace.top_k <= 0 || static_cast<size_t>(trace.top_k) >= p.size()) {
        d.probs = std::move(p);
        return d;
    }
    std::vector<TokenId> idx(p.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<TokenId>(i);
    std::partial_sort(idx.begin(), idx.begin() + trace.top_k, idx.end(), [&](TokenId a, TokenId b) {
        return p[a] > p[b] || (p[a] == p[b] && a < b);
    });
    for (int i = 0; i < trace.top_k; ++i) d.top.emplace_back(idx[i], p[idx[i]]);
    return d;
}

CapturedGeneration run_generation(const Model& model, std::span<const TokenId> prompt_ids, const GenerationConfig& gen,
                                  std::span<const int> capture_layers, const Intervention* intervention,
                                  const TraceConfig& trace) {
    gen.validate();
    const ModelConfig& cfg = model.config();
    if (prompt_ids.empty()) throw BoundsError("generate: empty prompt");
    if (static_cast<int64_t>(prompt_ids.size()) > cfg.max_context) {
        throw BoundsError("generate: prompt of " + std::to_string(prompt_ids.size()) + " tokens exceeds max_context " +
                          std::to_string(cfg.max_context));
    }
    check_layers(capture_layers, cfg.n_layers);

    std::vector<TokenId> stops;
    for (const char* marker : {"<|im_end|>", "<|endoftext|>"}) {
        if (auto id = model.tokenizer().special_id(marker)) stops.push_back(*id);
    }

    CapturedGeneration out;
    GenerationTrace& tr = out.trace;
    tr.prompt_token_ids.assign(prompt_ids.begin(), prompt_ids.end());
    if (intervention && !intervention->empty()) {
        tr.steering_applied = SteeringSummary{intervention->layers, intervention->lambda, intervention->vector_set_model_hash};
    }

    Session session(model, intervention);
    Sampler sampler(gen);
    const bool capture = !capture_layers.empty();
    HiddenStateRecord rec;
    std::vector<float> logits = session.step(prompt_ids, capture_layers, capture ? &rec : nullptr);
    if (capture) out.records.push_back(std::move(rec));

    // Rows past the tokenizer (padded vocabularies) have no text and are never sampled.
    const size_t n_tok = std::min(model.tokenizer().size(), static_cast<size_t>(cfg.vocab_size));
    tr.finish = FinishReason::MaxTokens;
    for (int n = 0; n < gen.max_new_tokens; ++n) {
        const std::span<const float> live(logits.data(), n_tok);
        if (trace.record_distributions) tr.per_step_distributions.push_back(record_distribution(live, trace));
        const TokenId next = sampler.sample(live);
        tr.generated_token_ids.push_back(next);
        if (std::find(stops.begin(), stops.end(), next) != stops.end()) {
            tr.finish = FinishReason::EndOfMessage;
            break;
        }
        if (n + 1 == gen.max_new_tokens) break;
        if (session.position() >= cfg.max_context) {
            tr.finish = FinishReason::ContextFull;
            break;
        }
        const TokenId one[1] = {next};
        rec = {};
        logits = session.step(one, capture_layers, capture ? &rec : nullptr);
        if (capture) out.records.push_back(std::move(rec));
    }
    tr.decoded_text = model.tokenizer().decode(tr.generated_token_ids);
    return out;
}

}  // namespace

GenerationTrace generate(const Model& model, std::span<const TokenId> prompt_ids, const GenerationConfig& gen,
                         const Intervention* intervention, const TraceConfig& trace) {
    return run_generation(model, prompt_ids, gen, {}, intervention, trace).trace;
}

CapturedGeneration capture_during_generation(const Model& model, std::span<const TokenId> prompt_ids,
                                             const GenerationConfig& gen, std::span<const int> capture_layers,
                                             const Intervention* intervention, const TraceConfig& trace) {
    return run_generation(model, prompt_ids, gen, capture_layers, intervention, trace);
}

}  // namespace steerlm
