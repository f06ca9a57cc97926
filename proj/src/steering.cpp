#include "steerlm/steering.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <numeric>

#include "parallel.hpp"
#include "steerlm/digest.hpp"
#include "steerlm/error.hpp"

namespace steerlm {

namespace {

using Layers = std::vector<std::vector<double>>;  // [layer][hidden]

void add_into(Layers& acc, const Layers& x) {
    for (size_t l = 0; l < acc.size(); ++l)
        for (size_t i = 0; i < acc[l].size(); ++i) acc[l][i] += x[l][i];
}

// Streaming pairwise summation. Items are pushed in a fixed order; partial
// sums of equal size are merged like a binary counter, so the association
// tree depends only on the number of items.
class PairwiseSum {
public:
    void push(Layers x) {
        stack_.push_back({1, std::move(x)});
        while (stack_.size() >= 2 && stack_[stack_.size() - 1].count == stack_[stack_.size() - 2].count) {
            auto top = std::move(stack_.back());
            stack_.pop_back();
            add_into(stack_.back().sum, top.sum);
            stack_.back().count += top.count;
        }
    }

    Layers total() const {
        if (stack_.empty()) return {};
        Layers out = stack_.back().sum;
        for (size_t k = stack_.size() - 1; k-- > 0;) add_into(out, stack_[k].sum);
        return out;
    }

private:
    struct Part {
        size_t count;
        Layers sum;
    };
    std::vector<Part> stack_;
};

Layers to_double(const HiddenStateRecord& rec, int n_layers) {
    Layers out(static_cast<size_t>(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        const auto& v = rec.layers.at(l);
        out[static_cast<size_t>(l)].assign(v.begin(), v.end());
    }
    return out;
}

std::vector<TokenId> encode_prompt(const Model& model, const std::string& rendered, const std::string& id) {
    auto ids = model.tokenizer().encode(rendered);
    const int max_ctx = model.config().max_context;
    if (ids.empty()) throw DataError("query '" + id + "': rendered prompt encodes to no tokens");
    if (static_cast<int64_t>(ids.size()) > max_ctx) {
        throw BoundsError("query '" + id + "': prompt has " + std::to_string(ids.size()) +
                          " tokens, model context is " + std::to_string(max_ctx));
    }
    return ids;
}

std::string cell_label(const std::vector<int>& layers, double lambda) {
    std::string s = "sweep cell layers=[";
    for (size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
    char buf[64];
    std::snprintf(buf, sizeof buf, "] lambda=%g: ", lambda);
    return s + buf;
}

// Re-raises with cell context, keeping the error category.
[[noreturn]] void rethrow_with(const std::string& ctx) {
    try {
        throw;
    } catch (const IncompatibleError& e) {
        throw IncompatibleError(ctx + e.what());
    } catch (const BoundsError& e) {
        throw BoundsError(ctx + e.what());
    } catch (const DataError& e) {
        throw DataError(ctx + e.what());
    } catch (const TemplateError& e) {
        throw TemplateError(ctx + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(ctx + e.what());
    } catch (const Error& e) {
        throw Error(ctx + e.what());
    }
}

struct PreparedPrompt {
    std::string id;
    std::vector<TokenId> ids;
};

std::vector<PreparedPrompt> prepare(const Model& model, std::span<const QueryRecord> queries, bool safety_prompt,
                                    const SafetyTemplate& safety, const ChatTemplate& chat,
                                    const std::string& base_system) {
    std::vector<PreparedPrompt> out;
    out.reserve(queries.size());
    for (const auto& q : queries) {
        if (safety_prompt && is_safety_wrapped(q.prompt, safety))
            throw TemplateError("query '" + q.id + "' already carries the safety reminder");
        auto pair = wrap_safety(q.prompt, safety, chat, base_system);
        out.push_back({q.id, encode_prompt(model, safety_prompt ? pair.safety_rendered : pair.original_rendered, q.id)});
    }
    return out;
}

struct RunStats {
    double refusal_rate = 0.0;
    double mean_length = 0.0;
    std::vector<std::vector<TokenId>> outputs;
};

RunStats run_prompts(const Model& model, const std::vector<PreparedPrompt>& prompts, const GenerationConfig& gen,
                     const Intervention* iv, const WordLists& words, int jobs) {
    RunStats st;
    st.outputs.resize(prompts.size());
    std::vector<char> refused(prompts.size(), 0);
    detail::parallel_for(0, prompts.size(), jobs, [&](size_t i) {
        GenerationConfig g = gen;
        g.seed = gen.seed + i;
        auto trace = generate(model, prompts[i].ids, g, iv);
        refused[i] = detect_refusal(split_response(trace.decoded_text), words) ? 1 : 0;
        st.outputs[i] = std::move(trace.generated_token_ids);
    });
    if (prompts.empty()) return st;
    size_t n_ref = 0, total_len = 0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        n_ref += static_cast<size_t>(refused[i]);
        total_len += st.outputs[i].size();
    }
    st.refusal_rate = static_cast<double>(n_ref) / static_cast<double>(prompts.size());
    st.mean_length = static_cast<double>(total_len) / static_cast<double>(prompts.size());
    return st;
}

std::string outputs_digest(const RunStats& a, const RunStats& b) {
    Sha256 h;
    for (const RunStats* s : {&a, &b}) {
        for (const auto& ids : s->outputs) {
            std::string buf;
            for (TokenId t : ids) buf += std::to_string(t) + ",";
            h.update_field(buf);
        }
        h.update_field("|");
    }
    return h.hex_digest();
}

}  // namespace

SteeringVectorSet extract_vectors(const Model& model, std::span<const QueryRecord> harmful, const SafetyTemplate& safety,
                                  const ChatTemplate& chat, const ExtractOptions& options) {
    if (harmful.empty()) throw DataError("extraction set is empty");
    chat.validate();
    const auto& cfg = model.config();

    std::vector<size_t> order(harmful.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (harmful[a].id != harmful[b].id) return harmful[a].id < harmful[b].id;
        return harmful[a].prompt < harmful[b].prompt;
    });

    // Render and tokenize everything up front so template and length errors
    // surface before any forward pass.
    struct Pair {
        std::vector<TokenId> original, safe;
    };
    std::vector<Pair> pairs(order.size());
    for (size_t k = 0; k < order.size(); ++k) {
        const auto& q = harmful[order[k]];
        if (is_safety_wrapped(q.prompt, safety))
            throw TemplateError("query '" + q.id + "' already carries the safety reminder");
        auto p = wrap_safety(q.prompt, safety, chat, options.base_system);
        pairs[k].original = encode_prompt(model, p.original_rendered, q.id);
        pairs[k].safe = encode_prompt(model, p.safety_rendered, q.id);
    }

    std::vector<int> all_layers(static_cast<size_t>(cfg.n_layers));
    std::iota(all_layers.begin(), all_layers.end(), 0);

    PairwiseSum sum_orig, sum_safe;
    const size_t batch = static_cast<size_t>(std::max(1, options.jobs));
    for (size_t start = 0; start < pairs.size(); start += batch) {
        const size_t end = std::min(pairs.size(), start + batch);
        std::vector<Layers> orig(end - start), safe(end - start);
        detail::parallel_for(start, end, options.jobs, [&](size_t k) {
            const auto& p = pairs[k];
            auto ro = forward_capture(model, p.original, all_layers, static_cast<int64_t>(p.original.size()) - 1);
            auto rs = forward_capture(model, p.safe, all_layers, static_cast<int64_t>(p.safe.size()) - 1);
            orig[k - start] = to_double(ro.record, cfg.n_layers);
            safe[k - start] = to_double(rs.record, cfg.n_layers);
        });
        for (size_t k = 0; k < orig.size(); ++k) {
            sum_orig.push(std::move(orig[k]));
            sum_safe.push(std::move(safe[k]));
        }
    }

    const Layers so = sum_orig.total();
    const Layers ss = sum_safe.total();
    const double n = static_cast<double>(pairs.size());
    SteeringVectorSet out;
    out.vectors.assign(static_cast<size_t>(cfg.n_layers), std::vector<double>(static_cast<size_t>(cfg.hidden_dim)));
    for (size_t l = 0; l < out.vectors.size(); ++l)
        for (size_t i = 0; i < out.vectors[l].size(); ++i) out.vectors[l][i] = ss[l][i] / n - so[l][i] / n;
    out.model_hash = model.content_hash();
    out.template_id = safety.template_id();
    out.dataset_fingerprint = fingerprint_set(harmful);
    out.n_examples = static_cast<int64_t>(pairs.size());
    return out;
}

size_t select_cell(std::span<const SweepCell> cells, double over_refusal_cap, bool* within_cap) {
    if (cells.empty()) throw ConfigError("sweep produced no cells");
    bool any_ok = false;
    for (const auto& c : cells) any_ok = any_ok || c.over_refusal_rate <= over_refusal_cap;
    if (within_cap) *within_cap = any_ok;

    auto better = [&](const SweepCell& a, const SweepCell& b) {
        // true when a ranks strictly ahead of b
        if (any_ok) {
            if (a.refusal_rate != b.refusal_rate) return a.refusal_rate > b.refusal_rate;
        } else if (a.over_refusal_rate != b.over_refusal_rate) {
            return a.over_refusal_rate < b.over_refusal_rate;
        }
        if (std::fabs(a.lambda) != std::fabs(b.lambda)) return std::fabs(a.lambda) < std::fabs(b.lambda);
        return a.layers.size() < b.layers.size();
    };
    std::optional<size_t> best;
    for (size_t i = 0; i < cells.size(); ++i) {
        if (any_ok && cells[i].over_refusal_rate > over_refusal_cap) continue;
        if (!best || better(cells[i], cells[*best])) best = i;
    }
    return *best;
}

SweepReport sweep(const Model& model, std::shared_ptr<const SteeringVectorSet> vectors,
                  std::span<const QueryRecord> validation_harmful, std::span<const QueryRecord> benign_probe,
                  std::span<const std::set<int>> layer_grid, std::span<const double> lambda_grid,
                  const GenerationConfig& gen, const WordLists& words, const SafetyTemplate& safety,
                  const ChatTemplate& chat, const SweepOptions& options) {
    if (!vectors) throw ConfigError("sweep: no steering vectors");
    if (layer_grid.empty()) throw ConfigError("sweep: layer grid is empty");
    if (lambda_grid.empty()) throw ConfigError("sweep: lambda grid is empty");
    if (validation_harmful.empty()) throw DataError("sweep: validation set is empty");
    if (benign_probe.empty()) throw DataError("sweep: benign probe set is empty");
    if (!(options.over_refusal_cap >= 0.0 && options.over_refusal_cap <= 1.0))
        throw ConfigError("sweep: over-refusal cap must lie in [0, 1]");
    for (double l : lambda_grid)
        if (!std::isfinite(l)) throw ConfigError("sweep: lambda values must be finite");
    gen.validate();
    chat.validate();

    // Benign prompts use the same wrapping as validation so that over-refusal
    // measures the steering, not the prompt change.
    const auto val = prepare(model, validation_harmful, options.safety_prompt, safety, chat, options.base_system);
    const auto ben = prepare(model, benign_probe, options.safety_prompt, safety, chat, options.base_system);

    SweepReport report;
    report.over_refusal_cap = options.over_refusal_cap;
    {
        auto v = run_prompts(model, val, gen, nullptr, words, options.jobs);
        auto b = run_prompts(model, ben, gen, nullptr, words, options.jobs);
        report.baseline.refusal_rate = v.refusal_rate;
        report.baseline.over_refusal_rate = b.refusal_rate;
        report.baseline.mean_length = v.mean_length;
        report.baseline.outputs_digest = outputs_digest(v, b);
    }

    for (const auto& layers : layer_grid) {
        for (double lambda : lambda_grid) {
            SweepCell cell;
            cell.layers.assign(layers.begin(), layers.end());
            cell.lambda = lambda;
            try {
                auto plan = make_plan(vectors, layers, lambda, options.site);
                auto iv = compile_intervention(model, plan);
                auto v = run_prompts(model, val, gen, &iv, words, options.jobs);
                auto b = run_prompts(model, ben, gen, &iv, words, options.jobs);
                cell.refusal_rate = v.refusal_rate;
                cell.over_refusal_rate = b.refusal_rate;
                cell.mean_length = v.mean_length;
                cell.outputs_digest = outputs_digest(v, b);
            } catch (const Error&) {
                rethrow_with(cell_label(cell.layers, lambda));
            }
            report.cells.push_back(std::move(cell));
        }
    }
    report.selected = select_cell(report.cells, options.over_refusal_cap, &report.selected_within_cap);
    return report;
}

}  // namespace steerlm
