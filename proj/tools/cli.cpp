#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "parallel.hpp"
#include "steerlm/analysis.hpp"
#include "steerlm/datasets.hpp"
#include "steerlm/digest.hpp"
#include "steerlm/error.hpp"
#include "steerlm/prompting.hpp"
#include "steerlm/steering.hpp"
#include "steerlm/vectors.hpp"
#include "steerlm/version.hpp"

namespace steerlm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Options shared by every command.
struct Globals {
    std::string model;
    uint64_t seed = 0;
    int jobs = 1;
    std::string profile = "default";
    std::string manifest;
};

struct PromptOpts {
    std::string safety_template;
    std::string chat_template;
    std::string base_system;

    SafetyTemplate safety() const {
        return safety_template.empty() ? SafetyTemplate::defaults() : SafetyTemplate::load(safety_template);
    }
    ChatTemplate chat() const {
        auto c = chat_template.empty() ? ChatTemplate::defaults() : ChatTemplate::load(chat_template);
        c.validate();
        return c;
    }
};

struct GenOpts {
    std::optional<double> temperature;
    std::optional<int> max_new_tokens;

    GenerationConfig resolve(const std::string& profile) const {
        GenerationConfig g;
        if (profile == "tiny") {
            g.temperature = 0.0;
            g.max_new_tokens = 64;
        } else if (profile != "default") {
            throw ConfigError("unknown profile '" + profile + "' (expected default or tiny)");
        }
        if (temperature) g.temperature = *temperature;
        if (max_new_tokens) g.max_new_tokens = *max_new_tokens;
        g.validate();
        return g;
    }
};

// Generated text may hold partial UTF-8 sequences; they are written as U+FFFD
// (token ids in traces keep the exact bytes).
std::string dump_json(const json& j, int indent = -1) {
    return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

std::string file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    out << text;
    if (!out) throw Error("write to '" + p.string() + "' failed");
}

// Accumulates the run manifest while a command executes.
class Manifest {
public:
    Manifest(std::string command, const Globals& g) : start_(std::chrono::steady_clock::now()) {
        doc_["command"] = std::move(command);
        doc_["engine_version"] = kVersion;
        doc_["config"] = {{"seed", g.seed}, {"jobs", g.jobs}, {"profile", g.profile}};
        doc_["inputs"] = json::object();
        doc_["outputs"] = json::array();
    }

    void config(const std::string& key, json value) { doc_["config"][key] = std::move(value); }
    void input_file(const std::string& key, const fs::path& p) {
        doc_["inputs"][key] = {{"path", p.string()}, {"sha256", file_digest(p)}};
    }
    void input_digest(const std::string& key, const std::string& path, const std::string& digest) {
        doc_["inputs"][key] = {{"path", path}, {"sha256", digest}};
    }
    void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
    void summary(const std::string& s) { doc_["summary"] = s; }
    json& extra() { return doc_; }

    fs::path write(const fs::path& primary, const std::string& override_path) {
        const fs::path path = override_path.empty() ? fs::path(primary.string() + ".manifest.json") : fs::path(override_path);
        const auto elapsed = std::chrono::steady_clock::now() - start_;
        doc_["wall_clock_seconds"] = std::chrono::duration<double>(elapsed).count();
        write_text(path, dump_json(doc_, 2) + "\n");
        return path;
    }

private:
    json doc_;
    std::chrono::steady_clock::time_point start_;
};

json steering_json(const std::optional<SteeringPlan>& plan) {
    if (!plan) return nullptr;
    return {{"layers", std::vector<int>(plan->layers.begin(), plan->layers.end())}, {"lambda", plan->lambda}};
}

std::set<int> parse_layers(const std::string& text) {
    std::set<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
        if (item.empty()) continue;
        size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) throw ConfigError("invalid layer index '" + item + "'");
        out.insert(v);
    }
    if (out.empty()) throw ConfigError("empty layer list '" + text + "'");
    return out;
}

std::string layers_str(const std::vector<int>& layers) {
    std::string s;
    for (size_t i = 0; i < layers.size(); ++i) s += (i ? "," : "") + std::to_string(layers[i]);
    return s;
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss << v;
    return ss.str();
}

json trace_json(const GenerationTrace& t, int top_k) {
    json j = {{"prompt_token_ids", t.prompt_token_ids},
              {"generated_token_ids", t.generated_token_ids},
              {"finish_reason", to_string(t.finish)}};
    json dists = json::array();
    for (const auto& d : t.per_step_distributions) {
        if (d.full()) {
            dists.push_back(d.probs);
        } else {
            json top = json::array();
            for (const auto& [id, p] : d.top) top.push_back({id, p});
            dists.push_back({{"top", std::move(top)}});
        }
    }
    j["distributions"] = std::move(dists);
    j["top_k"] = top_k;
    return j;
}

std::vector<StepDistribution> parse_distributions(const json& arr, const std::string& where) {
    if (!arr.is_array()) throw DataError(where + "'distributions' must be an array");
    std::vector<StepDistribution> out;
    for (const auto& d : arr) {
        StepDistribution s;
        if (d.is_array()) {
            s.probs = d.get<std::vector<double>>();
        } else if (d.is_object() && d.contains("top")) {
            for (const auto& e : d.at("top")) s.top.emplace_back(e.at(0).get<TokenId>(), e.at(1).get<double>());
        } else {
            throw DataError(where + "malformed distribution entry");
        }
        out.push_back(std::move(s));
    }
    return out;
}

template <typename Fn>
void for_each_jsonl(const fs::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::string line;
    for (size_t n = 1; std::getline(in, line); ++n) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(n) + ": ";
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(where + "invalid JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw DataError(where + "expected a JSON object");
        try {
            fn(j, where);
        } catch (const json::exception& e) {
            throw DataError(where + e.what());
        }
    }
}

std::string require_string(const json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) throw DataError(where + "missing string field '" + key + "'");
    return it->get<std::string>();
}

std::string row_id(const json& j, const std::string& where) {
    auto it = j.find("id");
    if (it != j.end() && it->is_number_integer()) return std::to_string(it->get<int64_t>());
    return require_string(j, "id", where);
}

ModelHandle require_model(const Globals& g) {
    if (g.model.empty()) throw ConfigError("--model is required");
    return Model::load(g.model);
}

// ------------------------------------------------------------------ extract

struct ExtractArgs {
    std::string data, out, validation_out;
    std::optional<size_t> n_extraction, n_validation;
    std::optional<uint64_t> split_seed;
    PromptOpts prompts;
};

std::string cmd_extract(const Globals& g, const ExtractArgs& a, fs::path& manifest_path) {
    auto model = require_model(g);
    Manifest m("extract", g);
    m.input_digest("model", g.model, model->content_hash());
    m.input_file("data", a.data);
    auto corpus = load_corpus(a.data);
    const auto safety = a.prompts.safety();
    const auto chat = a.prompts.chat();

    std::vector<QueryRecord> extraction = corpus;
    if (a.n_extraction || a.n_validation) {
        const size_t n_ex = a.n_extraction.value_or(corpus.size() - std::min(corpus.size(), a.n_validation.value_or(0)));
        const size_t n_val = a.n_validation.value_or(0);
        const uint64_t seed = a.split_seed.value_or(g.seed);
        auto split = split_corpus(corpus, n_ex, n_val, seed);
        extraction = split.extraction;
        m.config("split", {{"n_extraction", n_ex}, {"n_validation", n_val}, {"seed", seed},
                           {"fingerprint", split.fingerprint}});
        if (n_val > 0) {
            const fs::path vpath = a.validation_out.empty() ? fs::path(a.out + ".validation.jsonl") : fs::path(a.validation_out);
            write_corpus(vpath, split.validation);
            m.output(vpath);
        }
    }
    m.config("template_id", safety.template_id());
    m.config("chat_template", chat.to_json());
    m.config("base_system", a.prompts.base_system);

    ExtractOptions opts;
    opts.jobs = g.jobs;
    opts.base_system = a.prompts.base_system;
    auto set = extract_vectors(*model, extraction, safety, chat, opts);
    save_vectors(set, a.out);
    m.output(a.out);
    const std::string summary = "extract: " + std::to_string(set.n_examples) + " examples, " +
                                std::to_string(set.n_layers()) + " layers x " + std::to_string(set.hidden_dim()) +
                                " -> " + a.out;
    m.summary(summary);
    manifest_path = m.write(a.out, g.manifest);
    return summary;
}

// ----------------------------------------------------------------- generate

struct GenerateArgs {
    std::string input, out, vectors, layers, trace_out, dataset, plan;
    std::optional<double> lambda;
    bool no_steer = false, no_safety_prompt = false, last_position_only = false;
    int top_k = 0;
    GenOpts gen;
    PromptOpts prompts;
};

std::string cmd_generate(const Globals& g, const GenerateArgs& a, fs::path& manifest_path) {
    auto model = require_model(g);
    const GenerationConfig gen = a.gen.resolve(g.profile);
    Manifest m("generate", g);
    m.input_digest("model", g.model, model->content_hash());
    m.input_file("input", a.input);
    m.config("generation", {{"temperature", gen.temperature}, {"max_new_tokens", gen.max_new_tokens}});
    m.config("safety_prompt", !a.no_safety_prompt);

    const auto safety = a.prompts.safety();
    const auto chat = a.prompts.chat();
    const bool use_safety = !a.no_safety_prompt;
    if (use_safety) m.config("template_id", safety.template_id());
    m.config("base_system", a.prompts.base_system);

    std::optional<SteeringPlan> plan;
    Intervention iv;
    if (!a.no_steer) {
        if (a.vectors.empty() || (a.plan.empty() && (a.layers.empty() || !a.lambda))) {
            throw ConfigError("generate needs --vectors with --plan or --layers and --lambda (or --no-steer)");
        }
        if (!a.plan.empty() && (!a.layers.empty() || a.lambda)) {
            throw ConfigError("--plan cannot be combined with --layers/--lambda");
        }
        auto set = std::make_shared<const SteeringVectorSet>(load_vectors(a.vectors));
        m.input_file("vectors", a.vectors);
        if (!a.plan.empty()) {
            plan = load_plan(a.plan, set);
            m.input_file("plan", a.plan);
        } else {
            plan = make_plan(set, parse_layers(a.layers), *a.lambda,
                             a.last_position_only ? InjectionSite::LastPosition : InjectionSite::AllPositions);
        }
        iv = compile_intervention(*model, *plan);
        m.config("steering", {{"layers", std::vector<int>(plan->layers.begin(), plan->layers.end())},
                              {"lambda", plan->lambda},
                              {"site", to_string(plan->site)}});
    } else {
        m.config("steering", nullptr);
    }

    const auto queries = load_corpus(a.input);
    std::vector<std::vector<TokenId>> prompt_ids(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) {
        const auto& q = queries[i];
        if (use_safety && is_safety_wrapped(q.prompt, safety)) {
            throw TemplateError("query '" + q.id + "' already carries the safety reminder");
        }
        auto pair = wrap_safety(q.prompt, safety, chat, a.prompts.base_system);
        prompt_ids[i] = model->tokenizer().encode(use_safety ? pair.safety_rendered : pair.original_rendered);
        if (static_cast<int64_t>(prompt_ids[i].size()) >= model->config().max_context) {
            throw BoundsError("query '" + q.id + "': prompt has " + std::to_string(prompt_ids[i].size()) +
                              " tokens, model context is " + std::to_string(model->config().max_context));
        }
    }

    TraceConfig tc;
    tc.record_distributions = !a.trace_out.empty();
    tc.top_k = a.top_k;
    std::vector<GenerationTrace> traces(queries.size());
    detail::parallel_for(0, queries.size(), g.jobs, [&](size_t i) {
        GenerationConfig gi = gen;
        gi.seed = derive_seed(g.seed, i);
        traces[i] = generate(*model, prompt_ids[i], gi, plan ? &iv : nullptr, tc);
    });

    std::string rows, trace_rows;
    for (size_t i = 0; i < queries.size(); ++i) {
        const auto seg = split_response(traces[i].decoded_text);
        json row = {{"id", queries[i].id},
                    {"prompt", queries[i].prompt},
                    {"reasoning", seg.reasoning},
                    {"answer", seg.answer},
                    {"has_split", seg.has_split},
                    {"steering", steering_json(plan)},
                    {"template_id", use_safety ? json(safety.template_id()) : json(nullptr)},
                    {"finish_reason", to_string(traces[i].finish)},
                    {"generated_tokens", traces[i].generated_token_ids.size()}};
        if (!a.dataset.empty()) row["dataset"] = a.dataset;
        rows += dump_json(row) + "\n";
        if (!a.trace_out.empty()) {
            json t = trace_json(traces[i], a.top_k);
            t["id"] = queries[i].id;
            t["steering"] = steering_json(plan);
            if (!a.dataset.empty()) t["dataset"] = a.dataset;
            trace_rows += dump_json(t) + "\n";
        }
    }
    write_text(a.out, rows);
    m.output(a.out);
    if (!a.trace_out.empty()) {
        write_text(a.trace_out, trace_rows);
        m.output(a.trace_out);
    }
    std::string summary = "generate: " + std::to_string(queries.size()) + " responses";
    summary += plan ? ", steering layers=" + layers_str({plan->layers.begin(), plan->layers.end()}) +
                          " lambda=" + fmt(plan->lambda)
                    : ", no steering";
    summary += use_safety ? ", safety prompt on" : ", safety prompt off";
    summary += " -> " + a.out;
    m.summary(summary);
    manifest_path = m.write(a.out, g.manifest);
    return summary;
}

// -------------------------------------------------------------------- sweep

struct SweepArgs {
    std::string vectors, validation, benign, out, wordlists;
    std::vector<std::string> layer_sets;
    std::vector<double> lambdas;
    double cap = 0.10;
    bool no_safety_prompt = false, last_position_only = false;
    GenOpts gen;
    PromptOpts prompts;
};

json cell_json(const SweepCell& c) {
    return {{"layers", c.layers},
            {"lambda", c.lambda},
            {"refusal_rate", c.refusal_rate},
            {"over_refusal_rate", c.over_refusal_rate},
            {"mean_length", c.mean_length},
            {"outputs_digest", c.outputs_digest}};
}

std::string cmd_sweep(const Globals& g, const SweepArgs& a, fs::path& manifest_path) {
    if (a.layer_sets.empty()) throw ConfigError("sweep: at least one --layers set is required");
    if (a.lambdas.empty()) throw ConfigError("sweep: at least one --lambda value is required");
    std::vector<std::set<int>> grid;
    for (const auto& s : a.layer_sets) grid.push_back(parse_layers(s));

    auto model = require_model(g);
    GenerationConfig gen = a.gen.resolve(g.profile);
    gen.seed = g.seed;
    Manifest m("sweep", g);
    m.input_digest("model", g.model, model->content_hash());
    m.input_file("vectors", a.vectors);
    m.input_file("validation", a.validation);
    m.input_file("benign", a.benign);
    m.config("generation", {{"temperature", gen.temperature}, {"max_new_tokens", gen.max_new_tokens}});
    m.config("over_refusal_cap", a.cap);

    auto set = std::make_shared<const SteeringVectorSet>(load_vectors(a.vectors));
    const auto words = a.wordlists.empty() ? WordLists::defaults() : WordLists::load(a.wordlists);
    SweepOptions opts;
    opts.over_refusal_cap = a.cap;
    opts.safety_prompt = !a.no_safety_prompt;
    opts.site = a.last_position_only ? InjectionSite::LastPosition : InjectionSite::AllPositions;
    opts.base_system = a.prompts.base_system;
    opts.jobs = g.jobs;
    const auto validation = load_corpus(a.validation, QueryLabel::Harmful);
    const auto benign = load_corpus(a.benign, QueryLabel::Benign);
    auto report = sweep(*model, set, validation, benign, grid, a.lambdas, gen, words, a.prompts.safety(),
                        a.prompts.chat(), opts);

    json cells = json::array();
    for (const auto& c : report.cells) cells.push_back(cell_json(c));
    const auto& sel = report.cells[report.selected];
    json doc = {{"selected",
                 {{"index", report.selected},
                  {"layers", sel.layers},
                  {"lambda", sel.lambda},
                  {"within_cap", report.selected_within_cap},
                  {"refusal_rate", sel.refusal_rate},
                  {"over_refusal_rate", sel.over_refusal_rate}}},
                {"over_refusal_cap", report.over_refusal_cap},
                {"baseline", cell_json(report.baseline)},
                {"cells", std::move(cells)}};
    write_text(a.out, dump_json(doc, 2) + "\n");
    m.output(a.out);
    const std::string summary = "sweep: " + std::to_string(report.cells.size()) + " cells, selected layers=" +
                                layers_str(sel.layers) + " lambda=" + fmt(sel.lambda) +
                                " refusal=" + fmt(sel.refusal_rate) + " over_refusal=" + fmt(sel.over_refusal_rate) +
                                (report.selected_within_cap ? "" : " (no cell within cap)") + " -> " + a.out;
    m.summary(summary);
    manifest_path = m.write(a.out, g.manifest);
    return summary;
}

// ------------------------------------------------------------------ analyze

struct AnalyzeArgs {
    std::vector<std::string> responses;
    std::string out_dir, traces, baseline_traces, tokenizer, wordlists, labels, dataset;
    bool logit_metrics = false;
    double epsilon = 0.0;
};

struct TraceRow {
    std::string id, dataset;
    std::vector<TokenId> generated;
    std::vector<StepDistribution> dists;
};

std::vector<TraceRow> load_traces(const fs::path& path, bool require_dists,
                                  const std::map<std::string, std::string>& dataset_of_id, const std::string& fallback) {
    std::vector<TraceRow> out;
    for_each_jsonl(path, [&](const json& j, const std::string& where) {
        TraceRow r;
        r.id = row_id(j, where);
        auto gen = j.find("generated_token_ids");
        if (gen == j.end()) throw DataError(where + "missing field 'generated_token_ids'");
        r.generated = gen->get<std::vector<TokenId>>();
        auto d = j.find("distributions");
        if (d == j.end() || (d->is_array() && d->empty() && !r.generated.empty())) {
            if (require_dists) throw DataError(where + "missing field 'distributions' (needed for logit metrics)");
        } else {
            r.dists = parse_distributions(*d, where);
        }
        if (auto ds = j.find("dataset"); ds != j.end() && ds->is_string()) r.dataset = ds->get<std::string>();
        else if (auto it = dataset_of_id.find(r.id); it != dataset_of_id.end()) r.dataset = it->second;
        else r.dataset = fallback;
        out.push_back(std::move(r));
    });
    return out;
}

std::map<std::string, RefusalMassSummary> summarize_traces(const std::vector<TraceRow>& rows, const Tokenizer& tok,
                                                           const WordLists& words, const fs::path& source) {
    std::map<std::string, std::vector<RefusalMassSummary>> parts;
    for (const auto& r : rows) {
        try {
            parts[r.dataset].push_back(trace_pivot_events(r.generated, r.dists, tok, words));
        } catch (const Error& e) {
            throw DataError(source.string() + ": trace '" + r.id + "': " + e.what());
        }
    }
    std::map<std::string, RefusalMassSummary> out;
    for (const auto& [ds, p] : parts) out[ds] = merge_summaries(p);
    return out;
}

json summary_json(const RefusalMassSummary& s) {
    return {{"n_events", s.n_events}, {"mean_mass", s.mean_mass ? json(*s.mean_mass) : json(nullptr)}};
}

std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string cmd_analyze(const Globals& g, const AnalyzeArgs& a, fs::path& manifest_path) {
    if (a.responses.empty()) throw ConfigError("analyze: at least one --responses file is required");
    if (a.logit_metrics && a.traces.empty()) throw ConfigError("analyze: --logit-metrics needs --traces");
    if (!a.baseline_traces.empty() && a.traces.empty()) throw ConfigError("analyze: --baseline-traces needs --traces");
    Manifest m("analyze", g);
    const auto words = a.wordlists.empty() ? WordLists::defaults() : WordLists::load(a.wordlists);
    m.config("wordlists", words.to_json());
    m.config("epsilon", a.epsilon);

    std::map<std::string, std::vector<Response>> by_dataset;
    std::map<std::string, std::string> dataset_of_id;
    std::vector<Response> all;
    for (size_t k = 0; k < a.responses.size(); ++k) {
        const fs::path path = a.responses[k];
        m.input_file("responses_" + std::to_string(k), path);
        const std::string fallback = a.dataset.empty() ? path.stem().string() : a.dataset;
        for_each_jsonl(path, [&](const json& j, const std::string& where) {
            Response r;
            r.id = row_id(j, where);
            if (auto t = j.find("text"); t != j.end() && t->is_string()) {
                r.segments = split_response(t->get<std::string>());
            } else {
                r.segments.answer = require_string(j, "answer", where);
                if (auto re = j.find("reasoning"); re != j.end() && re->is_string()) r.segments.reasoning = re->get<std::string>();
                r.segments.has_split = j.value("has_split", !r.segments.reasoning.empty());
            }
            std::string ds = fallback;
            if (auto it = j.find("dataset"); it != j.end() && it->is_string()) ds = it->get<std::string>();
            dataset_of_id.emplace(r.id, ds);
            by_dataset[ds].push_back(r);
            all.push_back(std::move(r));
        });
    }

    json report;
    json datasets = json::array();
    std::string gap_csv = "dataset,n,n_aware,n_compliant,p_aware,p_compliance,gap\n";
    for (const auto& [ds, rs] : by_dataset) {
        auto gr = compute_gap(rs, words, ds);
        datasets.push_back({{"dataset", gr.dataset_id},
                            {"n", gr.n},
                            {"n_aware", gr.n_aware},
                            {"n_compliant", gr.n_compliant},
                            {"p_aware", gr.p_aware},
                            {"p_compliance", gr.p_compliance},
                            {"gap", gr.gap}});
        gap_csv += ds + "," + std::to_string(gr.n) + "," + std::to_string(gr.n_aware) + "," +
                   std::to_string(gr.n_compliant) + "," + csv_num(gr.p_aware) + "," + csv_num(gr.p_compliance) + "," +
                   csv_num(gr.gap) + "\n";
    }
    report["gap"] = std::move(datasets);

    if (!a.labels.empty()) {
        m.input_file("labels", a.labels);
        std::map<std::string, bool> gold;
        for (const auto& q : load_corpus(a.labels)) gold[q.id] = q.label == QueryLabel::Harmful;
        auto f = proxy_f1(all, gold, words);
        report["proxy_f1"] = {{"tp", f.tp}, {"fp", f.fp}, {"fn", f.fn}, {"tn", f.tn},
                              {"precision", f.precision}, {"recall", f.recall}, {"f1", f.f1}};
    }

    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir);
    if (!a.traces.empty()) {
        std::optional<Tokenizer> tok;
        if (!a.tokenizer.empty()) {
            m.input_file("tokenizer", a.tokenizer);
            std::ifstream in(a.tokenizer, std::ios::binary);
            if (!in) throw LoadError("cannot open tokenizer '" + a.tokenizer + "'");
            std::ostringstream ss;
            ss << in.rdbuf();
            tok.emplace(TokenizerSpec::parse(ss.str()));
        } else if (!g.model.empty()) {
            auto model = Model::load(g.model);
            m.input_digest("model", g.model, model->content_hash());
            tok.emplace(model->tokenizer());
        } else {
            throw ConfigError("analyze: trace metrics need --model or --tokenizer");
        }
        const std::string fallback = a.dataset.empty() ? "all" : a.dataset;
        m.input_file("traces", a.traces);
        const auto steered = summarize_traces(load_traces(a.traces, a.logit_metrics, dataset_of_id, fallback), *tok,
                                              words, a.traces);
        json logit = json::array();
        std::string delta_csv = "dataset,n_events,mean_mass,baseline_n_events,baseline_mean_mass,delta_log\n";
        std::map<std::string, RefusalMassSummary> base;
        if (!a.baseline_traces.empty()) {
            m.input_file("baseline_traces", a.baseline_traces);
            base = summarize_traces(load_traces(a.baseline_traces, a.logit_metrics, dataset_of_id, fallback), *tok,
                                    words, a.baseline_traces);
        }
        for (const auto& [ds, s] : steered) {
            json entry = {{"dataset", ds}, {"steered", summary_json(s)}};
            if (!a.baseline_traces.empty()) {
                auto it = base.find(ds);
                if (it == base.end()) throw DataError("analyze: dataset '" + ds + "' has no baseline traces");
                entry["baseline"] = summary_json(it->second);
                auto opt_num = [](const std::optional<double>& v) { return v ? csv_num(*v) : std::string(); };
                std::string lr_csv;
                try {
                    const double lr = log_ratio(s, it->second, a.epsilon);
                    entry["delta_log"] = lr;
                    lr_csv = csv_num(lr);
                } catch (const DataError& e) {
                    // no events or zero mass on one side: undefined for this dataset only
                    entry["delta_log"] = nullptr;
                    entry["delta_log_undefined"] = e.what();
                }
                delta_csv += ds + "," + std::to_string(s.n_events) + "," + opt_num(s.mean_mass) + "," +
                             std::to_string(it->second.n_events) + "," + opt_num(it->second.mean_mass) + "," + lr_csv +
                             "\n";
            }
            logit.push_back(std::move(entry));
        }
        report["refusal_mass"] = std::move(logit);
        if (!a.baseline_traces.empty()) {
            write_text(out_dir / "delta_log.csv", delta_csv);
            m.output(out_dir / "delta_log.csv");
        }
    }

    write_text(out_dir / "report.json", dump_json(report, 2) + "\n");
    write_text(out_dir / "gap.csv", gap_csv);
    m.output(out_dir / "report.json");
    m.output(out_dir / "gap.csv");
    const std::string summary = "analyze: " + std::to_string(all.size()) + " responses in " +
                                std::to_string(by_dataset.size()) + " dataset(s) -> " + out_dir.string();
    m.summary(summary);
    manifest_path = m.write(out_dir / "report.json", g.manifest);
    return summary;
}

// ------------------------------------------------------------- vectors-info

std::string cmd_vectors_info(const Globals& g, const std::string& vectors, const std::string& out,
                             fs::path& manifest_path) {
    auto set = load_vectors(vectors);
    Manifest m("vectors-info", g);
    m.input_file("vectors", vectors);
    json layers = json::array();
    for (int l = 0; l < set.n_layers(); ++l) {
        double ss = 0.0;
        for (double v : set.vectors[static_cast<size_t>(l)]) ss += v * v;
        layers.push_back({{"layer", l}, {"norm", std::sqrt(ss)}});
    }
    json doc = {{"model_hash", set.model_hash},
                {"template_id", set.template_id},
                {"dataset_fingerprint", set.dataset_fingerprint},
                {"n_examples", set.n_examples},
                {"n_layers", set.n_layers()},
                {"hidden_dim", set.hidden_dim()},
                {"layers", std::move(layers)}};
    write_text(out, dump_json(doc, 2) + "\n");
    m.output(out);
    const std::string summary = "vectors-info: " + std::to_string(set.n_layers()) + " layers x " +
                                std::to_string(set.hidden_dim()) + ", " + std::to_string(set.n_examples) +
                                " examples, model " + set.model_hash.substr(0, 12);
    m.summary(summary);
    manifest_path = m.write(out, g.manifest);
    return summary;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const IncompatibleError*>(&e)) return kIncompatible;
    if (dynamic_cast<const LoadError*>(&e)) return kLoad;
    if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ParseError*>(&e)) return kData;
    if (dynamic_cast<const BoundsError*>(&e)) return kBounds;
    if (dynamic_cast<const TemplateError*>(&e)) return kTemplate;
    if (dynamic_cast<const ConfigError*>(&e)) return kUsage;
    return kFailure;
}

void add_prompt_opts(CLI::App* cmd, PromptOpts& p) {
    cmd->add_option("--safety-template", p.safety_template, "JSON file with system_text and user_suffix");
    cmd->add_option("--chat-template", p.chat_template, "JSON chat layout");
    cmd->add_option("--base-system", p.base_system, "system prompt for the unwrapped rendering");
}

void add_gen_opts(CLI::App* cmd, GenOpts& o) {
    cmd->add_option("--temperature", o.temperature, "sampling temperature (0 = greedy)");
    cmd->add_option("--max-new-tokens", o.max_new_tokens, "generation length cap");
}

}  // namespace

uint64_t derive_seed(uint64_t seed, uint64_t index) {
    // splitmix64 finalizer over the combined value
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"steerlm: safety prompting and activation steering for decoder-only models"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--model", g.model, "model bundle directory");
    app.add_option("--seed", g.seed, "run seed");
    app.add_option("--jobs", g.jobs, "concurrent workers")->check(CLI::PositiveNumber);
    app.add_option("--profile", g.profile, "default (temperature 0.6, 32768 tokens) or tiny (greedy, 64 tokens)")
        ->check(CLI::IsMember({"default", "tiny"}));
    app.add_option("--manifest", g.manifest, "manifest path (default: <primary output>.manifest.json)");

    ExtractArgs ex;
    auto* c_ex = app.add_subcommand("extract", "extract steering vectors from a harmful corpus");
    c_ex->add_option("--data", ex.data, "harmful queries (JSONL)")->required();
    c_ex->add_option("--out", ex.out, "vector file to write")->required();
    c_ex->add_option("--n-extraction", ex.n_extraction, "queries used for extraction after a seeded split");
    c_ex->add_option("--n-validation", ex.n_validation, "queries held out for validation");
    c_ex->add_option("--split-seed", ex.split_seed, "split seed (default: --seed)");
    c_ex->add_option("--validation-out", ex.validation_out, "where to write the held-out queries");
    add_prompt_opts(c_ex, ex.prompts);

    GenerateArgs ge;
    auto* c_ge = app.add_subcommand("generate", "generate responses with safety prompting and steering");
    c_ge->add_option("--input", ge.input, "queries (JSONL)")->required();
    c_ge->add_option("--out", ge.out, "responses JSONL to write")->required();
    c_ge->add_option("--vectors", ge.vectors, "steering vector file");
    c_ge->add_option("--layers", ge.layers, "comma separated layer indices");
    c_ge->add_option("--lambda", ge.lambda, "steering strength");
    c_ge->add_option("--plan", ge.plan, "steering plan JSON (layers, lambda, site) instead of --layers/--lambda");
    c_ge->add_flag("--no-steer", ge.no_steer, "disable the steering stage");
    c_ge->add_flag("--no-safety-prompt", ge.no_safety_prompt, "disable the safety prompt stage");
    c_ge->add_flag("--last-position-only", ge.last_position_only, "inject only at the last token of each step");
    c_ge->add_option("--trace-out", ge.trace_out, "write token ids and per-step distributions (JSONL)");
    c_ge->add_option("--top-k", ge.top_k, "keep only the top-k of each distribution (0 = full)")->check(CLI::NonNegativeNumber);
    c_ge->add_option("--dataset", ge.dataset, "dataset name stored in each row");
    add_gen_opts(c_ge, ge.gen);
    add_prompt_opts(c_ge, ge.prompts);

    SweepArgs sw;
    auto* c_sw = app.add_subcommand("sweep", "grid search over layer sets and strengths");
    c_sw->add_option("--vectors", sw.vectors, "steering vector file")->required();
    c_sw->add_option("--validation", sw.validation, "held-out harmful queries (JSONL)")->required();
    c_sw->add_option("--benign", sw.benign, "benign probe queries (JSONL)")->required();
    c_sw->add_option("--layers", sw.layer_sets, "layer set, repeatable (e.g. --layers 0 --layers 1,2)");
    c_sw->add_option("--lambda", sw.lambdas, "strength, repeatable")->delimiter(',');
    c_sw->add_option("--cap", sw.cap, "maximum over-refusal rate")->check(CLI::Range(0.0, 1.0));
    c_sw->add_option("--out", sw.out, "sweep report JSON")->required();
    c_sw->add_option("--wordlists", sw.wordlists, "pivot/refusal word lists JSON");
    c_sw->add_flag("--no-safety-prompt", sw.no_safety_prompt, "run validation without the safety prompt");
    c_sw->add_flag("--last-position-only", sw.last_position_only, "inject only at the last token of each step");
    add_gen_opts(c_sw, sw.gen);
    add_prompt_opts(c_sw, sw.prompts);

    AnalyzeArgs an;
    auto* c_an = app.add_subcommand("analyze", "awareness/compliance gap and refusal-mass metrics");
    c_an->add_option("--responses", an.responses, "responses JSONL, repeatable")->required();
    c_an->add_option("--out-dir", an.out_dir, "report directory")->required();
    c_an->add_option("--traces", an.traces, "traces of the steered run");
    c_an->add_option("--baseline-traces", an.baseline_traces, "traces of the unsteered run");
    c_an->add_flag("--logit-metrics", an.logit_metrics, "require per-step distributions in the traces");
    c_an->add_option("--tokenizer", an.tokenizer, "tokenizer JSON (instead of --model)");
    c_an->add_option("--wordlists", an.wordlists, "pivot/refusal word lists JSON");
    c_an->add_option("--labels", an.labels, "queries with gold labels (JSONL) for proxy F1");
    c_an->add_option("--dataset", an.dataset, "dataset name when rows carry none");
    c_an->add_option("--epsilon", an.epsilon, "smoothing added before the log ratio")->check(CLI::NonNegativeNumber);

    std::string vi_file, vi_out;
    auto* c_vi = app.add_subcommand("vectors-info", "summarize a vector file");
    c_vi->add_option("vectors", vi_file, "vector file")->required();
    c_vi->add_option("--out", vi_out, "info JSON to write")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    try {
        fs::path manifest;
        std::string summary;
        if (*c_ex) summary = cmd_extract(g, ex, manifest);
        else if (*c_ge) summary = cmd_generate(g, ge, manifest);
        else if (*c_sw) summary = cmd_sweep(g, sw, manifest);
        else if (*c_an) summary = cmd_analyze(g, an, manifest);
        else summary = cmd_vectors_info(g, vi_file, vi_out, manifest);
        out << manifest.string() << "\n" << summary << "\n";
        return kOk;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

}  // namespace steerlm::cli
