#include "steerlm/datasets.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

#include "json.hpp"
#include "steerlm/digest.hpp"
#include "steerlm/error.hpp"

namespace steerlm {

const char* to_string(QueryLabel label) { return label == QueryLabel::Harmful ? "harmful" : "benign"; }

namespace {

std::string line_ctx(const std::string& source, size_t line) { return source + ":" + std::to_string(line) + ": "; }

// Unbiased integer in [0, bound) from a 64-bit engine.
uint64_t bounded(std::mt19937_64& rng, uint64_t bound) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return r % bound;
}

}  // namespace

std::vector<QueryRecord> parse_corpus(std::istream& in, const std::string& source, QueryLabel default_label) {
    std::vector<QueryRecord> out;
    std::set<std::string> seen;
    std::string line;
    for (size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(line_ctx(source, lineno) + "invalid JSON (" + e.what() + ")");
        }
        if (!j.is_object()) throw DataError(line_ctx(source, lineno) + "expected a JSON object");
        QueryRecord r;
        auto id = j.find("id");
        if (id == j.end()) throw DataError(line_ctx(source, lineno) + "missing field 'id'");
        if (id->is_string()) r.id = id->get<std::string>();
        else if (id->is_number_integer()) r.id = std::to_string(id->get<int64_t>());
        else throw DataError(line_ctx(source, lineno) + "field 'id' must be a string or integer");

        bool found = false;
        for (const char* key : {"prompt", "goal", "question", "instruction"}) {
            auto it = j.find(key);
            if (it != j.end() && it->is_string()) {
                r.prompt = it->get<std::string>();
                found = true;
                break;
            }
        }
        if (!found) throw DataError(line_ctx(source, lineno) + "missing field 'prompt'");
        if (r.prompt.empty()) throw DataError(line_ctx(source, lineno) + "empty prompt for id '" + r.id + "'");

        r.label = default_label;
        if (auto it = j.find("label"); it != j.end()) {
            const std::string l = it->is_string() ? it->get<std::string>() : "";
            if (l == "harmful") r.label = QueryLabel::Harmful;
            else if (l == "benign") r.label = QueryLabel::Benign;
            else throw DataError(line_ctx(source, lineno) + "label must be \"harmful\" or \"benign\"");
        }
        if (auto it = j.find("category"); it != j.end() && it->is_string()) r.category = it->get<std::string>();

        if (!seen.insert(r.id).second) throw DataError(line_ctx(source, lineno) + "duplicate id '" + r.id + "'");
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<QueryRecord> load_corpus(const std::filesystem::path& path, QueryLabel default_label) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus '" + path.string() + "'");
    return parse_corpus(in, path.string(), default_label);
}

void write_corpus(const std::filesystem::path& path, std::span<const QueryRecord> records) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    for (const auto& r : records) {
        nlohmann::json j = {{"id", r.id}, {"prompt", r.prompt}, {"label", to_string(r.label)}};
        if (r.category) j["category"] = *r.category;
        out << j.dump() << '\n';
    }
}

std::string fingerprint_ids(std::span<const QueryRecord> records) {
    Sha256 h;
    for (const auto& r : records) h.update_field(r.id);
    return h.hex_digest();
}

std::string fingerprint_set(std::span<const QueryRecord> records) {
    std::vector<std::pair<std::string, std::string>> items;
    for (const auto& r : records) items.emplace_back(r.id, r.prompt);
    std::sort(items.begin(), items.end());
    Sha256 h;
    for (const auto& [id, prompt] : items) h.update_field(id).update_field(prompt);
    return h.hex_digest();
}

CorpusSplit split_corpus(std::span<const QueryRecord> corpus, size_t n_extraction, size_t n_validation, uint64_t seed) {
    if (n_extraction + n_validation > corpus.size()) {
        throw DataError("split: requested " + std::to_string(n_extraction) + " + " + std::to_string(n_validation) +
                        " records but the corpus has " + std::to_string(corpus.size()));
    }
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[bounded(rng, i)]);

    CorpusSplit s;
    s.seed = seed;
    for (size_t i = 0; i < n_extraction; ++i) s.extraction.push_back(corpus[order[i]]);
    for (size_t i = n_extraction; i < n_extraction + n_validation; ++i) s.validation.push_back(corpus[order[i]]);
    s.fingerprint = Sha256()
                        .update_field("extraction")
                        .update_field(fingerprint_ids(s.extraction))
                        .update_field("validation")
                        .update_field(fingerprint_ids(s.validation))
                        .hex_digest();
    return s;
}

}  // namespace steerlm
