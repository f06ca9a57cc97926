#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace steerlm {

enum class QueryLabel { Harmful, Benign };

const char* to_string(QueryLabel label);

struct QueryRecord {
    std::string id;
    std::string prompt;
    QueryLabel label = QueryLabel::Harmful;
    std::optional<std::string> category;

    bool operator==(const QueryRecord&) const = default;
};

/// Reads JSONL, one object per line: {"id", "prompt", "label"?, "category"?}.
/// "goal", "question" and "instruction" are accepted in place of "prompt";
/// numeric ids are stringified. Blank lines are skipped. Errors cite the
/// 1-based line number.
std::vector<QueryRecord> parse_corpus(std::istream& in, const std::string& source,
                                      QueryLabel default_label = QueryLabel::Harmful);
std::vector<QueryRecord> load_corpus(const std::filesystem::path& path, QueryLabel default_label = QueryLabel::Harmful);
void write_corpus(const std::filesystem::path& path, std::span<const QueryRecord> records);

/// SHA-256 over the ids in the given order.
std::string fingerprint_ids(std::span<const QueryRecord> records);

/// Order-independent digest over (id, prompt) pairs.
std::string fingerprint_set(std::span<const QueryRecord> records);

struct CorpusSplit {
    std::vector<QueryRecord> extraction;
    std::vector<QueryRecord> validation;
    uint64_t seed = 0;
    std::string fingerprint;  // over the ordered ids of both parts
};

/// Seeded Fisher-Yates shuffle (mt19937_64 with rejection sampling, so the
/// result is the same on every platform), then the first n_extraction
/// records form the extraction part and the next n_validation the validation part.
CorpusSplit split_corpus(std::span<const QueryRecord> corpus, size_t n_extraction, size_t n_validation, uint64_t seed);

}  // namespace steerlm
