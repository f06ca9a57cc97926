#include "steerlm/tokenizer.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>

#include "steerlm/error.hpp"

namespace steerlm {

namespace {

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r'; }

// Length of the UTF-8 character starting at s[i]; invalid sequences are
// reported as single bytes.
size_t utf8_char_len(std::string_view s, size_t i) {
    auto byte = [&](size_t k) { return static_cast<unsigned char>(s[k]); };
    unsigned char c = byte(i);
    size_t n = 1;
    if (c >= 0xC2 && c <= 0xDF) n = 2;
    else if (c >= 0xE0 && c <= 0xEF) n = 3;
    else if (c >= 0xF0 && c <= 0xF4) n = 4;
    if (n == 1 || i + n > s.size()) return 1;
    for (size_t k = 1; k < n; ++k) {
        if ((byte(i + k) & 0xC0) != 0x80) return 1;
    }
    return n;
}

std::optional<unsigned char> parse_byte_token(const std::string& s) {
    if (s.size() != 6 || s.compare(0, 3, "<0x") != 0 || s[5] != '>') return std::nullopt;
    auto hex = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    int hi = hex(s[3]), lo = hex(s[4]);
    if (hi < 0 || lo < 0) return std::nullopt;
    return static_cast<unsigned char>(hi * 16 + lo);
}

}  // namespace

std::string byte_token_name(unsigned char b) {
    char buf[7];
    std::snprintf(buf, sizeof(buf), "<0x%02X>", static_cast<unsigned>(b));
    return buf;
}

TokenizerSpec TokenizerSpec::from_json(const nlohmann::json& j) {
    TokenizerSpec s;
    try {
        for (const auto& [tok, id] : j.at("vocab").items()) s.vocab.emplace(tok, id.get<TokenId>());
        for (const auto& m : j.at("merges")) {
            if (!m.is_array() || m.size() != 2) throw ParseError("tokenizer: each merge must be a pair of strings");
            s.merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
        }
        for (const auto& [tok, id] : j.at("special_tokens").items()) s.special_tokens.emplace(tok, id.get<TokenId>());
        s.byte_fallback = j.value("byte_fallback", true);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("tokenizer spec: ") + e.what());
    }
    return s;
}

TokenizerSpec TokenizerSpec::parse(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("tokenizer spec is not valid JSON: ") + e.what());
    }
    return from_json(j);
}

nlohmann::json TokenizerSpec::to_json() const {
    nlohmann::json j;
    j["vocab"] = vocab;
    nlohmann::json merges_json = nlohmann::json::array();
    for (const auto& [a, b] : merges) merges_json.push_back({a, b});
    j["merges"] = std::move(merges_json);
    j["special_tokens"] = special_tokens;
    j["byte_fallback"] = byte_fallback;
    return j;
}

std::string TokenizerSpec::serialize() const { return to_json().dump(); }

void TokenizerSpec::validate() const {
    if (vocab.empty()) throw ConfigError("tokenizer: empty vocabulary");
    std::vector<char> seen(vocab.size(), 0);
    for (const auto& [tok, id] : vocab) {
        if (id < 0 || static_cast<size_t>(id) >= vocab.size()) {
            throw ConfigError("tokenizer: id " + std::to_string(id) + " of '" + tok + "' is outside [0, " +
                              std::to_string(vocab.size()) + ")");
        }
        if (seen[id]) throw ConfigError("tokenizer: id " + std::to_string(id) + " assigned twice");
        seen[id] = 1;
    }
    for (const auto& [tok, id] : special_tokens) {
        auto it = vocab.find(tok);
        if (it == vocab.end() || it->second != id) {
            throw ConfigError("tokenizer: special token '" + tok + "' is not in the vocabulary with id " +
                              std::to_string(id));
        }
        if (tok.empty()) throw ConfigError("tokenizer: empty special token");
    }
    if (byte_fallback) {
        for (int b = 0; b < 256; ++b) {
            if (!vocab.contains(byte_token_name(static_cast<unsigned char>(b)))) {
                throw ConfigError("tokenizer: byte_fallback is set but " + byte_token_name(static_cast<unsigned char>(b)) +
                                  " is missing");
            }
        }
    }
    for (const auto& [a, b] : merges) {
        if (!vocab.contains(a) || !vocab.contains(b)) {
            throw ConfigError("tokenizer: merge ('" + a + "', '" + b + "') uses an unknown token");
        }
        std::string merged = a + b;
        if (!vocab.contains(merged)) throw ConfigError("tokenizer: merge result '" + merged + "' is not in the vocabulary");
        if (special_tokens.contains(merged) || parse_byte_token(merged)) {
            throw ConfigError("tokenizer: merge result '" + merged + "' collides with a special or byte token");
        }
    }
}

Tokenizer::Tokenizer(TokenizerSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    const size_t n = spec_.vocab.size();
    pieces_.resize(n);
    kind_.assign(n, 0);
    byte_ids_.fill(-1);
    for (const auto& [tok, id] : spec_.vocab) {
        if (spec_.special_tokens.contains(tok)) {
            pieces_[id] = tok;
            kind_[id] = 1;
        } else if (auto b = parse_byte_token(tok); b && spec_.byte_fallback) {
            pieces_[id] = std::string(1, static_cast<char>(*b));
            kind_[id] = 2;
            byte_ids_[*b] = id;
        } else {
            pieces_[id] = tok;
            regular_.emplace(tok, id);
        }
    }
    for (size_t r = 0; r < spec_.merges.size(); ++r) merge_rank_.emplace(spec_.merges[r], static_cast<int>(r));
    for (const auto& [tok, id] : spec_.special_tokens) specials_by_length_.push_back(tok);
    std::stable_sort(specials_by_length_.begin(), specials_by_length_.end(),
                     [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
}

const std::string& Tokenizer::piece(TokenId id) const {
    if (id < 0 || static_cast<size_t>(id) >= pieces_.size()) {
        throw BoundsError("unknown token id " + std::to_string(id));
    }
    return pieces_[id];
}

bool Tokenizer::is_special(TokenId id) const {
    return id >= 0 && static_cast<size_t>(id) < kind_.size() && kind_[id] == 1;
}

bool Tokenizer::is_byte(TokenId id) const {
    return id >= 0 && static_cast<size_t>(id) < kind_.size() && kind_[id] == 2;
}

std::optional<TokenId> Tokenizer::special_id(std::string_view marker) const {
    auto it = spec_.special_tokens.find(std::string(marker));
    if (it == spec_.special_tokens.end()) return std::nullopt;
    return it->second;
}

std::optional<TokenId> Tokenizer::byte_id(unsigned char b) const {
    if (byte_ids_[b] < 0) return std::nullopt;
    return byte_ids_[b];
}

void Tokenizer::emit_bytes(std::string_view bytes, std::vector<TokenId>& out) const {
    for (char c : bytes) {
        TokenId id = byte_ids_[static_cast<unsigned char>(c)];
        if (id < 0) {
            throw Error("tokenizer: no vocabulary entry or byte fallback for byte " +
                        byte_token_name(static_cast<unsigned char>(c)));
        }
        out.push_back(id);
    }
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
    std::vector<std::string> symbols;
    for (size_t i = 0; i < chunk.size();) {
        size_t n = utf8_char_len(chunk, i);
        symbols.emplace_back(chunk.substr(i, n));
        i += n;
    }
    while (symbols.size() > 1 && !merge_rank_.empty()) {
        int best_rank = std::numeric_limits<int>::max();
        size_t best = 0;
        for (size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best = i;
            }
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        symbols[best] += symbols[best + 1];
        symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best) + 1);
    }
    for (const auto& s : symbols) {
        auto it = regular_.find(s);
        if (it != regular_.end()) out.push_back(it->second);
        else emit_bytes(s, out);
    }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> out;
    auto encode_plain = [&](std::string_view seg) {
        size_t start = 0;
        for (size_t i = 1; i <= seg.size(); ++i) {
            if (i == seg.size() || (is_space(seg[i]) && !is_space(seg[i - 1]))) {
                encode_chunk(seg.substr(start, i - start), out);
                start = i;
            }
        }
    };
    size_t plain_start = 0;
    size_t i = 0;
    while (i < text.size()) {
        const std::string* hit = nullptr;
        for (const auto& sp : specials_by_length_) {
            if (text.compare(i, sp.size(), sp) == 0) {
                hit = &sp;
                break;
            }
        }
        if (hit == nullptr) {
            ++i;
            continue;
        }
        if (i > plain_start) encode_plain(text.substr(plain_start, i - plain_start));
        out.push_back(spec_.special_tokens.at(*hit));
        i += hit->size();
        plain_start = i;
    }
    if (plain_start < text.size()) encode_plain(text.substr(plain_start));
    return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) out += piece(id);
    return out;
}

}  // namespace steerlm
