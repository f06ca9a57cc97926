#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace steerlm {

using TokenId = int32_t;

/// Serialized form of a tokenizer (the JSON sidecar of a model bundle).
///
/// `vocab` maps every token string, including special and byte-fallback
/// tokens, to a dense id. Byte-fallback tokens are spelled `<0xAB>`.
/// `special_tokens` maps literal marker text (e.g. `<|im_start|>`) to ids;
/// markers occurring in input text are always encoded to their special id.
struct TokenizerSpec {
    std::map<std::string, TokenId> vocab;
    std::vector<std::pair<std::string, std::string>> merges;
    std::map<std::string, TokenId> special_tokens;
    bool byte_fallback = true;

    static TokenizerSpec from_json(const nlohmann::json& j);
    static TokenizerSpec parse(std::string_view json_text);
    nlohmann::json to_json() const;
    std::string serialize() const;

    // Checks density of ids, presence of byte tokens when byte_fallback is
    // set, and that no merge produces a special or byte token.
    void validate() const;
};

std::string byte_token_name(unsigned char b);

/// Byte-fallback BPE tokenizer.
///
/// Encoding splits out special markers first, then breaks the remaining text
/// into whitespace-led chunks, starts each chunk from its UTF-8 characters
/// and applies merges by rank. Any symbol without a regular vocab entry is
/// emitted as one byte token per byte, so encode/decode round-trips every
/// byte string when byte_fallback is on.
class Tokenizer {
public:
    Tokenizer() = default;
    explicit Tokenizer(TokenizerSpec spec);

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    // Decoded bytes of a single token; throws BoundsError on unknown ids.
    const std::string& piece(TokenId id) const;

    size_t size() const noexcept { return pieces_.size(); }
    bool is_special(TokenId id) const;
    bool is_byte(TokenId id) const;
    std::optional<TokenId> special_id(std::string_view marker) const;
    std::optional<TokenId> byte_id(unsigned char b) const;

    const TokenizerSpec& spec() const noexcept { return spec_; }

private:
    struct PairHash {
        size_t operator()(const std::pair<std::string, std::string>& p) const noexcept {
            size_t h = std::hash<std::string>{}(p.first);
            return h ^ (std::hash<std::string>{}(p.second) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
        }
    };

    void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;
    void emit_bytes(std::string_view bytes, std::vector<TokenId>& out) const;

    TokenizerSpec spec_;
    std::vector<std::string> pieces_;
    std::vector<uint8_t> kind_;  // 0 regular, 1 special, 2 byte
    std::unordered_map<std::string, TokenId> regular_;
    std::unordered_map<std::pair<std::string, std::string>, int, PairHash> merge_rank_;
    std::array<TokenId, 256> byte_ids_{};
    std::vector<std::string> specials_by_length_;
};

}  // namespace steerlm
