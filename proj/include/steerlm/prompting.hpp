#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace steerlm {

/// Safety instruction placed in the system slot plus a reminder appended to
/// the user query.
struct SafetyTemplate {
    std::string system_text;
    std::string user_suffix;

    // SHA-256 over the two length-prefixed strings.
    std::string template_id() const;

    static SafetyTemplate defaults();
    static SafetyTemplate from_json(const nlohmann::json& j);
    static SafetyTemplate load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
};

/// Single-turn chat layout. Each format string holds exactly one
/// `{content}` placeholder; `generation_prompt` opens the assistant turn.
struct ChatTemplate {
    std::string system_format;
    std::string user_format;
    std::string generation_prompt;
    std::vector<std::string> markers;  // special tokens the layout relies on

    static constexpr std::string_view kPlaceholder = "{content}";

    static ChatTemplate defaults();
    static ChatTemplate from_json(const nlohmann::json& j);
    static ChatTemplate load(const std::filesystem::path& path);
    nlohmann::json to_json() const;
    void validate() const;  // TemplateError when a placeholder is missing or repeated
};

std::string render_chat(std::string_view system, std::string_view user, const ChatTemplate& chat);

struct PromptPair {
    std::string original_rendered;
    std::string safety_rendered;
    std::string query;
    std::string template_id;
};

/// Renders the query twice: plainly (system slot = `base_system`) and with
/// the safety instruction as system text and the reminder after the query.
PromptPair wrap_safety(std::string_view query, const SafetyTemplate& safety, const ChatTemplate& chat,
                       std::string_view base_system = {});

/// True when `query` already ends with the template's non-empty reminder.
bool is_safety_wrapped(std::string_view query, const SafetyTemplate& safety);

}  // namespace steerlm
