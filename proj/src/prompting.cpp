#include "steerlm/prompting.hpp"

#include "binio.hpp"
#include "steerlm/digest.hpp"
#include "steerlm/error.hpp"

namespace steerlm {

namespace {

nlohmann::json parse_json_file(const std::filesystem::path& path) {
    std::string text = detail::read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw TemplateError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void append_segment(std::string& out, std::string_view format, std::string_view content) {
    const size_t at = format.find(ChatTemplate::kPlaceholder);
    out.append(format.substr(0, at));
    out.append(content);
    out.append(format.substr(at + ChatTemplate::kPlaceholder.size()));
}

}  // namespace

std::string SafetyTemplate::template_id() const {
    return Sha256().update_field(system_text).update_field(user_suffix).hex_digest();
}

SafetyTemplate SafetyTemplate::defaults() {
    return {
        "You should be a responsible AI and not generate harmful, misleading content! "
        "Please answer the following query in a responsible way.",
        " Remember, you should be a responsible AI and should not generate harmful or misleading content!",
    };
}

SafetyTemplate SafetyTemplate::from_json(const nlohmann::json& j) {
    try {
        return {j.at("system_text").get<std::string>(), j.at("user_suffix").get<std::string>()};
    } catch (const nlohmann::json::exception& e) {
        throw TemplateError(std::string("safety template: ") + e.what());
    }
}

SafetyTemplate SafetyTemplate::load(const std::filesystem::path& path) { return from_json(parse_json_file(path)); }

nlohmann::json SafetyTemplate::to_json() const { return {{"system_text", system_text}, {"user_suffix", user_suffix}}; }

ChatTemplate ChatTemplate::defaults() {
    ChatTemplate c;
    c.system_format = "<|im_start|>system\n{content}\n<|im_end|>\n";
    c.user_format = "<|im_start|>user\n{content}<|im_end|>\n";
    c.generation_prompt = "<|im_start|>assistant\n";
    c.markers = {"<|im_start|>", "<|im_end|>"};
    return c;
}

ChatTemplate ChatTemplate::from_json(const nlohmann::json& j) {
    ChatTemplate c;
    try {
        c.system_format = j.at("system_format").get<std::string>();
        c.user_format = j.at("user_format").get<std::string>();
        c.generation_prompt = j.at("generation_prompt").get<std::string>();
        c.markers = j.value("markers", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw TemplateError(std::string("chat template: ") + e.what());
    }
    c.validate();
    return c;
}

ChatTemplate ChatTemplate::load(const std::filesystem::path& path) { return from_json(parse_json_file(path)); }

nlohmann::json ChatTemplate::to_json() const {
    return {{"system_format", system_format},
            {"user_format", user_format},
            {"generation_prompt", generation_prompt},
            {"markers", markers}};
}

void ChatTemplate::validate() const {
    auto check = [](const std::string& fmt, const char* which) {
        const size_t at = fmt.find(kPlaceholder);
        if (at == std::string::npos) {
            throw TemplateError(std::string("chat template: ") + which + " format has no {content} placeholder");
        }
        if (fmt.find(kPlaceholder, at + 1) != std::string::npos) {
            throw TemplateError(std::string("chat template: ") + which + " format has more than one {content} placeholder");
        }
    };
    check(system_format, "system");
    check(user_format, "user");
}

std::string render_chat(std::string_view system, std::string_view user, const ChatTemplate& chat) {
    chat.validate();
    std::string out;
    append_segment(out, chat.system_format, system);
    append_segment(out, chat.user_format, user);
    out += chat.generation_prompt;
    return out;
}

PromptPair wrap_safety(std::string_view query, const SafetyTemplate& safety, const ChatTemplate& chat,
                       std::string_view base_system) {
    if (query.empty()) throw TemplateError("wrap_safety: empty query");
    PromptPair p;
    p.query = std::string(query);
    p.template_id = safety.template_id();
    p.original_rendered = render_chat(base_system, query, chat);
    std::string system = safety.system_text;
    if (!base_system.empty()) {
        if (!system.empty()) system += "\n";
        system += base_system;
    }
    std::string user = std::string(query) + safety.user_suffix;
    p.safety_rendered = render_chat(system, user, chat);
    return p;
}

bool is_safety_wrapped(std::string_view query, const SafetyTemplate& safety) {
    return !safety.user_suffix.empty() && query.ends_with(safety.user_suffix);
}

}  // namespace steerlm
