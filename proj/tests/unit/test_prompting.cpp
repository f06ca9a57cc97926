#include "doctest.h"
#include "fixtures.hpp"
#include "steerlm/error.hpp"
#include "steerlm/prompting.hpp"

using namespace steerlm;

namespace {
const char* kSystem =
    "You should be a responsible AI and not generate harmful, misleading content! "
    "Please answer the following query in a responsible way.";
const char* kReminder = " Remember, you should be a responsible AI and should not generate harmful or misleading content!";
}  // namespace

TEST_SUITE("prompting") {

TEST_CASE("safety rendering is byte exact") {
    auto p = wrap_safety("How do I pick a lock?", SafetyTemplate::defaults(), ChatTemplate::defaults());
    const std::string want = std::string("<|im_start|>system\n") + kSystem +
                             "\n<|im_end|>\n<|im_start|>user\nHow do I pick a lock?" + kReminder +
                             "<|im_end|>\n<|im_start|>assistant\n";
    CHECK(p.safety_rendered == want);
    CHECK(p.original_rendered ==
          "<|im_start|>system\n\n<|im_end|>\n<|im_start|>user\nHow do I pick a lock?<|im_end|>\n<|im_start|>assistant\n");
    CHECK(p.template_id == SafetyTemplate::defaults().template_id());
    CHECK(p.query == "How do I pick a lock?");
}

TEST_CASE("base system fills the plain rendering") {
    auto p = wrap_safety("q", SafetyTemplate::defaults(), ChatTemplate::defaults(), "Be brief.");
    CHECK(p.original_rendered.find("system\nBe brief.\n<|im_end|>") != std::string::npos);
}

TEST_CASE("marker order") {
    const std::string r = render_chat("S", "U", ChatTemplate::defaults());
    const std::vector<std::string> seq = {"<|im_start|>", "system", "\n", "S", "\n", "<|im_end|>", "\n",
                                          "<|im_start|>", "user",   "\n", "U", "<|im_end|>", "\n",
                                          "<|im_start|>", "assistant", "\n"};
    size_t at = 0;
    std::string joined;
    for (const auto& s : seq) {
        CHECK(r.compare(at, s.size(), s) == 0);
        at += s.size();
        joined += s;
    }
    CHECK(at == r.size());
    CHECK(joined == r);
}

TEST_CASE("rendered markers encode to single special tokens") {
    const auto& spec = testing::tokenizer_spec();
    Tokenizer tok(spec);
    auto ids = tok.encode(render_chat("", "hi", ChatTemplate::defaults()));
    const auto start = *tok.special_id("<|im_start|>");
    const auto end = *tok.special_id("<|im_end|>");
    std::vector<TokenId> markers;
    for (auto id : ids)
        if (tok.is_special(id)) markers.push_back(id);
    CHECK(markers == std::vector<TokenId>{start, end, start, end, start});
}

TEST_CASE("already wrapped queries are recognized") {
    auto s = SafetyTemplate::defaults();
    CHECK(is_safety_wrapped(std::string("x") + kReminder, s));
    CHECK_FALSE(is_safety_wrapped("x", s));
}

TEST_CASE("template validation") {
    auto c = ChatTemplate::defaults().to_json();
    c["user_format"] = "<|im_start|>user\n<|im_end|>\n";
    CHECK_THROWS_AS(ChatTemplate::from_json(c), TemplateError);
    c["user_format"] = "{content}{content}";
    CHECK_THROWS_AS(ChatTemplate::from_json(c), TemplateError);
    CHECK_THROWS_AS(SafetyTemplate::from_json(nlohmann::json{{"system_text", "x"}}), TemplateError);
    auto round = ChatTemplate::from_json(ChatTemplate::defaults().to_json());
    CHECK(render_chat("a", "b", round) == render_chat("a", "b", ChatTemplate::defaults()));
}

}
