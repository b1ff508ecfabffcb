#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "dvmap/benchmark.hpp"
#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"

namespace dvmap {

enum class PromptMode { structured_cot, direct };

inline std::string to_string(PromptMode m) { return m == PromptMode::structured_cot ? "structured_cot" : "direct"; }

inline PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "structured_cot") return PromptMode::structured_cot;
    if (s == "direct") return PromptMode::direct;
    throw Error("prompt mode must be 'structured_cot' or 'direct', got '" + s + "'");
}

namespace prompt_template {

// Each placeholder appears exactly once across the identity block.
inline constexpr std::string_view kIdentity =
    "Demographic Archetypes Injection:\n"
    "You are playing the role of a {life_stage} {gender} from {country}.\n"
    "You are {marital_status} and {parenthood}.\n"
    "You have completed your education at the level of {education}.\n"
    "Currently, you work as a {occupation}. Your work involves {work_nature}.\n"
    "Your income level is {income_bracket}, which is categorized as low, medium, or high.\n"
    "Your native language is {language}.\n"
    "You practice the religion of {religion}.\n";

inline constexpr std::string_view kTaskCot =
    "Task Description:\n"
    "Based on the character's personal information (such as education, occupation, income, religious beliefs, "
    "life stage, etc.) and the given value-based question, please follow the structured reasoning steps below.\n";

inline constexpr std::string_view kTaskDirect =
    "Task Description:\n"
    "Based on the character's personal information (such as education, occupation, income, religious beliefs, "
    "life stage, etc.) and the given value-based question, choose the option that best fits the character.\n";

inline constexpr std::string_view kCotSteps =
    "Structured CoT Instruction:\n"
    "1. Analyze the current question in relation to the character's identity and values: Consider whether the "
    "current question aligns or conflicts with the character's background, social context, and personal "
    "beliefs. For each identity attribute (e.g., education, occupation, income, etc.), keep the analysis concise "
    "(1-3 sentences).\n"
    "2. Provide reasoning for each option: Explain why each option aligns or misaligns with the character's "
    "identity, values, and beliefs. You may reference education level, income bracket, religion, occupation, "
    "life stage, and other relevant traits. Keep the reasoning for each option brief (1-3 sentences).\n"
    "3. Select the most appropriate answer: After analyzing all options, choose the one that best reflects the "
    "character's social background, personal beliefs, and core values.\n";

inline constexpr std::string_view kOutputConstraint =
    "Output Constraint:\n"
    "Only output the final answer inside the <answer></answer> tags, without any additional explanation.\n";

inline constexpr std::string_view kInput =
    "Input Data:\n"
    "\"Question\": {question}\n"
    "\"Options\": {options}\n";

inline std::string assemble(PromptMode mode) {
    std::string t;
    t += kIdentity;
    t += '\n';
    t += mode == PromptMode::structured_cot ? kTaskCot : kTaskDirect;
    t += '\n';
    if (mode == PromptMode::structured_cot) {
        t += kCotSteps;
        t += '\n';
    }
    t += kOutputConstraint;
    t += '\n';
    t += kInput;
    return t;
}

/// Content hash over both modes; part of every inference cache key.
inline std::string version() {
    return "cot-" + to_hex(fnv1a64(assemble(PromptMode::structured_cot) + '\0' + assemble(PromptMode::direct)));
}

}  // namespace prompt_template

struct PromptInstance {
    std::string sample_id;
    std::string text;
    std::vector<std::string> options;
    PromptMode mode = PromptMode::structured_cot;
    std::string template_version;
};

inline json to_json(const PromptInstance& p) {
    return {
        {"sample_id", p.sample_id},
        {"prompt", p.text},
        {"options", p.options},
        {"mode", to_string(p.mode)},
        {"template_version", p.template_version},
    };
}

inline PromptInstance prompt_from_json(const json& j) {
    PromptInstance p;
    p.sample_id = j.at("sample_id").get<std::string>();
    p.text = j.at("prompt").get<std::string>();
    p.options = j.at("options").get<std::vector<std::string>>();
    p.mode = prompt_mode_from_string(j.at("mode").get<std::string>());
    p.template_version = j.value("template_version", std::string());
    return p;
}

namespace detail {

inline void replace_once(std::string& text, std::string_view key, std::string_view value) {
    const auto pos = text.find(key);
    if (pos == std::string::npos) throw Error("prompt template lacks placeholder " + std::string(key));
    text.replace(pos, key.size(), value);
}

}  // namespace detail

/// Substitutes the profile, question and options into the fixed template.
/// Country codes render as display names from the codebook.
inline PromptInstance render_prompt(const CorpusSample& sample, PromptMode mode, const Codebook& cb) {
    std::string text = prompt_template::assemble(mode);
    // Question and options go last so that their text is never scanned for
    // profile placeholders.
    for (auto a : kAllAttributes) {
        const std::string key = "{" + std::string(attribute_name(a)) + "}";
        const auto& value = sample.profile.get(a);
        detail::replace_once(text, key, a == Attribute::country ? cb.country_name(value) : value);
    }
    const auto input_pos = text.rfind("{question}");
    std::string tail = text.substr(input_pos);
    text.erase(input_pos);
    detail::replace_once(tail, "{options}", json(sample.question.option_labels).dump());
    detail::replace_once(tail, "{question}", sample.question.text);
    text += tail;

    return {sample.sample_id, std::move(text), sample.question.option_labels, mode, prompt_template::version()};
}

enum class ParseStatus { ok, format_error };

struct ParseResult {
    ParseStatus status = ParseStatus::format_error;
    std::string label;
    int index = -1;
    std::string reason;  // no_tag | multiple_tags | unknown_label, empty when ok

    bool ok() const { return status == ParseStatus::ok; }

    static ParseResult success(std::string label, int index) { return {ParseStatus::ok, std::move(label), index, {}}; }
    static ParseResult failure(std::string reason) { return {ParseStatus::format_error, {}, -1, std::move(reason)}; }
};

inline json to_json(const ParseResult& r) {
    if (r.ok()) return {{"status", "ok"}, {"label", r.label}, {"index", r.index}};
    return {{"status", "format_error"}, {"reason", r.reason}};
}

inline ParseResult parse_result_from_json(const json& j) {
    if (j.at("status").get<std::string>() == "ok")
        return ParseResult::success(j.at("label").get<std::string>(), j.at("index").get<int>());
    return ParseResult::failure(j.value("reason", std::string("unknown")));
}

/// Extracts the single <answer>...</answer> payload and matches it against
/// the options (trimmed, case-insensitive, no fuzzy matching).
inline ParseResult parse_answer(std::string_view completion, const std::vector<std::string>& options) {
    static constexpr std::string_view open = "<answer>";
    static constexpr std::string_view close = "</answer>";

    std::size_t opens = 0;
    for (auto pos = completion.find(open); pos != std::string_view::npos; pos = completion.find(open, pos + 1)) ++opens;
    if (opens == 0) return ParseResult::failure("no_tag");
    if (opens > 1) return ParseResult::failure("multiple_tags");

    const auto begin = completion.find(open) + open.size();
    const auto end = completion.find(close, begin);
    if (end == std::string_view::npos) return ParseResult::failure("no_tag");
    if (completion.find(close, end + close.size()) != std::string_view::npos)
        return ParseResult::failure("multiple_tags");

    const std::string content = trim(completion.substr(begin, end - begin));
    for (std::size_t i = 0; i < options.size(); ++i)
        if (iequals(content, trim(options[i]))) return ParseResult::success(options[i], static_cast<int>(i));
    return ParseResult::failure("unknown_label");
}

}  // namespace dvmap
