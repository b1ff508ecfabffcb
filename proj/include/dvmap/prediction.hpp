#pragma once

#include <string>

#include "dvmap/common.hpp"
#include "dvmap/prompt.hpp"

namespace dvmap {

/// One model answer for one prompt. `failure` is empty unless the request
/// itself failed (transport, HTTP status, malformed body); a completion that
/// arrived but does not parse is a format_error in `parse` instead.
struct PredictionRecord {
    std::string sample_id;
    std::string raw_completion;
    ParseResult parse;
    std::string failure;
    std::string failure_detail;
    int retries = 0;
    // Volatile: excluded from the canonical record file.
    double latency_ms = 0.0;
    bool cached = false;

    bool parsed() const { return failure.empty() && parse.ok(); }
};

inline json to_json(const PredictionRecord& r, bool with_volatile = false) {
    json j = {
        {"sample_id", r.sample_id},
        {"raw_completion", r.raw_completion},
        {"parse", to_json(r.parse)},
        {"failure", r.failure.empty() ? json(nullptr) : json(r.failure)},
        {"retries", r.retries},
    };
    if (!r.failure_detail.empty()) j["failure_detail"] = r.failure_detail;
    if (with_volatile) {
        j["latency_ms"] = r.latency_ms;
        j["cached"] = r.cached;
    }
    return j;
}

inline PredictionRecord prediction_from_json(const json& j) {
    PredictionRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.raw_completion = j.value("raw_completion", std::string());
    r.parse = parse_result_from_json(j.at("parse"));
    if (j.contains("failure") && !j.at("failure").is_null()) r.failure = j.at("failure").get<std::string>();
    r.failure_detail = j.value("failure_detail", std::string());
    r.retries = j.value("retries", 0);
    r.latency_ms = j.value("latency_ms", 0.0);
    r.cached = j.value("cached", false);
    return r;
}

}  // namespace dvmap
