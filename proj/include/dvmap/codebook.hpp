#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "dvmap/common.hpp"

namespace dvmap {

/// The eleven demographic attributes of an archetype, in canonical order.
/// The order is part of the fingerprint and JSON formats; do not reorder.
enum class Attribute : std::size_t {
    country,
    gender,
    life_stage,
    language,
    marital_status,
    parenthood,
    education,
    occupation,
    work_nature,
    income_bracket,
    religion,
};

inline constexpr std::size_t kAttributeCount = 11;

inline constexpr std::array<std::string_view, kAttributeCount> kAttributeNames = {
    "country",    "gender",     "life_stage",   "language",      "marital_status", "parenthood",
    "education",  "occupation", "work_nature",  "income_bracket", "religion",
};

constexpr std::string_view attribute_name(Attribute a) {
    return kAttributeNames[static_cast<std::size_t>(a)];
}

inline std::optional<Attribute> attribute_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kAttributeCount; ++i)
        if (kAttributeNames[i] == name) return static_cast<Attribute>(i);
    return std::nullopt;
}

inline constexpr std::array<Attribute, kAttributeCount> kAllAttributes = {
    Attribute::country,    Attribute::gender,         Attribute::life_stage, Attribute::language,
    Attribute::marital_status, Attribute::parenthood, Attribute::education,  Attribute::occupation,
    Attribute::work_nature, Attribute::income_bracket, Attribute::religion,
};

/// How a raw demographic code becomes a profile label.
enum class DemographicKind { country, age, income, children, categorical };

struct CodeRange {
    int lo = 0;
    int hi = 0;
    bool contains(int code) const { return code >= lo && code <= hi; }
    int width() const { return hi - lo + 1; }
    bool operator==(const CodeRange&) const = default;
};

struct DemographicVar {
    std::string id;  // survey column, e.g. "Q262"
    Attribute attribute{};
    DemographicKind kind = DemographicKind::categorical;
    std::optional<CodeRange> raw_range;
    std::map<int, std::string> labels;                // categorical code -> label
    std::map<int, std::string> country_codes;         // numeric ISO 3166 -> alpha-3
    std::map<std::string, std::string> country_names; // alpha-3 -> display name

    /// True when a non-missing code is admissible for this variable.
    bool accepts(int code) const {
        if (raw_range && !raw_range->contains(code)) return false;
        if (kind == DemographicKind::categorical && !labels.empty()) return labels.contains(code);
        if (kind == DemographicKind::country) return country_codes.contains(code);
        return true;
    }
};

enum class ScaleKind { nominal, ordinal };

/// How raw response codes map onto option labels.
enum class ResponseMapping {
    identity,     // code lo+i -> option i
    tertile_1_10, // 1-3 / 4-7 / 8-10 -> options 0 / 1 / 2
};

enum class QuestionRole { train, cross_value, other };

struct QuestionSpec {
    std::string id;
    std::string text;
    ScaleKind scale = ScaleKind::ordinal;
    CodeRange raw_range;
    std::vector<std::string> option_labels;
    std::string topic;
    QuestionRole role = QuestionRole::other;
    ResponseMapping mapping = ResponseMapping::identity;

    /// Option count after processing.
    int K() const { return static_cast<int>(option_labels.size()); }

    std::optional<int> option_index(std::string_view label) const {
        for (std::size_t i = 0; i < option_labels.size(); ++i)
            if (iequals(option_labels[i], label)) return static_cast<int>(i);
        return std::nullopt;
    }
};

class Codebook {
public:
    std::string version;
    std::vector<QuestionSpec> questions;
    std::array<DemographicVar, kAttributeCount> demographics;
    std::set<int> missing_codes;

    const QuestionSpec* find_question(std::string_view id) const {
        for (const auto& q : questions)
            if (q.id == id) return &q;
        return nullptr;
    }

    const QuestionSpec& question(std::string_view id) const {
        if (const auto* q = find_question(id)) return *q;
        throw Error("unknown question id: " + std::string(id));
    }

    const DemographicVar& demographic(Attribute a) const {
        return demographics[static_cast<std::size_t>(a)];
    }

    /// Any negative code is missing, as is anything in the configured set.
    bool is_missing(int code) const { return code < 0 || missing_codes.contains(code); }

    std::vector<std::string> question_ids(QuestionRole role) const {
        std::vector<std::string> ids;
        for (const auto& q : questions)
            if (q.role == role) ids.push_back(q.id);
        return ids;
    }

    /// Display name for an ISO-3 code, falling back to the code itself.
    std::string country_name(const std::string& iso3) const {
        const auto& names = demographic(Attribute::country).country_names;
        auto it = names.find(iso3);
        return it == names.end() ? iso3 : it->second;
    }
};

inline const std::set<int> kDefaultMissingCodes = {-1, -2, -3, -4, -5};

namespace detail {

inline CodeRange parse_range(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
        throw Error(where + ": malformed range, expected [lo, hi] integers");
    CodeRange r{j[0].get<int>(), j[1].get<int>()};
    if (r.lo > r.hi) throw Error(where + ": malformed range, lo > hi");
    return r;
}

inline std::map<int, std::string> parse_code_map(const json& j, const std::string& where) {
    if (!j.is_object()) throw Error(where + ": expected an object of code -> label");
    std::map<int, std::string> out;
    for (const auto& [k, v] : j.items()) {
        int code = 0;
        if (!parse_int(k, code)) throw Error(where + ": non-integer code key '" + k + "'");
        if (!v.is_string()) throw Error(where + ": label for code " + k + " is not a string");
        out.emplace(code, v.get<std::string>());
    }
    return out;
}

inline DemographicKind parse_kind(const std::string& s, const std::string& where) {
    if (s == "country") return DemographicKind::country;
    if (s == "age") return DemographicKind::age;
    if (s == "income") return DemographicKind::income;
    if (s == "children") return DemographicKind::children;
    if (s == "categorical") return DemographicKind::categorical;
    throw Error(where + ": unknown demographic kind '" + s + "'");
}

inline void require_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                         const std::string& where) {
    for (const auto& [k, _] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
            throw Error(where + ": unknown key '" + k + "'");
    }
}

}  // namespace detail

/// Builds and validates a codebook from its JSON form.
inline Codebook codebook_from_json(const json& doc, const std::string& origin = "codebook") {
    using detail::parse_range;
    if (!doc.is_object()) throw Error(origin + ": top level must be an object");
    detail::require_keys(doc, {"version", "questions", "demographics", "missing_codes"}, origin);

    Codebook cb;
    cb.version = doc.value("version", std::string("unversioned"));

    if (doc.contains("missing_codes")) {
        for (const auto& c : doc.at("missing_codes")) {
            if (!c.is_number_integer()) throw Error(origin + ": missing_codes must be integers");
            cb.missing_codes.insert(c.get<int>());
        }
    } else {
        cb.missing_codes = kDefaultMissingCodes;
    }

    if (!doc.contains("demographics") || !doc.at("demographics").is_array())
        throw Error(origin + ": 'demographics' array is required");
    std::array<bool, kAttributeCount> seen{};
    std::set<std::string> column_ids;
    for (const auto& d : doc.at("demographics")) {
        const std::string where = origin + ": demographic " + d.value("id", std::string("?"));
        detail::require_keys(d, {"id", "attribute", "kind", "raw_range", "labels", "codes", "names"},
                             where);
        DemographicVar var;
        var.id = d.at("id").get<std::string>();
        auto attr = attribute_from_name(d.at("attribute").get<std::string>());
        if (!attr) throw Error(where + ": unknown attribute '" + d.at("attribute").get<std::string>() + "'");
        var.attribute = *attr;
        var.kind = detail::parse_kind(d.value("kind", std::string("categorical")), where);
        if (d.contains("raw_range")) var.raw_range = parse_range(d.at("raw_range"), where);
        if (d.contains("labels")) var.labels = detail::parse_code_map(d.at("labels"), where);
        if (d.contains("codes")) {
            var.country_codes = detail::parse_code_map(d.at("codes"), where);
            for (const auto& [_, iso] : var.country_codes)
                if (iso.size() != 3) throw Error(where + ": country code '" + iso + "' is not ISO-3");
        }
        if (d.contains("names")) var.country_names = d.at("names").get<std::map<std::string, std::string>>();
        if (var.kind == DemographicKind::income) {
            if (!var.raw_range) var.raw_range = CodeRange{1, 10};
            if (var.raw_range->lo < 1 || var.raw_range->hi > 10)
                throw Error(where + ": income steps must lie in 1..10");
        }

        const auto idx = static_cast<std::size_t>(var.attribute);
        if (seen[idx]) throw Error(where + ": attribute '" + std::string(attribute_name(var.attribute)) + "' mapped twice");
        if (!column_ids.insert(var.id).second) throw Error(where + ": duplicate demographic id");
        seen[idx] = true;
        cb.demographics[idx] = std::move(var);
    }
    for (std::size_t i = 0; i < kAttributeCount; ++i)
        if (!seen[i]) throw Error(origin + ": no demographic variable for attribute '" + std::string(kAttributeNames[i]) + "'");
    if (cb.demographic(Attribute::country).kind != DemographicKind::country)
        throw Error(origin + ": the country attribute must have kind 'country'");

    if (!doc.contains("questions") || !doc.at("questions").is_array())
        throw Error(origin + ": 'questions' array is required");
    std::set<std::string> qids;
    for (const auto& jq : doc.at("questions")) {
        const std::string where = origin + ": question " + jq.value("id", std::string("?"));
        detail::require_keys(jq, {"id", "text", "scale", "raw_range", "options", "concept", "role"}, where);
        QuestionSpec q;
        q.id = jq.at("id").get<std::string>();
        if (!qids.insert(q.id).second) throw Error(where + ": duplicate question id");
        if (column_ids.contains(q.id)) throw Error(where + ": id collides with a demographic column");
        q.text = jq.value("text", std::string());
        const auto scale = jq.value("scale", std::string("ordinal"));
        if (scale == "ordinal") q.scale = ScaleKind::ordinal;
        else if (scale == "nominal") q.scale = ScaleKind::nominal;
        else throw Error(where + ": scale must be 'ordinal' or 'nominal'");
        if (!jq.contains("raw_range")) throw Error(where + ": raw_range is required");
        q.raw_range = parse_range(jq.at("raw_range"), where);
        q.option_labels = jq.value("options", std::vector<std::string>{});
        if (q.option_labels.empty()) throw Error(where + ": empty option list");
        if (q.option_labels.size() < 2) throw Error(where + ": at least two options are required");
        for (std::size_t i = 0; i < q.option_labels.size(); ++i)
            for (std::size_t j = i + 1; j < q.option_labels.size(); ++j)
                if (iequals(q.option_labels[i], q.option_labels[j]))
                    throw Error(where + ": option labels must differ case-insensitively");
        q.topic = jq.value("concept", std::string());
        const auto role = jq.value("role", std::string("other"));
        if (role == "train") q.role = QuestionRole::train;
        else if (role == "cross_value") q.role = QuestionRole::cross_value;
        else if (role == "other") q.role = QuestionRole::other;
        else throw Error(where + ": role must be train, cross_value or other");

        if (q.raw_range == CodeRange{1, 10}) {
            q.mapping = ResponseMapping::tertile_1_10;
            if (q.K() != 3) throw Error(where + ": 1-10 scales discretize to exactly three options");
        } else {
            q.mapping = ResponseMapping::identity;
            if (q.raw_range.width() != q.K())
                throw Error(where + ": raw_range width must equal the option count");
        }
        cb.questions.push_back(std::move(q));
    }
    return cb;
}

inline Codebook load_codebook(const std::filesystem::path& path) {
    return codebook_from_json(read_json(path), path.string());
}

inline std::filesystem::path default_data_dir() {
#ifdef DVMAP_DATA_DIR
    return DVMAP_DATA_DIR;
#else
    return "data";
#endif
}

inline std::filesystem::path default_codebook_path() { return default_data_dir() / "codebook.json"; }

}  // namespace dvmap
