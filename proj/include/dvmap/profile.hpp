#pragma once

#include <array>
#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"

namespace dvmap {

/// One raw survey row. Demographic and question codes share the `answers`
/// map, keyed by survey column id; std::nullopt marks a missing value.
struct Respondent {
    std::string country;  // ISO-3, empty when missing
    std::size_t row_index = 0;
    std::map<std::string, std::optional<int>> answers;

    std::optional<int> code(const std::string& column) const {
        auto it = answers.find(column);
        return it == answers.end() ? std::nullopt : it->second;
    }

    bool operator==(const Respondent&) const = default;
};

inline json to_json(const Respondent& r) {
    json answers = json::object();
    for (const auto& [k, v] : r.answers) answers[k] = v ? json(*v) : json(nullptr);
    return {{"row", r.row_index}, {"country", r.country}, {"answers", answers}};
}

inline Respondent respondent_from_json(const json& j) {
    Respondent r;
    r.row_index = j.at("row").get<std::size_t>();
    r.country = j.at("country").get<std::string>();
    for (const auto& [k, v] : j.at("answers").items())
        r.answers[k] = v.is_null() ? std::nullopt : std::optional<int>(v.get<int>());
    return r;
}

enum class LifeStage { adolescence, young, middle, late, older };
enum class IncomeBracket { low, middle, high };
enum class Parenthood { has_no_children, has_children };

inline std::string to_string(LifeStage s) {
    switch (s) {
        case LifeStage::adolescence: return "Adolescence";
        case LifeStage::young: return "Young Adulthood";
        case LifeStage::middle: return "Middle Adulthood";
        case LifeStage::late: return "Late Adulthood";
        case LifeStage::older: return "Older Adulthood";
    }
    return {};
}

inline std::string to_string(IncomeBracket b) {
    switch (b) {
        case IncomeBracket::low: return "Low";
        case IncomeBracket::middle: return "Middle";
        case IncomeBracket::high: return "High";
    }
    return {};
}

inline std::string to_string(Parenthood p) {
    return p == Parenthood::has_children ? "Has children" : "Has no children";
}

/// Half-open bins, lower bound inclusive: 35 is Middle Adulthood, not Young.
inline LifeStage discretize_age(int years) {
    if (years < 0) throw Error("age must be non-negative, got " + std::to_string(years));
    if (years < 18) return LifeStage::adolescence;
    if (years < 35) return LifeStage::young;
    if (years < 51) return LifeStage::middle;
    if (years < 65) return LifeStage::late;
    return LifeStage::older;
}

inline IncomeBracket discretize_income(int step) {
    if (step < 1 || step > 10) throw Error("income step must be in 1..10, got " + std::to_string(step));
    if (step <= 3) return IncomeBracket::low;
    if (step <= 7) return IncomeBracket::middle;
    return IncomeBracket::high;
}

inline Parenthood discretize_parenthood(int children) {
    if (children < 0) throw Error("child count must be non-negative, got " + std::to_string(children));
    return children == 0 ? Parenthood::has_no_children : Parenthood::has_children;
}

/// The 11-attribute archetype used as the grouping key.
class DemographicProfile {
public:
    DemographicProfile() = default;
    explicit DemographicProfile(std::array<std::string, kAttributeCount> fields)
        : fields_(std::move(fields)) {}

    const std::string& get(Attribute a) const { return fields_[static_cast<std::size_t>(a)]; }
    void set(Attribute a, std::string value) { fields_[static_cast<std::size_t>(a)] = std::move(value); }
    const std::array<std::string, kAttributeCount>& fields() const { return fields_; }

    bool complete() const {
        return std::none_of(fields_.begin(), fields_.end(), [](const auto& f) { return f.empty(); });
    }

    /// Fixed field order, lowercase labels.
    std::string canonical() const {
        std::string out;
        for (std::size_t i = 0; i < kAttributeCount; ++i) {
            if (i) out += '|';
            out += kAttributeNames[i];
            out += '=';
            out += to_lower(fields_[i]);
        }
        return out;
    }

    auto operator<=>(const DemographicProfile&) const = default;

private:
    std::array<std::string, kAttributeCount> fields_{};
};

/// Stable 64-bit hex key for a profile.
inline std::string profile_fingerprint(const DemographicProfile& p) {
    return to_hex(fnv1a64(p.canonical()));
}

inline json to_json(const DemographicProfile& p) {
    json j = json::object();
    for (auto a : kAllAttributes) j[std::string(attribute_name(a))] = p.get(a);
    return j;
}

inline DemographicProfile profile_from_json(const json& j) {
    if (!j.is_object()) throw Error("profile must be a JSON object");
    DemographicProfile p;
    for (auto a : kAllAttributes) {
        const std::string name(attribute_name(a));
        if (!j.contains(name) || !j.at(name).is_string())
            throw Error("profile is missing string field '" + name + "'");
        p.set(a, j.at(name).get<std::string>());
    }
    return p;
}

struct ProfileResult {
    std::optional<DemographicProfile> profile;
    std::vector<Attribute> missing;  // non-empty iff rejected

    bool ok() const { return profile.has_value(); }
};

/// Label for one demographic variable's raw code, or nullopt when the code
/// is missing or inadmissible.
inline std::optional<std::string> demographic_label(const Codebook& cb, const DemographicVar& var,
                                                    std::optional<int> code) {
    if (!code || cb.is_missing(*code) || !var.accepts(*code)) return std::nullopt;
    switch (var.kind) {
        case DemographicKind::age: return to_string(discretize_age(*code));
        case DemographicKind::income: return to_string(discretize_income(*code));
        case DemographicKind::children: return to_string(discretize_parenthood(*code));
        case DemographicKind::country: return var.country_codes.at(*code);
        case DemographicKind::categorical: {
            auto it = var.labels.find(*code);
            return it == var.labels.end() ? std::to_string(*code) : it->second;
        }
    }
    return std::nullopt;
}

/// Applies the three discretizers and passes the categorical attributes
/// through their label maps. Rejects with the list of missing attributes.
inline ProfileResult derive_profile(const Respondent& r, const Codebook& cb) {
    ProfileResult result;
    DemographicProfile p;
    for (auto a : kAllAttributes) {
        const auto& var = cb.demographic(a);
        std::optional<std::string> label;
        if (a == Attribute::country) {
            if (!r.country.empty()) label = r.country;
        } else {
            label = demographic_label(cb, var, r.code(var.id));
        }
        if (label) p.set(a, std::move(*label));
        else result.missing.push_back(a);
    }
    if (result.missing.empty()) result.profile = std::move(p);
    return result;
}

}  // namespace dvmap
