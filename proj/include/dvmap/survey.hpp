#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/csv.hpp"
#include "dvmap/profile.hpp"

namespace dvmap {

/// Row accounting for one parse. `kept` rows have all eleven demographic
/// fields; `dropped` rows miss at least one and are excluded from
/// archetype extraction (they are still returned).
struct IngestStats {
    std::size_t rows_read = 0;
    std::size_t rows_kept = 0;
    std::size_t rows_dropped = 0;
    std::size_t blank_cells = 0;
    std::size_t missing_code_cells = 0;
    std::size_t out_of_range_coerced = 0;
    std::size_t ignored_columns = 0;
    std::vector<std::string> absent_question_columns;
    std::map<std::string, std::size_t> missing_by_attribute;

    json to_json() const {
        return {
            {"rows_read", rows_read},
            {"rows_kept", rows_kept},
            {"rows_dropped", rows_dropped},
            {"blank_cells", blank_cells},
            {"missing_code_cells", missing_code_cells},
            {"out_of_range_coerced", out_of_range_coerced},
            {"ignored_columns", ignored_columns},
            {"absent_question_columns", absent_question_columns},
            {"missing_by_attribute", missing_by_attribute},
        };
    }
};

struct ParsedSurvey {
    std::vector<Respondent> respondents;
    IngestStats stats;
};

namespace detail {

inline bool is_iso3(std::string_view s) {
    return s.size() == 3 && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isalpha(c); });
}

inline std::string upper(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace detail

/// Parses CSV survey text against a codebook. Unknown columns are ignored;
/// absent question columns leave those answers missing.
inline ParsedSurvey parse_survey(std::string_view text, const Codebook& cb) {
    const auto rows = csv::parse(text);
    if (rows.empty()) throw Error("survey: empty input, a header row is required");

    const auto& header = rows.front();
    std::map<std::string, std::size_t> column;
    for (std::size_t i = 0; i < header.size(); ++i) column.emplace(trim(header[i]), i);

    auto require = [&](const std::string& id) {
        auto it = column.find(id);
        if (it == column.end()) throw Error("survey: missing required column '" + id + "'");
        return it->second;
    };

    ParsedSurvey out;
    auto& stats = out.stats;

    std::array<std::size_t, kAttributeCount> demo_col{};
    for (auto a : kAllAttributes) demo_col[static_cast<std::size_t>(a)] = require(cb.demographic(a).id);

    std::vector<std::pair<const QuestionSpec*, std::optional<std::size_t>>> qcols;
    for (const auto& q : cb.questions) {
        auto it = column.find(q.id);
        if (it == column.end()) {
            stats.absent_question_columns.push_back(q.id);
            qcols.emplace_back(&q, std::nullopt);
        } else {
            qcols.emplace_back(&q, it->second);
        }
    }
    stats.ignored_columns = header.size() - kAttributeCount - (cb.questions.size() - stats.absent_question_columns.size());

    // Returns the admissible code or nullopt, updating the cell counters.
    auto read_code = [&](const csv::Row& row, std::size_t col, std::size_t rowno, const std::string& id,
                         auto&& accepts) -> std::optional<int> {
        const std::string cell = col < row.size() ? trim(row[col]) : std::string();
        if (cell.empty()) {
            ++stats.blank_cells;
            return std::nullopt;
        }
        int code = 0;
        if (!parse_int(cell, code))
            throw Error("survey: row " + std::to_string(rowno) + ", column " + id + ": non-integer cell '" + cell + "'");
        if (cb.is_missing(code)) {
            ++stats.missing_code_cells;
            return std::nullopt;
        }
        if (!accepts(code)) {
            ++stats.out_of_range_coerced;
            return std::nullopt;
        }
        return code;
    };

    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        Respondent resp;
        resp.row_index = r - 1;
        ++stats.rows_read;

        bool complete = true;
        for (auto a : kAllAttributes) {
            const auto& var = cb.demographic(a);
            const auto col = demo_col[static_cast<std::size_t>(a)];
            bool present = false;
            if (a == Attribute::country) {
                const std::string cell = col < row.size() ? trim(row[col]) : std::string();
                if (!cell.empty() && detail::is_iso3(cell)) {
                    resp.country = detail::upper(cell);
                    present = true;
                } else if (auto code = read_code(row, col, r, var.id, [&](int c) { return var.accepts(c); })) {
                    resp.country = var.country_codes.at(*code);
                    present = true;
                }
            } else {
                auto code = read_code(row, col, r, var.id, [&](int c) { return var.accepts(c); });
                resp.answers[var.id] = code;
                present = code.has_value();
            }
            if (!present) {
                complete = false;
                ++stats.missing_by_attribute[std::string(attribute_name(a))];
            }
        }

        for (const auto& [q, col] : qcols) {
            if (!col) {
                resp.answers[q->id] = std::nullopt;
                continue;
            }
            resp.answers[q->id] = read_code(row, *col, r, q->id, [&](int c) { return q->raw_range.contains(c); });
        }

        if (complete) ++stats.rows_kept;
        else ++stats.rows_dropped;
        out.respondents.push_back(std::move(resp));
    }
    return out;
}

/// Serializes respondents in codebook column order; missing values are blank.
inline std::string write_survey_csv(const std::vector<Respondent>& respondents, const Codebook& cb) {
    csv::Row header;
    for (auto a : kAllAttributes) header.push_back(cb.demographic(a).id);
    for (const auto& q : cb.questions) header.push_back(q.id);

    std::string out = csv::format_row(header);
    for (const auto& r : respondents) {
        csv::Row row;
        row.reserve(header.size());
        for (auto a : kAllAttributes) {
            if (a == Attribute::country) {
                row.push_back(r.country);
                continue;
            }
            auto c = r.code(cb.demographic(a).id);
            row.push_back(c ? std::to_string(*c) : std::string());
        }
        for (const auto& q : cb.questions) {
            auto c = r.code(q.id);
            row.push_back(c ? std::to_string(*c) : std::string());
        }
        out += csv::format_row(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic data

/// Declares a synthetic survey with a planted profile -> answer mapping.
struct SyntheticSpec {
    std::vector<std::string> countries;
    int profiles_per_country = 20;
    int respondents_min = 1;
    int respondents_max = 4;
    std::vector<std::string> questions;  // empty = every codebook question
    double noise = 0.0;                  // probability an answer is redrawn uniformly
    /// Attributes the planted answer depends on; empty = the whole profile.
    std::vector<Attribute> planted_attributes;
    /// Distinct values drawn per attribute (the profile-space size).
    std::map<Attribute, int> domain_sizes;
    int default_domain_size = 3;
    double demographic_missing_rate = 0.0;

    int domain_size(Attribute a) const {
        auto it = domain_sizes.find(a);
        return it == domain_sizes.end() ? default_domain_size : it->second;
    }
};

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
    detail::require_keys(j, {"countries", "profiles_per_country", "respondents_per_profile", "questions", "noise",
                             "planted_attributes", "domain_sizes", "default_domain_size",
                             "demographic_missing_rate"},
                         "synthetic");
    SyntheticSpec s;
    s.countries = j.value("countries", std::vector<std::string>{});
    s.profiles_per_country = j.value("profiles_per_country", s.profiles_per_country);
    if (j.contains("respondents_per_profile")) {
        const auto& r = j.at("respondents_per_profile");
        if (r.is_number_integer()) {
            s.respondents_min = s.respondents_max = r.get<int>();
        } else {
            auto range = detail::parse_range(r, "synthetic.respondents_per_profile");
            s.respondents_min = range.lo;
            s.respondents_max = range.hi;
        }
    }
    s.questions = j.value("questions", std::vector<std::string>{});
    s.noise = j.value("noise", 0.0);
    for (const auto& name : j.value("planted_attributes", std::vector<std::string>{})) {
        auto a = attribute_from_name(name);
        if (!a) throw Error("synthetic.planted_attributes: unknown attribute '" + name + "'");
        s.planted_attributes.push_back(*a);
    }
    if (j.contains("domain_sizes")) {
        for (const auto& [name, v] : j.at("domain_sizes").items()) {
            auto a = attribute_from_name(name);
            if (!a) throw Error("synthetic.domain_sizes: unknown attribute '" + name + "'");
            s.domain_sizes[*a] = v.get<int>();
        }
    }
    s.default_domain_size = j.value("default_domain_size", s.default_domain_size);
    s.demographic_missing_rate = j.value("demographic_missing_rate", 0.0);
    return s;
}

inline json to_json(const SyntheticSpec& s) {
    json planted = json::array();
    for (auto a : s.planted_attributes) planted.push_back(attribute_name(a));
    json sizes = json::object();
    for (const auto& [a, n] : s.domain_sizes) sizes[std::string(attribute_name(a))] = n;
    return {
        {"countries", s.countries},
        {"profiles_per_country", s.profiles_per_country},
        {"respondents_per_profile", {s.respondents_min, s.respondents_max}},
        {"questions", s.questions},
        {"noise", s.noise},
        {"planted_attributes", planted},
        {"domain_sizes", sizes},
        {"default_domain_size", s.default_domain_size},
        {"demographic_missing_rate", s.demographic_missing_rate},
    };
}

/// The planted consensus option index for a (profile, question) pair.
inline int planted_answer(const SyntheticSpec& spec, std::uint64_t seed, const DemographicProfile& p,
                          const QuestionSpec& q) {
    std::string key;
    if (spec.planted_attributes.empty()) {
        key = p.canonical();
    } else {
        for (auto a : spec.planted_attributes) {
            key += attribute_name(a);
            key += '=';
            key += to_lower(p.get(a));
            key += '|';
        }
    }
    const auto h = hash_combine({seed, fnv1a64(key), fnv1a64(q.id)});
    return static_cast<int>(h % static_cast<std::uint64_t>(q.K()));
}

/// A raw code whose processed option index is `option`.
inline int raw_code_for_option(const QuestionSpec& q, int option, Rng& rng) {
    if (q.mapping == ResponseMapping::tertile_1_10) {
        static constexpr std::array<std::pair<int, int>, 3> buckets{{{1, 3}, {4, 7}, {8, 10}}};
        const auto [lo, hi] = buckets[static_cast<std::size_t>(option)];
        return rng.between(lo, hi);
    }
    return q.raw_range.lo + option;
}

namespace detail {

inline std::vector<int> categorical_domain(const DemographicVar& var) {
    std::vector<int> codes;
    if (!var.labels.empty()) {
        for (const auto& [c, _] : var.labels) codes.push_back(c);
    } else {
        const int lo = var.raw_range ? std::max(var.raw_range->lo, 1) : 1;
        const int hi = var.raw_range ? var.raw_range->hi : lo + 99;
        for (int c = lo; c <= hi && codes.size() < 100; ++c) codes.push_back(c);
    }
    return codes;
}

inline int draw_demographic(const DemographicVar& var, int domain, Rng& rng) {
    auto pick = [&](int n) { return static_cast<int>(rng.index(static_cast<std::size_t>(std::max(1, n)))); };
    switch (var.kind) {
        case DemographicKind::age: {
            static constexpr std::array<std::pair<int, int>, 5> stages{{{16, 17}, {18, 34}, {35, 50}, {51, 64}, {65, 90}}};
            const auto [lo, hi] = stages[static_cast<std::size_t>(pick(std::min(domain, 5)))];
            return rng.between(lo, hi);
        }
        case DemographicKind::income: {
            static constexpr std::array<std::pair<int, int>, 3> brackets{{{1, 3}, {4, 7}, {8, 10}}};
            const auto [lo, hi] = brackets[static_cast<std::size_t>(pick(std::min(domain, 3)))];
            return rng.between(lo, hi);
        }
        case DemographicKind::children:
            return pick(std::min(domain, 2)) == 0 ? 0 : rng.between(1, 4);
        case DemographicKind::categorical:
        case DemographicKind::country: {
            const auto codes = categorical_domain(var);
            return codes[static_cast<std::size_t>(pick(std::min<int>(domain, static_cast<int>(codes.size()))))];
        }
    }
    return 0;
}

}  // namespace detail

/// Generates respondents with a planted consensus structure. Deterministic
/// for a fixed (spec, seed); with noise 0 every profile group is unanimous.
inline std::vector<Respondent> generate_respondents(const SyntheticSpec& spec, const Codebook& cb,
                                                    std::uint64_t seed) {
    if (spec.countries.empty()) throw Error("synthetic: country list is empty");
    if (!(spec.noise >= 0.0 && spec.noise <= 1.0)) throw Error("synthetic: noise must lie in [0, 1]");
    if (!(spec.demographic_missing_rate >= 0.0 && spec.demographic_missing_rate <= 1.0))
        throw Error("synthetic: demographic_missing_rate must lie in [0, 1]");
    if (spec.respondents_min < 1 || spec.respondents_max < spec.respondents_min)
        throw Error("synthetic: respondents_per_profile must be a range with lo >= 1");
    if (spec.profiles_per_country < 1) throw Error("synthetic: profiles_per_country must be >= 1");
    for (const auto& c : spec.countries)
        if (!detail::is_iso3(c)) throw Error("synthetic: '" + c + "' is not an ISO-3 code");

    std::vector<const QuestionSpec*> questions;
    if (spec.questions.empty()) {
        for (const auto& q : cb.questions) questions.push_back(&q);
    } else {
        for (const auto& id : spec.questions) questions.push_back(&cb.question(id));
    }

    Rng rng(seed);
    std::vector<Respondent> out;
    for (const auto& country : spec.countries) {
        for (int p = 0; p < spec.profiles_per_country; ++p) {
            Respondent base;
            base.country = detail::upper(country);
            for (auto a : kAllAttributes) {
                if (a == Attribute::country) continue;
                const auto& var = cb.demographic(a);
                base.answers[var.id] = detail::draw_demographic(var, spec.domain_size(a), rng);
            }
            const auto profile = derive_profile(base, cb);
            if (!profile.ok()) throw Error("synthetic: codebook domain produced an invalid profile");

            std::vector<int> planted;
            for (const auto* q : questions) planted.push_back(planted_answer(spec, seed, *profile.profile, *q));

            const int n = rng.between(spec.respondents_min, spec.respondents_max);
            for (int i = 0; i < n; ++i) {
                Respondent r = base;
                r.row_index = out.size();
                for (std::size_t k = 0; k < questions.size(); ++k) {
                    const auto& q = *questions[k];
                    int option = planted[k];
                    if (spec.noise > 0.0 && rng.bernoulli(spec.noise))
                        option = static_cast<int>(rng.index(static_cast<std::size_t>(q.K())));
                    r.answers[q.id] = raw_code_for_option(q, option, rng);
                }
                for (const auto& q : cb.questions)
                    if (!r.answers.contains(q.id)) r.answers[q.id] = std::nullopt;
                if (spec.demographic_missing_rate > 0.0 && rng.bernoulli(spec.demographic_missing_rate)) {
                    const auto a = kAllAttributes[1 + rng.index(kAttributeCount - 1)];
                    r.answers[cb.demographic(a).id] = std::nullopt;
                }
                out.push_back(std::move(r));
            }
        }
    }
    return out;
}

/// CSV form of generate_respondents. Missing demographics are written with
/// the WVS "no answer" code -2 so that ingest exercises the missing path.
inline std::string generate_synthetic(const SyntheticSpec& spec, const Codebook& cb, std::uint64_t seed) {
    auto respondents = generate_respondents(spec, cb, seed);
    std::string text = write_survey_csv(respondents, cb);
    if (spec.demographic_missing_rate <= 0.0) return text;

    // Re-emit with explicit missing codes for demographic blanks.
    auto rows = csv::parse(text);
    std::string out = csv::format_row(rows.front());
    for (std::size_t r = 1; r < rows.size(); ++r) {
        for (std::size_t c = 1; c < kAttributeCount; ++c)
            if (rows[r][c].empty()) rows[r][c] = "-2";
        out += csv::format_row(rows[r]);
    }
    return out;
}

}  // namespace dvmap
