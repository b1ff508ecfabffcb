#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/profile.hpp"

namespace dvmap {

/// Answer counts aligned to a question's option order.
struct Histogram {
    std::vector<long long> counts;

    Histogram() = default;
    explicit Histogram(std::size_t bins) : counts(bins, 0) {}
    Histogram(std::initializer_list<long long> c) : counts(c) {}

    long long total() const {
        long long t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    std::size_t bins() const { return counts.size(); }
    std::size_t nonzero_bins() const {
        return static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
    }
};

/// Shannon entropy in nats over the non-empty bins. Exactly 0 when one bin
/// holds all the mass.
inline double shannon_entropy(const Histogram& h) {
    const long long total = h.total();
    if (total <= 0) throw Error("entropy of an empty histogram is undefined");
    if (h.nonzero_bins() == 1) return 0.0;
    const double n = static_cast<double>(total);
    double H = 0.0;
    for (auto c : h.counts) {
        if (c <= 0) continue;
        const double p = static_cast<double>(c) / n;
        H -= p * std::log(p);
    }
    return H;
}

struct ResponseLabel {
    int index = 0;
    std::string label;
};

/// Maps a raw response code onto the question's processed option order.
/// 1-10 scales fold into Low (1-3) / Medium (4-7) / High (8-10); shorter
/// scales map code lo+i onto option i.
inline ResponseLabel discretize_response(const QuestionSpec& q, int code) {
    if (!q.raw_range.contains(code))
        throw Error("question " + q.id + ": code " + std::to_string(code) + " outside raw range");
    int idx = 0;
    switch (q.mapping) {
        case ResponseMapping::tertile_1_10: idx = code <= 3 ? 0 : code <= 7 ? 1 : 2; break;
        case ResponseMapping::identity: idx = code - q.raw_range.lo; break;
    }
    return {idx, q.option_labels[static_cast<std::size_t>(idx)]};
}

struct ConsensusRecord {
    DemographicProfile profile;
    std::string question_id;
    std::string answer_label;
    int answer_index = 0;
    long long support = 0;

    bool operator==(const ConsensusRecord&) const = default;
};

inline json to_json(const ConsensusRecord& r) {
    return {
        {"profile", to_json(r.profile)},
        {"question_id", r.question_id},
        {"answer_label", r.answer_label},
        {"answer_index", r.answer_index},
        {"support", r.support},
    };
}

inline ConsensusRecord consensus_record_from_json(const json& j) {
    ConsensusRecord r;
    r.profile = profile_from_json(j.at("profile"));
    r.question_id = j.at("question_id").get<std::string>();
    r.answer_label = j.at("answer_label").get<std::string>();
    r.answer_index = j.at("answer_index").get<int>();
    r.support = j.at("support").get<long long>();
    return r;
}

/// strict keeps only H = 0 groups; majority keeps every group with its modal
/// answer (the H >= 0 baseline), ties broken toward the lowest option index.
enum class FilterMode { strict, majority };

inline std::string to_string(FilterMode m) { return m == FilterMode::strict ? "strict" : "majority"; }

inline FilterMode filter_mode_from_string(const std::string& s) {
    if (s == "strict") return FilterMode::strict;
    if (s == "majority") return FilterMode::majority;
    throw Error("filter mode must be 'strict' or 'majority', got '" + s + "'");
}

struct FilterStats {
    FilterMode mode = FilterMode::strict;
    std::size_t eligible_respondents = 0;
    std::size_t excluded_respondents = 0;  // missing a demographic field
    std::size_t distinct_profiles = 0;
    std::size_t overlapping_respondents = 0;
    double overlapping_profile_fraction = 0.0;
    std::size_t total_pairs = 0;
    std::size_t retained = 0;
    std::size_t discarded = 0;
    double discarded_fraction = 0.0;
    // Same filter, measured over individual answers instead of pairs.
    std::size_t answers_total = 0;
    std::size_t answers_discarded = 0;
    double discarded_answer_fraction = 0.0;
    std::size_t tied_groups = 0;

    json to_json() const {
        return {
            {"mode", to_string(mode)},
            {"eligible_respondents", eligible_respondents},
            {"excluded_respondents", excluded_respondents},
            {"distinct_profiles", distinct_profiles},
            {"overlapping_respondents", overlapping_respondents},
            {"overlapping_profile_fraction", overlapping_profile_fraction},
            {"total_pairs", total_pairs},
            {"retained", retained},
            {"discarded", discarded},
            {"discarded_fraction", discarded_fraction},
            {"answers_total", answers_total},
            {"answers_discarded", answers_discarded},
            {"discarded_answer_fraction", discarded_answer_fraction},
            {"tied_groups", tied_groups},
        };
    }
};

struct ConsensusResult {
    std::vector<ConsensusRecord> records;
    FilterStats stats;
};

/// Respondents with complete profiles, grouped by profile. Keys are the
/// canonical profile serialization, so iteration order is deterministic.
inline std::map<std::string, std::pair<DemographicProfile, std::vector<const Respondent*>>>
group_by_profile(const std::vector<Respondent>& respondents, const Codebook& cb, std::size_t* excluded = nullptr) {
    std::map<std::string, std::pair<DemographicProfile, std::vector<const Respondent*>>> groups;
    std::size_t dropped = 0;
    for (const auto& r : respondents) {
        auto derived = derive_profile(r, cb);
        if (!derived.ok()) {
            ++dropped;
            continue;
        }
        auto key = derived.profile->canonical();
        auto& slot = groups[key];
        if (slot.second.empty()) slot.first = std::move(*derived.profile);
        slot.second.push_back(&r);
    }
    if (excluded) *excluded = dropped;
    return groups;
}

/// Histogram of processed answers of `members` to question `q`.
inline Histogram answer_histogram(const std::vector<const Respondent*>& members, const QuestionSpec& q) {
    Histogram h(static_cast<std::size_t>(q.K()));
    for (const auto* r : members) {
        auto code = r->code(q.id);
        if (!code || !q.raw_range.contains(*code)) continue;
        ++h.counts[static_cast<std::size_t>(discretize_response(q, *code).index)];
    }
    return h;
}

/// Groups respondents by derived profile and keeps the (profile, question)
/// pairs that pass the entropy filter. Output is sorted by
/// (profile fingerprint, question id).
inline ConsensusResult extract_consensus(const std::vector<Respondent>& respondents, const Codebook& cb,
                                         FilterMode mode = FilterMode::strict) {
    if (respondents.empty()) throw Error("extract_consensus: empty respondent list");

    ConsensusResult out;
    auto& st = out.stats;
    st.mode = mode;

    const auto groups = group_by_profile(respondents, cb, &st.excluded_respondents);
    st.eligible_respondents = respondents.size() - st.excluded_respondents;
    st.distinct_profiles = groups.size();

    for (const auto& [_, group] : groups) {
        const auto& [profile, members] = group;
        if (members.size() >= 2) st.overlapping_respondents += members.size();

        for (const auto& q : cb.questions) {
            const auto h = answer_histogram(members, q);
            const long long n = h.total();
            if (n == 0) continue;
            ++st.total_pairs;
            st.answers_total += static_cast<std::size_t>(n);

            const bool unanimous = shannon_entropy(h) == 0.0;
            if (mode == FilterMode::strict && !unanimous) {
                ++st.discarded;
                st.answers_discarded += static_cast<std::size_t>(n);
                continue;
            }
            const auto top = std::max_element(h.counts.begin(), h.counts.end());
            if (std::count(h.counts.begin(), h.counts.end(), *top) > 1) ++st.tied_groups;
            const int idx = static_cast<int>(top - h.counts.begin());  // first maximum = lowest index

            ++st.retained;
            out.records.push_back({profile, q.id, q.option_labels[static_cast<std::size_t>(idx)], idx, n});
        }
    }

    auto ratio = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    st.overlapping_profile_fraction = ratio(st.overlapping_respondents, st.eligible_respondents);
    st.discarded_fraction = ratio(st.discarded, st.total_pairs);
    st.discarded_answer_fraction = ratio(st.answers_discarded, st.answers_total);

    std::vector<std::pair<std::string, std::size_t>> order;
    order.reserve(out.records.size());
    for (std::size_t i = 0; i < out.records.size(); ++i) order.emplace_back(profile_fingerprint(out.records[i].profile), i);
    std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return out.records[a.second].question_id < out.records[b.second].question_id;
    });
    std::vector<ConsensusRecord> sorted;
    sorted.reserve(out.records.size());
    for (const auto& [_, i] : order) sorted.push_back(std::move(out.records[i]));
    out.records = std::move(sorted);
    return out;
}

/// Pooled answer entropy per question over respondents with complete
/// profiles, optionally restricted to one country.
inline std::map<std::string, double> question_entropies(const std::vector<Respondent>& respondents,
                                                        const Codebook& cb, const std::string& country = {}) {
    std::vector<const Respondent*> pool;
    for (const auto& r : respondents) {
        if (!country.empty() && r.country != country) continue;
        if (derive_profile(r, cb).ok()) pool.push_back(&r);
    }
    std::map<std::string, double> out;
    for (const auto& q : cb.questions) {
        const auto h = answer_histogram(pool, q);
        if (h.total() > 0) out[q.id] = shannon_entropy(h);
    }
    return out;
}

}  // namespace dvmap
