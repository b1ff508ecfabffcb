#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dvmap/archetype.hpp"
#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/profile.hpp"

namespace dvmap {

enum class Split { train, cross_demo, cross_country, cross_value };

inline constexpr std::array<Split, 4> kAllSplits = {Split::train, Split::cross_demo, Split::cross_country,
                                                    Split::cross_value};

inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::cross_demo: return "cross_demo";
        case Split::cross_country: return "cross_country";
        case Split::cross_value: return "cross_value";
    }
    return {};
}

inline Split split_from_string(const std::string& s) {
    for (auto sp : kAllSplits)
        if (to_string(sp) == s) return sp;
    throw Error("unknown split '" + s + "'");
}

struct SplitSpec {
    std::vector<std::string> train_countries{"BRA", "CAN", "CHN", "EGY", "DEU", "IND", "JPN", "RUS", "GBR", "USA"};
    std::vector<std::string> test_countries{"AUS", "IDN", "IRN", "MEX", "NGA", "PAK", "TUR", "VNM"};
    std::vector<std::string> train_questions{"Q1",  "Q2",  "Q3",  "Q4",  "Q5",  "Q6",  "Q27",  "Q29",
                                             "Q36", "Q46", "Q49", "Q50", "Q60", "Q69", "Q112", "Q131"};
    std::vector<std::string> cross_value_questions{"Q8", "Q9", "Q37", "Q61", "Q70", "Q113", "Q132"};
    double demo_holdout_ratio = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        auto disjoint = [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
            return std::none_of(a.begin(), a.end(), [&](const auto& x) { return std::find(b.begin(), b.end(), x) != b.end(); });
        };
        if (!disjoint(train_countries, test_countries)) throw Error("split: train and test countries overlap");
        if (!disjoint(train_questions, cross_value_questions))
            throw Error("split: train and cross-value questions overlap");
        if (!(demo_holdout_ratio >= 0.0 && demo_holdout_ratio <= 1.0))
            throw Error("split: demo_holdout_ratio must lie in [0, 1]");
    }
};

inline json to_json(const SplitSpec& s) {
    return {
        {"train_countries", s.train_countries},
        {"test_countries", s.test_countries},
        {"train_questions", s.train_questions},
        {"cross_value_questions", s.cross_value_questions},
        {"demo_holdout_ratio", s.demo_holdout_ratio},
        {"seed", s.seed},
    };
}

inline SplitSpec split_spec_from_json(const json& j) {
    detail::require_keys(j, {"train_countries", "test_countries", "train_questions", "cross_value_questions",
                             "demo_holdout_ratio", "seed"},
                         "split");
    SplitSpec s;
    s.train_countries = j.value("train_countries", s.train_countries);
    s.test_countries = j.value("test_countries", s.test_countries);
    s.train_questions = j.value("train_questions", s.train_questions);
    s.cross_value_questions = j.value("cross_value_questions", s.cross_value_questions);
    s.demo_holdout_ratio = j.value("demo_holdout_ratio", s.demo_holdout_ratio);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

inline json question_snapshot(const QuestionSpec& q) {
    return {
        {"id", q.id},
        {"text", q.text},
        {"scale", q.scale == ScaleKind::ordinal ? "ordinal" : "nominal"},
        {"raw_range", {q.raw_range.lo, q.raw_range.hi}},
        {"options", q.option_labels},
        {"concept", q.topic},
    };
}

inline QuestionSpec question_from_snapshot(const json& j) {
    QuestionSpec q;
    q.id = j.at("id").get<std::string>();
    q.text = j.value("text", std::string());
    q.scale = j.value("scale", std::string("ordinal")) == "nominal" ? ScaleKind::nominal : ScaleKind::ordinal;
    q.raw_range = detail::parse_range(j.at("raw_range"), "question " + q.id);
    q.option_labels = j.at("options").get<std::vector<std::string>>();
    q.topic = j.value("concept", std::string());
    q.mapping = q.raw_range == CodeRange{1, 10} ? ResponseMapping::tertile_1_10 : ResponseMapping::identity;
    return q;
}

/// One benchmark item. Counterfactual probes carry no ground truth
/// (truth_index == -1).
struct CorpusSample {
    std::string sample_id;
    DemographicProfile profile;
    QuestionSpec question;
    std::string truth_label;
    int truth_index = -1;
    Split split = Split::train;

    int K() const { return question.K(); }
    bool has_truth() const { return truth_index >= 0; }
};

inline json to_json(const CorpusSample& s) {
    return {
        {"sample_id", s.sample_id},
        {"split", to_string(s.split)},
        {"profile", to_json(s.profile)},
        {"question", question_snapshot(s.question)},
        {"truth_label", s.has_truth() ? json(s.truth_label) : json(nullptr)},
        {"truth_index", s.has_truth() ? json(s.truth_index) : json(nullptr)},
        {"K", s.K()},
    };
}

inline CorpusSample corpus_sample_from_json(const json& j) {
    CorpusSample s;
    s.sample_id = j.at("sample_id").get<std::string>();
    s.split = split_from_string(j.at("split").get<std::string>());
    s.profile = profile_from_json(j.at("profile"));
    s.question = question_from_snapshot(j.at("question"));
    if (!j.at("truth_index").is_null()) {
        s.truth_index = j.at("truth_index").get<int>();
        s.truth_label = j.at("truth_label").get<std::string>();
        if (s.truth_index >= s.K()) throw Error("sample " + s.sample_id + ": truth_index out of range");
    }
    return s;
}

inline std::string sample_id_for(const DemographicProfile& p, const std::string& question_id) {
    return profile_fingerprint(p) + ":" + question_id;
}

struct CorpusBundle {
    std::vector<CorpusSample> train;
    std::vector<CorpusSample> cross_demo;
    std::vector<CorpusSample> cross_country;
    std::vector<CorpusSample> cross_value;
    std::size_t unassigned = 0;   // country or question outside both lists
    std::size_t quarantined = 0;  // test-country records for cross-value questions
    std::vector<std::string> warnings;

    std::vector<CorpusSample>& get(Split s) {
        switch (s) {
            case Split::train: return train;
            case Split::cross_demo: return cross_demo;
            case Split::cross_country: return cross_country;
            case Split::cross_value: return cross_value;
        }
        return train;
    }
    const std::vector<CorpusSample>& get(Split s) const { return const_cast<CorpusBundle*>(this)->get(s); }
};

/// True when the profile key is held out of training for this seed.
inline bool holds_out_profile(const std::string& fingerprint, std::uint64_t seed, double ratio) {
    return unit_interval(hash_combine({seed, fnv1a64(fingerprint)})) < ratio;
}

inline CorpusSample make_sample(const ConsensusRecord& r, const Codebook& cb, Split split) {
    const auto& q = cb.question(r.question_id);
    CorpusSample s;
    s.sample_id = sample_id_for(r.profile, r.question_id);
    s.profile = r.profile;
    s.question = q;
    s.truth_index = r.answer_index;
    s.truth_label = q.option_labels.at(static_cast<std::size_t>(r.answer_index));
    s.split = split;
    return s;
}

/// Partitions consensus records into the training corpus and the three
/// generalization tests. Whole profiles move between train and cross_demo,
/// so the two never share a profile key.
inline CorpusBundle build_splits(const std::vector<ConsensusRecord>& records, const SplitSpec& spec,
                                 const Codebook& cb) {
    spec.validate();
    auto in = [](const std::vector<std::string>& v, const std::string& x) {
        return std::find(v.begin(), v.end(), x) != v.end();
    };

    CorpusBundle bundle;
    for (const auto& r : records) {
        const auto& country = r.profile.get(Attribute::country);
        const bool train_c = in(spec.train_countries, country);
        const bool test_c = in(spec.test_countries, country);
        const bool train_q = in(spec.train_questions, r.question_id);
        const bool value_q = in(spec.cross_value_questions, r.question_id);

        std::optional<Split> split;
        if (test_c && train_q) split = Split::cross_country;
        else if (train_c && value_q) split = Split::cross_value;
        else if (train_c && train_q)
            split = holds_out_profile(profile_fingerprint(r.profile), spec.seed, spec.demo_holdout_ratio)
                        ? Split::cross_demo
                        : Split::train;
        else if (test_c && value_q) ++bundle.quarantined;
        else ++bundle.unassigned;
        if (!split) continue;

        bundle.get(*split).push_back(make_sample(r, cb, *split));
    }

    for (auto sp : kAllSplits) {
        auto& v = bundle.get(sp);
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.sample_id < b.sample_id; });
        if (v.empty()) bundle.warnings.push_back("split '" + to_string(sp) + "' is empty");
    }
    return bundle;
}

inline std::set<std::string> profile_keys(const std::vector<CorpusSample>& samples) {
    std::set<std::string> keys;
    for (const auto& s : samples) keys.insert(profile_fingerprint(s.profile));
    return keys;
}

inline json bundle_meta(const CorpusBundle& b, const SplitSpec& spec) {
    json counts = json::object();
    json profiles = json::object();
    std::size_t test_total = 0;
    for (auto sp : kAllSplits) {
        counts[to_string(sp)] = b.get(sp).size();
        profiles[to_string(sp)] = profile_keys(b.get(sp)).size();
        if (sp != Split::train) test_total += b.get(sp).size();
    }
    return {
        {"counts", counts},
        {"distinct_profiles", profiles},
        {"test_total", test_total},
        {"unassigned_records", b.unassigned},
        {"quarantined_records", b.quarantined},
        {"warnings", b.warnings},
        {"split_spec", to_json(spec)},
    };
}

struct CounterfactualPair {
    CorpusSample original;
    CorpusSample perturbed;
    Attribute flipped_attribute = Attribute::income_bracket;
};

inline json to_json(const CounterfactualPair& p) {
    return {
        {"original", to_json(p.original)},
        {"perturbed", to_json(p.perturbed)},
        {"flipped_attribute", attribute_name(p.flipped_attribute)},
    };
}

inline CounterfactualPair counterfactual_from_json(const json& j) {
    CounterfactualPair p;
    p.original = corpus_sample_from_json(j.at("original"));
    p.perturbed = corpus_sample_from_json(j.at("perturbed"));
    auto a = attribute_from_name(j.at("flipped_attribute").get<std::string>());
    if (!a) throw Error("counterfactual pair: unknown flipped_attribute");
    p.flipped_attribute = *a;
    return p;
}

/// Income inversion probes: Low <-> High with the other ten attributes held
/// fixed. Middle-income samples have no inverse and are skipped.
inline std::vector<CounterfactualPair> make_counterfactual_pairs(const std::vector<CorpusSample>& samples,
                                                                 const std::string& attribute = "income_bracket") {
    if (attribute != "income_bracket")
        throw Error("counterfactual attribute '" + attribute + "' is not supported (only income_bracket)");
    const std::string low = to_string(IncomeBracket::low);
    const std::string high = to_string(IncomeBracket::high);

    std::vector<CounterfactualPair> pairs;
    for (const auto& s : samples) {
        const auto& income = s.profile.get(Attribute::income_bracket);
        if (income != low && income != high) continue;
        CounterfactualPair p;
        p.original = s;
        p.perturbed = s;
        p.perturbed.profile.set(Attribute::income_bracket, income == low ? high : low);
        p.perturbed.sample_id = s.sample_id + "~income";
        p.perturbed.truth_index = -1;
        p.perturbed.truth_label.clear();
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace dvmap
