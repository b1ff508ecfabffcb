#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dvmap/archetype.hpp"
#include "dvmap/benchmark.hpp"
#include "dvmap/common.hpp"
#include "dvmap/prediction.hpp"

namespace dvmap {

using CorpusLookup = std::unordered_map<std::string, CorpusSample>;

inline CorpusLookup make_lookup(const std::vector<CorpusSample>& samples) {
    CorpusLookup out;
    for (const auto& s : samples) out.emplace(s.sample_id, s);
    return out;
}

namespace detail {

inline const CorpusSample& resolve(const CorpusLookup& truths, const std::string& id) {
    auto it = truths.find(id);
    if (it == truths.end()) throw Error("prediction for unknown sample '" + id + "'");
    if (!it->second.has_truth()) throw Error("sample '" + id + "' has no ground truth");
    return it->second;
}

}  // namespace detail

/// Exact-match rate. Unparsed predictions count as wrong.
inline double accuracy(const std::vector<PredictionRecord>& preds, const CorpusLookup& truths) {
    if (preds.empty()) throw Error("accuracy: empty input");
    std::size_t hits = 0;
    for (const auto& p : preds) {
        const auto& s = detail::resolve(truths, p.sample_id);
        if (p.parsed() && p.parse.index == s.truth_index) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

struct OrdinalPair {
    int predicted = 0;  // 0-based option index
    int truth = 0;
    int K = 0;
};

/// 1 - mean(|pred - truth| / (K - 1)). Terms are accumulated as integer
/// distance sums per K, so the result does not depend on item order.
inline double likert_consistency(std::span<const OrdinalPair> items) {
    if (items.empty()) throw Error("likert_consistency: empty input");
    std::map<int, long long> distance_by_k;
    for (const auto& it : items) {
        if (it.K < 2) throw Error("likert_consistency: scale size K must be >= 2");
        if (it.predicted < 0 || it.predicted >= it.K || it.truth < 0 || it.truth >= it.K)
            throw Error("likert_consistency: option index outside [0, K)");
        distance_by_k[it.K] += std::abs(it.predicted - it.truth);
    }
    double sum = 0.0;
    for (const auto& [k, d] : distance_by_k) sum += static_cast<double>(d) / static_cast<double>(k - 1);
    return 1.0 - sum / static_cast<double>(items.size());
}

/// Record-level form: unparsed predictions are left out of N. Throws if any
/// prediction targets a nominal question.
inline std::optional<double> likert_consistency(const std::vector<PredictionRecord>& preds,
                                                const CorpusLookup& truths) {
    std::vector<OrdinalPair> items;
    for (const auto& p : preds) {
        const auto& s = detail::resolve(truths, p.sample_id);
        if (s.question.scale != ScaleKind::ordinal)
            throw Error("likert_consistency: question " + s.question.id + " is nominal");
        if (p.parsed()) items.push_back({p.parse.index, s.truth_index, s.K()});
    }
    if (items.empty()) return std::nullopt;
    return likert_consistency(items);
}

/// L1 distance between the CDFs of two normalized histograms.
inline double wasserstein(const Histogram& pred, const Histogram& real) {
    if (pred.bins() != real.bins()) throw Error("wasserstein: bin-count mismatch");
    const double np = static_cast<double>(pred.total());
    const double nr = static_cast<double>(real.total());
    if (np <= 0 || nr <= 0) throw Error("wasserstein: empty histogram");
    // Integer cumulative counts keep the per-bin terms exact until division.
    long long cp = 0, cr = 0;
    double d = 0.0;
    for (std::size_t k = 0; k < pred.bins(); ++k) {
        cp += pred.counts[k];
        cr += real.counts[k];
        d += std::abs(static_cast<double>(cp) / np - static_cast<double>(cr) / nr);
    }
    return d;
}

/// Sample Pearson correlation.
inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error("pearson: series lengths differ");
    if (x.size() < 2) throw Error("pearson: at least two points are required");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) throw Error("pearson: undefined correlation, a series has zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

enum class WdGrouping { country, question, country_question };

inline std::string to_string(WdGrouping g) {
    switch (g) {
        case WdGrouping::country: return "country";
        case WdGrouping::question: return "question";
        case WdGrouping::country_question: return "country_question";
    }
    return {};
}

inline WdGrouping wd_grouping_from_string(const std::string& s) {
    for (auto g : {WdGrouping::country, WdGrouping::question, WdGrouping::country_question})
        if (to_string(g) == s) return g;
    throw Error("unknown WD grouping '" + s + "'");
}

struct GroupMetrics {
    std::size_t n = 0;
    std::size_t parsed = 0;
    double accuracy = 0.0;
    std::optional<double> likert_consistency;
    std::optional<double> wasserstein;

    json to_json() const {
        return {
            {"n", n},
            {"parsed", parsed},
            {"accuracy", accuracy},
            {"likert_consistency", likert_consistency ? json(*likert_consistency) : json(nullptr)},
            {"wasserstein", wasserstein ? json(*wasserstein) : json(nullptr)},
        };
    }
};

struct EvalReport {
    std::size_t n = 0;
    double accuracy = 0.0;
    std::optional<double> likert_consistency;
    std::size_t likert_n = 0;
    double wasserstein_mean = 0.0;
    std::size_t wd_groups = 0;
    std::size_t skipped_groups = 0;
    double unparsed_fraction = 0.0;
    WdGrouping grouping = WdGrouping::country_question;
    std::map<std::string, GroupMetrics> per_country;
    std::map<std::string, GroupMetrics> per_question;
    std::optional<double> entropy_accuracy_r;
    std::string entropy_accuracy_note;

    json to_json() const {
        json pc = json::object(), pq = json::object();
        for (const auto& [k, g] : per_country) pc[k] = g.to_json();
        for (const auto& [k, g] : per_question) pq[k] = g.to_json();
        return {
            {"n", n},
            {"accuracy", accuracy},
            {"likert_consistency", likert_consistency ? json(*likert_consistency) : json(nullptr)},
            {"likert_n", likert_n},
            {"wasserstein_mean", wasserstein_mean},
            {"wd_groups", wd_groups},
            {"skipped_groups", skipped_groups},
            {"unparsed_fraction", unparsed_fraction},
            {"wd_grouping", to_string(grouping)},
            {"unparsed_policy", "wrong for accuracy; excluded from LC and WD"},
            {"per_country", pc},
            {"per_question", pq},
            {"entropy_accuracy_r", entropy_accuracy_r ? json(*entropy_accuracy_r) : json(nullptr)},
            {"entropy_accuracy_note", entropy_accuracy_note},
        };
    }
};

namespace detail {

/// Integer tallies for one evaluation cell; merging is associative and
/// order-free.
struct Tally {
    std::size_t n = 0, parsed = 0, hits = 0;
    std::size_t lc_n = 0;
    std::map<int, long long> lc_distance_by_k;
    Histogram pred_hist, real_hist;  // parsed items only

    void add(const PredictionRecord& p, const CorpusSample& s) {
        ++n;
        if (pred_hist.bins() == 0) {
            pred_hist = Histogram(static_cast<std::size_t>(s.K()));
            real_hist = Histogram(static_cast<std::size_t>(s.K()));
        }
        if (!p.parsed()) return;
        ++parsed;
        if (p.parse.index == s.truth_index) ++hits;
        if (s.question.scale == ScaleKind::ordinal) {
            ++lc_n;
            lc_distance_by_k[s.K()] += std::abs(p.parse.index - s.truth_index);
        }
        ++pred_hist.counts[static_cast<std::size_t>(p.parse.index)];
        ++real_hist.counts[static_cast<std::size_t>(s.truth_index)];
    }

    std::optional<double> lc() const {
        if (lc_n == 0) return std::nullopt;
        double sum = 0.0;
        for (const auto& [k, d] : lc_distance_by_k) sum += static_cast<double>(d) / static_cast<double>(k - 1);
        return 1.0 - sum / static_cast<double>(lc_n);
    }

    std::optional<double> wd() const {
        if (parsed == 0) return std::nullopt;
        return wasserstein(pred_hist, real_hist);
    }
};

inline void merge_into(Tally& dst, const Tally& src) {
    dst.n += src.n;
    dst.parsed += src.parsed;
    dst.hits += src.hits;
    dst.lc_n += src.lc_n;
    for (const auto& [k, d] : src.lc_distance_by_k) dst.lc_distance_by_k[k] += d;
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::nullopt;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Aggregates Acc / LC / WD with per-country and per-question breakdowns.
/// WD is computed per (country, question) cell over parsed predictions and
/// averaged without weights at the requested granularity; cells with no
/// parsed prediction are skipped and counted.
inline EvalReport aggregate_report(const std::vector<PredictionRecord>& preds, const CorpusLookup& truths,
                                   WdGrouping grouping = WdGrouping::country_question,
                                   const std::map<std::string, double>* question_entropy = nullptr) {
    EvalReport rep;
    rep.grouping = grouping;
    rep.n = preds.size();
    if (preds.empty()) return rep;

    using Key = std::pair<std::string, std::string>;  // (country, question)
    std::map<Key, detail::Tally> cells;
    for (const auto& p : preds) {
        const auto& s = detail::resolve(truths, p.sample_id);
        cells[{s.profile.get(Attribute::country), s.question.id}].add(p, s);
    }

    detail::Tally total;
    std::map<std::string, detail::Tally> by_country, by_question;
    std::map<std::string, std::vector<double>> wd_by_country, wd_by_question;
    std::vector<double> wd_cells;
    for (const auto& [key, t] : cells) {
        detail::merge_into(total, t);
        detail::merge_into(by_country[key.first], t);
        detail::merge_into(by_question[key.second], t);
        if (auto wd = t.wd()) {
            wd_cells.push_back(*wd);
            wd_by_country[key.first].push_back(*wd);
            wd_by_question[key.second].push_back(*wd);
        } else {
            ++rep.skipped_groups;
        }
    }

    rep.accuracy = static_cast<double>(total.hits) / static_cast<double>(total.n);
    rep.likert_consistency = total.lc();
    rep.likert_n = total.lc_n;
    rep.unparsed_fraction = static_cast<double>(total.n - total.parsed) / static_cast<double>(total.n);

    switch (grouping) {
        case WdGrouping::country_question:
            rep.wd_groups = wd_cells.size();
            rep.wasserstein_mean = detail::mean_of(wd_cells).value_or(0.0);
            break;
        case WdGrouping::country:
        case WdGrouping::question: {
            const auto& src = grouping == WdGrouping::country ? wd_by_country : wd_by_question;
            std::vector<double> means;
            for (const auto& [_, v] : src) means.push_back(*detail::mean_of(v));
            rep.wd_groups = means.size();
            rep.wasserstein_mean = detail::mean_of(means).value_or(0.0);
            break;
        }
    }

    auto fill = [](const std::map<std::string, detail::Tally>& tallies,
                   const std::map<std::string, std::vector<double>>& wds) {
        std::map<std::string, GroupMetrics> out;
        for (const auto& [k, t] : tallies) {
            GroupMetrics g;
            g.n = t.n;
            g.parsed = t.parsed;
            g.accuracy = static_cast<double>(t.hits) / static_cast<double>(t.n);
            g.likert_consistency = t.lc();
            if (auto it = wds.find(k); it != wds.end()) g.wasserstein = detail::mean_of(it->second);
            out.emplace(k, g);
        }
        return out;
    };
    rep.per_country = fill(by_country, wd_by_country);
    rep.per_question = fill(by_question, wd_by_question);

    if (question_entropy) {
        std::vector<double> hs, accs;
        for (const auto& [qid, g] : rep.per_question) {
            if (auto it = question_entropy->find(qid); it != question_entropy->end()) {
                hs.push_back(it->second);
                accs.push_back(g.accuracy);
            }
        }
        try {
            rep.entropy_accuracy_r = pearson(hs, accs);
            rep.entropy_accuracy_note = "pearson over " + std::to_string(hs.size()) + " questions";
        } catch (const Error& e) {
            rep.entropy_accuracy_note = e.what();
        }
    } else {
        rep.entropy_accuracy_note = "no question entropies supplied";
    }
    return rep;
}

struct FlipRateResult {
    double rate = 0.0;
    std::size_t pairs = 0;
    std::size_t compared = 0;
    std::size_t flipped = 0;
    std::size_t excluded_unparsed = 0;
    std::map<std::string, std::pair<std::size_t, std::size_t>> per_concept;  // concept -> (flipped, compared)

    json to_json() const {
        json pc = json::object();
        for (const auto& [c, fc] : per_concept)
            pc[c] = {{"flipped", fc.first},
                     {"compared", fc.second},
                     {"rate", fc.second ? static_cast<double>(fc.first) / static_cast<double>(fc.second) : 0.0}};
        return {
            {"flip_rate", rate},
            {"pairs", pairs},
            {"compared", compared},
            {"flipped", flipped},
            {"excluded_unparsed", excluded_unparsed},
            {"per_concept", pc},
        };
    }
};

/// Fraction of counterfactual pairs whose parsed predictions differ.
/// Pairs with an unparsed side are excluded and counted.
inline FlipRateResult flip_rate(const std::vector<CounterfactualPair>& pairs,
                                const std::unordered_map<std::string, PredictionRecord>& preds) {
    FlipRateResult out;
    out.pairs = pairs.size();
    for (const auto& pair : pairs) {
        auto a = preds.find(pair.original.sample_id);
        auto b = preds.find(pair.perturbed.sample_id);
        if (a == preds.end() || b == preds.end())
            throw Error("flip_rate: missing prediction for pair member '" +
                        (a == preds.end() ? pair.original.sample_id : pair.perturbed.sample_id) + "'");
        auto& topic = out.per_concept[pair.original.question.topic];
        if (!a->second.parsed() || !b->second.parsed()) {
            ++out.excluded_unparsed;
            continue;
        }
        ++out.compared;
        ++topic.second;
        if (a->second.parse.index != b->second.parse.index) {
            ++out.flipped;
            ++topic.first;
        }
    }
    out.rate = out.compared ? static_cast<double>(out.flipped) / static_cast<double>(out.compared) : 0.0;
    return out;
}

}  // namespace dvmap
