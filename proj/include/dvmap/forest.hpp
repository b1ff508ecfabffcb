#pragma once

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dvmap/archetype.hpp"
#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/profile.hpp"

namespace dvmap {

/// Gini impurity 1 - sum p_i^2.
inline double gini(const Histogram& h) {
    const long long total = h.total();
    if (total <= 0) throw Error("gini of an empty histogram is undefined");
    const double n = static_cast<double>(total);
    double s = 0.0;
    for (auto c : h.counts) {
        const double p = static_cast<double>(c) / n;
        s += p * p;
    }
    return 1.0 - s;
}

enum class FeatureSubset { sqrt, all, fixed };

struct ForestConfig {
    int n_trees = 100;
    int max_depth = 12;
    int min_samples_leaf = 5;
    FeatureSubset features_per_split = FeatureSubset::sqrt;
    int fixed_features = 3;  // used when features_per_split == fixed
    bool bootstrap = true;
    std::uint64_t seed = 0;
    bool include_country = true;
    int min_question_samples = 20;  // importance_matrix skips smaller questions
    bool from_respondents = false;  // importance_matrix source in the pipeline

    void validate() const {
        if (n_trees < 1) throw Error("forest: n_trees must be >= 1");
        if (min_samples_leaf < 1) throw Error("forest: min_samples_leaf must be >= 1");
        if (max_depth < 0) throw Error("forest: max_depth must be >= 0");
        if (features_per_split == FeatureSubset::fixed && fixed_features < 1)
            throw Error("forest: fixed feature count must be >= 1");
    }
};

inline json to_json(const ForestConfig& c) {
    std::string fps = c.features_per_split == FeatureSubset::sqrt  ? "sqrt"
                      : c.features_per_split == FeatureSubset::all ? "all"
                                                                   : std::to_string(c.fixed_features);
    return {
        {"n_trees", c.n_trees},
        {"max_depth", c.max_depth},
        {"min_samples_leaf", c.min_samples_leaf},
        {"features_per_split", fps},
        {"bootstrap", c.bootstrap},
        {"seed", c.seed},
        {"include_country", c.include_country},
        {"min_question_samples", c.min_question_samples},
        {"source", c.from_respondents ? "respondents" : "consensus"},
    };
}

inline ForestConfig forest_config_from_json(const json& j) {
    detail::require_keys(j, {"n_trees", "max_depth", "min_samples_leaf", "features_per_split", "bootstrap", "seed",
                             "include_country", "min_question_samples", "source"},
                         "forest");
    ForestConfig c;
    c.n_trees = j.value("n_trees", c.n_trees);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.min_samples_leaf = j.value("min_samples_leaf", c.min_samples_leaf);
    if (j.contains("features_per_split")) {
        const auto& f = j.at("features_per_split");
        if (f.is_number_integer()) {
            c.features_per_split = FeatureSubset::fixed;
            c.fixed_features = f.get<int>();
        } else {
            const auto s = f.get<std::string>();
            int n = 0;
            if (s == "sqrt") c.features_per_split = FeatureSubset::sqrt;
            else if (s == "all") c.features_per_split = FeatureSubset::all;
            else if (parse_int(s, n)) {
                c.features_per_split = FeatureSubset::fixed;
                c.fixed_features = n;
            } else throw Error("forest.features_per_split must be 'sqrt', 'all' or an integer");
        }
    }
    c.bootstrap = j.value("bootstrap", c.bootstrap);
    c.seed = j.value("seed", c.seed);
    c.include_country = j.value("include_country", c.include_country);
    c.min_question_samples = j.value("min_question_samples", c.min_question_samples);
    const auto source = j.value("source", std::string("consensus"));
    if (source != "consensus" && source != "respondents") throw Error("forest.source must be consensus or respondents");
    c.from_respondents = source == "respondents";
    c.validate();
    return c;
}

/// One training row: the eleven profile labels and a class label.
struct LabeledProfile {
    std::array<std::string, kAttributeCount> features;
    int label = 0;
};

struct TreeNode {
    bool leaf = true;
    int feature = -1;  // attribute index
    int value = -1;    // encoded category sent left (one-vs-rest)
    int left = -1, right = -1;
    int prediction = 0;
    long long weight = 0;
    double impurity = 0.0;
    double gain = 0.0;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
};

/// Encoded training data. Category codes follow sorted label order, so the
/// encoding does not depend on row order.
struct ForestData {
    std::vector<std::array<int, kAttributeCount>> x;
    std::vector<int> y;
    int n_classes = 0;
    std::array<std::vector<std::string>, kAttributeCount> vocab;
    std::vector<std::uint64_t> row_keys;  // content hash + occurrence, for bootstrap draws
};

inline ForestData encode(const std::vector<LabeledProfile>& rows) {
    ForestData d;
    std::array<std::set<std::string>, kAttributeCount> values;
    for (const auto& r : rows)
        for (std::size_t f = 0; f < kAttributeCount; ++f) values[f].insert(r.features[f]);
    for (std::size_t f = 0; f < kAttributeCount; ++f) d.vocab[f].assign(values[f].begin(), values[f].end());

    std::map<std::uint64_t, std::uint64_t> seen;
    for (const auto& r : rows) {
        std::array<int, kAttributeCount> enc{};
        std::uint64_t h = fnv1a64(std::to_string(r.label));
        for (std::size_t f = 0; f < kAttributeCount; ++f) {
            const auto& v = d.vocab[f];
            enc[f] = static_cast<int>(std::lower_bound(v.begin(), v.end(), r.features[f]) - v.begin());
            h = fnv1a64(r.features[f], fnv1a64("\x1f", h));
        }
        if (r.label < 0) throw Error("forest: labels must be non-negative");
        d.x.push_back(enc);
        d.y.push_back(r.label);
        d.n_classes = std::max(d.n_classes, r.label + 1);
        d.row_keys.push_back(hash_combine({h, seen[h]++}));
    }
    return d;
}

struct Forest {
    std::vector<DecisionTree> trees;
    ForestConfig config;
    ForestData data;
    std::array<bool, kAttributeCount> active{};

    int predict(const std::array<std::string, kAttributeCount>& features) const {
        std::vector<int> votes(static_cast<std::size_t>(std::max(1, data.n_classes)), 0);
        for (const auto& t : trees) {
            int i = 0;
            while (!t.nodes[static_cast<std::size_t>(i)].leaf) {
                const auto& n = t.nodes[static_cast<std::size_t>(i)];
                const auto& voc = data.vocab[static_cast<std::size_t>(n.feature)];
                const bool goes_left = features[static_cast<std::size_t>(n.feature)] == voc[static_cast<std::size_t>(n.value)];
                i = goes_left ? n.left : n.right;
            }
            ++votes[static_cast<std::size_t>(t.nodes[static_cast<std::size_t>(i)].prediction)];
        }
        return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
};

namespace detail {

/// Poisson(1) draw from a uniform variate: the bootstrap multiplicity of
/// one row.
inline int poisson1(double u) {
    int k = 0;
    double p = std::exp(-1.0);
    double cdf = p;
    while (u > cdf && k < 32) {
        ++k;
        p /= k;
        cdf += p;
    }
    return k;
}

inline double gini_counts(const std::vector<long long>& counts, long long total) {
    if (total <= 0) return 0.0;
    const double n = static_cast<double>(total);
    double s = 0.0;
    for (auto c : counts) s += (static_cast<double>(c) / n) * (static_cast<double>(c) / n);
    return 1.0 - s;
}

struct SplitChoice {
    int feature = -1;
    int value = -1;
    double gain = 0.0;
};

class TreeBuilder {
public:
    TreeBuilder(const ForestData& data, const ForestConfig& cfg, const std::array<bool, kAttributeCount>& active,
                std::uint64_t tree_seed)
        : data_(data), cfg_(cfg), seed_(tree_seed) {
        for (std::size_t f = 0; f < kAttributeCount; ++f)
            if (active[f]) features_.push_back(static_cast<int>(f));
        const auto n = static_cast<int>(features_.size());
        switch (cfg.features_per_split) {
            case FeatureSubset::all: mtry_ = n; break;
            case FeatureSubset::sqrt: mtry_ = std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(n))))); break;
            case FeatureSubset::fixed: mtry_ = std::min(n, cfg.fixed_features); break;
        }
    }

    DecisionTree build() {
        std::vector<std::pair<std::size_t, long long>> rows;
        for (std::size_t i = 0; i < data_.x.size(); ++i) {
            long long w = 1;
            if (cfg_.bootstrap) w = poisson1(unit_interval(hash_combine({seed_, data_.row_keys[i]})));
            if (w > 0) rows.emplace_back(i, w);
        }
        DecisionTree tree;
        grow(tree, rows, 0, 1);
        return tree;
    }

private:
    int grow(DecisionTree& tree, const std::vector<std::pair<std::size_t, long long>>& rows, int depth,
             std::uint64_t path) {
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();

        std::vector<long long> counts(static_cast<std::size_t>(std::max(1, data_.n_classes)), 0);
        long long W = 0;
        for (const auto& [i, w] : rows) {
            counts[static_cast<std::size_t>(data_.y[i])] += w;
            W += w;
        }
        {
            auto& node = tree.nodes[static_cast<std::size_t>(id)];
            node.weight = W;
            node.impurity = gini_counts(counts, W);
            node.prediction = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        }
        const double impurity = tree.nodes[static_cast<std::size_t>(id)].impurity;
        if (W == 0 || depth >= cfg_.max_depth || impurity <= 0.0 || W < 2LL * cfg_.min_samples_leaf) return id;

        const auto split = best_split(rows, counts, W, impurity, path);
        if (split.feature < 0) return id;

        std::vector<std::pair<std::size_t, long long>> left, right;
        for (const auto& r : rows)
            (data_.x[r.first][static_cast<std::size_t>(split.feature)] == split.value ? left : right).push_back(r);

        const int l = grow(tree, left, depth + 1, 2 * path);
        const int r = grow(tree, right, depth + 1, 2 * path + 1);
        auto& node = tree.nodes[static_cast<std::size_t>(id)];
        node.leaf = false;
        node.feature = split.feature;
        node.value = split.value;
        node.left = l;
        node.right = r;
        node.gain = split.gain;
        return id;
    }

    /// Visits features in a node-seeded random order. After mtry features
    /// the search stops as soon as a valid split is known; otherwise it keeps
    /// going until one is found or every feature has been tried.
    SplitChoice best_split(const std::vector<std::pair<std::size_t, long long>>& rows, const std::vector<long long>& counts,
                     long long W, double impurity, std::uint64_t path) const {
        std::vector<int> order = features_;
        Rng rng(hash_combine({seed_, path}));
        for (std::size_t i = 0; i + 1 < order.size(); ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);

        const auto n_classes = counts.size();
        SplitChoice best;
        int visited = 0;
        for (int f : order) {
            if (visited >= mtry_ && best.feature >= 0) break;
            ++visited;
            const auto& vocab = data_.vocab[static_cast<std::size_t>(f)];
            std::vector<std::vector<long long>> by_value(vocab.size(), std::vector<long long>(n_classes, 0));
            std::vector<long long> value_weight(vocab.size(), 0);
            for (const auto& [i, w] : rows) {
                const auto v = static_cast<std::size_t>(data_.x[i][static_cast<std::size_t>(f)]);
                by_value[v][static_cast<std::size_t>(data_.y[i])] += w;
                value_weight[v] += w;
            }
            for (std::size_t v = 0; v < vocab.size(); ++v) {
                const long long wl = value_weight[v];
                const long long wr = W - wl;
                if (wl < cfg_.min_samples_leaf || wr < cfg_.min_samples_leaf) continue;
                std::vector<long long> rc(n_classes);
                for (std::size_t c = 0; c < n_classes; ++c) rc[c] = counts[c] - by_value[v][c];
                const double gain = impurity - (static_cast<double>(wl) / static_cast<double>(W)) * gini_counts(by_value[v], wl) -
                                    (static_cast<double>(wr) / static_cast<double>(W)) * gini_counts(rc, wr);
                if (gain > 1e-12 && gain > best.gain) best = {f, static_cast<int>(v), gain};
            }
        }
        return best;
    }

    const ForestData& data_;
    const ForestConfig& cfg_;
    std::uint64_t seed_;
    std::vector<int> features_;
    int mtry_ = 1;
};

}  // namespace detail

/// Fits a random forest of one-vs-rest categorical splits. Bootstrap
/// multiplicities are Poisson(1) draws keyed by row content, so the fit is
/// invariant to row order for a fixed seed.
inline Forest fit_forest(const std::vector<LabeledProfile>& samples, const ForestConfig& cfg) {
    cfg.validate();
    if (samples.empty()) throw Error("fit_forest: empty input");
    if (static_cast<int>(samples.size()) < cfg.min_samples_leaf)
        throw Error("fit_forest: fewer samples than min_samples_leaf");

    Forest forest;
    forest.config = cfg;
    forest.data = encode(samples);
    forest.active.fill(true);
    if (!cfg.include_country) forest.active[static_cast<std::size_t>(Attribute::country)] = false;

    for (int t = 0; t < cfg.n_trees; ++t) {
        detail::TreeBuilder builder(forest.data, forest.config, forest.active,
                                    hash_combine({cfg.seed, 0x74726565ULL, static_cast<std::uint64_t>(t)}));
        forest.trees.push_back(builder.build());
    }
    return forest;
}

struct Importance {
    std::array<double, kAttributeCount> scores{};
    bool all_zero = false;
};

/// Mean Decrease Impurity: per tree, the sum over internal nodes of
/// (node weight / root weight) * impurity decrease, credited to the split
/// attribute; averaged over trees and normalized to sum 1.
inline Importance mdi_importance(const Forest& forest) {
    Importance imp;
    for (const auto& tree : forest.trees) {
        const double root = static_cast<double>(tree.nodes.front().weight);
        if (root <= 0) continue;
        for (const auto& n : tree.nodes)
            if (!n.leaf) imp.scores[static_cast<std::size_t>(n.feature)] += (static_cast<double>(n.weight) / root) * n.gain;
    }
    double total = 0.0;
    for (auto& s : imp.scores) {
        s /= static_cast<double>(forest.trees.size());
        total += s;
    }
    if (total <= 0.0) {
        imp.scores.fill(0.0);
        imp.all_zero = true;
        return imp;
    }
    for (auto& s : imp.scores) s /= total;
    return imp;
}

struct ImportanceMatrix {
    std::vector<std::string> questions;
    std::vector<std::array<double, kAttributeCount>> values;
    std::map<std::string, std::size_t> n_per_question;
    std::vector<std::string> zero_rows;
    std::vector<std::string> skipped;

    std::string to_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "question_id";
        for (auto name : kAttributeNames) out << ',' << name;
        out << '\n';
        for (std::size_t i = 0; i < questions.size(); ++i) {
            out << questions[i];
            for (double v : values[i]) out << ',' << v;
            out << '\n';
        }
        return out.str();
    }

    json metadata(const ForestConfig& cfg) const {
        return {
            {"questions", questions},
            {"attributes", kAttributeNames},
            {"n_per_question", n_per_question},
            {"zero_rows", zero_rows},
            {"skipped_questions", skipped},
            {"forest", to_json(cfg)},
        };
    }
};

/// Training rows per question from consensus records.
inline std::map<std::string, std::vector<LabeledProfile>> rows_from_consensus(const std::vector<ConsensusRecord>& records) {
    std::map<std::string, std::vector<LabeledProfile>> out;
    for (const auto& r : records) out[r.question_id].push_back({r.profile.fields(), r.answer_index});
    return out;
}

/// Training rows per question from individual respondents with complete
/// profiles and a valid answer.
inline std::map<std::string, std::vector<LabeledProfile>> rows_from_respondents(const std::vector<Respondent>& respondents,
                                                                                const Codebook& cb) {
    std::map<std::string, std::vector<LabeledProfile>> out;
    for (const auto& r : respondents) {
        auto p = derive_profile(r, cb);
        if (!p.ok()) continue;
        for (const auto& q : cb.questions) {
            auto code = r.code(q.id);
            if (!code || !q.raw_range.contains(*code)) continue;
            out[q.id].push_back({p.profile->fields(), discretize_response(q, *code).index});
        }
    }
    return out;
}

/// One forest per question; under-sampled questions are skipped and listed.
inline ImportanceMatrix importance_matrix(const std::map<std::string, std::vector<LabeledProfile>>& per_question,
                                          const ForestConfig& cfg) {
    ImportanceMatrix m;
    for (const auto& [qid, rows] : per_question) {
        if (static_cast<int>(rows.size()) < cfg.min_question_samples ||
            static_cast<int>(rows.size()) < cfg.min_samples_leaf) {
            m.skipped.push_back(qid);
            continue;
        }
        const auto imp = mdi_importance(fit_forest(rows, cfg));
        m.questions.push_back(qid);
        m.values.push_back(imp.scores);
        m.n_per_question[qid] = rows.size();
        if (imp.all_zero) m.zero_rows.push_back(qid);
    }
    return m;
}

}  // namespace dvmap
