#pragma once

#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvmap/benchmark.hpp"
#include "dvmap/common.hpp"
#include "dvmap/prompt.hpp"

namespace dvmap {

// ---------------------------------------------------------------------------
// rewards

enum class RewardMode { binary, likert_soft };

inline std::string to_string(RewardMode m) { return m == RewardMode::binary ? "binary" : "likert_soft"; }

inline RewardMode reward_mode_from_string(const std::string& s) {
    if (s == "binary") return RewardMode::binary;
    if (s == "likert_soft") return RewardMode::likert_soft;
    throw Error("reward mode must be 'binary' or 'likert_soft', got '" + s + "'");
}

struct RewardConfig {
    RewardMode mode = RewardMode::binary;
    double alpha = 1.0;  // answer weight of the soft reward
    double beta = 0.1;   // format weight

    void validate() const {
        if (mode == RewardMode::likert_soft && !(alpha > 0.0)) throw Error("reward: alpha must be > 0 in soft mode");
        if (!(beta >= 0.0)) throw Error("reward: beta must be >= 0");
    }
};

inline json to_json(const RewardConfig& c) {
    return {{"mode", to_string(c.mode)}, {"alpha", c.alpha}, {"beta", c.beta}};
}

inline RewardConfig reward_config_from_json(const json& j) {
    detail::require_keys(j, {"mode", "alpha", "beta"}, "reward");
    RewardConfig c;
    c.mode = reward_mode_from_string(j.value("mode", std::string("binary")));
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.validate();
    return c;
}

/// binary:      1[pred == truth] + beta * r_format
/// likert_soft: alpha * (1 - |pred - truth| / (K - 1)) + beta * r_format
/// A format error scores 0 on both terms.
inline double compute_reward(const ParseResult& parse, int truth_index, int K, const RewardConfig& cfg) {
    if (K < 2) throw Error("compute_reward: K must be >= 2");
    if (!parse.ok()) return 0.0;
    const double format = cfg.beta;
    switch (cfg.mode) {
        case RewardMode::binary:
            return (parse.index == truth_index ? 1.0 : 0.0) + format;
        case RewardMode::likert_soft: {
            const double dist = std::abs(parse.index - truth_index) / static_cast<double>(K - 1);
            return cfg.alpha * (1.0 - dist) + format;
        }
    }
    return 0.0;
}

// ---------------------------------------------------------------------------
// advantages

inline constexpr double kAdvantageEps = 1e-8;

/// Group-standardized advantages (r - mean) / (std + eps) with population
/// std. Groups whose std is at most eps get all-zero advantages.
inline std::vector<double> group_advantages(std::span<const double> rewards) {
    std::vector<double> adv(rewards.size(), 0.0);
    if (rewards.size() < 2) return adv;
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::sqrt(var / n);
    if (sd <= kAdvantageEps) return adv;
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / (sd + kAdvantageEps);
    return adv;
}

// ---------------------------------------------------------------------------
// tabular policy

inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    double hi = logits[0];
    for (double z : logits) hi = std::max(hi, z);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp((logits[i] - hi) / temperature);
        sum += p[i];
    }
    for (auto& x : p) x /= sum;
    return p;
}

/// Softmax policy over option indices with one logit row per
/// (coarse profile bucket, question id). Unseen keys read as all-zero rows.
class TabularPolicy {
public:
    TabularPolicy() = default;
    TabularPolicy(std::vector<Attribute> bucket, double temperature)
        : bucket_(std::move(bucket)), temperature_(temperature) {
        if (!(temperature_ > 0.0)) throw Error("policy temperature must be > 0");
    }

    static std::vector<Attribute> default_bucket() {
        return {Attribute::country, Attribute::income_bracket, Attribute::religion};
    }

    std::string key(const CorpusSample& s) const {
        std::string k;
        for (auto a : bucket_) {
            k += to_lower(s.profile.get(a));
            k += '|';
        }
        k += s.question.id;
        return k;
    }

    /// Logits for a key, or a zero row of length K when unseen.
    std::vector<double> row(const std::string& key, int K) const {
        auto it = rows_.find(key);
        if (it == rows_.end()) return std::vector<double>(static_cast<std::size_t>(K), 0.0);
        if (static_cast<int>(it->second.size()) != K) throw Error("policy row '" + key + "' has the wrong length");
        return it->second;
    }

    std::vector<double> probabilities(const std::string& key, int K) const { return softmax(row(key, K), temperature_); }

    std::vector<double>& mutable_row(const std::string& key, int K) {
        auto [it, inserted] = rows_.try_emplace(key, static_cast<std::size_t>(K), 0.0);
        if (static_cast<int>(it->second.size()) != K) throw Error("policy row '" + key + "' has the wrong length");
        return it->second;
    }

    const std::map<std::string, std::vector<double>>& rows() const { return rows_; }
    const std::vector<Attribute>& bucket() const { return bucket_; }
    double temperature() const { return temperature_; }

    bool operator==(const TabularPolicy&) const = default;

    json to_json() const {
        json b = json::array();
        for (auto a : bucket_) b.push_back(attribute_name(a));
        return {{"bucket_attributes", b}, {"temperature", temperature_}, {"rows", rows_}};
    }

    static TabularPolicy from_json(const json& j) {
        std::vector<Attribute> bucket;
        for (const auto& name : j.at("bucket_attributes")) {
            auto a = attribute_from_name(name.get<std::string>());
            if (!a) throw Error("policy: unknown bucket attribute");
            bucket.push_back(*a);
        }
        TabularPolicy p(std::move(bucket), j.at("temperature").get<double>());
        p.rows_ = j.at("rows").get<std::map<std::string, std::vector<double>>>();
        return p;
    }

private:
    std::vector<Attribute> bucket_ = default_bucket();
    double temperature_ = 1.0;
    std::map<std::string, std::vector<double>> rows_;
};

inline int argmax_index(std::span<const double> v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Inverse-CDF draw from a probability vector.
inline int sample_index(std::span<const double> probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

struct Sampling {
    bool argmax = true;
    double temperature = 1.0;  // softmax sampling only
};

/// Argmax (ties to the lowest index) or a softmax draw at the given
/// temperature.
inline int policy_predict(const TabularPolicy& policy, const CorpusSample& sample, const Sampling& how,
                          Rng* rng = nullptr) {
    const auto logits = policy.row(policy.key(sample), sample.K());
    if (how.argmax) return argmax_index(logits);
    if (!rng) throw Error("policy_predict: softmax sampling needs an RNG");
    if (!(how.temperature > 0.0)) throw Error("policy_predict: temperature must be > 0");
    return sample_index(softmax(logits, how.temperature), *rng);
}

// ---------------------------------------------------------------------------
// GRPO update

struct Rollout {
    ParseResult parse;
    int option = -1;  // sampled option index; -1 for a format error
    double reward = 0.0;
};

struct RolloutGroup {
    std::string sample_id;
    std::string key;
    int K = 0;
    std::vector<Rollout> rollouts;

    std::vector<double> rewards() const {
        std::vector<double> r;
        r.reserve(rollouts.size());
        for (const auto& x : rollouts) r.push_back(x.reward);
        return r;
    }
};

using PolicyGradient = std::map<std::string, std::vector<double>>;

/// Mean over groups of (1/G) sum_i A_i log pi(o_i | key); advantages are
/// constants of the rewards. Format-error rollouts have no log-prob term.
inline double surrogate_objective(const TabularPolicy& policy, const std::vector<RolloutGroup>& groups) {
    if (groups.empty()) return 0.0;
    double total = 0.0;
    for (const auto& g : groups) {
        const auto adv = group_advantages(g.rewards());
        const auto p = policy.probabilities(g.key, g.K);
        const double G = static_cast<double>(g.rollouts.size());
        for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
            const int o = g.rollouts[i].option;
            if (o < 0) continue;
            total += adv[i] * std::log(p[static_cast<std::size_t>(o)]) / G;
        }
    }
    return total / static_cast<double>(groups.size());
}

/// Closed-form gradient of surrogate_objective with respect to the logits:
/// d log softmax(z/T)_o / dz_k = (1[k == o] - p_k) / T.
inline PolicyGradient policy_gradient(const TabularPolicy& policy, const std::vector<RolloutGroup>& groups) {
    PolicyGradient grad;
    if (groups.empty()) return grad;
    const double T = policy.temperature();
    const double scale = 1.0 / static_cast<double>(groups.size());
    for (const auto& g : groups) {
        const auto adv = group_advantages(g.rewards());
        if (std::all_of(adv.begin(), adv.end(), [](double a) { return a == 0.0; })) continue;
        const auto p = policy.probabilities(g.key, g.K);
        const double G = static_cast<double>(g.rollouts.size());
        auto& row = grad.try_emplace(g.key, static_cast<std::size_t>(g.K), 0.0).first->second;
        for (std::size_t i = 0; i < g.rollouts.size(); ++i) {
            const int o = g.rollouts[i].option;
            if (o < 0 || adv[i] == 0.0) continue;
            const double w = scale * adv[i] / (G * T);
            for (int k = 0; k < g.K; ++k)
                row[static_cast<std::size_t>(k)] += w * ((k == o ? 1.0 : 0.0) - p[static_cast<std::size_t>(k)]);
        }
    }
    return grad;
}

/// One on-policy gradient-ascent step. The importance ratio is identically
/// 1, so there is no clipping and no KL term.
inline void grpo_step(TabularPolicy& policy, const std::vector<RolloutGroup>& groups, double learning_rate) {
    const auto grad = policy_gradient(policy, groups);
    for (const auto& [key, g] : grad)
        for (double v : g)
            if (!std::isfinite(v)) throw Error("grpo_step: non-finite gradient for key '" + key + "'");
    if (learning_rate == 0.0) return;
    for (const auto& [key, g] : grad) {
        if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
        auto& row = policy.mutable_row(key, static_cast<int>(g.size()));
        for (std::size_t k = 0; k < g.size(); ++k) row[k] += learning_rate * g[k];
    }
}

// ---------------------------------------------------------------------------
// toy trainer

struct TrainHyper {
    int group_size = 8;
    int steps = 200;
    double learning_rate = 32.0;
    int batch_size = 64;  // 0 = full corpus every step
    double temperature = 1.0;
    double format_error_rate = 0.0;
    RewardConfig reward;
    std::vector<Attribute> bucket = TabularPolicy::default_bucket();
    std::uint64_t seed = 0;

    void validate() const {
        if (group_size < 1) throw Error("train: group_size must be >= 1");
        if (steps < 0) throw Error("train: steps must be >= 0");
        if (batch_size < 0) throw Error("train: batch_size must be >= 0");
        if (!(temperature > 0.0)) throw Error("train: temperature must be > 0");
        if (!(format_error_rate >= 0.0 && format_error_rate <= 1.0))
            throw Error("train: format_error_rate must lie in [0, 1]");
        reward.validate();
    }
};

inline json to_json(const TrainHyper& h) {
    json b = json::array();
    for (auto a : h.bucket) b.push_back(attribute_name(a));
    return {
        {"group_size", h.group_size},       {"steps", h.steps},
        {"learning_rate", h.learning_rate}, {"batch_size", h.batch_size},
        {"temperature", h.temperature},     {"format_error_rate", h.format_error_rate},
        {"reward", to_json(h.reward)},      {"bucket_attributes", b},
        {"seed", h.seed},
    };
}

struct TraceRow {
    int step = 0;
    double mean_reward = 0.0;
    double argmax_accuracy = 0.0;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    TabularPolicy policy;

    std::string trace_csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "step,mean_reward,argmax_acc\n";
        for (const auto& r : trace) out << r.step << ',' << r.mean_reward << ',' << r.argmax_accuracy << '\n';
        return out.str();
    }
};

/// Fraction of samples whose argmax option equals the ground truth.
inline double argmax_accuracy(const TabularPolicy& policy, const std::vector<CorpusSample>& corpus) {
    if (corpus.empty()) return 0.0;
    std::size_t hits = 0;
    for (const auto& s : corpus)
        if (policy_predict(policy, s, {}) == s.truth_index) ++hits;
    return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

/// Accuracy of always answering each question's most frequent truth.
inline double majority_baseline(const std::vector<CorpusSample>& corpus) {
    if (corpus.empty()) return 0.0;
    std::map<std::string, std::map<int, std::size_t>> counts;
    for (const auto& s : corpus) ++counts[s.question.id][s.truth_index];
    std::size_t hits = 0;
    for (const auto& [_, by_option] : counts) {
        std::size_t best = 0;
        for (const auto& [__, c] : by_option) best = std::max(best, c);
        hits += best;
    }
    return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

/// Samples G rollouts for one corpus sample from the current policy. The
/// RNG stream is keyed by (seed, step, sample index).
inline RolloutGroup make_rollout_group(const TabularPolicy& policy, const CorpusSample& s, const TrainHyper& h,
                                       int step, std::size_t corpus_index) {
    Rng rng(hash_combine({h.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(corpus_index)}));
    RolloutGroup g;
    g.sample_id = s.sample_id;
    g.key = policy.key(s);
    g.K = s.K();
    const auto probs = softmax(policy.row(g.key, g.K), h.temperature);
    for (int i = 0; i < h.group_size; ++i) {
        Rollout r;
        if (h.format_error_rate > 0.0 && rng.bernoulli(h.format_error_rate)) {
            r.parse = ParseResult::failure("no_tag");
        } else {
            r.option = sample_index(probs, rng);
            r.parse = ParseResult::success(s.question.option_labels[static_cast<std::size_t>(r.option)], r.option);
        }
        r.reward = compute_reward(r.parse, s.truth_index, s.K(), h.reward);
        g.rollouts.push_back(std::move(r));
    }
    return g;
}

/// Desk-scale GRPO over a tabular policy. Deterministic for a fixed seed.
inline TrainResult train_toy(const std::vector<CorpusSample>& corpus, const TrainHyper& h) {
    h.validate();
    if (corpus.empty()) throw Error("train_toy: empty corpus");
    for (const auto& s : corpus)
        if (!s.has_truth()) throw Error("train_toy: sample '" + s.sample_id + "' has no ground truth");

    TrainResult out;
    out.policy = TabularPolicy(h.bucket, h.temperature);

    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t batch =
        h.batch_size == 0 ? corpus.size() : std::min(corpus.size(), static_cast<std::size_t>(h.batch_size));

    for (int step = 1; step <= h.steps; ++step) {
        // Partial Fisher-Yates picks the batch without replacement.
        Rng pick(hash_combine({h.seed, 0x62617463ULL, static_cast<std::uint64_t>(step)}));
        for (std::size_t i = 0; i < batch; ++i) std::swap(order[i], order[i + pick.index(order.size() - i)]);

        std::vector<RolloutGroup> groups;
        groups.reserve(batch);
        double reward_sum = 0.0;
        for (std::size_t i = 0; i < batch; ++i) {
            groups.push_back(make_rollout_group(out.policy, corpus[order[i]], h, step, order[i]));
            for (const auto& r : groups.back().rollouts) reward_sum += r.reward;
        }
        grpo_step(out.policy, groups, h.learning_rate);
        out.trace.push_back({step, reward_sum / static_cast<double>(batch * static_cast<std::size_t>(h.group_size)),
                             argmax_accuracy(out.policy, corpus)});
    }
    return out;
}

}  // namespace dvmap
