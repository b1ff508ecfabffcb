#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvmap/common.hpp"
#include "dvmap/csv.hpp"
#include "dvmap/metrics.hpp"

namespace dvmap {

/// Cosine distance 1 - u.v / (|u||v|), clamped to [0, 2].
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw Error("cosine_distance: dimension mismatch");
    if (u.empty()) throw Error("cosine_distance: empty vectors");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw Error("cosine_distance: zero vector");
    const double d = 1.0 - dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(d, 0.0, 2.0);
}

class EmbeddingTable {
public:
    void add(const std::string& id, std::vector<double> v) {
        if (v.empty()) throw Error("embedding '" + id + "' is empty");
        if (dim_ == 0) dim_ = v.size();
        if (v.size() != dim_)
            throw Error("embedding '" + id + "' has dimension " + std::to_string(v.size()) + ", expected " +
                        std::to_string(dim_));
        bool nonzero = false;
        for (double x : v) {
            if (!std::isfinite(x)) throw Error("embedding '" + id + "' has a non-finite component");
            nonzero = nonzero || x != 0.0;
        }
        if (!nonzero) throw Error("embedding '" + id + "' is a zero vector");
        if (!vectors_.emplace(id, std::move(v)).second) throw Error("duplicate embedding id '" + id + "'");
    }

    const std::vector<double>& at(const std::string& id) const {
        auto it = vectors_.find(id);
        if (it == vectors_.end()) throw Error("no embedding for question '" + id + "'");
        return it->second;
    }

    bool contains(const std::string& id) const { return vectors_.count(id) != 0; }
    std::size_t dimension() const { return dim_; }
    std::size_t size() const { return vectors_.size(); }

private:
    std::map<std::string, std::vector<double>> vectors_;
    std::size_t dim_ = 0;
};

/// Reads `{id, vector}` JSON lines.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
    EmbeddingTable t;
    for (const auto& row : read_jsonl(path)) t.add(row.at("id").get<std::string>(), row.at("vector").get<std::vector<double>>());
    return t;
}

struct DistanceRecord {
    std::string question_id;
    double d_min = 0.0;
    double d_avg = 0.0;
    std::string nearest_train_id;
    std::optional<double> gain;
};

inline json to_json(const DistanceRecord& r) {
    return {
        {"question_id", r.question_id},
        {"d_min", r.d_min},
        {"d_avg", r.d_avg},
        {"nearest_train_id", r.nearest_train_id},
        {"gain", r.gain ? json(*r.gain) : json(nullptr)},
    };
}

inline DistanceRecord distance_profile(const std::string& test_id, const std::vector<std::string>& train_ids,
                                       const EmbeddingTable& table) {
    if (train_ids.empty()) throw Error("distance_profile: empty training set");
    const auto& u = table.at(test_id);
    DistanceRecord r;
    r.question_id = test_id;
    double sum = 0.0;
    bool first = true;
    for (const auto& id : train_ids) {
        const double d = cosine_distance(u, table.at(id));
        sum += d;
        if (first || d < r.d_min || (d == r.d_min && id < r.nearest_train_id)) {
            r.d_min = d;
            r.nearest_train_id = id;
            first = false;
        }
    }
    r.d_avg = sum / static_cast<double>(train_ids.size());
    // Rounding in the mean can leave it a hair below the minimum.
    r.d_avg = std::max(r.d_avg, r.d_min);
    return r;
}

struct GainCorrelation {
    double r_d_min = 0.0;
    double r_d_avg = 0.0;
    std::size_t n = 0;
};

inline GainCorrelation gain_distance_correlation(const std::vector<DistanceRecord>& records) {
    std::vector<double> gains, dmin, davg;
    for (const auto& r : records) {
        if (!r.gain) continue;
        gains.push_back(*r.gain);
        dmin.push_back(r.d_min);
        davg.push_back(r.d_avg);
    }
    if (gains.size() < 3) throw Error("gain_distance_correlation needs at least 3 records with gains");
    return {pearson(dmin, gains), pearson(davg, gains), gains.size()};
}

inline std::string distance_csv(const std::vector<DistanceRecord>& records) {
    std::ostringstream out;
    out.precision(17);
    out << "QID,d_min,d_avg,nearest_qid,gain\n";
    for (const auto& r : records) {
        out << csv::escape(r.question_id) << ',' << r.d_min << ',' << r.d_avg << ',' << csv::escape(r.nearest_train_id)
            << ',';
        if (r.gain) out << *r.gain;
        out << '\n';
    }
    return out.str();
}

}  // namespace dvmap
