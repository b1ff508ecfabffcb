#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dvmap/archetype.hpp"
#include "dvmap/benchmark.hpp"
#include "dvmap/codebook.hpp"
#include "dvmap/common.hpp"
#include "dvmap/forest.hpp"
#include "dvmap/grpo.hpp"
#include "dvmap/inference.hpp"
#include "dvmap/log.hpp"
#include "dvmap/metrics.hpp"
#include "dvmap/prompt.hpp"
#include "dvmap/semdist.hpp"
#include "dvmap/survey.hpp"

namespace dvmap {

namespace fs = std::filesystem;

/// Raised by load_config with every validation problem, one per line.
class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> problems)
        : Error(join(problems)), problems_(std::move(problems)) {}
    const std::vector<std::string>& problems() const { return problems_; }

private:
    static std::string join(const std::vector<std::string>& p) {
        std::string out = "invalid run config:";
        for (const auto& s : p) out += "\n  - " + s;
        return out;
    }
    std::vector<std::string> problems_;
};

struct PathsConfig {
    fs::path survey;
    fs::path codebook;
    fs::path out_dir;
    fs::path cache_dir;  // empty: <out_dir>/cache
    fs::path embeddings;
};

struct PromptStageConfig {
    PromptMode mode = PromptMode::structured_cot;
    std::vector<Split> splits{Split::cross_demo, Split::cross_country, Split::cross_value};
};

struct TrainStageConfig {
    TrainHyper hyper;
    std::vector<RewardMode> modes{RewardMode::binary, RewardMode::likert_soft};
    Split split = Split::train;
};

struct SemdistConfig {
    std::vector<std::string> test_questions;   // empty: split.cross_value_questions
    std::vector<std::string> train_questions;  // empty: split.train_questions
    fs::path gains;                            // JSON object {question id: gain}
    fs::path baseline_report;                  // or gains from two eval reports
    fs::path model_report;
    std::string embedding_note;
};

struct CompareEntry {
    std::string name;
    fs::path dir;
};

struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;
    std::optional<SyntheticSpec> synthetic;
    std::uint64_t synthetic_seed = 0;
    FilterMode filter = FilterMode::strict;
    SplitSpec split;
    PromptStageConfig prompts;
    WdGrouping wd_grouping = WdGrouping::country_question;
    RewardConfig reward;
    TrainStageConfig train;
    ForestConfig forest;
    EndpointConfig endpoint;
    SemdistConfig semdist;
    std::vector<CompareEntry> compare;

    // Stage seeds given explicitly in the file are kept; the rest derive
    // from the global seed.
    std::map<std::string, bool> explicit_seed;

    fs::path survey_path() const { return paths.survey.empty() ? paths.out_dir / "survey.csv" : paths.survey; }
    fs::path codebook_path() const { return paths.codebook.empty() ? default_codebook_path() : paths.codebook; }
};

/// Re-derives every stage seed that was not set explicitly.
inline void apply_seed(RunConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    auto derived = [&](const char* stage) { return derive_seed(seed, stage); };
    if (!cfg.explicit_seed["synthetic"]) cfg.synthetic_seed = derived("synth");
    if (!cfg.explicit_seed["split"]) cfg.split.seed = derived("split");
    if (!cfg.explicit_seed["forest"]) cfg.forest.seed = derived("importance");
    if (!cfg.explicit_seed["train"]) cfg.train.hyper.seed = derived("train-toy");
}

/// Points outputs (and the default cache) at `out`.
inline void apply_out_dir(RunConfig& cfg, const fs::path& out) {
    cfg.paths.out_dir = out;
    cfg.endpoint.cache_dir = (cfg.paths.cache_dir.empty() ? out / "cache" : cfg.paths.cache_dir).string();
}

inline json resolved_config(const RunConfig& c) {
    json prompts_splits = json::array();
    for (auto s : c.prompts.splits) prompts_splits.push_back(to_string(s));
    json modes = json::array();
    for (auto m : c.train.modes) modes.push_back(to_string(m));
    json compare = json::array();
    for (const auto& e : c.compare) compare.push_back({{"name", e.name}, {"dir", e.dir.string()}});
    return {
        {"tool_version", kToolVersion},
        {"seed", c.seed},
        {"paths",
         {{"survey", c.survey_path().string()},
          {"codebook", c.codebook_path().string()},
          {"out_dir", c.paths.out_dir.string()},
          {"cache_dir", c.endpoint.cache_dir},
          {"embeddings", c.paths.embeddings.string()}}},
        {"synthetic", c.synthetic ? to_json(*c.synthetic) : json(nullptr)},
        {"synthetic_seed", c.synthetic_seed},
        {"archetype", {{"filter", to_string(c.filter)}}},
        {"split", to_json(c.split)},
        {"prompts", {{"mode", to_string(c.prompts.mode)}, {"splits", prompts_splits}}},
        {"metrics", {{"wd_grouping", to_string(c.wd_grouping)}}},
        {"reward", to_json(c.reward)},
        {"train", {{"hyper", to_json(c.train.hyper)}, {"modes", modes}, {"split", to_string(c.train.split)}}},
        {"forest", to_json(c.forest)},
        {"endpoint", to_json(c.endpoint)},
        {"semdist",
         {{"test_questions", c.semdist.test_questions},
          {"train_questions", c.semdist.train_questions},
          {"gains", c.semdist.gains.string()},
          {"baseline_report", c.semdist.baseline_report.string()},
          {"model_report", c.semdist.model_report.string()},
          {"embedding_note", c.semdist.embedding_note}}},
        {"report", {{"compare", compare}}},
    };
}

namespace detail {

inline fs::path resolve_path(const fs::path& base, const std::string& p) {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() ? path : (base / path).lexically_normal();
}

inline std::vector<Split> parse_splits(const json& j, const std::string& where) {
    std::vector<Split> out;
    for (const auto& s : j) out.push_back(split_from_string(s.get<std::string>()));
    if (out.empty()) throw Error(where + " must not be empty");
    return out;
}

inline std::vector<Attribute> parse_attributes(const json& j, const std::string& where) {
    std::vector<Attribute> out;
    for (const auto& s : j) {
        auto a = attribute_from_name(s.get<std::string>());
        if (!a) throw Error(where + ": unknown attribute '" + s.get<std::string>() + "'");
        out.push_back(*a);
    }
    return out;
}

}  // namespace detail

/// Builds a RunConfig from parsed JSON. Relative paths resolve against
/// `base_dir`. Every section is checked; problems are reported together.
inline RunConfig config_from_json(const json& doc, const fs::path& base_dir) {
    std::vector<std::string> problems;
    RunConfig c;
    if (!doc.is_object()) throw ConfigError({"top level must be an object"});

    auto section = [&](const char* name, const std::function<void(const json&)>& fn) {
        if (!doc.contains(name)) return;
        const auto& j = doc.at(name);
        if (!j.is_object()) {
            problems.push_back(std::string(name) + " must be an object");
            return;
        }
        try {
            fn(j);
        } catch (const json::exception& e) {
            problems.push_back(std::string(name) + ": " + e.what());
        } catch (const std::exception& e) {
            problems.push_back(e.what());
        }
    };

    try {
        detail::require_keys(doc, {"seed", "paths", "synthetic", "archetype", "split", "prompts", "metrics", "reward",
                                   "train", "forest", "endpoint", "semdist", "report"},
                             "config");
    } catch (const std::exception& e) {
        problems.push_back(e.what());
    }
    try {
        if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        problems.push_back(std::string("seed: ") + e.what());
    }

    section("paths", [&](const json& j) {
        detail::require_keys(j, {"survey", "codebook", "out_dir", "cache_dir", "embeddings"}, "paths");
        c.paths.survey = detail::resolve_path(base_dir, j.value("survey", std::string()));
        c.paths.codebook = detail::resolve_path(base_dir, j.value("codebook", std::string()));
        c.paths.out_dir = detail::resolve_path(base_dir, j.value("out_dir", std::string()));
        c.paths.cache_dir = detail::resolve_path(base_dir, j.value("cache_dir", std::string()));
        c.paths.embeddings = detail::resolve_path(base_dir, j.value("embeddings", std::string()));
    });
    section("synthetic", [&](const json& j) {
        json spec = j;
        if (spec.contains("seed")) {
            c.synthetic_seed = spec.at("seed").get<std::uint64_t>();
            c.explicit_seed["synthetic"] = true;
            spec.erase("seed");
        }
        c.synthetic = synthetic_spec_from_json(spec);
    });
    section("archetype", [&](const json& j) {
        detail::require_keys(j, {"filter"}, "archetype");
        c.filter = filter_mode_from_string(j.value("filter", std::string("strict")));
    });
    section("split", [&](const json& j) {
        c.split = split_spec_from_json(j);
        c.explicit_seed["split"] = j.contains("seed");
    });
    section("prompts", [&](const json& j) {
        detail::require_keys(j, {"mode", "splits"}, "prompts");
        c.prompts.mode = prompt_mode_from_string(j.value("mode", std::string("structured_cot")));
        if (j.contains("splits")) c.prompts.splits = detail::parse_splits(j.at("splits"), "prompts.splits");
    });
    section("metrics", [&](const json& j) {
        detail::require_keys(j, {"wd_grouping"}, "metrics");
        c.wd_grouping = wd_grouping_from_string(j.value("wd_grouping", std::string("country_question")));
    });
    section("reward", [&](const json& j) { c.reward = reward_config_from_json(j); });
    section("train", [&](const json& j) {
        detail::require_keys(j, {"group_size", "steps", "learning_rate", "batch_size", "temperature",
                                 "format_error_rate", "bucket_attributes", "modes", "split", "seed"},
                             "train");
        auto& h = c.train.hyper;
        h.group_size = j.value("group_size", h.group_size);
        h.steps = j.value("steps", h.steps);
        h.learning_rate = j.value("learning_rate", h.learning_rate);
        h.batch_size = j.value("batch_size", h.batch_size);
        h.temperature = j.value("temperature", h.temperature);
        h.format_error_rate = j.value("format_error_rate", h.format_error_rate);
        if (j.contains("bucket_attributes"))
            h.bucket = detail::parse_attributes(j.at("bucket_attributes"), "train.bucket_attributes");
        if (j.contains("modes")) {
            c.train.modes.clear();
            for (const auto& m : j.at("modes")) c.train.modes.push_back(reward_mode_from_string(m.get<std::string>()));
        }
        if (j.contains("split")) c.train.split = split_from_string(j.at("split").get<std::string>());
        if (j.contains("seed")) {
            h.seed = j.at("seed").get<std::uint64_t>();
            c.explicit_seed["train"] = true;
        }
        h.validate();
    });
    section("forest", [&](const json& j) {
        c.forest = forest_config_from_json(j);
        c.explicit_seed["forest"] = j.contains("seed");
    });
    section("endpoint", [&](const json& j) {
        c.endpoint = endpoint_config_from_json(j);
        if (c.paths.cache_dir.empty() && !c.endpoint.cache_dir.empty())
            c.paths.cache_dir = detail::resolve_path(base_dir, c.endpoint.cache_dir);
        for (const auto& p : c.endpoint.problems()) problems.push_back(p);
    });
    section("semdist", [&](const json& j) {
        detail::require_keys(j, {"test_questions", "train_questions", "gains", "baseline_report", "model_report",
                                 "embedding_note"},
                             "semdist");
        c.semdist.test_questions = j.value("test_questions", std::vector<std::string>{});
        c.semdist.train_questions = j.value("train_questions", std::vector<std::string>{});
        c.semdist.gains = detail::resolve_path(base_dir, j.value("gains", std::string()));
        c.semdist.baseline_report = detail::resolve_path(base_dir, j.value("baseline_report", std::string()));
        c.semdist.model_report = detail::resolve_path(base_dir, j.value("model_report", std::string()));
        c.semdist.embedding_note = j.value("embedding_note", std::string());
    });
    section("report", [&](const json& j) {
        detail::require_keys(j, {"compare"}, "report");
        for (const auto& e : j.value("compare", json::array())) {
            detail::require_keys(e, {"name", "dir"}, "report.compare[]");
            c.compare.push_back({e.at("name").get<std::string>(),
                                 detail::resolve_path(base_dir, e.at("dir").get<std::string>())});
        }
    });

    if (c.paths.survey.empty() && !c.synthetic) problems.push_back("paths.survey is required unless a synthetic section is given");
    auto must_exist = [&](const fs::path& p, const char* what) {
        if (!p.empty() && !fs::exists(p)) problems.push_back(std::string(what) + " does not exist: " + p.string());
    };
    if (!c.synthetic) must_exist(c.paths.survey, "paths.survey");
    must_exist(c.paths.codebook, "paths.codebook");
    must_exist(c.paths.embeddings, "paths.embeddings");
    must_exist(c.semdist.gains, "semdist.gains");
    if (c.semdist.baseline_report.empty() != c.semdist.model_report.empty())
        problems.push_back("semdist.baseline_report and semdist.model_report must be given together");

    if (!problems.empty()) throw ConfigError(std::move(problems));

    if (c.paths.out_dir.empty()) c.paths.out_dir = base_dir / "out";
    apply_out_dir(c, c.paths.out_dir);
    apply_seed(c, c.seed);
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    json doc;
    try {
        doc = read_json(path);
    } catch (const Error& e) {
        throw ConfigError({e.what()});
    }
    return config_from_json(doc, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// stage bookkeeping

struct RunOptions {
    bool resume = false;
};

/// Tracks one stage's inputs and outputs and writes its manifest. Under
/// resume, a stage whose inputs and config are unchanged is skipped after
/// its recorded outputs are verified.
class StageRun {
public:
    StageRun(const RunConfig& cfg, const RunOptions& opts, std::string stage, json config_echo)
        : cfg_(cfg), opts_(opts), stage_(std::move(stage)), config_(std::move(config_echo)) {}

    /// Registers an upstream file and returns its path.
    fs::path input(const fs::path& path) {
        if (!fs::exists(path))
            throw Error(stage_ + ": missing upstream artifact " + path.string() + " (run the producing stage first)");
        inputs_[label(path)] = file_digest(path);
        return path;
    }

    fs::path out_path(const std::string& name) const { return cfg_.paths.out_dir / name; }

    /// True when the stage can be skipped. Throws if a recorded output no
    /// longer matches its hash.
    bool up_to_date() const {
        if (!opts_.resume) return false;
        const auto mpath = manifest_path();
        if (!fs::exists(mpath)) return false;
        json m;
        try {
            m = read_json(mpath);
        } catch (const Error&) {
            return false;
        }
        if (m.value("tool_version", std::string()) != kToolVersion) return false;
        if (m.value("config", json()) != config_) return false;
        if (m.value("inputs", json()) != json(inputs_)) return false;
        for (const auto& [name, digest] : m.at("outputs").items()) {
            const fs::path p = resolve(name);
            if (!fs::exists(p)) return false;
            if (file_digest(p) != digest.get<std::string>())
                throw Error(stage_ + ": hash mismatch for " + p.string() + " under --resume");
        }
        log::info("stage.skip", {{"stage", stage_}, {"reason", "inputs unchanged"}});
        return true;
    }

    void write(const fs::path& path, std::string_view contents) {
        write_file(path, contents);
        outputs_[label(path)] = to_hex(fnv1a64(contents));
    }

    void write_json_file(const fs::path& path, const json& doc) { write(path, doc.dump(2) + "\n"); }

    void finish(json summary = json::object()) {
        json m = {
            {"stage", stage_},
            {"tool_version", kToolVersion},
            {"config", config_},
            {"inputs", inputs_},
            {"outputs", outputs_},
            {"summary", summary},
        };
        write_json(manifest_path(), m);
        log::info("stage.done", {{"stage", stage_}, {"outputs", outputs_.size()}});
    }

private:
    fs::path manifest_path() const { return cfg_.paths.out_dir / "manifests" / (stage_ + ".json"); }

    std::string label(const fs::path& p) const {
        const auto rel = p.lexically_normal().lexically_relative(cfg_.paths.out_dir.lexically_normal());
        if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
        return p.lexically_normal().generic_string();
    }

    fs::path resolve(const std::string& label) const {
        fs::path p(label);
        return p.is_absolute() ? p : cfg_.paths.out_dir / p;
    }

    const RunConfig& cfg_;
    const RunOptions& opts_;
    std::string stage_;
    json config_;
    std::map<std::string, std::string> inputs_;
    std::map<std::string, std::string> outputs_;
};

namespace detail {

template <typename T, typename FromJson>
std::vector<T> read_records(const fs::path& path, FromJson&& from_json) {
    std::vector<T> out;
    for (const auto& row : read_jsonl(path)) out.push_back(from_json(row));
    return out;
}

inline std::string split_file(Split s) { return to_string(s) + ".jsonl"; }

inline std::string method_name(FilterMode m) { return m == FilterMode::strict ? "H=0" : "H>=0"; }

}  // namespace detail

// ---------------------------------------------------------------------------
// stages

inline int stage_synth(const RunConfig& cfg, const RunOptions& opts) {
    if (!cfg.synthetic) throw Error("synth: the config has no synthetic section");
    StageRun run(cfg, opts, "synth", {{"synthetic", to_json(*cfg.synthetic)}, {"seed", cfg.synthetic_seed}});
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    if (run.up_to_date()) return 0;
    run.write(cfg.survey_path(), generate_synthetic(*cfg.synthetic, cb, cfg.synthetic_seed));
    run.finish();
    return 0;
}

inline int stage_ingest(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "ingest", json::object());
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    const auto survey = run.input(cfg.survey_path());
    if (run.up_to_date()) return 0;
    auto parsed = parse_survey(read_file(survey), cb);
    run.write(run.out_path("respondents.jsonl"), to_jsonl(parsed.respondents, [](const Respondent& r) { return to_json(r); }));
    run.write_json_file(run.out_path("ingest_stats.json"), parsed.stats.to_json());
    log::info("ingest.stats", parsed.stats.to_json());
    run.finish(parsed.stats.to_json());
    return 0;
}

inline std::vector<Respondent> load_respondents(const fs::path& path) {
    return detail::read_records<Respondent>(path, respondent_from_json);
}

inline int stage_archetype(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "archetype", {{"filter", to_string(cfg.filter)}});
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    const auto respondents = load_respondents(run.input(run.out_path("respondents.jsonl")));
    if (run.up_to_date()) return 0;

    auto result = extract_consensus(respondents, cb, cfg.filter);
    run.write(run.out_path("consensus.jsonl"), to_jsonl(result.records, [](const ConsensusRecord& r) { return to_json(r); }));
    run.write_json_file(run.out_path("filter_stats.json"), result.stats.to_json());

    std::set<std::string> countries;
    for (const auto& r : respondents)
        if (!r.country.empty()) countries.insert(r.country);
    json by_country = json::object();
    for (const auto& c : countries) by_country[c] = question_entropies(respondents, cb, c);
    run.write_json_file(run.out_path("question_entropy.json"),
                        {{"pooled", question_entropies(respondents, cb)}, {"by_country", by_country}});
    log::info("archetype.stats", result.stats.to_json());
    run.finish(result.stats.to_json());
    return 0;
}

inline int stage_split(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "split", to_json(cfg.split));
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    const auto records = detail::read_records<ConsensusRecord>(run.input(run.out_path("consensus.jsonl")),
                                                               consensus_record_from_json);
    if (run.up_to_date()) return 0;

    auto bundle = build_splits(records, cfg.split, cb);
    for (auto s : kAllSplits)
        run.write(run.out_path(detail::split_file(s)),
                  to_jsonl(bundle.get(s), [](const CorpusSample& x) { return to_json(x); }));
    const auto meta = bundle_meta(bundle, cfg.split);
    run.write_json_file(run.out_path("bundle_meta.json"), meta);
    for (const auto& w : bundle.warnings) log::warn("split.warning", {{"message", w}});
    run.finish(meta.at("counts"));
    return 0;
}

inline std::vector<CorpusSample> load_samples(const fs::path& path) {
    return detail::read_records<CorpusSample>(path, corpus_sample_from_json);
}

inline int stage_prompts(const RunConfig& cfg, const RunOptions& opts) {
    json splits = json::array();
    for (auto s : cfg.prompts.splits) splits.push_back(to_string(s));
    StageRun run(cfg, opts, "prompts",
                 {{"mode", to_string(cfg.prompts.mode)}, {"splits", splits}, {"template_version", prompt_template::version()}});
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    std::vector<CorpusSample> samples;
    for (auto s : cfg.prompts.splits) {
        auto part = load_samples(run.input(run.out_path(detail::split_file(s))));
        samples.insert(samples.end(), part.begin(), part.end());
    }
    if (run.up_to_date()) return 0;

    std::vector<PromptInstance> prompts;
    for (const auto& s : samples) prompts.push_back(render_prompt(s, cfg.prompts.mode, cb));
    run.write(run.out_path("prompts.jsonl"), to_jsonl(prompts, [](const PromptInstance& p) { return to_json(p); }));

    const auto pairs = make_counterfactual_pairs(samples);
    run.write(run.out_path("counterfactual_pairs.jsonl"),
              to_jsonl(pairs, [](const CounterfactualPair& p) { return to_json(p); }));
    std::vector<PromptInstance> cf_prompts;
    for (const auto& p : pairs) {
        cf_prompts.push_back(render_prompt(p.original, cfg.prompts.mode, cb));
        cf_prompts.push_back(render_prompt(p.perturbed, cfg.prompts.mode, cb));
    }
    run.write(run.out_path("counterfactual_prompts.jsonl"),
              to_jsonl(cf_prompts, [](const PromptInstance& p) { return to_json(p); }));
    run.finish({{"prompts", prompts.size()}, {"counterfactual_pairs", pairs.size()}});
    return 0;
}

inline std::vector<PromptInstance> load_prompts(const fs::path& path) {
    return detail::read_records<PromptInstance>(path, prompt_from_json);
}

inline json endpoint_echo(const EndpointConfig& e) {
    json j = to_json(e);
    j.erase("cache_dir");  // where replies are stored does not change them
    return j;
}

inline int stage_eval(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "eval", {{"endpoint", endpoint_echo(cfg.endpoint)}, {"wd_grouping", to_string(cfg.wd_grouping)}});
    const auto prompts = load_prompts(run.input(run.out_path("prompts.jsonl")));
    std::map<Split, std::vector<CorpusSample>> by_split;
    CorpusLookup lookup;
    for (auto s : kAllSplits) {
        if (s == Split::train) continue;
        auto samples = load_samples(run.input(run.out_path(detail::split_file(s))));
        for (const auto& x : samples) lookup.emplace(x.sample_id, x);
        by_split[s] = std::move(samples);
    }
    const auto entropy_doc = read_json(run.input(run.out_path("question_entropy.json")));
    if (run.up_to_date()) return 0;

    const auto entropy = entropy_doc.at("pooled").get<std::map<std::string, double>>();
    const auto preds = run_eval(prompts, lookup, cfg.endpoint);
    run.write(run.out_path("predictions.jsonl"), to_jsonl(preds, [](const PredictionRecord& r) { return to_json(r); }));

    json doc;
    doc["overall"] = preds.empty() ? json(nullptr) : aggregate_report(preds, lookup, cfg.wd_grouping, &entropy).to_json();
    json per_split = json::object();
    for (const auto& [split, samples] : by_split) {
        std::set<std::string> ids;
        for (const auto& s : samples) ids.insert(s.sample_id);
        std::vector<PredictionRecord> part;
        for (const auto& p : preds)
            if (ids.count(p.sample_id)) part.push_back(p);
        per_split[to_string(split)] = part.empty() ? json(nullptr) : aggregate_report(part, lookup, cfg.wd_grouping, &entropy).to_json();
    }
    doc["by_split"] = per_split;
    doc["template_version"] = prompt_template::version();
    doc["model"] = cfg.endpoint.model;
    doc["backend"] = cfg.endpoint.backend;
    run.write_json_file(run.out_path("eval_report.json"), doc);
    run.finish({{"predictions", preds.size()},
                {"accuracy", doc["overall"].is_null() ? json(nullptr) : doc["overall"]["accuracy"]}});
    return 0;
}

inline int stage_flip_rate(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "flip-rate", {{"endpoint", endpoint_echo(cfg.endpoint)}});
    const auto prompts = load_prompts(run.input(run.out_path("counterfactual_prompts.jsonl")));
    const auto pairs = detail::read_records<CounterfactualPair>(run.input(run.out_path("counterfactual_pairs.jsonl")),
                                                                counterfactual_from_json);
    if (run.up_to_date()) return 0;

    CorpusLookup lookup;
    for (const auto& p : pairs) {
        lookup.emplace(p.original.sample_id, p.original);
        lookup.emplace(p.perturbed.sample_id, p.perturbed);
    }
    const auto preds = run_eval(prompts, lookup, cfg.endpoint);
    run.write(run.out_path("cf_predictions.jsonl"), to_jsonl(preds, [](const PredictionRecord& r) { return to_json(r); }));
    std::unordered_map<std::string, PredictionRecord> by_id;
    for (const auto& p : preds) by_id.emplace(p.sample_id, p);
    const auto result = flip_rate(pairs, by_id);
    run.write_json_file(run.out_path("flip_rate.json"), result.to_json());
    run.finish({{"flip_rate", result.rate}, {"pairs", result.pairs}});
    return 0;
}

inline int stage_importance(const RunConfig& cfg, const RunOptions& opts) {
    StageRun run(cfg, opts, "importance", to_json(cfg.forest));
    const auto cb = load_codebook(run.input(cfg.codebook_path()));
    std::map<std::string, std::vector<LabeledProfile>> rows;
    if (cfg.forest.from_respondents) {
        rows = rows_from_respondents(load_respondents(run.input(run.out_path("respondents.jsonl"))), cb);
    } else {
        rows = rows_from_consensus(detail::read_records<ConsensusRecord>(run.input(run.out_path("consensus.jsonl")),
                                                                         consensus_record_from_json));
    }
    if (run.up_to_date()) return 0;

    const auto m = importance_matrix(rows, cfg.forest);
    run.write(run.out_path("importance.csv"), m.to_csv());
    run.write_json_file(run.out_path("importance.json"), m.metadata(cfg.forest));
    for (const auto& q : m.skipped) log::warn("importance.skipped", {{"question_id", q}});
    run.finish({{"questions", m.questions.size()}, {"skipped", m.skipped.size()}});
    return 0;
}

inline int stage_train_toy(const RunConfig& cfg, const RunOptions& opts) {
    json modes = json::array();
    for (auto m : cfg.train.modes) modes.push_back(to_string(m));
    StageRun run(cfg, opts, "train-toy",
                 {{"hyper", to_json(cfg.train.hyper)}, {"reward", to_json(cfg.reward)}, {"modes", modes},
                  {"split", to_string(cfg.train.split)}});
    const auto corpus = load_samples(run.input(run.out_path(detail::split_file(cfg.train.split))));
    if (run.up_to_date()) return 0;
    if (corpus.empty()) throw Error("train-toy: the " + to_string(cfg.train.split) + " split is empty");

    json summary = json::object();
    for (auto mode : cfg.train.modes) {
        TrainHyper h = cfg.train.hyper;
        h.reward = cfg.reward;
        h.reward.mode = mode;
        const auto result = train_toy(corpus, h);
        const auto name = to_string(mode);
        run.write_json_file(run.out_path("policy_" + name + ".json"), result.policy.to_json());
        run.write(run.out_path("trace_" + name + ".csv"), result.trace_csv());
        const auto& last = result.trace.empty() ? TraceRow{} : result.trace.back();
        summary[name] = {{"final_argmax_accuracy", last.argmax_accuracy},
                         {"final_mean_reward", last.mean_reward},
                         {"majority_baseline", majority_baseline(corpus)},
                         {"samples", corpus.size()}};
        log::info("train.done", {{"mode", name}, {"argmax_accuracy", last.argmax_accuracy}});
    }
    run.write_json_file(run.out_path("train_summary.json"), summary);
    run.finish(summary);
    return 0;
}

inline int stage_semdist(const RunConfig& cfg, const RunOptions& opts) {
    if (cfg.paths.embeddings.empty()) throw Error("semdist: paths.embeddings is not set");
    const auto test_ids = cfg.semdist.test_questions.empty() ? cfg.split.cross_value_questions : cfg.semdist.test_questions;
    const auto train_ids = cfg.semdist.train_questions.empty() ? cfg.split.train_questions : cfg.semdist.train_questions;
    StageRun run(cfg, opts, "semdist",
                 {{"test_questions", test_ids}, {"train_questions", train_ids}, {"embedding_note", cfg.semdist.embedding_note}});
    const auto table = load_embeddings(run.input(cfg.paths.embeddings));
    std::map<std::string, double> gains;
    if (!cfg.semdist.gains.empty()) {
        gains = read_json(run.input(cfg.semdist.gains)).get<std::map<std::string, double>>();
    } else if (!cfg.semdist.baseline_report.empty()) {
        const auto base = read_json(run.input(cfg.semdist.baseline_report));
        const auto model = read_json(run.input(cfg.semdist.model_report));
        const auto& bq = base.at("overall").at("per_question");
        for (const auto& [qid, g] : model.at("overall").at("per_question").items())
            if (bq.contains(qid)) gains[qid] = g.at("accuracy").get<double>() - bq.at(qid).at("accuracy").get<double>();
    }
    if (run.up_to_date()) return 0;

    std::vector<DistanceRecord> records;
    for (const auto& id : test_ids) {
        auto r = distance_profile(id, train_ids, table);
        if (auto it = gains.find(id); it != gains.end()) r.gain = it->second;
        records.push_back(std::move(r));
    }
    json doc = {{"records", json::array()}, {"embedding_note", cfg.semdist.embedding_note}, {"dimension", table.dimension()}};
    for (const auto& r : records) doc["records"].push_back(to_json(r));
    std::size_t with_gain = 0;
    for (const auto& r : records) with_gain += r.gain.has_value();
    if (with_gain >= 3) {
        try {
            const auto c = gain_distance_correlation(records);
            doc["correlation"] = {{"r_d_min", c.r_d_min}, {"r_d_avg", c.r_d_avg}, {"n", c.n}};
        } catch (const Error& e) {
            doc["correlation"] = nullptr;
            doc["correlation_note"] = e.what();
        }
    } else {
        doc["correlation"] = nullptr;
        doc["correlation_note"] = "fewer than 3 questions with gains";
    }
    run.write(run.out_path("semdist.csv"), distance_csv(records));
    run.write_json_file(run.out_path("semdist.json"), doc);
    run.finish({{"questions", records.size()}});
    return 0;
}

namespace detail {

inline std::string fixed(double v, int digits) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(digits);
    out << v;
    return out.str();
}

}  // namespace detail

/// Side-by-side Acc / LC / WD over this run or the configured comparison
/// runs, as JSON and a Markdown table.
inline int stage_report(const RunConfig& cfg, const RunOptions& opts) {
    std::vector<CompareEntry> entries = cfg.compare;
    if (entries.empty()) entries.push_back({detail::method_name(cfg.filter), cfg.paths.out_dir});

    StageRun run(cfg, opts, "report", json::object());
    std::vector<std::pair<json, json>> docs;
    for (const auto& e : entries) {
        auto report = read_json(run.input(e.dir / "eval_report.json"));
        auto filter = read_json(run.input(e.dir / "filter_stats.json"));
        docs.emplace_back(std::move(report), std::move(filter));
    }
    if (run.up_to_date()) return 0;

    json rows = json::array();
    std::string md = "| Method | ACC (%) | LC (%) | WD |\n|---|---|---|---|\n";
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [report, filter] = docs[i];
        const auto& o = report.at("overall");
        json row = {{"method", entries[i].name}, {"filter", filter.value("mode", std::string())}};
        if (o.is_null()) {
            row["accuracy"] = row["likert_consistency"] = row["wasserstein"] = nullptr;
            md += "| " + entries[i].name + " | - | - | - |\n";
        } else {
            row["accuracy"] = o.at("accuracy");
            row["likert_consistency"] = o.at("likert_consistency");
            row["wasserstein"] = o.at("wasserstein_mean");
            row["n"] = o.at("n");
            const auto& lc = o.at("likert_consistency");
            md += "| " + entries[i].name + " | " + detail::fixed(100.0 * o.at("accuracy").get<double>(), 2) + " | " +
                  (lc.is_null() ? std::string("-") : detail::fixed(100.0 * lc.get<double>(), 2)) + " | " +
                  detail::fixed(o.at("wasserstein_mean").get<double>(), 4) + " |\n";
        }
        row["discarded_fraction"] = filter.value("discarded_fraction", 0.0);
        row["by_split"] = report.value("by_split", json::object());
        rows.push_back(row);
    }
    run.write_json_file(run.out_path("report.json"), {{"rows", rows}});
    run.write(run.out_path("report.md"), md);
    run.finish({{"rows", rows.size()}});
    return 0;
}

// ---------------------------------------------------------------------------
// dispatch

inline const std::vector<std::pair<std::string, int (*)(const RunConfig&, const RunOptions&)>>& stage_table() {
    static const std::vector<std::pair<std::string, int (*)(const RunConfig&, const RunOptions&)>> table = {
        {"synth", stage_synth},           {"ingest", stage_ingest},         {"archetype", stage_archetype},
        {"split", stage_split},           {"prompts", stage_prompts},       {"eval", stage_eval},
        {"flip-rate", stage_flip_rate},   {"importance", stage_importance}, {"train-toy", stage_train_toy},
        {"semdist", stage_semdist},       {"report", stage_report},
    };
    return table;
}

inline void prepare_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.paths.out_dir, ec);
    if (ec || !fs::is_directory(cfg.paths.out_dir))
        throw Error("output directory is not writable: " + cfg.paths.out_dir.string());
    write_json(cfg.paths.out_dir / "resolved_config.json", resolved_config(cfg));
}

/// Runs one subcommand, or `all` for the full chain (synth only when a
/// synthetic section is configured, semdist only with embeddings).
inline int dispatch(const std::string& subcommand, const RunConfig& cfg, const RunOptions& opts = {}) {
    prepare_out_dir(cfg);
    if (subcommand == "all") {
        for (const auto& [name, fn] : stage_table()) {
            if (name == "synth" && !cfg.synthetic) continue;
            if (name == "semdist" && cfg.paths.embeddings.empty()) continue;
            log::info("stage.start", {{"stage", name}});
            if (int rc = fn(cfg, opts); rc != 0) return rc;
        }
        return 0;
    }
    for (const auto& [name, fn] : stage_table()) {
        if (name != subcommand) continue;
        log::info("stage.start", {{"stage", name}});
        return fn(cfg, opts);
    }
    throw Error("unknown subcommand '" + subcommand + "'");
}

}  // namespace dvmap
