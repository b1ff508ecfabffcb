#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"

#include "dvmap/common.hpp"
#include "dvmap/log.hpp"
#include "dvmap/metrics.hpp"
#include "dvmap/prediction.hpp"
#include "dvmap/prompt.hpp"

namespace dvmap {

/// Scripted reply: the first rule whose `match` is a substring of the prompt
/// wins. `fail` injects a typed request failure instead of a completion.
struct StubRule {
    std::string match;
    std::string completion;
    std::string fail;
};

enum class StubMode { truth, constant, script };

struct StubConfig {
    StubMode mode = StubMode::truth;
    std::string constant = "<answer>{option:0}</answer>";
    std::vector<StubRule> rules;
    std::string fallback = "<answer>{option:0}</answer>";
    int delay_ms = 0;
};

struct EndpointConfig {
    std::string backend = "stub";  // stub | http
    std::string base_url = "http://127.0.0.1:8000/v1";
    std::string model = "stub";
    double temperature = 0.0;
    int max_tokens = 1024;
    double timeout_s = 120.0;
    int max_in_flight = 4;
    int retry_budget = 3;
    int backoff_ms = 500;
    std::string cache_dir;  // empty disables the cache
    std::string api_key_env = "DVMAP_API_KEY";
    std::string system_prompt = "You are a helpful assistant.";
    StubConfig stub;

    std::vector<std::string> problems() const {
        std::vector<std::string> out;
        if (backend != "stub" && backend != "http") out.push_back("endpoint.backend must be 'stub' or 'http'");
        if (!(temperature >= 0.0)) out.push_back("endpoint.temperature must be >= 0");
        if (retry_budget < 0) out.push_back("endpoint.retry_budget must be >= 0");
        if (max_in_flight < 1) out.push_back("endpoint.max_in_flight must be >= 1");
        if (max_tokens < 1) out.push_back("endpoint.max_tokens must be >= 1");
        if (!(timeout_s > 0.0)) out.push_back("endpoint.timeout_s must be > 0");
        if (backoff_ms < 0) out.push_back("endpoint.backoff_ms must be >= 0");
        return out;
    }

    void validate() const {
        auto p = problems();
        if (!p.empty()) throw Error(p.front());
    }
};

inline std::string to_string(StubMode m) {
    switch (m) {
        case StubMode::truth: return "truth";
        case StubMode::constant: return "constant";
        case StubMode::script: return "script";
    }
    return "truth";
}

inline json to_json(const StubConfig& s) {
    json rules = json::array();
    for (const auto& r : s.rules) {
        json o = {{"match", r.match}, {"completion", r.completion}};
        if (!r.fail.empty()) o["fail"] = r.fail;
        rules.push_back(o);
    }
    return {{"mode", to_string(s.mode)}, {"constant", s.constant}, {"rules", rules}, {"fallback", s.fallback},
            {"delay_ms", s.delay_ms}};
}

/// Echo of the endpoint settings. The API key is referenced by variable
/// name only.
inline json to_json(const EndpointConfig& c) {
    return {
        {"backend", c.backend},         {"base_url", c.base_url},         {"model", c.model},
        {"temperature", c.temperature}, {"max_tokens", c.max_tokens},     {"timeout_s", c.timeout_s},
        {"max_in_flight", c.max_in_flight}, {"retry_budget", c.retry_budget}, {"backoff_ms", c.backoff_ms},
        {"cache_dir", c.cache_dir},     {"api_key_env", c.api_key_env},   {"system_prompt", c.system_prompt},
        {"stub", to_json(c.stub)},
    };
}

inline StubConfig stub_config_from_json(const json& j) {
    detail::require_keys(j, {"mode", "constant", "rules", "fallback", "delay_ms"}, "endpoint.stub");
    StubConfig s;
    const auto mode = j.value("mode", std::string("truth"));
    if (mode == "truth") s.mode = StubMode::truth;
    else if (mode == "constant") s.mode = StubMode::constant;
    else if (mode == "script") s.mode = StubMode::script;
    else throw Error("endpoint.stub.mode must be truth, constant or script");
    s.constant = j.value("constant", s.constant);
    s.fallback = j.value("fallback", s.fallback);
    s.delay_ms = j.value("delay_ms", s.delay_ms);
    if (j.contains("rules")) {
        for (const auto& r : j.at("rules")) {
            detail::require_keys(r, {"match", "completion", "fail"}, "endpoint.stub.rules[]");
            s.rules.push_back({r.value("match", std::string()), r.value("completion", std::string()),
                               r.value("fail", std::string())});
        }
    }
    return s;
}

inline EndpointConfig endpoint_config_from_json(const json& j) {
    detail::require_keys(j,
                         {"backend", "base_url", "model", "temperature", "max_tokens", "timeout_s", "max_in_flight",
                          "retry_budget", "backoff_ms", "cache_dir", "api_key_env", "system_prompt", "stub"},
                         "endpoint");
    EndpointConfig c;
    c.backend = j.value("backend", c.backend);
    c.base_url = j.value("base_url", c.base_url);
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.retry_budget = j.value("retry_budget", c.retry_budget);
    c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
    c.cache_dir = j.value("cache_dir", c.cache_dir);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.system_prompt = j.value("system_prompt", c.system_prompt);
    if (j.contains("stub")) c.stub = stub_config_from_json(j.at("stub"));
    return c;
}

/// Result of one completion request after retries.
struct Completion {
    std::string text;
    std::string failure;  // transport | http_status | malformed_response | injected kind
    std::string detail;
    int retries = 0;

    bool ok() const { return failure.empty(); }
};

class Backend {
public:
    virtual ~Backend() = default;
    virtual Completion complete(const PromptInstance& prompt) = 0;
    /// Identifies the reply source in cache keys.
    virtual std::string identity() const = 0;
};

// ---------------------------------------------------------------------------
// stub backend

/// Offline backend. Tracks the peak number of concurrent calls so the
/// in-flight bound is observable from tests.
class StubBackend : public Backend {
public:
    StubBackend(StubConfig cfg, const CorpusLookup* truths = nullptr) : cfg_(std::move(cfg)), truths_(truths) {}

    Completion complete(const PromptInstance& prompt) override {
        const int now = ++in_flight_;
        int peak = peak_.load();
        while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
        }
        ++calls_;
        if (cfg_.delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.delay_ms));
        Completion c = reply(prompt);
        --in_flight_;
        return c;
    }

    std::string identity() const override { return "stub:" + to_hex(fnv1a64(to_json(cfg_).dump())); }

    int peak_in_flight() const { return peak_.load(); }
    int calls() const { return calls_.load(); }

private:
    static std::string expand(std::string text, const PromptInstance& p) {
        static const std::regex placeholder(R"(\{option:(-?\d+)\})");
        std::string out;
        auto begin = std::sregex_iterator(text.begin(), text.end(), placeholder);
        std::size_t last = 0;
        for (auto it = begin; it != std::sregex_iterator(); ++it) {
            out += text.substr(last, static_cast<std::size_t>(it->position()) - last);
            const int k = std::stoi((*it)[1].str());
            const int n = static_cast<int>(p.options.size());
            const int idx = k < 0 ? n + k : k;
            if (idx >= 0 && idx < n) out += p.options[static_cast<std::size_t>(idx)];
            last = static_cast<std::size_t>(it->position() + it->length());
        }
        out += text.substr(last);
        return out;
    }

    Completion reply(const PromptInstance& p) const {
        for (const auto& r : cfg_.rules) {
            if (p.text.find(r.match) == std::string::npos) continue;
            if (!r.fail.empty()) return {{}, r.fail, "injected by stub rule '" + r.match + "'", 0};
            return {expand(r.completion, p), {}, {}, 0};
        }
        switch (cfg_.mode) {
            case StubMode::truth:
                if (truths_) {
                    auto it = truths_->find(p.sample_id);
                    if (it != truths_->end() && it->second.has_truth())
                        return {"<answer>" + it->second.truth_label + "</answer>", {}, {}, 0};
                }
                break;
            case StubMode::constant: return {expand(cfg_.constant, p), {}, {}, 0};
            case StubMode::script: break;
        }
        return {expand(cfg_.fallback, p), {}, {}, 0};
    }

    StubConfig cfg_;
    const CorpusLookup* truths_;
    std::atomic<int> in_flight_{0};
    std::atomic<int> peak_{0};
    std::atomic<int> calls_{0};
};

// ---------------------------------------------------------------------------
// HTTP backend

namespace detail {

struct UrlParts {
    std::string origin;  // scheme://host[:port]
    std::string path;    // without trailing slash
};

inline UrlParts split_url(const std::string& url) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url, m, re)) throw Error("endpoint.base_url must look like http(s)://host[:port][/path]");
    std::string path = m[2].str();
    while (!path.empty() && path.back() == '/') path.pop_back();
    return {m[1].str(), path};
}

inline json chat_request(const PromptInstance& p, const EndpointConfig& cfg) {
    return {
        {"model", cfg.model},
        {"messages", json::array({{{"role", "system"}, {"content", cfg.system_prompt}},
                                  {{"role", "user"}, {"content", p.text}}})},
        {"temperature", cfg.temperature},
        {"max_tokens", cfg.max_tokens},
    };
}

inline std::optional<std::string> choice_text(const std::string& body) {
    try {
        const auto j = json::parse(body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        if (!content.is_string()) return std::nullopt;
        return content.get<std::string>();
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

/// OpenAI-style chat completion client. 429, 5xx and transport errors are
/// retried with exponential backoff up to the retry budget.
class HttpBackend : public Backend {
public:
    explicit HttpBackend(EndpointConfig cfg) : cfg_(std::move(cfg)), url_(detail::split_url(cfg_.base_url)) {
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }

    Completion complete(const PromptInstance& prompt) override {
        const auto body = detail::chat_request(prompt, cfg_).dump();
        Completion out;
        for (int attempt = 0;; ++attempt) {
            httplib::Client client(url_.origin);
            const auto secs = static_cast<time_t>(cfg_.timeout_s);
            const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
            client.set_connection_timeout(secs, usecs);
            client.set_read_timeout(secs, usecs);
            client.set_write_timeout(secs, usecs);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = client.Post(url_.path + "/chat/completions", headers, body, "application/json");

            bool retryable = false;
            if (!res) {
                out.failure = "transport";
                out.detail = httplib::to_string(res.error());
                retryable = true;
            } else if (res->status == 429 || res->status >= 500) {
                out.failure = "http_status";
                out.detail = "HTTP " + std::to_string(res->status);
                retryable = true;
            } else if (res->status < 200 || res->status >= 300) {
                out.failure = "http_status";
                out.detail = "HTTP " + std::to_string(res->status);
            } else if (auto text = detail::choice_text(res->body)) {
                out.text = *text;
                out.failure.clear();
                out.detail.clear();
                return out;
            } else {
                out.failure = "malformed_response";
                out.detail = "no choices[0].message.content in body";
            }
            if (!retryable || attempt >= cfg_.retry_budget) return out;
            ++out.retries;
            log::warn("inference.retry", {{"sample_id", prompt.sample_id}, {"attempt", attempt + 1}, {"reason", out.detail}});
            if (cfg_.backoff_ms > 0)
                std::this_thread::sleep_for(std::chrono::milliseconds(static_cast<long long>(cfg_.backoff_ms) << attempt));
        }
    }

    std::string identity() const override { return "http:" + cfg_.base_url; }

private:
    EndpointConfig cfg_;
    detail::UrlParts url_;
    std::string api_key_;
};

inline std::unique_ptr<Backend> make_backend(const EndpointConfig& cfg, const CorpusLookup* truths = nullptr) {
    cfg.validate();
    if (cfg.backend == "http") return std::make_unique<HttpBackend>(cfg);
    return std::make_unique<StubBackend>(cfg.stub, truths);
}

// ---------------------------------------------------------------------------
// cache

/// Content-addressed completion cache. Each entry stores its full key
/// preimage, which is compared on read so a hash collision is a miss.
class CompletionCache {
public:
    explicit CompletionCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    static json preimage(const PromptInstance& p, const EndpointConfig& cfg, const std::string& backend_identity) {
        return {
            {"template_version", p.template_version},
            {"model", cfg.model},
            {"temperature", cfg.temperature},
            {"backend", backend_identity},
            {"prompt", p.text},
        };
    }

    std::filesystem::path path_for(const json& key) const {
        const auto hex = to_hex(fnv1a64(key.dump()));
        return dir_ / hex.substr(0, 2) / (hex + ".json");
    }

    std::optional<std::string> get(const json& key) const {
        const auto path = path_for(key);
        std::error_code ec;
        if (!std::filesystem::exists(path, ec)) return std::nullopt;
        try {
            const auto entry = read_json(path);
            if (entry.at("key") != key) return std::nullopt;
            return entry.at("completion").get<std::string>();
        } catch (const std::exception&) {
            return std::nullopt;
        }
    }

    void put(const json& key, const std::string& completion) const {
        write_json(path_for(key), {{"key", key}, {"completion", completion}});
    }

private:
    std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// evaluation driver

inline PredictionRecord predict_one(const PromptInstance& prompt, Backend& backend, const EndpointConfig& cfg,
                                    const CompletionCache* cache) {
    const auto start = std::chrono::steady_clock::now();
    PredictionRecord rec;
    rec.sample_id = prompt.sample_id;

    std::optional<json> key;
    if (cache) {
        key = CompletionCache::preimage(prompt, cfg, backend.identity());
        if (auto hit = cache->get(*key)) {
            rec.raw_completion = *hit;
            rec.cached = true;
        }
    }
    if (!rec.cached) {
        auto c = backend.complete(prompt);
        rec.retries = c.retries;
        if (c.ok()) {
            rec.raw_completion = std::move(c.text);
            if (cache) cache->put(*key, rec.raw_completion);
        } else {
            rec.failure = c.failure;
            rec.failure_detail = c.detail;
        }
    }
    rec.parse = rec.failure.empty() ? parse_answer(rec.raw_completion, prompt.options)
                                    : ParseResult::failure("request_failed");
    rec.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

/// Runs every prompt through the backend with at most `max_in_flight`
/// concurrent requests. Records come back in input order. Request failures
/// become failure records; only configuration errors throw.
inline std::vector<PredictionRecord> run_eval(const std::vector<PromptInstance>& prompts, const CorpusLookup& lookup,
                                              const EndpointConfig& cfg, Backend& backend) {
    cfg.validate();
    for (const auto& p : prompts)
        if (!lookup.count(p.sample_id)) throw Error("run_eval: prompt for unknown sample '" + p.sample_id + "'");

    std::optional<CompletionCache> cache;
    if (!cfg.cache_dir.empty()) cache.emplace(cfg.cache_dir);

    std::vector<PredictionRecord> out(prompts.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mu;
    std::exception_ptr error;
    auto worker = [&] {
        for (std::size_t i = next++; i < prompts.size(); i = next++) {
            try {
                out[i] = predict_one(prompts[i], backend, cfg, cache ? &*cache : nullptr);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_in_flight), prompts.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);

    std::size_t failed = 0, unparsed = 0, cached = 0;
    for (const auto& r : out) {
        failed += !r.failure.empty();
        unparsed += r.failure.empty() && !r.parse.ok();
        cached += r.cached;
    }
    log::info("inference.done", {{"records", out.size()}, {"failed", failed}, {"format_errors", unparsed}, {"cached", cached}});
    return out;
}

inline std::vector<PredictionRecord> run_eval(const std::vector<PromptInstance>& prompts, const CorpusLookup& lookup,
                                              const EndpointConfig& cfg) {
    auto backend = make_backend(cfg, &lookup);
    return run_eval(prompts, lookup, cfg, *backend);
}

}  // namespace dvmap
