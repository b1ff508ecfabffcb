#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

#include "dvmap/common.hpp"

namespace dvmap::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3 };

inline const char* level_name(Level l) {
    switch (l) {
        case Level::debug: return "debug";
        case Level::info: return "info";
        case Level::warn: return "warn";
        case Level::error: return "error";
    }
    return "info";
}

using Sink = std::function<void(const std::string& line)>;

struct State {
    std::mutex mu;
    Level threshold = Level::info;
    Sink sink;
};

inline State& state() {
    static State s;
    return s;
}

/// Replaces the output sink; an empty sink restores stderr.
inline void set_sink(Sink sink) {
    std::lock_guard lock(state().mu);
    state().sink = std::move(sink);
}

inline void set_level(Level l) {
    std::lock_guard lock(state().mu);
    state().threshold = l;
}

/// Emits one JSON object per line: {"level", "event", ...fields}.
inline void emit(Level level, const std::string& event, json fields = json::object()) {
    auto& s = state();
    std::lock_guard lock(s.mu);
    if (level < s.threshold) return;
    json line = {{"level", level_name(level)}, {"event", event}};
    for (auto it = fields.begin(); it != fields.end(); ++it) line[it.key()] = it.value();
    const auto text = line.dump();
    if (s.sink) s.sink(text);
    else std::cerr << text << '\n';
}

inline void info(const std::string& event, json fields = json::object()) { emit(Level::info, event, std::move(fields)); }
inline void warn(const std::string& event, json fields = json::object()) { emit(Level::warn, event, std::move(fields)); }
inline void debug(const std::string& event, json fields = json::object()) { emit(Level::debug, event, std::move(fields)); }

}  // namespace dvmap::log
