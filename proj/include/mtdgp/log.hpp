#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace mtdgp {

// Minimal logging hook. The default sink writes to stderr; tests and the CLI
// can swap it to capture or silence diagnostics (jitter escalations, clamp
// counters, training progress).
using LogSink = std::function<void(const std::string&)>;

inline LogSink& log_sink() {
    static LogSink sink = [](const std::string& msg) { std::cerr << msg << '\n'; };
    return sink;
}

inline void log_message(const std::string& msg) {
    if (log_sink()) log_sink()(msg);
}

}  // namespace mtdgp
