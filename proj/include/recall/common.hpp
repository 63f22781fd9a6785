#pragma once

#include <cstdio>
#include <sstream>
#include <string>

namespace recall {

// Concatenate arbitrary streamable arguments into one string (no separator).
template <class... Args>
std::string cat(Args&&... args) {
    std::ostringstream ss;
    (ss << ... << args);
    return ss.str();
}

// Fixed-precision float formatting so report files are byte-reproducible.
inline std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

namespace log {

enum class Level { kQuiet = 0, kInfo = 1, kDebug = 2 };

// Parsed once from the ADDITIVE_RECALL_LOG environment variable (0/1/2).
Level level();
void info(const std::string& msg);
void debug(const std::string& msg);

}  // namespace log
}  // namespace recall
