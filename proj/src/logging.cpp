#include "recall/common.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace recall::log {

Level level() {
    static const Level lvl = [] {
        const char* env = std::getenv("ADDITIVE_RECALL_LOG");
        if (env == nullptr) return Level::kQuiet;
        const std::string v(env);
        if (v == "2" || v == "debug") return Level::kDebug;
        if (v == "1" || v == "info") return Level::kInfo;
        return Level::kQuiet;
    }();
    return lvl;
}

namespace {
std::mutex g_mutex;
void emit(const char* tag, const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_mutex);
    std::cerr << tag << msg << "\n";
}
}  // namespace

void info(const std::string& msg) {
    if (level() >= Level::kInfo) emit("[recall] ", msg);
}

void debug(const std::string& msg) {
    if (level() >= Level::kDebug) emit("[recall:debug] ", msg);
}

}  // namespace recall::log
