#include "evaq/log.hpp"

#include <cstdio>
#include <cstdlib>

#include <nlohmann/json.hpp>

namespace evaq::log {

Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("EVAQ_LOG");
    if (!env) return Level::warn;
    const std::string v(env);
    if (v == "debug") return Level::debug;
    if (v == "info") return Level::info;
    if (v == "warn") return Level::warn;
    if (v == "error") return Level::error;
    if (v == "off") return Level::off;
    return Level::warn;
  }();
  return level;
}

bool enabled(Level level) { return static_cast<int>(level) >= static_cast<int>(threshold()); }

void event(Level level, const std::string& name,
           const std::map<std::string, std::string>& fields) {
  if (!enabled(level)) return;
  static const char* names[] = {"debug", "info", "warn", "error", "off"};
  nlohmann::json j;
  j["level"] = names[static_cast<int>(level)];
  j["event"] = name;
  for (const auto& [k, v] : fields) j[k] = v;
  std::fputs((j.dump() + "\n").c_str(), stderr);
}

} // namespace evaq::log
