#pragma once

#include <map>
#include <string>

namespace evaq::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

/// Threshold comes from the EVAQ_LOG environment variable
/// (debug|info|warn|error|off); default is warn.
Level threshold();
bool enabled(Level level);

/// One JSON line to stderr: {"level":..,"event":..,"fields"...}.
/// Values are emitted as JSON strings; numbers should be preformatted.
void event(Level level, const std::string& name,
           const std::map<std::string, std::string>& fields = {});

} // namespace evaq::log
