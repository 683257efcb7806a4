#include "evaq/config.hpp"

#include <sstream>

#include "evaq/error.hpp"
#include "evaq/io.hpp"
#include "evaq/rng.hpp"

namespace evaq::cfg {

namespace {

std::string_view strip(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

} // namespace

FlatConfig FlatConfig::parse_text(std::string_view text, const std::string& origin) {
  FlatConfig c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, (eol == std::string_view::npos ? text.size() : eol) - pos);
    pos = (eol == std::string_view::npos) ? text.size() + 1 : eol + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = strip(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos)
      fail("config", origin + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key(strip(line.substr(0, eq)));
    const std::string value(strip(line.substr(eq + 1)));
    if (key.empty())
      fail("config", origin + ":" + std::to_string(line_no) + ": empty key");
    c.kv_[key] = value;
  }
  return c;
}

FlatConfig FlatConfig::parse_file(const std::string& path) {
  return parse_text(io::read_file(path), path);
}

void FlatConfig::set(std::string key, std::string value) {
  kv_[std::move(key)] = std::move(value);
}

void FlatConfig::merge(const FlatConfig& overrides) {
  for (const auto& [k, v] : overrides.kv_) kv_[k] = v;
}

bool FlatConfig::has(const std::string& key) const { return kv_.count(key) != 0; }

std::optional<std::string> FlatConfig::raw(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return std::nullopt;
  return it->second;
}

std::string FlatConfig::get_str(const std::string& key, std::string fallback) const {
  consumed_[key] = true;
  auto it = kv_.find(key);
  return it == kv_.end() ? std::move(fallback) : it->second;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
  consumed_[key] = true;
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return io::parse_double(it->second);
  } catch (const Error&) {
    fail("config", "key '" + key + "' is not a number: '" + it->second + "'");
  }
}

std::int64_t FlatConfig::get_int(const std::string& key, std::int64_t fallback) const {
  consumed_[key] = true;
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return io::parse_int(it->second);
  } catch (const Error&) {
    fail("config", "key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  consumed_[key] = true;
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return io::parse_u64(it->second);
  } catch (const Error&) {
    fail("config", "key '" + key + "' is not an unsigned integer: '" + it->second + "'");
  }
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  consumed_[key] = true;
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config", "key '" + key + "' is not a boolean: '" + v + "'");
}

std::string FlatConfig::dump() const {
  std::ostringstream ss;
  for (const auto& [k, v] : kv_) ss << k << " = " << v << "\n";
  return ss.str();
}

std::uint64_t FlatConfig::hash() const { return fnv1a64(dump()); }

} // namespace evaq::cfg
