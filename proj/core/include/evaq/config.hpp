#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace evaq::cfg {

/// Flat key=value configuration. Keys are namespaced with dots
/// ("synth.users", "ssqe.hidden"). Files hold one pair per line; '#'
/// starts a comment; blank lines are ignored. Later settings win, so
/// command line overrides are merged on top of the file.
class FlatConfig {
public:
  static FlatConfig parse_text(std::string_view text, const std::string& origin = "<text>");
  static FlatConfig parse_file(const std::string& path);

  void set(std::string key, std::string value);
  void merge(const FlatConfig& overrides);

  bool has(const std::string& key) const;
  std::optional<std::string> raw(const std::string& key) const;

  std::string get_str(const std::string& key, std::string fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Every key ever read through a get_* accessor; unknown-key detection
  /// compares this against the stored keys after a command runs.
  std::map<std::string, bool> consumed() const { return consumed_; }
  std::map<std::string, std::string> entries() const { return kv_; }

  /// Canonical "key = value" dump, sorted by key. Hash of this dump is the
  /// config hash recorded in artifact sidecars.
  std::string dump() const;
  std::uint64_t hash() const;

private:
  std::map<std::string, std::string> kv_;
  mutable std::map<std::string, bool> consumed_;
};

} // namespace evaq::cfg
