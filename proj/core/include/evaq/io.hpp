#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace evaq::io {

/// Shortest round-trip decimal form (to_chars); "nan"/"inf" are rejected
/// because artifacts must stay parseable.
std::string format_double(double v);

double parse_double(std::string_view s);
std::int64_t parse_int(std::string_view s);
std::uint64_t parse_u64(std::string_view s);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
bool file_exists(const std::string& path);

std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t v);

std::vector<std::string_view> split(std::string_view line, char sep);

/// Provenance sidecar written next to derived artifacts as
/// "<artifact>.meta.json". input_hashes maps input paths to the hex FNV-1a
/// hash of their bytes at the time the artifact was produced.
struct Sidecar {
  int format_version = 1;
  std::string tool;
  std::string config_hash;
  std::map<std::string, std::string> input_hashes;
  std::map<std::string, std::string> extra; // tool-specific provenance
};

void write_sidecar(const std::string& artifact_path, const Sidecar& sc);
std::optional<Sidecar> read_sidecar(const std::string& artifact_path);

/// Validates that every input recorded in the artifact's sidecar still
/// hashes to the recorded value. Missing sidecar passes (nothing to check);
/// a mismatch throws a "stale_input" error unless allow_stale.
void check_inputs_fresh(const std::string& artifact_path, bool allow_stale);

} // namespace evaq::io
