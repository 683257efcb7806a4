#include "evaq/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

#include <nlohmann/json.hpp>

#include "evaq/error.hpp"
#include "evaq/rng.hpp"

namespace evaq::io {

std::string format_double(double v) {
  if (!std::isfinite(v)) fail("numeric", "refusing to serialize a non-finite value");
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    fail("parse", "bad float: '" + std::string(s) + "'");
  return v;
}

std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    fail("parse", "bad integer: '" + std::string(s) + "'");
  return v;
}

std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    fail("parse", "bad unsigned integer: '" + std::string(s) + "'");
  return v;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail("io", "read failed: " + path);
  return ss.str();
}

void write_file(const std::string& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("io", "cannot open for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) fail("io", "write failed: " + path);
}

bool file_exists(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return static_cast<bool>(in);
}

std::uint64_t fnv1a64_file(const std::string& path) {
  return fnv1a64(read_file(path));
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

static std::string sidecar_path(const std::string& artifact_path) {
  return artifact_path + ".meta.json";
}

void write_sidecar(const std::string& artifact_path, const Sidecar& sc) {
  nlohmann::json j;
  j["format_version"] = sc.format_version;
  j["tool"] = sc.tool;
  j["config_hash"] = sc.config_hash;
  j["inputs"] = nlohmann::json::object();
  for (const auto& [path, hash] : sc.input_hashes) j["inputs"][path] = hash;
  if (!sc.extra.empty()) {
    j["extra"] = nlohmann::json::object();
    for (const auto& [k, v] : sc.extra) j["extra"][k] = v;
  }
  write_file(sidecar_path(artifact_path), j.dump(2) + "\n");
}

std::optional<Sidecar> read_sidecar(const std::string& artifact_path) {
  const std::string p = sidecar_path(artifact_path);
  if (!file_exists(p)) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    fail("parse", "bad sidecar " + p + ": " + e.what());
  }
  Sidecar sc;
  sc.format_version = j.value("format_version", 1);
  sc.tool = j.value("tool", "");
  sc.config_hash = j.value("config_hash", "");
  if (j.contains("inputs")) {
    for (auto it = j["inputs"].begin(); it != j["inputs"].end(); ++it)
      sc.input_hashes[it.key()] = it.value().get<std::string>();
  }
  if (j.contains("extra")) {
    for (auto it = j["extra"].begin(); it != j["extra"].end(); ++it)
      sc.extra[it.key()] = it.value().get<std::string>();
  }
  return sc;
}

void check_inputs_fresh(const std::string& artifact_path, bool allow_stale) {
  auto sc = read_sidecar(artifact_path);
  if (!sc) return;
  for (const auto& [path, recorded] : sc->input_hashes) {
    if (!file_exists(path)) {
      if (allow_stale) continue;
      fail("stale_input", "input of " + artifact_path + " is gone: " + path);
    }
    const std::string now = hex64(fnv1a64_file(path));
    if (now != recorded && !allow_stale)
      fail("stale_input", "input of " + artifact_path + " changed since it was produced: " +
                              path + " (recorded " + recorded + ", now " + now + ")");
  }
}

} // namespace evaq::io
