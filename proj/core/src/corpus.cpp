#include "evaq/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "evaq/io.hpp"
#include "evaq/text.hpp"

namespace evaq::corpus {

std::uint64_t CharVocab::hash() const {
  std::string bytes;
  bytes.reserve(chars.size() * 4 + 16);
  for (char32_t cp : chars) text::utf8_append(bytes, cp);
  bytes += "|";
  bytes += std::to_string(total_size);
  return fnv1a64(bytes);
}

namespace {

bool looks_like_json(std::string_view line) {
  for (char c : line) {
    if (c == ' ' || c == '\t') continue;
    return c == '{';
  }
  return false;
}

struct ParsedLine {
  std::string user;
  std::int64_t ts = 0;
  std::string raw_text;
};

ParsedLine parse_jsonl(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail("parse", std::string("bad JSON: ") + e.what());
  }
  if (!j.is_object()) fail("parse", "line is not a JSON object");
  if (!j.contains("user") || !j["user"].is_string()) fail("parse", "missing string field 'user'");
  if (!j.contains("ts") || !j["ts"].is_number_integer()) fail("parse", "missing integer field 'ts'");
  if (!j.contains("q") || !j["q"].is_string()) fail("parse", "missing string field 'q'");
  return {j["user"].get<std::string>(), j["ts"].get<std::int64_t>(), j["q"].get<std::string>()};
}

ParsedLine parse_tsv(std::string_view line) {
  const auto fields = io::split(line, '\t');
  if (fields.size() != 3)
    fail("parse", "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
  ParsedLine p;
  p.user = std::string(fields[0]);
  p.ts = io::parse_int(fields[1]);
  p.raw_text = std::string(fields[2]);
  return p;
}

} // namespace

IngestResult ingest_query_log(std::istream& in, const IngestOptions& opts) {
  IngestResult out;
  std::string line;
  std::size_t line_no = 0;
  auto trouble = [&](const std::string& msg) {
    if (opts.abort_on_error)
      fail("parse", "line " + std::to_string(line_no) + ": " + msg);
    out.issues.push_back({line_no, msg});
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    bool json = false;
    switch (opts.format) {
      case IngestOptions::Format::jsonl: json = true; break;
      case IngestOptions::Format::tsv: json = false; break;
      case IngestOptions::Format::auto_detect: json = looks_like_json(line); break;
    }
    ParsedLine p;
    try {
      p = json ? parse_jsonl(line) : parse_tsv(line);
    } catch (const Error& e) {
      trouble(e.what());
      continue;
    }
    if (p.user.empty()) {
      trouble("empty user id");
      continue;
    }
    if (p.ts < 0) {
      trouble("negative timestamp");
      continue;
    }
    auto normalized = text::normalize_query(p.raw_text);
    if (!normalized) {
      trouble("query text is not valid UTF-8");
      continue;
    }
    if (normalized->empty()) {
      trouble("query text empty after normalization");
      continue;
    }
    out.records.push_back({std::move(p.user), p.ts, std::move(*normalized)});
  }
  std::stable_sort(out.records.begin(), out.records.end(),
                   [](const QueryRecord& a, const QueryRecord& b) {
                     if (a.user != b.user) return a.user < b.user;
                     return a.ts < b.ts;
                   });
  return out;
}

IngestResult ingest_query_log_file(const std::string& path, const IngestOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open query log: " + path);
  return ingest_query_log(in, opts);
}

std::vector<Session> sessionize(std::span<const QueryRecord> records, std::int64_t timeout_s,
                                std::size_t min_len, std::size_t max_len) {
  if (min_len < 1 || max_len < min_len)
    fail("config", "sessionize: need 1 <= min_len <= max_len");
  std::vector<Session> out;
  Session cur;
  auto flush = [&] {
    if (cur.queries.size() > max_len) {
      cur.queries.resize(max_len);
      cur.timestamps.resize(max_len);
    }
    if (cur.queries.size() >= min_len) out.push_back(std::move(cur));
    cur = Session{};
  };
  for (std::size_t i = 0; i < records.size(); ++i) {
    const QueryRecord& r = records[i];
    const bool same_user = !cur.queries.empty() && cur.user == r.user;
    if (same_user && r.ts < cur.timestamps.back())
      fail("usage", "sessionize: records for user '" + r.user + "' are not time-sorted");
    const bool continues = same_user && (r.ts - cur.timestamps.back()) <= timeout_s;
    if (!continues && !cur.queries.empty()) flush();
    if (cur.queries.empty()) cur.user = r.user;
    cur.queries.push_back(r.text);
    cur.timestamps.push_back(r.ts);
  }
  if (!cur.queries.empty()) flush();
  return out;
}

std::vector<QueryPair> build_pairs(std::span<const Session> sessions) {
  std::vector<QueryPair> out;
  std::size_t total = 0;
  for (const auto& s : sessions) total += s.queries.empty() ? 0 : s.queries.size() - 1;
  out.reserve(total);
  for (const auto& s : sessions)
    for (std::size_t i = 0; i + 1 < s.queries.size(); ++i)
      out.push_back({s.queries[i], s.queries[i + 1]});
  return out;
}

CharVocab build_char_vocab(std::span<const Session> sessions, std::size_t size) {
  if (size < 2) fail("config", "build_char_vocab: size must be at least 2");
  std::map<char32_t, std::size_t> freq;
  std::vector<char32_t> cps;
  for (const auto& s : sessions) {
    for (const auto& q : s.queries) {
      if (!text::utf8_decode(q, cps))
        fail("parse", "build_char_vocab: session query is not valid UTF-8");
      for (char32_t cp : cps) ++freq[cp];
    }
  }
  std::vector<std::pair<char32_t, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  CharVocab v;
  v.total_size = size;
  const std::size_t keep = std::min(ranked.size(), size - 2);
  v.chars.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    v.chars.push_back(ranked[i].first);
    v.index.emplace(ranked[i].first, i);
  }
  return v;
}

SplitCounts fractions_to_counts(double train, double validation, double test,
                                std::size_t n) {
  const double sum = train + validation + test;
  if (std::fabs(sum - 1.0) > 1e-9)
    fail("config", "split fractions must sum to 1");
  if (train < 0 || validation < 0 || test < 0)
    fail("config", "split fractions must be non-negative");
  std::size_t c[3] = {static_cast<std::size_t>(std::floor(train * static_cast<double>(n))),
                      static_cast<std::size_t>(std::floor(validation * static_cast<double>(n))),
                      static_cast<std::size_t>(std::floor(test * static_cast<double>(n)))};
  std::size_t assigned = c[0] + c[1] + c[2];
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 3) {
    ++c[i];
    ++assigned;
  }
  return {c[0], c[1], c[2]};
}

CohortStats cohort_query_stats(std::span<const QueryRecord> records,
                               const std::set<std::string>& cohort_a,
                               const std::set<std::string>& cohort_b,
                               const std::vector<CategorySpec>& categories,
                               std::int64_t bucket_s) {
  if (bucket_s <= 0) fail("config", "cohort_query_stats: bucket must be positive");
  for (const auto& u : cohort_a)
    if (cohort_b.count(u)) fail("config", "cohorts overlap on user '" + u + "'");

  std::vector<CategorySpec> normalized_cats;
  normalized_cats.reserve(categories.size());
  for (const auto& c : categories) {
    CategorySpec nc;
    nc.name = c.name;
    for (const auto& kw : c.keywords) {
      auto n = text::normalize_query(kw);
      if (!n || n->empty()) fail("config", "bad keyword in category '" + c.name + "'");
      nc.keywords.push_back(*n);
    }
    normalized_cats.push_back(std::move(nc));
  }

  CohortStats stats;
  stats.bucket_s = bucket_s;
  stats.cohort_a_users = cohort_a.size();
  stats.cohort_b_users = cohort_b.size();
  for (const auto& c : normalized_cats) stats.category_names.push_back(c.name);

  std::map<std::pair<std::int64_t, char>, CohortStats::Row> rows;
  for (const auto& r : records) {
    char cohort;
    if (cohort_a.count(r.user))
      cohort = 'a';
    else if (cohort_b.count(r.user))
      cohort = 'b';
    else
      continue;
    const std::int64_t bucket = (r.ts / bucket_s) * bucket_s;
    auto& row = rows[{bucket, cohort}];
    if (row.per_category.empty()) {
      row.bucket_start = bucket;
      row.cohort = cohort;
      row.per_category.assign(normalized_cats.size(), 0);
    }
    ++row.total;
    for (std::size_t ci = 0; ci < normalized_cats.size(); ++ci) {
      for (const auto& kw : normalized_cats[ci].keywords) {
        if (r.text.find(kw) != std::string::npos) {
          ++row.per_category[ci];
          break;
        }
      }
    }
  }
  stats.rows.reserve(rows.size());
  for (auto& [key, row] : rows) stats.rows.push_back(std::move(row));
  return stats;
}

std::string cohort_stats_tsv(const CohortStats& stats) {
  std::ostringstream ss;
  ss << "bucket_start\tcohort\tusers\ttotal\ttotal_rate";
  for (const auto& name : stats.category_names)
    ss << "\t" << name << "_count\t" << name << "_rate";
  ss << "\n";
  for (const auto& row : stats.rows) {
    const std::size_t users = row.cohort == 'a' ? stats.cohort_a_users : stats.cohort_b_users;
    const double denom = users == 0 ? 1.0 : static_cast<double>(users);
    ss << row.bucket_start << "\t" << row.cohort << "\t" << users << "\t" << row.total << "\t"
       << io::format_double(static_cast<double>(row.total) / denom);
    for (std::size_t ci = 0; ci < row.per_category.size(); ++ci) {
      ss << "\t" << row.per_category[ci] << "\t"
         << io::format_double(static_cast<double>(row.per_category[ci]) / denom);
    }
    ss << "\n";
  }
  return ss.str();
}

} // namespace evaq::corpus
