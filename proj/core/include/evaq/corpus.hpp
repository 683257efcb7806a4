#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "evaq/error.hpp"
#include "evaq/rng.hpp"

namespace evaq::corpus {

struct QueryRecord {
  std::string user;
  std::int64_t ts = 0; // seconds since epoch, UTC
  std::string text;    // normalized, non-empty
};

struct Session {
  std::string user;
  std::vector<std::string> queries;
  std::vector<std::int64_t> timestamps;
};

struct QueryPair {
  std::string q; // current query
  std::string d; // next query in the same session
};

/// Character inventory for the encoders. Indices 0..size-3 are real
/// characters ordered by corpus frequency (ties by code point); the last
/// two slots are the out-of-vocabulary and end-of-query markers.
struct CharVocab {
  std::vector<char32_t> chars;
  std::unordered_map<char32_t, std::size_t> index;
  std::size_t total_size = 0;

  std::size_t oov_index() const { return total_size - 2; }
  std::size_t eoq_index() const { return total_size - 1; }

  std::size_t encode(char32_t cp) const {
    auto it = index.find(cp);
    return it == index.end() ? oov_index() : it->second;
  }

  /// Stable content hash, recorded in checkpoints so a model is never
  /// silently used with a different vocabulary.
  std::uint64_t hash() const;
};

template <typename T>
struct DatasetSplit {
  std::vector<T> train, validation, test;
  std::uint64_t seed = 0;
};

struct IngestOptions {
  enum class Format { auto_detect, jsonl, tsv };
  Format format = Format::auto_detect;
  bool abort_on_error = false;
};

struct IngestIssue {
  std::size_t line_no = 0;
  std::string message;
};

struct IngestResult {
  std::vector<QueryRecord> records; // sorted by (user, ts), text normalized
  std::vector<IngestIssue> issues;  // skipped lines when not aborting
};

/// Reads JSONL ({"user":…,"ts":…,"q":…}) or TSV (user, ts, q) lines.
/// Malformed lines are collected as issues (or abort when configured);
/// records whose text is empty after normalization are dropped the same way.
IngestResult ingest_query_log(std::istream& in, const IngestOptions& opts = {});
IngestResult ingest_query_log_file(const std::string& path, const IngestOptions& opts = {});

/// Splits each user's stream at gaps strictly greater than timeout_s,
/// drops sessions shorter than min_len and truncates at max_len queries.
/// Records must arrive sorted by (user, ts) as ingest produces them.
std::vector<Session> sessionize(std::span<const QueryRecord> records,
                                std::int64_t timeout_s = 120, std::size_t min_len = 2,
                                std::size_t max_len = 10);

std::vector<QueryPair> build_pairs(std::span<const Session> sessions);

CharVocab build_char_vocab(std::span<const Session> sessions, std::size_t size);

struct SplitCounts {
  std::size_t train = 0, validation = 0, test = 0;
};

template <typename T>
DatasetSplit<T> split_dataset(std::vector<T> items, const SplitCounts& counts,
                              std::uint64_t seed) {
  if (counts.train + counts.validation + counts.test != items.size())
    fail("config", "split_dataset: counts sum to " +
                       std::to_string(counts.train + counts.validation + counts.test) +
                       " but corpus has " + std::to_string(items.size()) + " items");
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "dataset-split"));
  rng.shuffle(order);
  DatasetSplit<T> out;
  out.seed = seed;
  out.train.reserve(counts.train);
  out.validation.reserve(counts.validation);
  out.test.reserve(counts.test);
  for (std::size_t i = 0; i < order.size(); ++i) {
    T& item = items[order[i]];
    if (i < counts.train)
      out.train.push_back(std::move(item));
    else if (i < counts.train + counts.validation)
      out.validation.push_back(std::move(item));
    else
      out.test.push_back(std::move(item));
  }
  return out;
}

/// Fractions are turned into counts by flooring and assigning the
/// remainder to the earliest partitions.
SplitCounts fractions_to_counts(double train, double validation, double test,
                                std::size_t n);

template <typename T>
DatasetSplit<T> split_dataset(std::vector<T> items, double train, double validation,
                              double test, std::uint64_t seed) {
  const SplitCounts counts = fractions_to_counts(train, validation, test, items.size());
  return split_dataset(std::move(items), counts, seed);
}

struct CategorySpec {
  std::string name;
  std::vector<std::string> keywords; // substring match on normalized text
};

struct CohortStats {
  std::int64_t bucket_s = 0;
  std::size_t cohort_a_users = 0;
  std::size_t cohort_b_users = 0;
  std::vector<std::string> category_names;
  struct Row {
    std::int64_t bucket_start = 0;
    char cohort = 'a';
    std::size_t total = 0;
    std::vector<std::size_t> per_category;
  };
  std::vector<Row> rows; // sorted by (bucket_start, cohort)
};

/// Per-bucket query counts for two disjoint user cohorts, overall and per
/// keyword category.
CohortStats cohort_query_stats(std::span<const QueryRecord> records,
                               const std::set<std::string>& cohort_a,
                               const std::set<std::string>& cohort_b,
                               const std::vector<CategorySpec>& categories,
                               std::int64_t bucket_s);

/// TSV with a header row; per-user rates alongside raw counts so cohorts
/// of different sizes stay comparable.
std::string cohort_stats_tsv(const CohortStats& stats);

} // namespace evaq::corpus
