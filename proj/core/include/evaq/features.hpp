#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "evaq/corpus.hpp"
#include "evaq/encoders.hpp"
#include "evaq/error.hpp"

namespace evaq::feat {

enum class Arity { single, multiple };
enum class Selector { recent, tfidf };
enum class Generator { onehot, encoder };

/// One of the eight feature-construction recipes. Ids 1..8 enumerate the
/// cross product in the fixed report order:
///   1 single/recent/onehot    2 single/recent/encoder
///   3 single/tfidf/onehot     4 single/tfidf/encoder
///   5 multiple/recent/onehot  6 multiple/recent/encoder
///   7 multiple/tfidf/onehot   8 multiple/tfidf/encoder
struct MethodSpec {
  Arity arity = Arity::single;
  Selector selector = Selector::recent;
  Generator generator = Generator::onehot;
  std::size_t k = 10; // query budget for multiple arity, capped at 10

  static MethodSpec from_id(int id);
  int id() const;
  std::string name() const; // e.g. "multiple-tfidf-encoder"
};

/// A user's queries inside one time window, chronological.
struct UserQueries {
  std::string user;
  std::vector<std::string> queries;
  std::vector<std::int64_t> timestamps;
};

/// Groups records with t_lo <= ts < t_hi by user. Input must be sorted by
/// (user, ts); users with no query in the window are absent from the result.
std::vector<UserQueries> collect_window_queries(std::span<const corpus::QueryRecord> records,
                                                std::int64_t t_lo, std::int64_t t_hi);

/// Whole-query one-hot vocabulary built from training-fold users only,
/// most frequent first (ties by query string), capped.
struct QueryVocab {
  std::vector<std::string> queries;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t size() const { return queries.size(); }
  /// -1 when out of vocabulary.
  long find(const std::string& q) const {
    auto it = index.find(q);
    return it == index.end() ? -1 : static_cast<long>(it->second);
  }
  std::uint64_t hash() const;
};

QueryVocab build_query_vocab(std::span<const UserQueries> training_users, std::size_t cap = 5000);

/// Document-frequency statistics where each user's query multiset is one
/// document and the term is the whole query string.
struct TfidfStats {
  std::size_t n_users = 0;
  std::unordered_map<std::string, std::size_t> df;

  double idf(const std::string& q) const;
  std::uint64_t hash() const;
};

/// pre: at least two users (idf is degenerate otherwise).
TfidfStats tfidf_fit(std::span<const UserQueries> training_users);

/// score = tf * idf for every distinct query in the user's window.
std::vector<std::pair<std::string, double>> tfidf_scores(const TfidfStats& stats,
                                                         const UserQueries& u);

/// Picks the queries a method feeds downstream.
///   recent: the last 1 (single) or last k (multiple) occurrences, in order.
///   tfidf:  the top 1 or top-k distinct queries by score; ties prefer the
///           more recently used query, then the lexicographically smaller
///           one; output ordered by last occurrence time.
/// stats may be null for the recent selector. pre: u has >= 1 query.
std::vector<std::string> select_queries(const UserQueries& u, const MethodSpec& spec,
                                        const TfidfStats* stats);

/// single: the query's one-hot (all-zero when OOV);
/// multiple: bag-of-queries sum, OOV terms contributing zero.
std::vector<double> onehot_features(std::span<const std::string> selected,
                                    const QueryVocab& vocab, Arity arity);

/// Everything build_feature_matrix may need; only the pieces the method
/// actually uses have to be present.
struct FeatureModels {
  const QueryVocab* query_vocab = nullptr;
  const TfidfStats* tfidf = nullptr;
  const enc::SsqeParams* ssqe = nullptr;
  const enc::SmqeParams* smqe = nullptr;
  const corpus::CharVocab* char_vocab = nullptr;
  std::size_t smqe_max_len = 10;
};

/// single -> one query through the character encoder; multiple -> the
/// selected queries through the session encoder, chronological order.
/// The arity must match the model kind handed in.
std::vector<double> encoder_features(std::span<const std::string> selected,
                                     const MethodSpec& spec, const FeatureModels& models);

struct FeatureMatrix {
  std::vector<std::string> users; // rows aligned with these ids
  std::vector<std::vector<double>> rows;
  std::size_t dim = 0;
  MethodSpec spec;
  std::vector<std::string> excluded_users;       // no query before t_d
  std::map<std::string, std::string> provenance; // hashes of every model used
};

/// Builds one row per labeled user from queries strictly before t_d.
/// Any input timestamp at or beyond t_d is treated as leakage and fails
/// hard; users with zero usable queries are excluded and reported.
FeatureMatrix build_feature_matrix(std::span<const UserQueries> labeled_users,
                                   const MethodSpec& spec, const FeatureModels& models,
                                   std::int64_t t_d);

/// TSV (user id + one column per dimension) plus a provenance sidecar.
void write_feature_matrix(const std::string& path, const FeatureMatrix& fm);
FeatureMatrix read_feature_matrix(const std::string& path);

} // namespace evaq::feat
