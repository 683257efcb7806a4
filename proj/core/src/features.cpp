#include "evaq/features.hpp"

#include <algorithm>
#include <cmath>

#include "evaq/io.hpp"

namespace evaq::feat {

MethodSpec MethodSpec::from_id(int id) {
  if (id < 1 || id > 8) fail("config", "method id must be 1..8, got " + std::to_string(id));
  MethodSpec s;
  const int z = id - 1;
  s.arity = (z & 4) ? Arity::multiple : Arity::single;
  s.selector = (z & 2) ? Selector::tfidf : Selector::recent;
  s.generator = (z & 1) ? Generator::encoder : Generator::onehot;
  return s;
}

int MethodSpec::id() const {
  int z = 0;
  if (arity == Arity::multiple) z |= 4;
  if (selector == Selector::tfidf) z |= 2;
  if (generator == Generator::encoder) z |= 1;
  return z + 1;
}

std::string MethodSpec::name() const {
  std::string s = arity == Arity::single ? "single" : "multiple";
  s += selector == Selector::recent ? "-recent" : "-tfidf";
  s += generator == Generator::onehot ? "-onehot" : "-encoder";
  return s;
}

std::vector<UserQueries> collect_window_queries(std::span<const corpus::QueryRecord> records,
                                                std::int64_t t_lo, std::int64_t t_hi) {
  std::vector<UserQueries> out;
  for (const auto& r : records) {
    if (r.ts < t_lo || r.ts >= t_hi) continue;
    if (out.empty() || out.back().user != r.user) {
      if (!out.empty() && r.user < out.back().user)
        fail("usage", "collect_window_queries: records not sorted by user");
      out.push_back(UserQueries{r.user, {}, {}});
    }
    auto& u = out.back();
    if (!u.timestamps.empty() && r.ts < u.timestamps.back())
      fail("usage", "collect_window_queries: timestamps not sorted for user " + r.user);
    u.queries.push_back(r.text);
    u.timestamps.push_back(r.ts);
  }
  return out;
}

std::uint64_t QueryVocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    h ^= '\n';
    h *= 0x100000001b3ull;
  };
  for (const auto& q : queries) mix(q);
  return h;
}

QueryVocab build_query_vocab(std::span<const UserQueries> training_users, std::size_t cap) {
  if (cap == 0) fail("config", "query vocab cap must be positive");
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& u : training_users)
    for (const auto& q : u.queries) ++freq[q];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (items.size() > cap) items.resize(cap);
  QueryVocab v;
  v.queries.reserve(items.size());
  for (auto& [q, n] : items) {
    v.index.emplace(q, v.queries.size());
    v.queries.push_back(std::move(q));
  }
  return v;
}

double TfidfStats::idf(const std::string& q) const {
  auto it = df.find(q);
  const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
  return std::log(static_cast<double>(n_users) / (1.0 + d)) + 1.0;
}

std::uint64_t TfidfStats::hash() const {
  std::vector<std::pair<std::string_view, std::size_t>> items;
  items.reserve(df.size());
  for (const auto& [q, n] : df) items.emplace_back(q, n);
  std::sort(items.begin(), items.end());
  std::uint64_t h = fnv1a64("tfidf");
  auto mix_u64 = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  mix_u64(n_users);
  for (const auto& [q, n] : items) {
    h ^= fnv1a64(q);
    h *= 0x100000001b3ull;
    mix_u64(n);
  }
  return h;
}

TfidfStats tfidf_fit(std::span<const UserQueries> training_users) {
  if (training_users.size() < 2)
    fail("usage", "tfidf needs at least 2 users, got " + std::to_string(training_users.size()));
  TfidfStats s;
  s.n_users = training_users.size();
  std::unordered_map<std::string, bool> seen;
  for (const auto& u : training_users) {
    seen.clear();
    for (const auto& q : u.queries)
      if (!seen.count(q)) {
        seen.emplace(q, true);
        ++s.df[q];
      }
  }
  return s;
}

std::vector<std::pair<std::string, double>> tfidf_scores(const TfidfStats& stats,
                                                         const UserQueries& u) {
  std::unordered_map<std::string, std::size_t> tf;
  for (const auto& q : u.queries) ++tf[q];
  std::vector<std::pair<std::string, double>> out;
  out.reserve(tf.size());
  for (const auto& [q, n] : tf) out.emplace_back(q, static_cast<double>(n) * stats.idf(q));
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> select_queries(const UserQueries& u, const MethodSpec& spec,
                                        const TfidfStats* stats) {
  if (u.queries.empty()) fail("usage", "select_queries: user " + u.user + " has no queries");
  if (u.queries.size() != u.timestamps.size())
    fail("shape", "select_queries: query/timestamp length mismatch for user " + u.user);
  const std::size_t budget =
      spec.arity == Arity::single ? 1 : std::min<std::size_t>(spec.k, 10);
  if (budget == 0) fail("config", "select_queries: zero query budget");

  if (spec.selector == Selector::recent) {
    const std::size_t n = u.queries.size();
    const std::size_t take = std::min(budget, n);
    return {u.queries.end() - static_cast<std::ptrdiff_t>(take), u.queries.end()};
  }

  if (stats == nullptr) fail("usage", "select_queries: tfidf selector needs corpus stats");
  struct Cand {
    std::string_view q;
    double score;
    std::int64_t last_ts; // most recent occurrence
  };
  std::unordered_map<std::string_view, std::pair<std::size_t, std::int64_t>> agg; // tf, last ts
  for (std::size_t i = 0; i < u.queries.size(); ++i) {
    auto& slot = agg[u.queries[i]];
    ++slot.first;
    slot.second = std::max(slot.second, u.timestamps[i]);
  }
  std::vector<Cand> cands;
  cands.reserve(agg.size());
  for (const auto& [q, tfts] : agg)
    cands.push_back({q, static_cast<double>(tfts.first) * stats->idf(std::string(q)),
                     tfts.second});
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.last_ts != b.last_ts) return a.last_ts > b.last_ts;
    return a.q < b.q;
  });
  if (cands.size() > budget) cands.resize(budget);
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.last_ts != b.last_ts) return a.last_ts < b.last_ts;
    return a.q < b.q;
  });
  std::vector<std::string> out;
  out.reserve(cands.size());
  for (const auto& c : cands) out.emplace_back(c.q);
  return out;
}

std::vector<double> onehot_features(std::span<const std::string> selected,
                                    const QueryVocab& vocab, Arity arity) {
  if (arity == Arity::single && selected.size() != 1)
    fail("shape", "onehot_features: single arity expects exactly one query, got " +
                      std::to_string(selected.size()));
  std::vector<double> v(vocab.size(), 0.0);
  for (const auto& q : selected) {
    const long idx = vocab.find(q);
    if (idx >= 0) v[static_cast<std::size_t>(idx)] += 1.0;
  }
  return v;
}

std::vector<double> encoder_features(std::span<const std::string> selected,
                                     const MethodSpec& spec, const FeatureModels& models) {
  if (models.char_vocab == nullptr)
    fail("usage", "encoder_features: character vocabulary missing");
  if (spec.arity == Arity::single) {
    if (models.ssqe == nullptr)
      fail("usage", "encoder_features: single arity needs the query encoder");
    if (selected.size() != 1)
      fail("shape", "encoder_features: single arity expects exactly one query, got " +
                        std::to_string(selected.size()));
    return enc::ssqe_encode(*models.ssqe, selected[0], *models.char_vocab);
  }
  if (models.smqe == nullptr)
    fail("usage", "encoder_features: multiple arity needs the session encoder");
  return enc::smqe_encode(*models.smqe, selected, *models.char_vocab, models.smqe_max_len);
}

FeatureMatrix build_feature_matrix(std::span<const UserQueries> labeled_users,
                                   const MethodSpec& spec, const FeatureModels& models,
                                   std::int64_t t_d) {
  for (const auto& u : labeled_users)
    for (std::int64_t ts : u.timestamps)
      if (ts >= t_d)
        fail("leakage", "build_feature_matrix: user " + u.user + " has a query at ts " +
                            std::to_string(ts) + " >= t_d " + std::to_string(t_d));

  FeatureMatrix fm;
  fm.spec = spec;
  if (spec.generator == Generator::onehot) {
    if (models.query_vocab == nullptr)
      fail("usage", "build_feature_matrix: one-hot method needs a query vocabulary");
    fm.dim = models.query_vocab->size();
    fm.provenance["query_vocab_hash"] = io::hex64(models.query_vocab->hash());
  } else {
    if (spec.arity == Arity::single) {
      if (models.ssqe == nullptr)
        fail("usage", "build_feature_matrix: method needs the query encoder");
      fm.dim = models.ssqe->cfg.out_dim;
      fm.provenance["encoder_hash"] = io::hex64(enc::params_hash(*models.ssqe));
    } else {
      if (models.smqe == nullptr)
        fail("usage", "build_feature_matrix: method needs the session encoder");
      fm.dim = models.smqe->cfg.out_dim;
      fm.provenance["encoder_hash"] = io::hex64(enc::params_hash(*models.smqe));
    }
    if (models.char_vocab == nullptr)
      fail("usage", "build_feature_matrix: encoder method needs the character vocabulary");
    fm.provenance["char_vocab_hash"] = io::hex64(models.char_vocab->hash());
  }
  if (spec.selector == Selector::tfidf) {
    if (models.tfidf == nullptr)
      fail("usage", "build_feature_matrix: tfidf method needs corpus stats");
    fm.provenance["tfidf_hash"] = io::hex64(models.tfidf->hash());
  }
  fm.provenance["method"] = spec.name();

  for (const auto& u : labeled_users) {
    if (u.queries.empty()) {
      fm.excluded_users.push_back(u.user);
      continue;
    }
    const auto selected = select_queries(u, spec, models.tfidf);
    std::vector<double> row = spec.generator == Generator::onehot
                                  ? onehot_features(selected, *models.query_vocab, spec.arity)
                                  : encoder_features(selected, spec, models);
    if (row.size() != fm.dim)
      fail("shape", "build_feature_matrix: row width " + std::to_string(row.size()) +
                        " != " + std::to_string(fm.dim) + " for user " + u.user);
    fm.users.push_back(u.user);
    fm.rows.push_back(std::move(row));
  }
  return fm;
}

void write_feature_matrix(const std::string& path, const FeatureMatrix& fm) {
  std::string out;
  for (std::size_t i = 0; i < fm.users.size(); ++i) {
    out += fm.users[i];
    for (double v : fm.rows[i]) {
      out += '\t';
      out += io::format_double(v);
    }
    out += '\n';
  }
  io::write_file(path, out);
  io::Sidecar sc;
  sc.tool = "featurize";
  sc.extra = fm.provenance;
  sc.extra["method_id"] = std::to_string(fm.spec.id());
  sc.extra["dim"] = std::to_string(fm.dim);
  sc.extra["rows"] = std::to_string(fm.users.size());
  std::string excluded;
  for (const auto& u : fm.excluded_users) {
    if (!excluded.empty()) excluded += ',';
    excluded += u;
  }
  sc.extra["excluded_users"] = excluded;
  io::write_sidecar(path, sc);
}

FeatureMatrix read_feature_matrix(const std::string& path) {
  FeatureMatrix fm;
  const std::string content = io::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() < 2) fail("parse", "feature matrix row needs a user id and values: " + path);
    std::vector<double> row;
    row.reserve(cols.size() - 1);
    for (std::size_t i = 1; i < cols.size(); ++i) row.push_back(io::parse_double(cols[i]));
    if (fm.rows.empty())
      fm.dim = row.size();
    else if (row.size() != fm.dim)
      fail("shape", "feature matrix has ragged rows: " + path);
    fm.users.emplace_back(cols[0]);
    fm.rows.push_back(std::move(row));
  }
  if (auto sc = io::read_sidecar(path)) {
    fm.provenance = sc->extra;
    auto it = sc->extra.find("method_id");
    if (it != sc->extra.end()) fm.spec = MethodSpec::from_id(static_cast<int>(io::parse_int(it->second)));
    it = sc->extra.find("excluded_users");
    if (it != sc->extra.end() && !it->second.empty())
      for (const auto part : io::split(it->second, ','))
        fm.excluded_users.emplace_back(part);
  }
  return fm;
}

} // namespace evaq::feat
