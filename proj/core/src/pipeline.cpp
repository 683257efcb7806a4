#include "evaq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "evaq/io.hpp"
#include "evaq/log.hpp"
#include "evaq/rng.hpp"
#include "evaq/text.hpp"

namespace evaq::pipe {

namespace {

void stamp(const std::string& artifact, const PipelineConfig& cfg,
           const std::vector<std::string>& inputs) {
  io::Sidecar sc;
  sc.format_version = cfg.format_version;
  sc.tool = "evaq";
  sc.config_hash = io::hex64(cfg.hash());
  for (const auto& in : inputs) sc.input_hashes[in] = io::hex64(io::fnv1a64_file(in));
  io::write_sidecar(artifact, sc);
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto part : io::split(s, ','))
    if (!part.empty()) out.push_back(io::parse_double(part));
  return out;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto part : io::split(s, ','))
    if (!part.empty()) out.push_back(static_cast<int>(io::parse_int(part)));
  return out;
}

std::string join_doubles(std::span<const double> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += io::format_double(v[i]);
  }
  return s;
}

std::string join_ints(std::span<const int> v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<corpus::QueryRecord> load_queries(const Paths& p) {
  auto res = corpus::ingest_query_log_file(p.queries());
  if (!res.issues.empty())
    log::event(log::Level::warn, "query_ingest_issues",
               {{"file", p.queries()},
                {"skipped", std::to_string(res.issues.size())},
                {"first", res.issues.front().message}});
  return std::move(res.records);
}

struct ThetaRow {
  std::string user;
  bool scored = false;
  double theta = 0.0, p_pre = 0.0, s_pre = 0.0, p_dis = 0.0;
  std::string status; // "ok" or the exclusion reason
};

std::vector<ThetaRow> read_theta_tsv(const std::string& path) {
  std::vector<ThetaRow> rows;
  const std::string content = io::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 6) fail("parse", "theta row needs 6 columns: " + path);
    ThetaRow r;
    r.user = std::string(cols[0]);
    r.status = std::string(cols[5]);
    r.scored = r.status == "ok";
    if (r.scored) {
      r.theta = io::parse_double(cols[1]);
      r.p_pre = io::parse_double(cols[2]);
      r.s_pre = io::parse_double(cols[3]);
      r.p_dis = io::parse_double(cols[4]);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

struct LabelRow {
  std::string user;
  double theta = 0.0;
  int label = 2;
};

std::vector<LabelRow> read_labels_tsv(const std::string& path) {
  std::vector<LabelRow> rows;
  const std::string content = io::read_file(path);
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = io::split(line, '\t');
    if (cols.size() != 3) fail("parse", "label row needs 3 columns: " + path);
    rows.push_back(LabelRow{std::string(cols[0]), io::parse_double(cols[1]),
                            static_cast<int>(io::parse_int(cols[2]))});
  }
  return rows;
}

/// Users with a decided label (0/1) and at least one pre-alert query,
/// in label-file order, with their pre-alert queries attached.
struct LabeledSet {
  std::vector<std::string> users;
  std::vector<int> y;
  std::vector<feat::UserQueries> queries;
  std::size_t dropped_no_queries = 0;
};

LabeledSet assemble_labeled_set(std::span<const LabelRow> labels,
                                std::span<const corpus::QueryRecord> records,
                                const anomaly::TimeWindows& windows) {
  auto window_queries = feat::collect_window_queries(records, windows.t_l, windows.t_d);
  std::unordered_map<std::string, std::size_t> by_user;
  for (std::size_t i = 0; i < window_queries.size(); ++i)
    by_user.emplace(window_queries[i].user, i);
  LabeledSet set;
  for (const auto& row : labels) {
    if (row.label != 0 && row.label != 1) continue;
    auto it = by_user.find(row.user);
    if (it == by_user.end()) {
      ++set.dropped_no_queries;
      continue;
    }
    set.users.push_back(row.user);
    set.y.push_back(row.label);
    set.queries.push_back(window_queries[it->second]);
  }
  return set;
}

struct EncoderBundle {
  bool loaded = false;
  corpus::CharVocab vocab;
  enc::SsqeParams ssqe;
  enc::SmqeParams smqe;
};

EncoderBundle load_encoders(const Paths& p, bool need_single, bool need_multiple) {
  EncoderBundle b;
  if (!need_single && !need_multiple) return b;
  b.vocab = read_char_vocab(p.char_vocab());
  if (need_single) b.ssqe = enc::load_ssqe(p.ssqe(), b.vocab.hash());
  if (need_multiple) b.smqe = enc::load_smqe(p.smqe(), b.vocab.hash());
  b.loaded = true;
  return b;
}

bool method_needs_single_encoder(int id) {
  auto s = feat::MethodSpec::from_id(id);
  return s.generator == feat::Generator::encoder && s.arity == feat::Arity::single;
}

bool method_needs_multi_encoder(int id) {
  auto s = feat::MethodSpec::from_id(id);
  return s.generator == feat::Generator::encoder && s.arity == feat::Arity::multiple;
}

/// Content-addressed cache for encoder rows. Representations do not
/// depend on the fold, so rows computed once are reused across folds,
/// methods and sweep grid points.
struct EncCache {
  std::unordered_map<std::string, std::vector<double>> single;
  std::unordered_map<std::string, std::vector<double>> multi;

  static std::string multi_key(std::span<const std::string> qs) {
    std::string key;
    for (const auto& q : qs) {
      key += q;
      key += '\x1f';
    }
    return key;
  }
};

/// Cross-validated evaluation of one method over a labeled set.
/// Fold-dependent statistics (query vocabulary, corpus frequencies)
/// are rebuilt from the training rows of each fold.
cls::EvalReport evaluate_labeled(const PipelineConfig& cfg, const LabeledSet& set,
                                 int method_id, const EncoderBundle& encs,
                                 EncCache& cache) {
  const feat::MethodSpec spec = feat::MethodSpec::from_id(method_id);
  const bool use_encoder = spec.generator == feat::Generator::encoder;
  if (use_encoder && !encs.loaded)
    fail("usage", "method " + std::to_string(method_id) + " needs trained encoders");
  const std::int64_t t_d = cfg.world.windows.t_d;

  auto encode_row = [&](const feat::UserQueries& u, const feat::QueryVocab* vocab,
                        const feat::TfidfStats* stats) {
    for (const auto ts : u.timestamps)
      if (ts >= t_d) fail("leakage", "query at or after t_d for user " + u.user);
    const auto selected = feat::select_queries(u, spec, stats);
    if (!use_encoder) return feat::onehot_features(selected, *vocab, spec.arity);
    if (spec.arity == feat::Arity::single) {
      auto it = cache.single.find(selected[0]);
      if (it == cache.single.end())
        it = cache.single
                 .emplace(selected[0], enc::ssqe_encode(encs.ssqe, selected[0], encs.vocab))
                 .first;
      return it->second;
    }
    const std::string key = EncCache::multi_key(selected);
    auto it = cache.multi.find(key);
    if (it == cache.multi.end())
      it = cache.multi
               .emplace(key, enc::smqe_encode(encs.smqe, selected, encs.vocab,
                                              cfg.session_max_len))
               .first;
    return it->second;
  };

  cls::FeatureProvider provider = [&](std::span<const std::size_t> train_idx,
                                      std::span<const std::size_t> test_idx) {
    std::vector<feat::UserQueries> train_users;
    train_users.reserve(train_idx.size());
    for (const auto i : train_idx) train_users.push_back(set.queries[i]);

    feat::QueryVocab vocab;
    feat::TfidfStats stats;
    const feat::QueryVocab* vocab_ptr = nullptr;
    const feat::TfidfStats* stats_ptr = nullptr;
    if (!use_encoder) {
      vocab = feat::build_query_vocab(train_users, cfg.onehot_cap);
      vocab_ptr = &vocab;
    }
    if (spec.selector == feat::Selector::tfidf) {
      stats = feat::tfidf_fit(train_users);
      stats_ptr = &stats;
    }

    cls::FoldFeatures ff;
    ff.train_X.reserve(train_idx.size());
    ff.test_X.reserve(test_idx.size());
    for (const auto i : train_idx)
      ff.train_X.push_back(encode_row(set.queries[i], vocab_ptr, stats_ptr));
    for (const auto i : test_idx)
      ff.test_X.push_back(encode_row(set.queries[i], vocab_ptr, stats_ptr));
    return ff;
  };

  return cls::cross_validate(set.users.size(), set.y, provider, cfg.k_folds, cfg.rf,
                             cfg.cv_seed, method_id);
}

std::string eval_report_tsv_row(const cls::EvalReport& r) {
  std::string line = std::to_string(r.method_id);
  line += '\t';
  line += feat::MethodSpec::from_id(r.method_id).name();
  line += '\t';
  line += io::format_double(r.mean_accuracy);
  line += '\t';
  line += io::format_double(r.mean_auc);
  line += '\t';
  line += join_doubles(r.fold_accuracy);
  line += '\t';
  line += join_doubles(r.fold_auc);
  return line;
}

} // namespace

// ---------------------------------------------------------------------------
// configuration

PipelineConfig PipelineConfig::from_flat(const cfg::FlatConfig& f) {
  PipelineConfig c;
  c.out_dir = f.get_str("out_dir", c.out_dir);
  c.format_version = static_cast<int>(f.get_int("format_version", c.format_version));
  c.seed = f.get_u64("seed", c.seed);

  // Stage seeds default to streams derived from the root seed so one flag
  // reseeds the whole pipeline without coupling the stages.
  c.world.seed = f.get_u64("world.seed", derive_seed(c.seed, "synth"));
  c.split_seed = f.get_u64("split.seed", derive_seed(c.seed, "split"));
  c.ssqe_train.seed = f.get_u64("train_ssqe.seed", derive_seed(c.seed, "train-ssqe"));
  c.smqe_train.seed = f.get_u64("train_smqe.seed", derive_seed(c.seed, "train-smqe"));
  c.rf.seed = f.get_u64("rf.seed", derive_seed(c.seed, "rf"));
  c.cv_seed = f.get_u64("cv.seed", derive_seed(c.seed, "cv"));

  c.world.n_users = static_cast<std::size_t>(
      f.get_int("world.n_users", static_cast<std::int64_t>(c.world.n_users)));
  c.world.evacuation_rate = f.get_double("world.evacuation_rate", c.world.evacuation_rate);
  c.world.query_mean_per_day = f.get_double("world.query_mean", c.world.query_mean_per_day);
  c.world.query_max_per_day = static_cast<std::size_t>(
      f.get_int("world.query_max", static_cast<std::int64_t>(c.world.query_max_per_day)));
  c.world.gps_mean_per_day = f.get_double("world.gps_mean", c.world.gps_mean_per_day);
  c.world.gps_max_per_day = static_cast<std::size_t>(
      f.get_int("world.gps_max", static_cast<std::int64_t>(c.world.gps_max_per_day)));
  c.world.n_intents = static_cast<std::size_t>(
      f.get_int("world.n_intents", static_cast<std::int64_t>(c.world.n_intents)));
  c.world.n_districts = static_cast<std::size_t>(
      f.get_int("world.n_districts", static_cast<std::int64_t>(c.world.n_districts)));
  c.world.base_disaster_share =
      f.get_double("world.base_disaster_share", c.world.base_disaster_share);
  c.world.shift_strength = f.get_double("world.shift_strength", c.world.shift_strength);
  c.world.displacement_m = f.get_double("world.displacement_m", c.world.displacement_m);
  c.world.gps_noise_m = f.get_double("world.gps_noise_m", c.world.gps_noise_m);
  c.world.disrupted_fraction =
      f.get_double("world.disrupted_fraction", c.world.disrupted_fraction);
  c.world.disrupted_min_m = f.get_double("world.disrupted_min_m", c.world.disrupted_min_m);
  c.world.disrupted_max_m = f.get_double("world.disrupted_max_m", c.world.disrupted_max_m);
  c.world.center_lon = f.get_double("world.center_lon", c.world.center_lon);
  c.world.center_lat = f.get_double("world.center_lat", c.world.center_lat);
  c.world.city_radius_deg = f.get_double("world.city_radius_deg", c.world.city_radius_deg);
  c.world.windows.t0 = f.get_int("world.t0", c.world.windows.t0);
  c.world.windows.t_l = f.get_int("world.t_l", c.world.windows.t_l);
  c.world.windows.t_d = f.get_int("world.t_d", c.world.windows.t_d);
  c.world.windows.t_e = f.get_int("world.t_e", c.world.windows.t_e);

  c.session_timeout_s = f.get_int("session.timeout_s", c.session_timeout_s);
  c.session_min_len = static_cast<std::size_t>(
      f.get_int("session.min_len", static_cast<std::int64_t>(c.session_min_len)));
  c.session_max_len = static_cast<std::size_t>(
      f.get_int("session.max_len", static_cast<std::int64_t>(c.session_max_len)));
  c.char_vocab_size = static_cast<std::size_t>(
      f.get_int("vocab.size", static_cast<std::int64_t>(c.char_vocab_size)));
  c.train_frac = f.get_double("split.train", c.train_frac);
  c.val_frac = f.get_double("split.val", c.val_frac);

  c.ssqe.vocab = c.char_vocab_size;
  c.ssqe.embed = static_cast<std::size_t>(
      f.get_int("ssqe.embed", static_cast<std::int64_t>(c.ssqe.embed)));
  c.ssqe.hidden = static_cast<std::size_t>(
      f.get_int("ssqe.hidden", static_cast<std::int64_t>(c.ssqe.hidden)));
  c.ssqe.layers = static_cast<std::size_t>(
      f.get_int("ssqe.layers", static_cast<std::int64_t>(c.ssqe.layers)));
  c.ssqe.out_dim = static_cast<std::size_t>(
      f.get_int("ssqe.out_dim", static_cast<std::int64_t>(c.ssqe.out_dim)));
  c.smqe.session_hidden = static_cast<std::size_t>(
      f.get_int("smqe.hidden", static_cast<std::int64_t>(c.smqe.session_hidden)));
  c.smqe.session_layers = static_cast<std::size_t>(
      f.get_int("smqe.layers", static_cast<std::int64_t>(c.smqe.session_layers)));
  c.smqe.out_dim = c.ssqe.out_dim;

  auto read_train = [&f](const std::string& prefix, enc::TrainConfig& t) {
    t.batch = static_cast<std::size_t>(
        f.get_int(prefix + ".batch", static_cast<std::int64_t>(t.batch)));
    t.iterations = static_cast<std::size_t>(
        f.get_int(prefix + ".iterations", static_cast<std::int64_t>(t.iterations)));
    t.negatives = static_cast<std::size_t>(
        f.get_int(prefix + ".negatives", static_cast<std::int64_t>(t.negatives)));
    t.beta = f.get_double(prefix + ".beta", t.beta);
    t.adam.alpha = f.get_double(prefix + ".lr", t.adam.alpha);
    t.clip_norm = f.get_double(prefix + ".clip", t.clip_norm);
    t.val_every = static_cast<std::size_t>(
        f.get_int(prefix + ".val_every", static_cast<std::int64_t>(t.val_every)));
    t.val_items = static_cast<std::size_t>(
        f.get_int(prefix + ".val_items", static_cast<std::int64_t>(t.val_items)));
  };
  read_train("train_ssqe", c.ssqe_train);
  read_train("train_smqe", c.smqe_train);
  c.smqe_train.freeze_ssqe = f.get_bool("train_smqe.freeze", c.smqe_train.freeze_ssqe);

  c.bandwidth.sigma_x_m = f.get_double("kde.sigma_x_m", c.bandwidth.sigma_x_m);
  c.bandwidth.sigma_y_m = f.get_double("kde.sigma_y_m", c.bandwidth.sigma_y_m);
  c.bandwidth.sigma_t_h = f.get_double("kde.sigma_t_h", c.bandwidth.sigma_t_h);
  c.fit_opts.min_obs = static_cast<std::size_t>(
      f.get_int("kde.min_obs", static_cast<std::int64_t>(c.fit_opts.min_obs)));
  c.score_opts.min_pre = static_cast<std::size_t>(
      f.get_int("kde.min_pre", static_cast<std::int64_t>(c.score_opts.min_pre)));
  c.score_opts.min_dis = static_cast<std::size_t>(
      f.get_int("kde.min_dis", static_cast<std::int64_t>(c.score_opts.min_dis)));

  c.theta_hi = f.get_double("label.theta_hi", c.theta_hi);
  c.theta_lo = f.get_double("label.theta_lo", c.theta_lo);
  c.target_rate = f.get_double("label.target_rate", c.target_rate);
  c.hist_bin_width = f.get_double("label.hist_bin", c.hist_bin_width);

  c.method_id = static_cast<int>(f.get_int("features.method", c.method_id));
  c.onehot_cap = static_cast<std::size_t>(
      f.get_int("features.onehot_cap", static_cast<std::int64_t>(c.onehot_cap)));

  c.rf.n_trees = static_cast<std::size_t>(
      f.get_int("rf.n_trees", static_cast<std::int64_t>(c.rf.n_trees)));
  c.rf.max_depth = static_cast<int>(f.get_int("rf.max_depth", c.rf.max_depth));
  c.rf.mtry =
      static_cast<std::size_t>(f.get_int("rf.mtry", static_cast<std::int64_t>(c.rf.mtry)));
  c.k_folds =
      static_cast<std::size_t>(f.get_int("cv.k", static_cast<std::int64_t>(c.k_folds)));

  if (f.has("sweep.grid")) c.sweep_grid = parse_double_list(f.get_str("sweep.grid", ""));
  if (f.has("sweep.methods"))
    c.sweep_methods = parse_int_list(f.get_str("sweep.methods", ""));
  c.similarity_pairs_per_class = static_cast<std::size_t>(f.get_int(
      "similarity.pairs_per_class", static_cast<std::int64_t>(c.similarity_pairs_per_class)));
  return c;
}

cfg::FlatConfig PipelineConfig::to_flat() const {
  cfg::FlatConfig f;
  f.set("out_dir", out_dir);
  f.set("format_version", std::to_string(format_version));
  f.set("seed", std::to_string(seed));

  f.set("world.seed", std::to_string(world.seed));
  f.set("world.n_users", std::to_string(world.n_users));
  f.set("world.evacuation_rate", io::format_double(world.evacuation_rate));
  f.set("world.query_mean", io::format_double(world.query_mean_per_day));
  f.set("world.query_max", std::to_string(world.query_max_per_day));
  f.set("world.gps_mean", io::format_double(world.gps_mean_per_day));
  f.set("world.gps_max", std::to_string(world.gps_max_per_day));
  f.set("world.n_intents", std::to_string(world.n_intents));
  f.set("world.n_districts", std::to_string(world.n_districts));
  f.set("world.base_disaster_share", io::format_double(world.base_disaster_share));
  f.set("world.shift_strength", io::format_double(world.shift_strength));
  f.set("world.displacement_m", io::format_double(world.displacement_m));
  f.set("world.gps_noise_m", io::format_double(world.gps_noise_m));
  f.set("world.disrupted_fraction", io::format_double(world.disrupted_fraction));
  f.set("world.disrupted_min_m", io::format_double(world.disrupted_min_m));
  f.set("world.disrupted_max_m", io::format_double(world.disrupted_max_m));
  f.set("world.center_lon", io::format_double(world.center_lon));
  f.set("world.center_lat", io::format_double(world.center_lat));
  f.set("world.city_radius_deg", io::format_double(world.city_radius_deg));
  f.set("world.t0", std::to_string(world.windows.t0));
  f.set("world.t_l", std::to_string(world.windows.t_l));
  f.set("world.t_d", std::to_string(world.windows.t_d));
  f.set("world.t_e", std::to_string(world.windows.t_e));

  f.set("session.timeout_s", std::to_string(session_timeout_s));
  f.set("session.min_len", std::to_string(session_min_len));
  f.set("session.max_len", std::to_string(session_max_len));
  f.set("vocab.size", std::to_string(char_vocab_size));
  f.set("split.train", io::format_double(train_frac));
  f.set("split.val", io::format_double(val_frac));
  f.set("split.seed", std::to_string(split_seed));

  f.set("ssqe.embed", std::to_string(ssqe.embed));
  f.set("ssqe.hidden", std::to_string(ssqe.hidden));
  f.set("ssqe.layers", std::to_string(ssqe.layers));
  f.set("ssqe.out_dim", std::to_string(ssqe.out_dim));
  f.set("smqe.hidden", std::to_string(smqe.session_hidden));
  f.set("smqe.layers", std::to_string(smqe.session_layers));

  auto write_train = [&f](const std::string& prefix, const enc::TrainConfig& t) {
    f.set(prefix + ".batch", std::to_string(t.batch));
    f.set(prefix + ".iterations", std::to_string(t.iterations));
    f.set(prefix + ".negatives", std::to_string(t.negatives));
    f.set(prefix + ".beta", io::format_double(t.beta));
    f.set(prefix + ".lr", io::format_double(t.adam.alpha));
    f.set(prefix + ".clip", io::format_double(t.clip_norm));
    f.set(prefix + ".val_every", std::to_string(t.val_every));
    f.set(prefix + ".val_items", std::to_string(t.val_items));
    f.set(prefix + ".seed", std::to_string(t.seed));
  };
  write_train("train_ssqe", ssqe_train);
  write_train("train_smqe", smqe_train);
  f.set("train_smqe.freeze", smqe_train.freeze_ssqe ? "true" : "false");

  f.set("kde.sigma_x_m", io::format_double(bandwidth.sigma_x_m));
  f.set("kde.sigma_y_m", io::format_double(bandwidth.sigma_y_m));
  f.set("kde.sigma_t_h", io::format_double(bandwidth.sigma_t_h));
  f.set("kde.min_obs", std::to_string(fit_opts.min_obs));
  f.set("kde.min_pre", std::to_string(score_opts.min_pre));
  f.set("kde.min_dis", std::to_string(score_opts.min_dis));

  f.set("label.theta_hi", io::format_double(theta_hi));
  f.set("label.theta_lo", io::format_double(theta_lo));
  f.set("label.target_rate", io::format_double(target_rate));
  f.set("label.hist_bin", io::format_double(hist_bin_width));

  f.set("features.method", std::to_string(method_id));
  f.set("features.onehot_cap", std::to_string(onehot_cap));

  f.set("rf.n_trees", std::to_string(rf.n_trees));
  f.set("rf.max_depth", std::to_string(rf.max_depth));
  f.set("rf.mtry", std::to_string(rf.mtry));
  f.set("rf.seed", std::to_string(rf.seed));
  f.set("cv.k", std::to_string(k_folds));
  f.set("cv.seed", std::to_string(cv_seed));

  f.set("sweep.grid", join_doubles(sweep_grid));
  f.set("sweep.methods", join_ints(sweep_methods));
  f.set("similarity.pairs_per_class", std::to_string(similarity_pairs_per_class));
  return f;
}

std::uint64_t PipelineConfig::hash() const { return to_flat().hash(); }

void PipelineConfig::validate() const {
  world.validate();
  if (session_timeout_s <= 0) fail("config", "session.timeout_s must be positive");
  if (session_min_len < 2) fail("config", "session.min_len must be at least 2");
  if (session_max_len < session_min_len) fail("config", "session.max_len below min_len");
  if (char_vocab_size < 8) fail("config", "vocab.size too small");
  if (train_frac <= 0 || val_frac < 0 || train_frac + val_frac > 1.0)
    fail("config", "split fractions must satisfy 0 < train, 0 <= val, train+val <= 1");
  if (theta_hi <= theta_lo) fail("config", "label.theta_hi must exceed label.theta_lo");
  if (target_rate <= 0 || target_rate >= 1)
    fail("config", "label.target_rate must be in (0,1)");
  if (hist_bin_width <= 0) fail("config", "label.hist_bin must be positive");
  if (method_id < 1 || method_id > 8) fail("config", "features.method must be 1..8");
  if (k_folds < 2) fail("config", "cv.k must be at least 2");
  for (const auto m : sweep_methods)
    if (m < 1 || m > 8) fail("config", "sweep.methods entries must be 1..8");
}

// ---------------------------------------------------------------------------
// filesystem helpers

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("io", "cannot create directory " + dir + ": " + ec.message());
}

void write_char_vocab(const std::string& path, const corpus::CharVocab& vocab) {
  std::string out = "# char_vocab\ttotal_size=" + std::to_string(vocab.total_size) + "\n";
  for (std::size_t i = 0; i < vocab.chars.size(); ++i) {
    out += std::to_string(i);
    out += '\t';
    out += std::to_string(static_cast<std::uint32_t>(vocab.chars[i]));
    out += '\n';
  }
  io::write_file(path, out);
}

corpus::CharVocab read_char_vocab(const std::string& path) {
  const std::string content = io::read_file(path);
  corpus::CharVocab vocab;
  vocab.total_size = 0;
  std::size_t pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    std::string_view line(content.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find("total_size=");
      if (eq != std::string_view::npos)
        vocab.total_size = static_cast<std::size_t>(io::parse_int(line.substr(eq + 11)));
      continue;
    }
    const auto cols = io::split(line, '\t');
    if (cols.size() != 2) fail("parse", "char vocab row needs 2 columns: " + path);
    vocab.chars.push_back(static_cast<char32_t>(io::parse_int(cols[1])));
  }
  // chars may be fewer than total_size - 2: the builder keeps the requested
  // table size even when the corpus has fewer distinct characters.
  if (vocab.total_size < vocab.chars.size() + 2)
    fail("parse", "char vocab size mismatch in " + path);
  for (std::size_t i = 0; i < vocab.chars.size(); ++i) vocab.index.emplace(vocab.chars[i], i);
  return vocab;
}

// ---------------------------------------------------------------------------
// stages

void run_synth(const PipelineConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const Paths p{cfg.out_dir};
  const synth::World world = synth::gen_world(cfg.world);

  synth::write_query_log_tsv(p.queries(), world.queries);
  stamp(p.queries(), cfg, {});
  synth::write_gps_log_tsv(p.gps(), world.gps);
  stamp(p.gps(), cfg, {});
  synth::write_truth_tsv(p.truth(), world.truth);
  stamp(p.truth(), cfg, {});
  const auto pairs = synth::similarity_pairs(world, cfg.similarity_pairs_per_class,
                                             derive_seed(cfg.world.seed, "sim-pairs"));
  synth::write_similarity_pairs_tsv(p.pairs(), pairs);
  stamp(p.pairs(), cfg, {});

  log::event(log::Level::info, "synth_done",
             {{"users", std::to_string(world.truth.users.size())},
              {"evacuees", std::to_string(world.truth.evacuee_count())},
              {"queries", std::to_string(world.queries.size())},
              {"gps", std::to_string(world.gps.size())}});
}

SessionizeSummary run_sessionize(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto records = load_queries(p);
  const auto sessions = corpus::sessionize(records, cfg.session_timeout_s,
                                           cfg.session_min_len, cfg.session_max_len);
  const auto pairs = corpus::build_pairs(sessions);

  std::string out = "# user\tstart_ts\tlength\tqueries\n";
  for (const auto& s : sessions) {
    out += s.user;
    out += '\t';
    out += std::to_string(s.timestamps.front());
    out += '\t';
    out += std::to_string(s.queries.size());
    out += '\t';
    for (std::size_t i = 0; i < s.queries.size(); ++i) {
      if (i) out += "||";
      out += s.queries[i];
    }
    out += '\n';
  }
  io::write_file(p.sessions(), out);
  stamp(p.sessions(), cfg, {p.queries()});

  SessionizeSummary sum;
  sum.records = records.size();
  sum.sessions = sessions.size();
  sum.pairs = pairs.size();
  log::event(log::Level::info, "sessionize_done",
             {{"records", std::to_string(sum.records)},
              {"sessions", std::to_string(sum.sessions)},
              {"pairs", std::to_string(sum.pairs)}});
  return sum;
}

void run_train_ssqe(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto records = load_queries(p);
  const auto sessions = corpus::sessionize(records, cfg.session_timeout_s,
                                           cfg.session_min_len, cfg.session_max_len);
  if (sessions.empty()) fail("usage", "no sessions to train on");

  // The character vocabulary is fit on the full session corpus: next-query
  // pretraining never sees evacuation labels, so there is nothing to leak.
  const auto vocab = corpus::build_char_vocab(sessions, cfg.char_vocab_size);
  write_char_vocab(p.char_vocab(), vocab);
  stamp(p.char_vocab(), cfg, {p.queries()});

  auto pairs = corpus::build_pairs(sessions);
  const double test_frac = 1.0 - cfg.train_frac - cfg.val_frac;
  auto split = corpus::split_dataset(std::move(pairs), cfg.train_frac, cfg.val_frac,
                                     test_frac, cfg.split_seed);
  enc::SsqeConfig model_cfg = cfg.ssqe;
  model_cfg.vocab = vocab.total_size;
  const auto result =
      enc::train_ssqe(split.train, split.validation, vocab, model_cfg, cfg.ssqe_train);

  enc::save_ssqe(result.params, p.ssqe(), vocab.hash());
  stamp(p.ssqe(), cfg, {p.queries(), p.char_vocab()});
  io::write_file(p.ssqe_metrics(), enc::metrics_jsonl(result.metrics));
  stamp(p.ssqe_metrics(), cfg, {p.ssqe()});

  log::event(
      log::Level::info, "train_ssqe_done",
      {{"train_pairs", std::to_string(split.train.size())},
       {"val_pairs", std::to_string(split.validation.size())},
       {"best_val", io::format_double(result.best_val)},
       {"final_loss",
        io::format_double(result.metrics.empty() ? 0.0 : result.metrics.back().loss)}});
}

void run_train_smqe(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto records = load_queries(p);
  auto sessions = corpus::sessionize(records, cfg.session_timeout_s, cfg.session_min_len,
                                     cfg.session_max_len);
  if (sessions.empty()) fail("usage", "no sessions to train on");

  const auto vocab = read_char_vocab(p.char_vocab());
  const auto ssqe = enc::load_ssqe(p.ssqe(), vocab.hash());

  const double test_frac = 1.0 - cfg.train_frac - cfg.val_frac;
  auto split = corpus::split_dataset(std::move(sessions), cfg.train_frac, cfg.val_frac,
                                     test_frac, cfg.split_seed);
  enc::SmqeConfig model_cfg = cfg.smqe;
  model_cfg.out_dim = ssqe.cfg.out_dim;
  const auto result = enc::train_smqe(split.train, split.validation, ssqe, vocab,
                                      model_cfg, cfg.smqe_train);

  enc::save_smqe(result.params, p.smqe(), vocab.hash());
  stamp(p.smqe(), cfg, {p.queries(), p.char_vocab(), p.ssqe()});
  io::write_file(p.smqe_metrics(), enc::metrics_jsonl(result.metrics));
  stamp(p.smqe_metrics(), cfg, {p.smqe()});

  log::event(
      log::Level::info, "train_smqe_done",
      {{"train_sessions", std::to_string(split.train.size())},
       {"val_sessions", std::to_string(split.validation.size())},
       {"best_val", io::format_double(result.best_val)},
       {"final_loss",
        io::format_double(result.metrics.empty() ? 0.0 : result.metrics.back().loss)}});
}

LabelSummary run_label(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto gps = anomaly::ingest_gps_log_file(p.gps());
  if (!gps.issues.empty())
    log::event(log::Level::warn, "gps_ingest_issues",
               {{"file", p.gps()}, {"skipped", std::to_string(gps.issues.size())}});
  const auto& recs = gps.records;
  if (recs.empty()) fail("usage", "gps log is empty");

  const auto& windows = cfg.world.windows;
  std::string theta_out = "# user\ttheta\tp_pre\ts_pre\tp_dis\tstatus\n";
  std::string label_out = "# user\ttheta\tlabel\n";
  std::vector<double> thetas;
  LabelSummary sum;

  std::size_t begin = 0;
  while (begin < recs.size()) {
    std::size_t end = begin;
    while (end < recs.size() && recs[end].user == recs[begin].user) ++end;
    std::span<const anomaly::GpsRecord> user_span(recs.data() + begin, end - begin);
    begin = end;

    ++sum.total_users;
    const auto us = anomaly::score_user(user_span, windows, cfg.bandwidth, cfg.fit_opts,
                                        cfg.score_opts);
    theta_out += us.user;
    theta_out += '\t';
    if (us.exclusion != anomaly::Exclusion::none || !us.score.has_value()) {
      ++sum.excluded;
      theta_out += "na\tna\tna\tna\t";
      theta_out += anomaly::exclusion_name(us.exclusion);
      theta_out += '\n';
      continue;
    }
    ++sum.scored;
    const auto& sc = *us.score;
    theta_out += io::format_double(sc.theta);
    theta_out += '\t';
    theta_out += io::format_double(sc.p_pre);
    theta_out += '\t';
    theta_out += io::format_double(sc.s_pre);
    theta_out += '\t';
    theta_out += io::format_double(sc.p_dis);
    theta_out += "\tok\n";
    thetas.push_back(sc.theta);

    const auto lab = anomaly::label_theta(sc.theta, cfg.theta_hi, cfg.theta_lo);
    label_out += us.user;
    label_out += '\t';
    label_out += io::format_double(sc.theta);
    label_out += '\t';
    label_out += std::to_string(static_cast<int>(lab));
    label_out += '\n';
    if (lab == anomaly::Label::evacuated)
      ++sum.evacuated;
    else if (lab == anomaly::Label::stayed)
      ++sum.stayed;
    else
      ++sum.uncertain;
  }

  if (sum.scored == 0) fail("usage", "no user had enough observations to score");
  sum.label1_rate = static_cast<double>(sum.evacuated) / static_cast<double>(sum.scored);

  io::write_file(p.theta(), theta_out);
  stamp(p.theta(), cfg, {p.gps()});
  io::write_file(p.labels(), label_out);
  stamp(p.labels(), cfg, {p.gps()});
  const auto hist = anomaly::score_histogram(thetas, cfg.hist_bin_width);
  io::write_file(p.histogram(), anomaly::histogram_tsv(hist));
  stamp(p.histogram(), cfg, {p.theta()});

  log::event(log::Level::info, "label_done",
             {{"users", std::to_string(sum.total_users)},
              {"scored", std::to_string(sum.scored)},
              {"excluded", std::to_string(sum.excluded)},
              {"evacuated", std::to_string(sum.evacuated)},
              {"stayed", std::to_string(sum.stayed)},
              {"uncertain", std::to_string(sum.uncertain)},
              {"label1_rate", io::format_double(sum.label1_rate)}});
  return sum;
}

double run_calibrate(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto rows = read_theta_tsv(p.theta());
  std::vector<double> thetas;
  for (const auto& r : rows)
    if (r.scored) thetas.push_back(r.theta);
  if (thetas.empty()) fail("usage", "no scored users in " + p.theta());

  const double threshold = anomaly::calibrate_threshold(thetas, cfg.target_rate);
  nlohmann::json j;
  j["threshold"] = threshold;
  j["target_rate"] = cfg.target_rate;
  j["n_scored"] = thetas.size();
  io::write_file(p.calibration(), j.dump(2) + "\n");
  stamp(p.calibration(), cfg, {p.theta()});

  log::event(log::Level::info, "calibrate_done",
             {{"threshold", io::format_double(threshold)},
              {"n_scored", std::to_string(thetas.size())}});
  return threshold;
}

feat::FeatureMatrix run_featurize(const PipelineConfig& cfg, int method_id) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const feat::MethodSpec spec = feat::MethodSpec::from_id(method_id);

  const auto labels = read_labels_tsv(p.labels());
  const auto records = load_queries(p);
  const auto set = assemble_labeled_set(labels, records, cfg.world.windows);
  if (set.users.empty()) fail("usage", "no labeled users with pre-alert queries");

  const bool need_single = method_needs_single_encoder(method_id);
  const bool need_multiple = method_needs_multi_encoder(method_id);
  const auto encs = load_encoders(p, need_single, need_multiple);

  feat::QueryVocab vocab;
  feat::TfidfStats stats;
  feat::FeatureModels models;
  if (spec.generator == feat::Generator::onehot) {
    vocab = feat::build_query_vocab(set.queries, cfg.onehot_cap);
    models.query_vocab = &vocab;
  }
  if (spec.selector == feat::Selector::tfidf) {
    stats = feat::tfidf_fit(set.queries);
    models.tfidf = &stats;
  }
  if (encs.loaded) {
    models.char_vocab = &encs.vocab;
    if (need_single) models.ssqe = &encs.ssqe;
    if (need_multiple) models.smqe = &encs.smqe;
    models.smqe_max_len = cfg.session_max_len;
  }

  auto matrix = feat::build_feature_matrix(set.queries, spec, models, cfg.world.windows.t_d);
  feat::write_feature_matrix(p.features(method_id), matrix);
  if (auto sc = io::read_sidecar(p.features(method_id))) {
    sc->format_version = cfg.format_version;
    sc->tool = "evaq";
    sc->config_hash = io::hex64(cfg.hash());
    sc->input_hashes[p.queries()] = io::hex64(io::fnv1a64_file(p.queries()));
    sc->input_hashes[p.labels()] = io::hex64(io::fnv1a64_file(p.labels()));
    io::write_sidecar(p.features(method_id), *sc);
  }

  log::event(log::Level::info, "featurize_done",
             {{"method", std::to_string(method_id)},
              {"rows", std::to_string(matrix.rows.size())},
              {"dim", std::to_string(matrix.dim)},
              {"dropped_no_queries", std::to_string(set.dropped_no_queries)}});
  return matrix;
}

cls::EvalReport run_evaluate(const PipelineConfig& cfg, int method_id) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto labels = read_labels_tsv(p.labels());
  const auto records = load_queries(p);
  const auto set = assemble_labeled_set(labels, records, cfg.world.windows);
  if (set.users.size() < 2 * cfg.k_folds)
    fail("usage",
         "too few labeled users for " + std::to_string(cfg.k_folds) + "-fold evaluation");

  const auto encs = load_encoders(p, method_needs_single_encoder(method_id),
                                  method_needs_multi_encoder(method_id));
  EncCache cache;
  const auto report = evaluate_labeled(cfg, set, method_id, encs, cache);

  io::write_file(p.report(method_id), report.to_json());
  stamp(p.report(method_id), cfg, {p.queries(), p.labels()});
  log::event(log::Level::info, "evaluate_done",
             {{"method", std::to_string(method_id)},
              {"mean_accuracy", io::format_double(report.mean_accuracy)},
              {"mean_auc", io::format_double(report.mean_auc)}});
  return report;
}

std::vector<cls::EvalReport> run_table(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto labels = read_labels_tsv(p.labels());
  const auto records = load_queries(p);
  const auto set = assemble_labeled_set(labels, records, cfg.world.windows);
  if (set.users.size() < 2 * cfg.k_folds)
    fail("usage",
         "too few labeled users for " + std::to_string(cfg.k_folds) + "-fold evaluation");

  const auto encs = load_encoders(p, true, true);
  EncCache cache;

  std::vector<cls::EvalReport> reports;
  std::string table = "# method\tname\tmean_accuracy\tmean_auc\tfold_accuracy\tfold_auc\n";
  for (int m = 1; m <= 8; ++m) {
    auto report = evaluate_labeled(cfg, set, m, encs, cache);
    io::write_file(p.report(m), report.to_json());
    stamp(p.report(m), cfg, {p.queries(), p.labels()});
    table += eval_report_tsv_row(report);
    table += '\n';
    log::event(log::Level::info, "method_done",
               {{"method", std::to_string(m)},
                {"mean_accuracy", io::format_double(report.mean_accuracy)},
                {"mean_auc", io::format_double(report.mean_auc)}});
    reports.push_back(std::move(report));
  }

  io::write_file(p.table(), table);
  stamp(p.table(), cfg, {p.queries(), p.labels()});
  return reports;
}

std::vector<cls::SweepRow> run_sweep(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto theta_rows = read_theta_tsv(p.theta());
  const auto records = load_queries(p);
  const auto& windows = cfg.world.windows;

  auto window_queries = feat::collect_window_queries(records, windows.t_l, windows.t_d);
  std::unordered_map<std::string, std::size_t> by_user;
  for (std::size_t i = 0; i < window_queries.size(); ++i)
    by_user.emplace(window_queries[i].user, i);

  bool need_single = false, need_multiple = false;
  for (const auto m : cfg.sweep_methods) {
    need_single = need_single || method_needs_single_encoder(m);
    need_multiple = need_multiple || method_needs_multi_encoder(m);
  }
  const auto encs = load_encoders(p, need_single, need_multiple);
  EncCache cache;

  cls::RelabelFn relabel = [&](double theta_hi) {
    std::pair<std::vector<std::string>, std::vector<int>> out;
    for (const auto& r : theta_rows) {
      if (!r.scored) continue;
      const auto lab = anomaly::label_theta(r.theta, theta_hi, cfg.theta_lo);
      if (lab == anomaly::Label::excluded) continue;
      if (!by_user.contains(r.user)) continue;
      out.first.push_back(r.user);
      out.second.push_back(static_cast<int>(lab));
    }
    return out;
  };

  cls::MethodEvalFn evaluate = [&](int method_id, std::span<const std::string> users,
                                   std::span<const int> y) {
    LabeledSet set;
    set.users.assign(users.begin(), users.end());
    set.y.assign(y.begin(), y.end());
    set.queries.reserve(users.size());
    for (const auto& u : users) set.queries.push_back(window_queries[by_user.at(u)]);
    return evaluate_labeled(cfg, set, method_id, encs, cache);
  };

  const auto rows = cls::threshold_sweep(cfg.sweep_grid, cfg.sweep_methods, cfg.theta_lo,
                                         relabel, evaluate);
  io::write_file(p.sweep(), cls::sweep_tsv(rows));
  stamp(p.sweep(), cfg, {p.theta(), p.queries()});
  log::event(log::Level::info, "sweep_done", {{"rows", std::to_string(rows.size())}});
  return rows;
}

SimilarityReport run_similarity(const PipelineConfig& cfg, const std::string& pairs_path) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto vocab = read_char_vocab(p.char_vocab());
  const auto ssqe = enc::load_ssqe(p.ssqe(), vocab.hash());
  const auto pairs = synth::read_similarity_pairs_tsv(pairs_path);
  if (pairs.empty()) fail("usage", "no similarity pairs in " + pairs_path);

  SimilarityReport rep;
  std::string out = "# a\tb\tsame_category\tcosine\n";
  for (const auto& pr : pairs) {
    const double cos = enc::similarity(ssqe, pr.a, pr.b, vocab);
    out += pr.a;
    out += '\t';
    out += pr.b;
    out += '\t';
    out += pr.same_category ? '1' : '0';
    out += '\t';
    out += io::format_double(cos);
    out += '\n';
    if (pr.same_category) {
      rep.same_mean += cos;
      ++rep.n_same;
    } else {
      rep.cross_mean += cos;
      ++rep.n_cross;
    }
  }
  if (rep.n_same) rep.same_mean /= static_cast<double>(rep.n_same);
  if (rep.n_cross) rep.cross_mean /= static_cast<double>(rep.n_cross);

  io::write_file(p.similarity(), out);
  stamp(p.similarity(), cfg, {pairs_path, p.ssqe()});
  log::event(log::Level::info, "similarity_done",
             {{"same_mean", io::format_double(rep.same_mean)},
              {"cross_mean", io::format_double(rep.cross_mean)},
              {"gap", io::format_double(rep.same_mean - rep.cross_mean)}});
  return rep;
}

void run_stats(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  const auto truth = synth::read_truth_tsv(p.truth());
  const auto records = load_queries(p);

  std::set<std::string> evacuees, stayers;
  for (const auto& u : truth.users) (u.evacuated ? evacuees : stayers).insert(u.user);

  const auto templates = synth::intent_templates(cfg.world.n_intents);
  std::vector<corpus::CategorySpec> categories;
  for (const auto& group : templates) {
    corpus::CategorySpec spec;
    const auto& first = group.front();
    const auto space = first.find(' ');
    spec.name = space == std::string::npos ? first : first.substr(0, space);
    spec.keywords = {spec.name};
    categories.push_back(std::move(spec));
  }

  const auto stats = corpus::cohort_query_stats(records, evacuees, stayers, categories, 86400);
  io::write_file(p.stats(), corpus::cohort_stats_tsv(stats));
  stamp(p.stats(), cfg, {p.queries(), p.truth()});
  log::event(log::Level::info, "stats_done", {{"buckets", std::to_string(stats.rows.size())}});
}

void run_e2e(const PipelineConfig& cfg) {
  cfg.validate();
  const Paths p{cfg.out_dir};
  run_synth(cfg);
  run_sessionize(cfg);
  run_train_ssqe(cfg);
  run_train_smqe(cfg);
  const auto label_sum = run_label(cfg);
  run_calibrate(cfg);
  run_table(cfg);
  run_sweep(cfg);
  run_similarity(cfg, p.pairs());
  run_stats(cfg);

  // How well the GPS-derived signal recovers the generator's ground truth.
  const auto truth = synth::read_truth_tsv(p.truth());
  const auto theta_rows = read_theta_tsv(p.theta());
  std::vector<double> thetas;
  std::vector<int> truth_flags;
  for (const auto& r : theta_rows) {
    if (!r.scored) continue;
    thetas.push_back(r.theta);
    truth_flags.push_back(truth.find(r.user).evacuated ? 1 : 0);
  }
  const double theta_auc = cls::auc(thetas, truth_flags);

  const auto labels = read_labels_tsv(p.labels());
  std::vector<std::string> decided_users;
  std::vector<double> decided_scores;
  for (const auto& row : labels) {
    if (row.label != 0 && row.label != 1) continue;
    decided_users.push_back(row.user);
    decided_scores.push_back(static_cast<double>(row.label));
  }
  const auto label_report = synth::oracle_report(decided_users, decided_scores, truth);

  nlohmann::json j;
  j["theta_auc"] = theta_auc;
  j["n_scored"] = thetas.size();
  j["label1_rate"] = label_sum.label1_rate;
  j["labels"] = nlohmann::json::parse(label_report.to_json());
  j["n_users"] = truth.users.size();
  j["true_evacuees"] = truth.evacuee_count();
  io::write_file(p.oracle(), j.dump(2) + "\n");
  stamp(p.oracle(), cfg, {p.theta(), p.labels(), p.truth()});

  log::event(log::Level::info, "e2e_done",
             {{"theta_auc", io::format_double(theta_auc)},
              {"label1_rate", io::format_double(label_sum.label1_rate)}});
}

} // namespace evaq::pipe
