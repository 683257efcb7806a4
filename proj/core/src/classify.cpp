#include "evaq/classify.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "evaq/io.hpp"
#include "evaq/rng.hpp"

namespace evaq::cls {

namespace {

void check_xy(std::span<const std::vector<double>> X, std::span<const int> y) {
  if (X.size() != y.size())
    fail("shape", "X has " + std::to_string(X.size()) + " rows but y has " +
                      std::to_string(y.size()) + " labels");
  if (X.size() < 2) fail("usage", "need at least 2 samples, got " + std::to_string(X.size()));
  if (X[0].empty()) fail("shape", "zero feature dimension");
  for (const auto& row : X)
    if (row.size() != X[0].size()) fail("shape", "ragged feature matrix");
  std::size_t c0 = 0, c1 = 0;
  for (int v : y) {
    if (v == 0)
      ++c0;
    else if (v == 1)
      ++c1;
    else
      fail("usage", "labels must be 0 or 1, got " + std::to_string(v));
  }
  if (c0 == 0 || c1 == 0) fail("usage", "training labels contain a single class");
}

struct TreeBuilder {
  std::span<const std::vector<double>> X;
  std::span<const int> y;
  std::size_t mtry;
  long max_depth;
  Rng* rng;
  Tree* tree;

  // scratch, reused across nodes
  std::vector<std::pair<double, int>> vals;
  std::vector<std::size_t> chosen;

  long make_leaf(std::span<const std::size_t> samples) {
    std::size_t c1 = 0;
    for (std::size_t i : samples) c1 += static_cast<std::size_t>(y[i]);
    TreeNode n;
    const double total = static_cast<double>(samples.size());
    n.p1 = static_cast<double>(c1) / total;
    n.p0 = static_cast<double>(samples.size() - c1) / total;
    tree->nodes.push_back(n);
    return static_cast<long>(tree->nodes.size() - 1);
  }

  // Splits idx[lo,hi) in place and returns the node index, or builds a leaf.
  long build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi, long depth) {
    std::span<const std::size_t> samples(idx.data() + lo, hi - lo);
    const std::size_t n = samples.size();
    std::size_t c1 = 0;
    for (std::size_t i : samples) c1 += static_cast<std::size_t>(y[i]);
    const bool pure = c1 == 0 || c1 == n;
    if (pure || n < 2 || (max_depth >= 0 && depth >= max_depth)) return make_leaf(samples);

    const std::size_t dim = X[0].size();
    chosen.clear();
    while (chosen.size() < mtry) {
      const std::size_t f = rng->below(dim);
      if (std::find(chosen.begin(), chosen.end(), f) == chosen.end()) chosen.push_back(f);
    }

    // Maximizing sum(n_side * (p0^2 + p1^2)) over the two sides minimizes
    // the weighted Gini impurity.
    double best_purity = -1.0;
    long best_feature = -1;
    double best_threshold = 0.0;
    for (std::size_t f : chosen) {
      vals.clear();
      vals.reserve(n);
      for (std::size_t i : samples) vals.emplace_back(X[i][f], y[i]);
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first) continue; // constant feature here
      double l0 = 0, l1 = 0;
      const double t0 = static_cast<double>(n - c1), t1 = static_cast<double>(c1);
      for (std::size_t j = 0; j + 1 < n; ++j) {
        if (vals[j].second == 0)
          l0 += 1;
        else
          l1 += 1;
        if (vals[j].first == vals[j + 1].first) continue;
        const double nl = l0 + l1, nr = static_cast<double>(n) - nl;
        const double r0 = t0 - l0, r1 = t1 - l1;
        const double purity = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / nr;
        if (purity > best_purity) {
          best_purity = purity;
          best_feature = static_cast<long>(f);
          const double a = vals[j].first, b = vals[j + 1].first;
          double thr = a + (b - a) / 2.0;
          if (thr >= b) thr = a; // midpoint rounded onto the upper value
          best_threshold = thr;
        }
      }
    }
    if (best_feature < 0) return make_leaf(samples); // every sampled feature constant

    auto mid = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                              idx.begin() + static_cast<std::ptrdiff_t>(hi),
                              [&](std::size_t i) {
                                return X[i][static_cast<std::size_t>(best_feature)] <=
                                       best_threshold;
                              });
    const std::size_t cut = static_cast<std::size_t>(mid - idx.begin());
    const long node = static_cast<long>(tree->nodes.size());
    tree->nodes.emplace_back();
    tree->nodes[static_cast<std::size_t>(node)].feature = best_feature;
    tree->nodes[static_cast<std::size_t>(node)].threshold = best_threshold;
    const long left = build(idx, lo, cut, depth + 1);
    const long right = build(idx, cut, hi, depth + 1);
    tree->nodes[static_cast<std::size_t>(node)].left = left;
    tree->nodes[static_cast<std::size_t>(node)].right = right;
    return node;
  }
};

double tree_proba(const Tree& t, std::span<const double> row) {
  std::size_t at = 0;
  while (!t.nodes[at].is_leaf()) {
    const TreeNode& n = t.nodes[at];
    at = static_cast<std::size_t>(row[static_cast<std::size_t>(n.feature)] <= n.threshold
                                      ? n.left
                                      : n.right);
  }
  return t.nodes[at].p1;
}

void mix_u64(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= 0x100000001b3ull;
  }
}

} // namespace

std::uint64_t RfModel::hash() const {
  std::uint64_t h = fnv1a64("rf-model");
  mix_u64(h, dim);
  mix_u64(h, trees.size());
  for (const auto& t : trees) {
    mix_u64(h, t.nodes.size());
    for (const auto& n : t.nodes) {
      mix_u64(h, static_cast<std::uint64_t>(n.feature));
      mix_u64(h, std::bit_cast<std::uint64_t>(n.threshold));
      mix_u64(h, static_cast<std::uint64_t>(n.left));
      mix_u64(h, static_cast<std::uint64_t>(n.right));
      mix_u64(h, std::bit_cast<std::uint64_t>(n.p0));
      mix_u64(h, std::bit_cast<std::uint64_t>(n.p1));
    }
  }
  return h;
}

RfModel train_rf(std::span<const std::vector<double>> X, std::span<const int> y,
                 const RfConfig& cfg) {
  check_xy(X, y);
  if (cfg.n_trees < 1) fail("config", "n_trees must be >= 1");
  const std::size_t n = X.size(), dim = X[0].size();
  RfModel model;
  model.cfg = cfg;
  model.dim = dim;
  model.trees.resize(cfg.n_trees);
  const std::size_t mtry =
      cfg.mtry > 0 ? std::min(cfg.mtry, dim)
                   : std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(
                                                  static_cast<double>(dim))));
  const std::uint64_t forest_seed = derive_seed(cfg.seed, "rf-trees");
  for (std::size_t t = 0; t < cfg.n_trees; ++t) {
    Rng rng(derive_seed(forest_seed, t));
    std::vector<std::size_t> idx(n);
    if (cfg.bootstrap) {
      for (auto& i : idx) i = rng.below(n);
    } else {
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    }
    TreeBuilder b{X, y, mtry, cfg.max_depth, &rng, &model.trees[t], {}, {}};
    b.build(idx, 0, n, 0);
  }
  return model;
}

std::vector<double> predict_proba(const RfModel& model, std::span<const std::vector<double>> X) {
  std::vector<double> scores;
  scores.reserve(X.size());
  for (const auto& row : X) {
    if (row.size() != model.dim)
      fail("shape", "predict row width " + std::to_string(row.size()) +
                        " != model dimension " + std::to_string(model.dim));
    double sum = 0;
    for (const auto& t : model.trees) sum += tree_proba(t, row);
    scores.push_back(sum / static_cast<double>(model.trees.size()));
  }
  return scores;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail("shape", "auc: scores/labels length mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (int v : labels) {
    if (v == 1)
      ++n_pos;
    else if (v == 0)
      ++n_neg;
    else
      fail("usage", "auc: labels must be 0 or 1");
  }
  if (n_pos == 0 || n_neg == 0) fail("usage", "auc needs both classes present");
  for (double s : scores)
    if (!std::isfinite(s)) fail("numeric", "auc: non-finite score");

  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // 1-based ranks i+1 .. j+1 share the average rank
    const double rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  const double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

Confusion confusion(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail("shape", "confusion: scores/labels length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = hard_label(scores[i]);
    if (labels[i] == 1)
      pred == 1 ? ++c.tp : ++c.fn;
    else
      pred == 0 ? ++c.tn : ++c.fp;
  }
  return c;
}

double Confusion::accuracy() const {
  if (total() == 0) fail("usage", "accuracy of an empty set");
  return static_cast<double>(tp + tn) / static_cast<double>(total());
}

double accuracy(std::span<const double> scores, std::span<const int> labels) {
  return confusion(scores, labels).accuracy();
}

std::vector<std::size_t> stratified_folds(std::span<const int> y, std::size_t k,
                                          std::uint64_t seed) {
  if (k < 2) fail("config", "k must be >= 2, got " + std::to_string(k));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);
  for (const auto& [cls_val, members] : by_class)
    if (members.size() < k)
      fail("usage", "class " + std::to_string(cls_val) + " has " +
                        std::to_string(members.size()) + " members, fewer than k=" +
                        std::to_string(k));
  Rng rng(derive_seed(seed, "cv-folds"));
  std::vector<std::size_t> folds(y.size(), 0);
  for (auto& [cls_val, members] : by_class) {
    rng.shuffle(members);
    for (std::size_t j = 0; j < members.size(); ++j) folds[members[j]] = j % k;
  }
  return folds;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["method_id"] = method_id;
  j["seed"] = seed;
  j["k"] = k;
  j["fold_accuracy"] = fold_accuracy;
  j["fold_auc"] = fold_auc;
  j["mean_accuracy"] = mean_accuracy;
  j["mean_auc"] = mean_auc;
  j["fold_hash"] = io::hex64(fold_hash);
  std::vector<std::string> hashes;
  hashes.reserve(fold_model_hashes.size());
  for (auto h : fold_model_hashes) hashes.push_back(io::hex64(h));
  j["fold_model_hashes"] = hashes;
  return j.dump(2) + "\n";
}

EvalReport cross_validate(std::size_t n_samples, std::span<const int> y,
                          const FeatureProvider& features, std::size_t k,
                          const RfConfig& rf, std::uint64_t seed, int method_id) {
  if (y.size() != n_samples) fail("shape", "cross_validate: label count mismatch");
  const std::vector<std::size_t> folds = stratified_folds(y, k, seed);

  EvalReport rep;
  rep.method_id = method_id;
  rep.seed = seed;
  rep.k = k;
  std::uint64_t fh = fnv1a64("folds");
  for (std::size_t f : folds) mix_u64(fh, f);
  rep.fold_hash = fh;

  const std::uint64_t rf_seed_root = derive_seed(seed, "cv-rf");
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t i = 0; i < n_samples; ++i)
      (folds[i] == f ? test_idx : train_idx).push_back(i);
    FoldFeatures ff = features(train_idx, test_idx);
    if (ff.train_X.size() != train_idx.size() || ff.test_X.size() != test_idx.size())
      fail("shape", "feature provider returned wrong row counts");
    std::vector<int> y_train, y_test;
    y_train.reserve(train_idx.size());
    y_test.reserve(test_idx.size());
    for (std::size_t i : train_idx) y_train.push_back(y[i]);
    for (std::size_t i : test_idx) y_test.push_back(y[i]);

    RfConfig fold_cfg = rf;
    fold_cfg.seed = derive_seed(rf_seed_root, f);
    const RfModel model = train_rf(ff.train_X, y_train, fold_cfg);
    rep.fold_model_hashes.push_back(model.hash());
    const std::vector<double> scores = predict_proba(model, ff.test_X);
    rep.fold_accuracy.push_back(accuracy(scores, y_test));
    rep.fold_auc.push_back(auc(scores, y_test));
  }
  rep.mean_accuracy = std::accumulate(rep.fold_accuracy.begin(), rep.fold_accuracy.end(), 0.0) /
                      static_cast<double>(k);
  rep.mean_auc =
      std::accumulate(rep.fold_auc.begin(), rep.fold_auc.end(), 0.0) / static_cast<double>(k);
  return rep;
}

EvalReport cross_validate(std::span<const std::vector<double>> X, std::span<const int> y,
                          std::size_t k, const RfConfig& rf, std::uint64_t seed,
                          int method_id) {
  const FeatureProvider fixed = [&X](std::span<const std::size_t> train_idx,
                                     std::span<const std::size_t> test_idx) {
    FoldFeatures ff;
    ff.train_X.reserve(train_idx.size());
    ff.test_X.reserve(test_idx.size());
    for (std::size_t i : train_idx) ff.train_X.push_back(X[i]);
    for (std::size_t i : test_idx) ff.test_X.push_back(X[i]);
    return ff;
  };
  return cross_validate(X.size(), y, fixed, k, rf, seed, method_id);
}

std::vector<SweepRow> threshold_sweep(std::span<const double> grid,
                                      std::span<const int> method_ids, double theta_lo,
                                      const RelabelFn& relabel, const MethodEvalFn& eval) {
  for (double g : grid)
    if (!(g > theta_lo))
      fail("config", "sweep grid value " + io::format_double(g) +
                         " must exceed the lower threshold " + io::format_double(theta_lo));
  std::vector<SweepRow> rows;
  for (double theta : grid) {
    const auto [users, y] = relabel(theta);
    if (users.size() != y.size()) fail("shape", "relabel returned mismatched users/labels");
    std::size_t n_pos = 0;
    for (int v : y) n_pos += static_cast<std::size_t>(v == 1);
    for (int m : method_ids) {
      SweepRow row;
      row.theta_hi = theta;
      row.method_id = m;
      row.n_labeled = users.size();
      row.n_positive = n_pos;
      if (n_pos == 0 || n_pos == users.size()) {
        row.note = "single-class label set";
        rows.push_back(row);
        continue;
      }
      try {
        const EvalReport rep = eval(m, users, y);
        row.available = true;
        row.mean_accuracy = rep.mean_accuracy;
        row.mean_auc = rep.mean_auc;
      } catch (const Error& e) {
        row.note = e.what();
      }
      rows.push_back(row);
    }
  }
  return rows;
}

std::string sweep_tsv(std::span<const SweepRow> rows) {
  std::string out = "# theta_hi\tmethod\tavailable\taccuracy\tauc\tn_labeled\tn_positive\tnote\n";
  for (const auto& r : rows) {
    out += io::format_double(r.theta_hi);
    out += '\t';
    out += std::to_string(r.method_id);
    out += '\t';
    out += r.available ? '1' : '0';
    out += '\t';
    out += r.available ? io::format_double(r.mean_accuracy) : std::string("na");
    out += '\t';
    out += r.available ? io::format_double(r.mean_auc) : std::string("na");
    out += '\t';
    out += std::to_string(r.n_labeled);
    out += '\t';
    out += std::to_string(r.n_positive);
    out += '\t';
    out += r.note;
    out += '\n';
  }
  return out;
}

} // namespace evaq::cls
