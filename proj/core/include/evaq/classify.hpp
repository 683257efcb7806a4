#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evaq/error.hpp"

namespace evaq::cls {

struct RfConfig {
  std::size_t n_trees = 100;
  long max_depth = -1;        // unlimited
  std::size_t mtry = 0;       // features tried per split; 0 = floor(sqrt(D)), min 1
  bool bootstrap = true;
  std::uint64_t seed = 1;
};

/// feature < 0 marks a leaf; children are node indices within the tree.
struct TreeNode {
  long feature = -1;
  double threshold = 0.0;
  long left = -1, right = -1;
  double p0 = 0.0, p1 = 0.0; // leaf class probabilities, sum to 1

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes; // nodes[0] is the root
};

struct RfModel {
  RfConfig cfg;
  std::size_t dim = 0;
  std::vector<Tree> trees;

  /// Structure hash over every node; used to prove that training never
  /// looked at held-out rows.
  std::uint64_t hash() const;
};

/// Gini-impurity forest over binary labels. pre: >= 2 rows, both classes
/// present, labels in {0,1}, rectangular X.
RfModel train_rf(std::span<const std::vector<double>> X, std::span<const int> y,
                 const RfConfig& cfg);

/// Mean positive-class leaf probability across trees, one score per row.
std::vector<double> predict_proba(const RfModel& model, std::span<const std::vector<double>> X);

inline int hard_label(double score) { return score > 0.5 ? 1 : 0; }

/// Probability that a random positive scores above a random negative,
/// ties counting one half. pre: both classes present.
double auc(std::span<const double> scores, std::span<const int> labels);

double accuracy(std::span<const double> scores, std::span<const int> labels);

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::size_t total() const { return tp + tn + fp + fn; }
  double accuracy() const;
};

Confusion confusion(std::span<const double> scores, std::span<const int> labels);

/// Stratified fold ids (0..k-1), class proportions preserved within one
/// sample. pre: every class has >= k members.
std::vector<std::size_t> stratified_folds(std::span<const int> y, std::size_t k,
                                          std::uint64_t seed);

struct EvalReport {
  int method_id = 0;
  std::uint64_t seed = 0;
  std::size_t k = 5;
  std::vector<double> fold_accuracy, fold_auc;
  double mean_accuracy = 0.0, mean_auc = 0.0;
  std::uint64_t fold_hash = 0;                 // over the fold assignment
  std::vector<std::uint64_t> fold_model_hashes; // per trained forest

  std::string to_json() const;
};

/// Per-fold feature construction so fold-dependent statistics (one-hot
/// vocabulary, tf-idf corpus stats) come from training rows only. Both
/// matrices must share a width.
struct FoldFeatures {
  std::vector<std::vector<double>> train_X, test_X;
};
using FeatureProvider =
    std::function<FoldFeatures(std::span<const std::size_t> train_idx,
                               std::span<const std::size_t> test_idx)>;

EvalReport cross_validate(std::size_t n_samples, std::span<const int> y,
                          const FeatureProvider& features, std::size_t k,
                          const RfConfig& rf, std::uint64_t seed, int method_id = 0);

/// Fixed-matrix convenience wrapper for fold-independent features.
EvalReport cross_validate(std::span<const std::vector<double>> X, std::span<const int> y,
                          std::size_t k, const RfConfig& rf, std::uint64_t seed,
                          int method_id = 0);

struct SweepRow {
  double theta_hi = 0.0;
  int method_id = 0;
  bool available = false;
  double mean_accuracy = 0.0, mean_auc = 0.0;
  std::size_t n_labeled = 0, n_positive = 0;
  std::string note; // why a row is unavailable
};

/// Relabels the population at one threshold; parallel user/label arrays.
using RelabelFn =
    std::function<std::pair<std::vector<std::string>, std::vector<int>>(double theta_hi)>;
/// Evaluates one method on a labeled set (cross-validation inside).
using MethodEvalFn = std::function<EvalReport(int method_id,
                                              std::span<const std::string> users,
                                              std::span<const int> y)>;

/// Re-runs labeling + evaluation over a threshold grid. Grid points whose
/// label set cannot be evaluated (single class, class smaller than k) are
/// marked unavailable and the sweep continues. pre: grid values > theta_lo.
std::vector<SweepRow> threshold_sweep(std::span<const double> grid,
                                      std::span<const int> method_ids, double theta_lo,
                                      const RelabelFn& relabel, const MethodEvalFn& eval);

std::string sweep_tsv(std::span<const SweepRow> rows);

} // namespace evaq::cls
