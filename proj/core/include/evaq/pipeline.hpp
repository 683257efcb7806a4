#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "evaq/anomaly.hpp"
#include "evaq/classify.hpp"
#include "evaq/config.hpp"
#include "evaq/corpus.hpp"
#include "evaq/encoders.hpp"
#include "evaq/features.hpp"
#include "evaq/synth.hpp"

namespace evaq::pipe {

/// Effective settings for every stage. One global seed fans out to
/// per-stage seeds unless a stage seed is pinned explicitly.
struct PipelineConfig {
  std::string out_dir = "out";
  int format_version = 1;
  std::uint64_t seed = 1;

  synth::WorldConfig world;

  std::int64_t session_timeout_s = 120;
  std::size_t session_min_len = 2, session_max_len = 10;
  std::size_t char_vocab_size = 64;
  double train_frac = 0.9, val_frac = 0.05; // test gets the rest
  std::uint64_t split_seed = 0;

  enc::SsqeConfig ssqe;
  enc::SmqeConfig smqe;
  enc::TrainConfig ssqe_train;
  enc::TrainConfig smqe_train;

  anomaly::KernelBandwidth bandwidth;
  anomaly::FitOptions fit_opts;
  anomaly::ScoreOptions score_opts;
  double theta_hi = 4.0, theta_lo = 1.0;
  double target_rate = 0.046;
  double hist_bin_width = 0.5;

  int method_id = 8;
  std::size_t onehot_cap = 5000;

  cls::RfConfig rf;
  std::size_t k_folds = 5;
  std::uint64_t cv_seed = 0;

  std::vector<double> sweep_grid = {2.0, 2.5, 3.0, 3.5, 4.0};
  std::vector<int> sweep_methods = {7, 8};
  std::size_t similarity_pairs_per_class = 200;

  static PipelineConfig from_flat(const cfg::FlatConfig& fc);
  cfg::FlatConfig to_flat() const;
  std::uint64_t hash() const;
  void validate() const;
};

/// Artifact locations under one output directory.
struct Paths {
  std::string dir;

  std::string queries() const { return dir + "/queries.tsv"; }
  std::string gps() const { return dir + "/gps.tsv"; }
  std::string truth() const { return dir + "/truth.tsv"; }
  std::string pairs() const { return dir + "/similarity_pairs.tsv"; }
  std::string sessions() const { return dir + "/sessions.tsv"; }
  std::string char_vocab() const { return dir + "/char_vocab.tsv"; }
  std::string ssqe() const { return dir + "/ssqe.ckpt"; }
  std::string smqe() const { return dir + "/smqe.ckpt"; }
  std::string ssqe_metrics() const { return dir + "/ssqe_metrics.jsonl"; }
  std::string smqe_metrics() const { return dir + "/smqe_metrics.jsonl"; }
  std::string theta() const { return dir + "/theta.tsv"; }
  std::string labels() const { return dir + "/labels.tsv"; }
  std::string histogram() const { return dir + "/theta_hist.tsv"; }
  std::string calibration() const { return dir + "/calibration.json"; }
  std::string features(int method) const {
    return dir + "/features_m" + std::to_string(method) + ".tsv";
  }
  std::string report(int method) const {
    return dir + "/eval_m" + std::to_string(method) + ".json";
  }
  std::string table() const { return dir + "/method_table.tsv"; }
  std::string sweep() const { return dir + "/threshold_sweep.tsv"; }
  std::string oracle() const { return dir + "/oracle.json"; }
  std::string similarity() const { return dir + "/similarity.tsv"; }
  std::string stats() const { return dir + "/cohort_stats.tsv"; }
};

void ensure_dir(const std::string& dir);

// character vocabulary persistence (the checkpoint stores only its hash)
void write_char_vocab(const std::string& path, const corpus::CharVocab& vocab);
corpus::CharVocab read_char_vocab(const std::string& path);

void run_synth(const PipelineConfig& cfg);

struct SessionizeSummary {
  std::size_t records = 0, sessions = 0, pairs = 0;
};
SessionizeSummary run_sessionize(const PipelineConfig& cfg);

void run_train_ssqe(const PipelineConfig& cfg);
void run_train_smqe(const PipelineConfig& cfg);

struct LabelSummary {
  std::size_t total_users = 0, scored = 0, excluded = 0;
  std::size_t evacuated = 0, stayed = 0, uncertain = 0; // labels 1 / 0 / 2
  double label1_rate = 0.0;                             // over scored users
};
LabelSummary run_label(const PipelineConfig& cfg);

double run_calibrate(const PipelineConfig& cfg);

/// Full-set feature matrix artifact for one method (vocabulary and corpus
/// stats from the whole labeled set; evaluation rebuilds them per fold).
feat::FeatureMatrix run_featurize(const PipelineConfig& cfg, int method_id);

/// Fold-aware cross-validated evaluation of one method; writes the report.
cls::EvalReport run_evaluate(const PipelineConfig& cfg, int method_id);

/// All 8 methods, one table row each.
std::vector<cls::EvalReport> run_table(const PipelineConfig& cfg);

std::vector<cls::SweepRow> run_sweep(const PipelineConfig& cfg);

struct SimilarityReport {
  double same_mean = 0.0, cross_mean = 0.0;
  std::size_t n_same = 0, n_cross = 0;
};
SimilarityReport run_similarity(const PipelineConfig& cfg, const std::string& pairs_path);

void run_stats(const PipelineConfig& cfg);

/// synth -> encoders -> labels -> all-method table -> sweep -> oracle.
void run_e2e(const PipelineConfig& cfg);

} // namespace evaq::pipe
