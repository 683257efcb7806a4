#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evaq/corpus.hpp"
#include "evaq/numerics.hpp"

namespace evaq::enc {

/// Query encoder dimensions. vocab counts every index including the OOV
/// and end-of-query slots. Paper-scale values (vocab 6000, e=256, h=1024,
/// 3 layers, d=128) are reachable through config; the defaults here are
/// the desk-scale setup used for verification.
struct SsqeConfig {
  std::size_t vocab = 64;
  std::size_t embed = 16;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t out_dim = 32;
};

struct SsqeParams {
  SsqeConfig cfg;
  num::Tensor embedding; // [vocab, embed]
  num::LstmStackParams lstm;
  num::AffineParams head; // hidden -> out_dim
};

struct SmqeConfig {
  std::size_t session_hidden = 64;
  std::size_t session_layers = 1;
  std::size_t out_dim = 32; // must match the first stage
};

/// Hierarchical encoder: the first stage's top-layer hidden state at the
/// last timestep of each query is fed stepwise into the session LSTM.
struct SmqeParams {
  SsqeParams ssqe;
  SmqeConfig cfg;
  num::LstmStackParams session_lstm; // input dim = ssqe.cfg.hidden
  num::AffineParams head;            // session_hidden -> out_dim
};

/// Uniform ±1/sqrt(fan_in) weights, zero biases except the forget gate
/// bias at 1.
SsqeParams init_ssqe(const SsqeConfig& cfg, std::uint64_t seed);
SmqeParams init_smqe(SsqeParams first_stage, const SmqeConfig& cfg, std::uint64_t seed);

std::vector<num::ParamRef> param_refs(SsqeParams& p);
/// All parameters, first-stage blocks first.
std::vector<num::ParamRef> param_refs(SmqeParams& p);
/// Session-stage blocks only (what training updates when the first stage
/// is frozen).
std::vector<num::ParamRef> session_param_refs(SmqeParams& p);

std::uint64_t params_hash(const SsqeParams& p);
std::uint64_t params_hash(const SmqeParams& p);

/// d-dim representation of one query: characters mapped through the vocab
/// (OOV for unknown), end-of-query marker appended, affine of the top
/// layer's hidden state at the final timestep.
std::vector<double> ssqe_encode(const SsqeParams& p, std::string_view query,
                                const corpus::CharVocab& vocab);

/// d-dim contextual representation of an ordered query list.
std::vector<double> smqe_encode(const SmqeParams& p, std::span<const std::string> queries,
                                const corpus::CharVocab& vocab, std::size_t max_len = 10);

/// Cosine similarity of the two queries' representations.
double similarity(const SsqeParams& p, std::string_view a, std::string_view b,
                  const corpus::CharVocab& vocab);

struct TrainConfig {
  std::size_t batch = 64;
  std::size_t iterations = 2000;
  std::size_t negatives = 4; // candidates per choice = negatives + 1
  double beta = 10.0;
  num::AdamHyper adam{};
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  std::size_t val_every = 200; // 0: validate only at the end
  std::size_t val_items = 1000;
  bool freeze_ssqe = true; // SMQE only
};

struct MetricsRow {
  std::size_t step = 0;
  double loss = 0.0;         // mean batch loss since the previous row
  double val_accuracy = -1.0; // -1 when no validation was run
};

struct SsqeTrainResult {
  SsqeParams params; // best validation checkpoint (final params if no validation)
  std::vector<MetricsRow> metrics;
  double best_val = -1.0;
  std::size_t best_step = 0;
};

struct SmqeTrainResult {
  SmqeParams params;
  std::vector<MetricsRow> metrics;
  double best_val = -1.0;
  std::size_t best_step = 0;
};

/// Next-query prediction training on consecutive pairs: per pair the
/// positive next query plus `negatives` in-batch negatives (uniform over
/// the other pairs' next queries, never string-equal to the positive,
/// resampled every step) are scored by cosine similarity and pushed
/// through a softmax with inverse temperature beta; the loss is the cross
/// entropy of the positive.
SsqeTrainResult train_ssqe(std::span<const corpus::QueryPair> train,
                           std::span<const corpus::QueryPair> validation,
                           const corpus::CharVocab& vocab, const SsqeConfig& model_cfg,
                           const TrainConfig& cfg, const SsqeParams* initial = nullptr);

/// Second-stage training: for every session position t (1..n-1) the
/// context representation of the first t queries is scored against the
/// first stage's representation of query t+1 (positive) plus sampled
/// negatives from the batch pool. The first stage stays frozen unless
/// cfg.freeze_ssqe is false.
SmqeTrainResult train_smqe(std::span<const corpus::Session> train,
                           std::span<const corpus::Session> validation,
                           const SsqeParams& first_stage, const corpus::CharVocab& vocab,
                           const SmqeConfig& model_cfg, const TrainConfig& cfg);

/// Fraction of eval items whose true next query wins the n_choices-way
/// ranking against seeded negatives drawn from the eval pool.
double next_query_accuracy(const SsqeParams& p, std::span<const corpus::QueryPair> items,
                           const corpus::CharVocab& vocab, std::size_t n_choices = 5,
                           std::uint64_t seed = 0);
double next_query_accuracy(const SmqeParams& p, std::span<const corpus::Session> items,
                           const corpus::CharVocab& vocab, std::size_t n_choices = 5,
                           std::uint64_t seed = 0);

/// Mean pair loss over a dataset with negatives drawn corpus-wide by seed;
/// fixed seed makes values comparable across epochs.
double dataset_pair_loss(const SsqeParams& p, std::span<const corpus::QueryPair> pairs,
                         const corpus::CharVocab& vocab, double beta = 10.0,
                         std::size_t negatives = 4, std::uint64_t seed = 0);

/// One batch worth of loss and parameter gradients, exactly as a training
/// step computes them (deterministic negatives from neg_seed). Exposed so
/// gradient checks exercise the full production loss.
struct SsqeBatchLoss {
  double loss = 0.0;
  SsqeParams grads;
};
SsqeBatchLoss ssqe_pair_loss(const SsqeParams& p, std::span<const corpus::QueryPair> batch,
                             const corpus::CharVocab& vocab, double beta,
                             std::size_t negatives, std::uint64_t neg_seed);

struct SmqeBatchLoss {
  double loss = 0.0;
  SmqeParams grads; // first-stage blocks stay zero when frozen
};
SmqeBatchLoss smqe_session_loss(const SmqeParams& p, std::span<const corpus::Session> batch,
                                const corpus::CharVocab& vocab, double beta,
                                std::size_t negatives, std::uint64_t neg_seed,
                                bool freeze_ssqe);

/// Versioned binary checkpoint: magic, JSON header (kind, dims, vocab
/// hash, LSTM variant, block table), then raw little-endian float64
/// blocks. Loading validates magic, version, shapes and — when a vocab is
/// supplied — the vocab hash.
void save_ssqe(const SsqeParams& p, const std::string& path, std::uint64_t vocab_hash);
void save_smqe(const SmqeParams& p, const std::string& path, std::uint64_t vocab_hash);
SsqeParams load_ssqe(const std::string& path,
                     std::optional<std::uint64_t> expect_vocab_hash = std::nullopt);
SmqeParams load_smqe(const std::string& path,
                     std::optional<std::uint64_t> expect_vocab_hash = std::nullopt);

struct CheckpointInfo {
  std::string kind; // "ssqe" | "smqe"
  int format_version = 0;
  std::uint64_t vocab_hash = 0;
  std::string lstm_variant;
};
CheckpointInfo inspect_checkpoint(const std::string& path);

std::string metrics_jsonl(std::span<const MetricsRow> rows);

} // namespace evaq::enc
