#include "evaq/encoders.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "evaq/io.hpp"
#include "evaq/log.hpp"
#include "evaq/text.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace evaq::enc {

namespace {

std::vector<std::size_t> to_indices(std::string_view query, const corpus::CharVocab& vocab,
                                    const SsqeConfig& cfg) {
  if (query.empty()) fail("usage", "encoder: empty query");
  if (vocab.total_size != cfg.vocab)
    fail("shape", "encoder: vocab size " + std::to_string(vocab.total_size) +
                      " does not match model vocab " + std::to_string(cfg.vocab));
  std::vector<char32_t> cps;
  if (!text::utf8_decode(query, cps)) fail("parse", "encoder: query is not valid UTF-8");
  if (cps.empty()) fail("usage", "encoder: empty query");
  std::vector<std::size_t> idx;
  idx.reserve(cps.size() + 1);
  for (char32_t cp : cps) idx.push_back(vocab.encode(cp));
  idx.push_back(vocab.eoq_index());
  return idx;
}

struct SsqeForward {
  std::vector<std::size_t> idx;
  std::vector<std::vector<double>> inputs;
  num::LstmTape tape;
  std::vector<double> u; // top-layer hidden at the last step
  std::vector<double> z; // head output
};

SsqeForward ssqe_forward(const SsqeParams& p, std::string_view query,
                         const corpus::CharVocab& vocab) {
  SsqeForward fw;
  fw.idx = to_indices(query, vocab, p.cfg);
  fw.inputs.resize(fw.idx.size());
  for (std::size_t t = 0; t < fw.idx.size(); ++t) {
    const double* row = p.embedding.data() + fw.idx[t] * p.cfg.embed;
    fw.inputs[t].assign(row, row + p.cfg.embed);
  }
  num::lstm_forward(p.lstm, fw.inputs, fw.tape);
  const double* top = fw.tape.top_h(fw.tape.steps - 1);
  fw.u.assign(top, top + p.cfg.hidden);
  fw.z.resize(p.cfg.out_dim);
  num::affine_forward(p.head, fw.u.data(), fw.z.data());
  return fw;
}

/// Accumulates gradients for one encoded query. dz is the gradient at the
/// head output, du a direct injection at the top-layer last-step hidden
/// state; either may be null.
void ssqe_backward(const SsqeParams& p, const SsqeForward& fw, const double* dz,
                   const double* du, SsqeParams& grads) {
  std::vector<double> d_top(p.cfg.hidden, 0.0);
  if (dz) num::affine_backward(p.head, fw.u.data(), dz, grads.head, d_top.data());
  if (du)
    for (std::size_t j = 0; j < p.cfg.hidden; ++j) d_top[j] += du[j];

  std::vector<std::vector<double>> d_top_h(fw.tape.steps);
  d_top_h.back() = std::move(d_top);
  std::vector<std::vector<double>> d_inputs;
  num::lstm_backward(p.lstm, fw.inputs, fw.tape, d_top_h, grads.lstm, &d_inputs);
  for (std::size_t t = 0; t < fw.idx.size(); ++t) {
    double* row = grads.embedding.data() + fw.idx[t] * p.cfg.embed;
    for (std::size_t j = 0; j < p.cfg.embed; ++j) row[j] += d_inputs[t][j];
  }
}

SsqeParams zeros_like(const SsqeParams& p) {
  SsqeParams g;
  g.cfg = p.cfg;
  g.embedding = num::Tensor::zeros({p.cfg.vocab, p.cfg.embed});
  g.lstm.layers.reserve(p.lstm.layers.size());
  for (const auto& l : p.lstm.layers)
    g.lstm.layers.push_back(num::LstmLayerParams::zeros(l.input_dim, l.hidden_dim));
  g.head = num::AffineParams::zeros(p.head.input_dim, p.head.output_dim);
  return g;
}

SmqeParams zeros_like(const SmqeParams& p) {
  SmqeParams g;
  g.ssqe = zeros_like(p.ssqe);
  g.cfg = p.cfg;
  g.session_lstm.layers.reserve(p.session_lstm.layers.size());
  for (const auto& l : p.session_lstm.layers)
    g.session_lstm.layers.push_back(num::LstmLayerParams::zeros(l.input_dim, l.hidden_dim));
  g.head = num::AffineParams::zeros(p.head.input_dim, p.head.output_dim);
  return g;
}

void init_lstm_stack(num::LstmStackParams& stack, std::size_t input_dim,
                     std::size_t hidden_dim, std::size_t layers, Rng& rng) {
  stack.layers.clear();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = l == 0 ? input_dim : hidden_dim;
    auto lp = num::LstmLayerParams::zeros(in, hidden_dim);
    const double sx = 1.0 / std::sqrt(static_cast<double>(in));
    const double sh = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (auto& w : lp.w_x.v) w = rng.uniform(-sx, sx);
    for (auto& w : lp.w_h.v) w = rng.uniform(-sh, sh);
    // forget-gate bias 1, the rest 0
    for (std::size_t j = 0; j < hidden_dim; ++j) lp.b.v[hidden_dim + j] = 1.0;
    stack.layers.push_back(std::move(lp));
  }
}

void init_affine(num::AffineParams& a, std::size_t in, std::size_t out, Rng& rng) {
  a = num::AffineParams::zeros(in, out);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& w : a.w.v) w = rng.uniform(-s, s);
}

void append_hash(std::uint64_t& h, const num::Tensor& t) {
  const char* bytes = reinterpret_cast<const char*>(t.v.data());
  const std::string_view sv(bytes, t.v.size() * sizeof(double));
  for (unsigned char c : sv) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
}

std::uint64_t hash_refs(std::span<const num::ParamRef> refs) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& r : refs) {
    for (unsigned char c : r.name) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    append_hash(h, *r.tensor);
  }
  return h;
}

/// Distinct strings of a batch in first-encounter order.
struct DistinctStrings {
  std::vector<const std::string*> strings;
  std::unordered_map<std::string_view, std::size_t> index;

  std::size_t add(const std::string& s) {
    auto it = index.find(s);
    if (it != index.end()) return it->second;
    const std::size_t id = strings.size();
    strings.push_back(&s);
    index.emplace(*strings.back(), id);
    return id;
  }
};

/// Draws `count` distinct pool positions for item `self`, skipping
/// positions whose string equals the positive. pool_str(j) must be stable.
template <typename StrAt>
std::vector<std::size_t> draw_negatives(Rng& rng, std::size_t pool_size, std::size_t self,
                                        const std::string& positive, StrAt&& pool_str,
                                        std::size_t count) {
  std::vector<std::size_t> picked;
  picked.reserve(count);
  const std::size_t max_attempts = 100 + pool_size * 64;
  std::size_t attempts = 0;
  while (picked.size() < count) {
    if (++attempts > max_attempts)
      fail("config",
           "negative sampling: pool has too few usable entries (needs " +
               std::to_string(count) + " distinct positions not matching the positive)");
    const std::size_t j = static_cast<std::size_t>(rng.below(pool_size));
    if (j == self) continue;
    if (pool_str(j) == positive) continue;
    if (std::find(picked.begin(), picked.end(), j) != picked.end()) continue;
    picked.push_back(j);
  }
  return picked;
}

} // namespace

SsqeParams init_ssqe(const SsqeConfig& cfg, std::uint64_t seed) {
  if (cfg.vocab < 2 || cfg.embed == 0 || cfg.hidden == 0 || cfg.layers == 0 ||
      cfg.out_dim < 2)
    fail("config", "init_ssqe: bad dimensions (need vocab >= 2, out_dim >= 2)");
  Rng rng(derive_seed(seed, "ssqe-init"));
  SsqeParams p;
  p.cfg = cfg;
  p.embedding = num::Tensor::zeros({cfg.vocab, cfg.embed});
  const double se = 1.0 / std::sqrt(static_cast<double>(cfg.embed));
  for (auto& w : p.embedding.v) w = rng.uniform(-se, se);
  init_lstm_stack(p.lstm, cfg.embed, cfg.hidden, cfg.layers, rng);
  init_affine(p.head, cfg.hidden, cfg.out_dim, rng);
  return p;
}

SmqeParams init_smqe(SsqeParams first_stage, const SmqeConfig& cfg, std::uint64_t seed) {
  if (cfg.session_hidden == 0 || cfg.session_layers == 0)
    fail("config", "init_smqe: bad session dimensions");
  if (cfg.out_dim != first_stage.cfg.out_dim)
    fail("shape", "init_smqe: output dim " + std::to_string(cfg.out_dim) +
                      " must match the first stage's " +
                      std::to_string(first_stage.cfg.out_dim));
  Rng rng(derive_seed(seed, "smqe-init"));
  SmqeParams p;
  p.ssqe = std::move(first_stage);
  p.cfg = cfg;
  init_lstm_stack(p.session_lstm, p.ssqe.cfg.hidden, cfg.session_hidden, cfg.session_layers,
                  rng);
  init_affine(p.head, cfg.session_hidden, cfg.out_dim, rng);
  return p;
}

std::vector<num::ParamRef> param_refs(SsqeParams& p) {
  std::vector<num::ParamRef> refs;
  refs.push_back({"embedding", &p.embedding});
  for (std::size_t l = 0; l < p.lstm.layers.size(); ++l) {
    const std::string base = "lstm" + std::to_string(l);
    refs.push_back({base + ".w_x", &p.lstm.layers[l].w_x});
    refs.push_back({base + ".w_h", &p.lstm.layers[l].w_h});
    refs.push_back({base + ".b", &p.lstm.layers[l].b});
  }
  refs.push_back({"head.w", &p.head.w});
  refs.push_back({"head.b", &p.head.b});
  return refs;
}

std::vector<num::ParamRef> session_param_refs(SmqeParams& p) {
  std::vector<num::ParamRef> refs;
  for (std::size_t l = 0; l < p.session_lstm.layers.size(); ++l) {
    const std::string base = "session_lstm" + std::to_string(l);
    refs.push_back({base + ".w_x", &p.session_lstm.layers[l].w_x});
    refs.push_back({base + ".w_h", &p.session_lstm.layers[l].w_h});
    refs.push_back({base + ".b", &p.session_lstm.layers[l].b});
  }
  refs.push_back({"session_head.w", &p.head.w});
  refs.push_back({"session_head.b", &p.head.b});
  return refs;
}

std::vector<num::ParamRef> param_refs(SmqeParams& p) {
  std::vector<num::ParamRef> refs;
  for (auto& r : param_refs(p.ssqe)) refs.push_back({"ssqe." + r.name, r.tensor});
  for (auto& r : session_param_refs(p)) refs.push_back(std::move(r));
  return refs;
}

std::uint64_t params_hash(const SsqeParams& p) {
  auto refs = param_refs(const_cast<SsqeParams&>(p));
  return hash_refs(refs);
}

std::uint64_t params_hash(const SmqeParams& p) {
  auto refs = param_refs(const_cast<SmqeParams&>(p));
  return hash_refs(refs);
}

std::vector<double> ssqe_encode(const SsqeParams& p, std::string_view query,
                                const corpus::CharVocab& vocab) {
  return ssqe_forward(p, query, vocab).z;
}

std::vector<double> smqe_encode(const SmqeParams& p, std::span<const std::string> queries,
                                const corpus::CharVocab& vocab, std::size_t max_len) {
  if (queries.empty()) fail("usage", "smqe_encode: empty query list");
  if (queries.size() > max_len)
    fail("usage", "smqe_encode: " + std::to_string(queries.size()) +
                      " queries exceed max_len " + std::to_string(max_len));
  std::vector<std::vector<double>> inputs;
  inputs.reserve(queries.size());
  for (const auto& q : queries) inputs.push_back(ssqe_forward(p.ssqe, q, vocab).u);
  num::LstmTape tape;
  num::lstm_forward(p.session_lstm, inputs, tape);
  std::vector<double> z(p.cfg.out_dim);
  num::affine_forward(p.head, tape.top_h(tape.steps - 1), z.data());
  return z;
}

double similarity(const SsqeParams& p, std::string_view a, std::string_view b,
                  const corpus::CharVocab& vocab) {
  const auto za = ssqe_encode(p, a, vocab);
  const auto zb = ssqe_encode(p, b, vocab);
  return num::cosine_similarity(za, zb);
}

SsqeBatchLoss ssqe_pair_loss(const SsqeParams& p, std::span<const corpus::QueryPair> batch,
                             const corpus::CharVocab& vocab, double beta,
                             std::size_t negatives, std::uint64_t neg_seed) {
  if (batch.empty()) fail("usage", "ssqe_pair_loss: empty batch");
  if (negatives < 1) fail("config", "ssqe_pair_loss: need at least 1 negative");

  DistinctStrings ds;
  std::vector<std::pair<std::size_t, std::size_t>> pair_ids; // (q,d) distinct ids
  pair_ids.reserve(batch.size());
  for (const auto& pr : batch) pair_ids.push_back({ds.add(pr.q), ds.add(pr.d)});

  std::vector<SsqeForward> fws;
  fws.reserve(ds.strings.size());
  for (const auto* s : ds.strings) fws.push_back(ssqe_forward(p, *s, vocab));

  std::vector<std::vector<double>> dz(ds.strings.size(),
                                      std::vector<double>(p.cfg.out_dim, 0.0));

  Rng rng(neg_seed);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total_loss = 0.0;
  std::vector<double> r(negatives + 1), dr(negatives + 1);
  std::vector<std::size_t> cand(negatives + 1);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto [qid, did] = pair_ids[i];
    cand[0] = did;
    const auto negs = draw_negatives(
        rng, batch.size(), i, batch[i].d, [&](std::size_t j) -> const std::string& { return batch[j].d; },
        negatives);
    for (std::size_t k = 0; k < negatives; ++k) cand[k + 1] = pair_ids[negs[k]].second;

    const auto& zq = fws[qid].z;
    for (std::size_t k = 0; k < cand.size(); ++k)
      r[k] = num::cosine_similarity(zq, fws[cand[k]].z);
    total_loss += num::candidate_softmax_loss(r, beta, dr.data());
    for (std::size_t k = 0; k < cand.size(); ++k) {
      const double up = dr[k] * inv_b;
      if (up == 0.0) continue;
      num::cosine_backward(zq, fws[cand[k]].z, up, dz[qid].data(), dz[cand[k]].data());
    }
  }

  SsqeBatchLoss out;
  out.loss = total_loss * inv_b;
  if (!std::isfinite(out.loss)) fail("numeric", "ssqe_pair_loss: non-finite loss");
  out.grads = zeros_like(p);
  for (std::size_t sid = 0; sid < ds.strings.size(); ++sid) {
    bool nonzero = false;
    for (double v : dz[sid])
      if (v != 0.0) {
        nonzero = true;
        break;
      }
    if (nonzero) ssqe_backward(p, fws[sid], dz[sid].data(), nullptr, out.grads);
  }
  return out;
}

namespace {

struct FrozenEncCache {
  const SsqeParams* params = nullptr;
  const corpus::CharVocab* vocab = nullptr;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> map;

  const std::pair<std::vector<double>, std::vector<double>>& get(const std::string& q) {
    auto it = map.find(q);
    if (it != map.end()) return it->second;
    auto fw = ssqe_forward(*params, q, *vocab);
    auto [ins, ok] =
        map.emplace(q, std::make_pair(std::move(fw.u), std::move(fw.z)));
    return ins->second;
  }
};

double smqe_batch(const SmqeParams& p, std::span<const corpus::Session> batch,
                  const corpus::CharVocab& vocab, double beta, std::size_t negatives,
                  std::uint64_t neg_seed, bool freeze_ssqe, FrozenEncCache* cache,
                  SmqeParams& grads) {
  if (batch.empty()) fail("usage", "smqe_session_loss: empty batch");
  for (const auto& s : batch)
    if (s.queries.size() < 2)
      fail("usage", "smqe_session_loss: session shorter than 2 queries");

  // First-stage encodings for every distinct string in the batch.
  DistinctStrings ds;
  std::vector<std::vector<std::size_t>> session_ids(batch.size());
  for (std::size_t si = 0; si < batch.size(); ++si) {
    session_ids[si].reserve(batch[si].queries.size());
    for (const auto& q : batch[si].queries) session_ids[si].push_back(ds.add(q));
  }

  std::vector<SsqeForward> fws; // only filled when backprop reaches the first stage
  std::vector<const std::vector<double>*> u_of(ds.strings.size());
  std::vector<const std::vector<double>*> z_of(ds.strings.size());
  if (freeze_ssqe && cache) {
    for (std::size_t sid = 0; sid < ds.strings.size(); ++sid) {
      const auto& uz = cache->get(*ds.strings[sid]);
      u_of[sid] = &uz.first;
      z_of[sid] = &uz.second;
    }
  } else {
    fws.reserve(ds.strings.size());
    for (const auto* s : ds.strings) fws.push_back(ssqe_forward(p.ssqe, *s, vocab));
    for (std::size_t sid = 0; sid < ds.strings.size(); ++sid) {
      u_of[sid] = &fws[sid].u;
      z_of[sid] = &fws[sid].z;
    }
  }

  // Global pool of prediction targets (next queries), one entry per
  // session position t = 1..n-1.
  struct Position {
    std::size_t session;
    std::size_t step; // 0-based step in the session LSTM
    std::size_t target_id;
  };
  std::vector<Position> pool;
  for (std::size_t si = 0; si < batch.size(); ++si)
    for (std::size_t t = 0; t + 1 < batch[si].queries.size(); ++t)
      pool.push_back({si, t, session_ids[si][t + 1]});
  if (pool.empty()) fail("usage", "smqe_session_loss: no prediction positions");

  const double inv_m = 1.0 / static_cast<double>(pool.size());
  Rng rng(neg_seed);
  double total_loss = 0.0;

  std::vector<std::vector<double>> dz(ds.strings.size());
  std::vector<std::vector<double>> du(ds.strings.size());
  auto dz_at = [&](std::size_t sid) -> std::vector<double>& {
    if (dz[sid].empty()) dz[sid].assign(p.cfg.out_dim, 0.0);
    return dz[sid];
  };

  // Forward every session once; head outputs per step are the context
  // representations.
  std::vector<num::LstmTape> tapes(batch.size());
  std::vector<std::vector<std::vector<double>>> inputs(batch.size());
  std::vector<std::vector<std::vector<double>>> ctx(batch.size());
  for (std::size_t si = 0; si < batch.size(); ++si) {
    const std::size_t n = batch[si].queries.size();
    inputs[si].reserve(n - 1);
    for (std::size_t t = 0; t + 1 < n; ++t)
      inputs[si].push_back(*u_of[session_ids[si][t]]);
    num::lstm_forward(p.session_lstm, inputs[si], tapes[si]);
    ctx[si].resize(n - 1);
    for (std::size_t t = 0; t + 1 < n; ++t) {
      ctx[si][t].resize(p.cfg.out_dim);
      num::affine_forward(p.head, tapes[si].top_h(t), ctx[si][t].data());
    }
  }

  std::vector<std::vector<std::vector<double>>> d_ctx(batch.size());
  for (std::size_t si = 0; si < batch.size(); ++si)
    d_ctx[si].assign(batch[si].queries.size() - 1, {});

  std::vector<double> r(negatives + 1), dr(negatives + 1);
  for (std::size_t k_pos = 0; k_pos < pool.size(); ++k_pos) {
    const Position& pos = pool[k_pos];
    const std::string& positive = *ds.strings[pos.target_id];
    const auto negs = draw_negatives(
        rng, pool.size(), k_pos, positive,
        [&](std::size_t j) -> const std::string& { return *ds.strings[pool[j].target_id]; },
        negatives);

    const auto& zc = ctx[pos.session][pos.step];
    std::vector<std::size_t> cand(negatives + 1);
    cand[0] = pos.target_id;
    for (std::size_t k = 0; k < negatives; ++k) cand[k + 1] = pool[negs[k]].target_id;
    for (std::size_t k = 0; k < cand.size(); ++k)
      r[k] = num::cosine_similarity(zc, *z_of[cand[k]]);
    total_loss += num::candidate_softmax_loss(r, beta, dr.data());

    auto& dzc = d_ctx[pos.session][pos.step];
    if (dzc.empty()) dzc.assign(p.cfg.out_dim, 0.0);
    for (std::size_t k = 0; k < cand.size(); ++k) {
      const double up = dr[k] * inv_m;
      if (up == 0.0) continue;
      double* cand_dz = freeze_ssqe ? nullptr : dz_at(cand[k]).data();
      num::cosine_backward(zc, *z_of[cand[k]], up, dzc.data(), cand_dz);
    }
  }

  // Back through the session stage.
  for (std::size_t si = 0; si < batch.size(); ++si) {
    const std::size_t steps = inputs[si].size();
    std::vector<std::vector<double>> d_top(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      if (d_ctx[si][t].empty()) continue;
      d_top[t].assign(p.cfg.session_hidden, 0.0);
      num::affine_backward(p.head, tapes[si].top_h(t), d_ctx[si][t].data(), grads.head,
                           d_top[t].data());
    }
    std::vector<std::vector<double>> d_in;
    num::lstm_backward(p.session_lstm, inputs[si], tapes[si], d_top, grads.session_lstm,
                       freeze_ssqe ? nullptr : &d_in);
    if (!freeze_ssqe) {
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t sid = session_ids[si][t];
        if (du[sid].empty()) du[sid].assign(p.ssqe.cfg.hidden, 0.0);
        for (std::size_t j = 0; j < p.ssqe.cfg.hidden; ++j) du[sid][j] += d_in[t][j];
      }
    }
  }

  // And into the first stage when it is trainable.
  if (!freeze_ssqe) {
    for (std::size_t sid = 0; sid < ds.strings.size(); ++sid) {
      const bool has_dz = !dz[sid].empty();
      const bool has_du = !du[sid].empty();
      if (!has_dz && !has_du) continue;
      ssqe_backward(p.ssqe, fws[sid], has_dz ? dz[sid].data() : nullptr,
                    has_du ? du[sid].data() : nullptr, grads.ssqe);
    }
  }

  const double loss = total_loss * inv_m;
  if (!std::isfinite(loss)) fail("numeric", "smqe_session_loss: non-finite loss");
  return loss;
}

} // namespace

SmqeBatchLoss smqe_session_loss(const SmqeParams& p, std::span<const corpus::Session> batch,
                                const corpus::CharVocab& vocab, double beta,
                                std::size_t negatives, std::uint64_t neg_seed,
                                bool freeze_ssqe) {
  SmqeBatchLoss out;
  out.grads = zeros_like(p);
  FrozenEncCache cache{&p.ssqe, &vocab, {}};
  out.loss = smqe_batch(p, batch, vocab, beta, negatives, neg_seed, freeze_ssqe,
                        freeze_ssqe ? &cache : nullptr, out.grads);
  return out;
}

namespace {

/// Shared epoch-shuffled batch cursor.
class BatchCursor {
public:
  BatchCursor(std::size_t n, std::size_t batch, std::uint64_t seed)
      : order_(n), batch_(batch), rng_(derive_seed(seed, "batch-shuffle")) {
    if (batch > n)
      fail("config", "batch size " + std::to_string(batch) + " exceeds dataset size " +
                         std::to_string(n));
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  std::span<const std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    auto out = std::span<const std::size_t>(order_).subspan(pos_, batch_);
    pos_ += batch_;
    return out;
  }

private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  Rng rng_;
};

template <typename T>
std::vector<T> subsample(std::span<const T> items, std::size_t limit, std::uint64_t seed) {
  std::vector<std::size_t> idx(items.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (items.size() > limit) {
    Rng rng(seed);
    rng.shuffle(idx);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

} // namespace

SsqeTrainResult train_ssqe(std::span<const corpus::QueryPair> train,
                           std::span<const corpus::QueryPair> validation,
                           const corpus::CharVocab& vocab, const SsqeConfig& model_cfg,
                           const TrainConfig& cfg, const SsqeParams* initial) {
  if (train.empty()) fail("usage", "train_ssqe: empty training set");
  if (cfg.iterations == 0) fail("config", "train_ssqe: zero iterations");
  if (cfg.negatives + 1 > cfg.batch)
    fail("config", "train_ssqe: batch too small for the negative count");

  SsqeParams params = initial ? *initial : init_ssqe(model_cfg, cfg.seed);
  if (initial && (initial->cfg.vocab != model_cfg.vocab ||
                  initial->cfg.out_dim != model_cfg.out_dim))
    fail("shape", "train_ssqe: initial params do not match the model config");

  auto refs = param_refs(params);
  num::AdamState adam;
  adam.hp = cfg.adam;

  const std::vector<corpus::QueryPair> val_eval = subsample<corpus::QueryPair>(
      validation, cfg.val_items, derive_seed(cfg.seed, "val-subsample"));

  BatchCursor cursor(train.size(), cfg.batch, cfg.seed);
  SsqeTrainResult res;
  SsqeParams best = params;
  double window_loss = 0.0;
  std::size_t window_n = 0;

  std::vector<corpus::QueryPair> batch(cfg.batch);
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    const auto idx = cursor.next();
    for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = train[idx[i]];

    auto bl = ssqe_pair_loss(params, batch, vocab, cfg.beta, cfg.negatives,
                             derive_seed(cfg.seed, 0xb000000000000000ull + step));
    auto grad_refs = param_refs(bl.grads);
    num::clip_global_norm(grad_refs, cfg.clip_norm);
    num::adam_step(adam, refs, grad_refs);

    window_loss += bl.loss;
    ++window_n;

    const bool cadence = cfg.val_every != 0 && step % cfg.val_every == 0;
    if (cadence || step == cfg.iterations) {
      double val_acc = -1.0;
      if (!val_eval.empty()) {
        val_acc = next_query_accuracy(params, val_eval, vocab, cfg.negatives + 1,
                                      derive_seed(cfg.seed, "val-eval"));
        if (val_acc >= res.best_val) {
          res.best_val = val_acc;
          res.best_step = step;
          best = params;
        }
      }
      res.metrics.push_back({step, window_loss / static_cast<double>(window_n), val_acc});
      window_loss = 0.0;
      window_n = 0;
      log::event(log::Level::info, "train_ssqe",
                 {{"step", std::to_string(step)},
                  {"loss", io::format_double(res.metrics.back().loss)},
                  {"val_accuracy", io::format_double(val_acc)}});
    }
  }

  res.params = val_eval.empty() ? std::move(params) : std::move(best);
  return res;
}

SmqeTrainResult train_smqe(std::span<const corpus::Session> train,
                           std::span<const corpus::Session> validation,
                           const SsqeParams& first_stage, const corpus::CharVocab& vocab,
                           const SmqeConfig& model_cfg, const TrainConfig& cfg) {
  if (train.empty()) fail("usage", "train_smqe: empty training set");
  if (cfg.iterations == 0) fail("config", "train_smqe: zero iterations");

  SmqeParams params = init_smqe(first_stage, model_cfg, cfg.seed);
  const std::uint64_t first_stage_hash = params_hash(first_stage);

  auto refs = cfg.freeze_ssqe ? session_param_refs(params) : param_refs(params);
  num::AdamState adam;
  adam.hp = cfg.adam;

  const std::vector<corpus::Session> val_eval = subsample<corpus::Session>(
      validation, cfg.val_items, derive_seed(cfg.seed, "val-subsample"));

  BatchCursor cursor(train.size(), cfg.batch, cfg.seed);
  SmqeTrainResult res;
  SmqeParams best = params;
  double window_loss = 0.0;
  std::size_t window_n = 0;

  FrozenEncCache cache{&params.ssqe, &vocab, {}};
  SmqeParams grads = zeros_like(params);

  std::vector<corpus::Session> batch(cfg.batch);
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    const auto idx = cursor.next();
    for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = train[idx[i]];

    for (auto& r : (cfg.freeze_ssqe ? session_param_refs(grads) : param_refs(grads)))
      std::fill(r.tensor->v.begin(), r.tensor->v.end(), 0.0);
    const double loss =
        smqe_batch(params, batch, vocab, cfg.beta, cfg.negatives,
                   derive_seed(cfg.seed, 0xc000000000000000ull + step), cfg.freeze_ssqe,
                   cfg.freeze_ssqe ? &cache : nullptr, grads);
    auto grad_refs = cfg.freeze_ssqe ? session_param_refs(grads) : param_refs(grads);
    num::clip_global_norm(grad_refs, cfg.clip_norm);
    num::adam_step(adam, refs, grad_refs);

    window_loss += loss;
    ++window_n;

    const bool cadence = cfg.val_every != 0 && step % cfg.val_every == 0;
    if (cadence || step == cfg.iterations) {
      double val_acc = -1.0;
      if (!val_eval.empty()) {
        val_acc = next_query_accuracy(params, val_eval, vocab, cfg.negatives + 1,
                                      derive_seed(cfg.seed, "val-eval"));
        if (val_acc >= res.best_val) {
          res.best_val = val_acc;
          res.best_step = step;
          best = params;
        }
      }
      res.metrics.push_back({step, window_loss / static_cast<double>(window_n), val_acc});
      window_loss = 0.0;
      window_n = 0;
      log::event(log::Level::info, "train_smqe",
                 {{"step", std::to_string(step)},
                  {"loss", io::format_double(res.metrics.back().loss)},
                  {"val_accuracy", io::format_double(val_acc)}});
    }
  }

  res.params = val_eval.empty() ? std::move(params) : std::move(best);
  if (cfg.freeze_ssqe && params_hash(res.params.ssqe) != first_stage_hash)
    fail("numeric", "train_smqe: frozen first stage changed during training");
  return res;
}

namespace {

struct RepCache {
  const SsqeParams* params;
  const corpus::CharVocab* vocab;
  std::unordered_map<std::string, std::vector<double>> map;

  const std::vector<double>& get(const std::string& q) {
    auto it = map.find(q);
    if (it != map.end()) return it->second;
    auto [ins, ok] = map.emplace(q, ssqe_encode(*params, q, *vocab));
    return ins->second;
  }
};

} // namespace

double next_query_accuracy(const SsqeParams& p, std::span<const corpus::QueryPair> items,
                           const corpus::CharVocab& vocab, std::size_t n_choices,
                           std::uint64_t seed) {
  if (items.empty()) fail("usage", "next_query_accuracy: empty eval set");
  if (n_choices < 2) fail("config", "next_query_accuracy: need at least 2 choices");
  if (items.size() < n_choices)
    fail("config", "next_query_accuracy: eval pool smaller than n_choices");

  RepCache cache{&p, &vocab, {}};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const auto negs = draw_negatives(
        rng, items.size(), i, items[i].d,
        [&](std::size_t j) -> const std::string& { return items[j].d; }, n_choices - 1);
    const auto& zq = cache.get(items[i].q);
    const double pos = num::cosine_similarity(zq, cache.get(items[i].d));
    bool win = true;
    for (const std::size_t j : negs) {
      if (num::cosine_similarity(zq, cache.get(items[j].d)) > pos) {
        win = false;
        break;
      }
    }
    if (win) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

double next_query_accuracy(const SmqeParams& p, std::span<const corpus::Session> items,
                           const corpus::CharVocab& vocab, std::size_t n_choices,
                           std::uint64_t seed) {
  if (items.empty()) fail("usage", "next_query_accuracy: empty eval set");
  if (n_choices < 2) fail("config", "next_query_accuracy: need at least 2 choices");

  struct Position {
    std::size_t session;
    std::size_t step;
    const std::string* target;
  };
  std::vector<Position> pool;
  for (std::size_t si = 0; si < items.size(); ++si) {
    if (items[si].queries.size() < 2)
      fail("usage", "next_query_accuracy: session shorter than 2 queries");
    for (std::size_t t = 0; t + 1 < items[si].queries.size(); ++t)
      pool.push_back({si, t, &items[si].queries[t + 1]});
  }
  if (pool.size() < n_choices)
    fail("config", "next_query_accuracy: eval pool smaller than n_choices");

  RepCache cache{&p.ssqe, &vocab, {}};
  FrozenEncCache ucache{&p.ssqe, &vocab, {}};

  // Context representations per session, one forward pass each.
  std::vector<std::vector<std::vector<double>>> ctx(items.size());
  for (std::size_t si = 0; si < items.size(); ++si) {
    const auto& qs = items[si].queries;
    std::vector<std::vector<double>> inputs;
    inputs.reserve(qs.size() - 1);
    for (std::size_t t = 0; t + 1 < qs.size(); ++t)
      inputs.push_back(ucache.get(qs[t]).first);
    num::LstmTape tape;
    num::lstm_forward(p.session_lstm, inputs, tape);
    ctx[si].resize(inputs.size());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      ctx[si][t].resize(p.cfg.out_dim);
      num::affine_forward(p.head, tape.top_h(t), ctx[si][t].data());
    }
  }

  std::size_t correct = 0;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    const auto negs = draw_negatives(
        rng, pool.size(), k, *pool[k].target,
        [&](std::size_t j) -> const std::string& { return *pool[j].target; }, n_choices - 1);
    const auto& zc = ctx[pool[k].session][pool[k].step];
    const double pos = num::cosine_similarity(zc, cache.get(*pool[k].target));
    bool win = true;
    for (const std::size_t j : negs) {
      if (num::cosine_similarity(zc, cache.get(*pool[j].target)) > pos) {
        win = false;
        break;
      }
    }
    if (win) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pool.size());
}

double dataset_pair_loss(const SsqeParams& p, std::span<const corpus::QueryPair> pairs,
                         const corpus::CharVocab& vocab, double beta, std::size_t negatives,
                         std::uint64_t seed) {
  if (pairs.empty()) fail("usage", "dataset_pair_loss: empty dataset");
  RepCache cache{&p, &vocab, {}};
  double total = 0.0;
  std::vector<double> r(negatives + 1);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const auto negs = draw_negatives(
        rng, pairs.size(), i, pairs[i].d,
        [&](std::size_t j) -> const std::string& { return pairs[j].d; }, negatives);
    const auto& zq = cache.get(pairs[i].q);
    r[0] = num::cosine_similarity(zq, cache.get(pairs[i].d));
    for (std::size_t k = 0; k < negatives; ++k)
      r[k + 1] = num::cosine_similarity(zq, cache.get(pairs[negs[k]].d));
    total += num::candidate_softmax_loss(r, beta, nullptr);
  }
  return total / static_cast<double>(pairs.size());
}

namespace {

constexpr char kMagic[8] = {'E', 'V', 'A', 'Q', 'S', 'Q', 'E', '1'};
constexpr const char* kLstmVariant = "graves-no-peephole";

struct Block {
  std::string name;
  const num::Tensor* tensor;
};

void write_checkpoint(const std::string& path, const std::string& kind,
                      const nlohmann::json& dims, std::uint64_t vocab_hash,
                      const std::vector<Block>& blocks) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["kind"] = kind;
  header["lstm_variant"] = kLstmVariant;
  header["vocab_hash"] = io::hex64(vocab_hash);
  header["dims"] = dims;
  auto jb = nlohmann::json::array();
  for (const auto& b : blocks) {
    nlohmann::json e;
    e["name"] = b.name;
    e["shape"] = b.tensor->shape;
    jb.push_back(e);
  }
  header["blocks"] = jb;
  const std::string hs = header.dump();

  std::string out;
  out.reserve(sizeof(kMagic) + 8 + hs.size() + 1024);
  out.append(kMagic, sizeof(kMagic));
  std::uint64_t len = hs.size();
  char lenbuf[8];
  std::memcpy(lenbuf, &len, 8);
  out.append(lenbuf, 8);
  out += hs;
  for (const auto& b : blocks)
    out.append(reinterpret_cast<const char*>(b.tensor->v.data()),
               b.tensor->v.size() * sizeof(double));
  io::write_file(path, out);
}

struct LoadedCheckpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, num::Tensor>> blocks;
};

LoadedCheckpoint read_checkpoint(const std::string& path, const std::string& expect_kind) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    fail("parse", "not a checkpoint file: " + path);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), 8);
  const std::size_t header_end = sizeof(kMagic) + 8 + len;
  if (len == 0 || header_end > bytes.size())
    fail("parse", "truncated checkpoint header: " + path);

  LoadedCheckpoint lc;
  try {
    lc.header = nlohmann::json::parse(bytes.substr(sizeof(kMagic) + 8, len));
  } catch (const nlohmann::json::exception& e) {
    fail("parse", std::string("bad checkpoint header: ") + e.what());
  }
  if (lc.header.value("format_version", -1) != 1)
    fail("parse", "unsupported checkpoint format version in " + path);
  if (lc.header.value("kind", "") != expect_kind)
    fail("parse", "checkpoint kind '" + lc.header.value("kind", "") + "' where '" +
                      expect_kind + "' was expected: " + path);
  if (lc.header.value("lstm_variant", "") != kLstmVariant)
    fail("parse", "checkpoint uses an unsupported LSTM variant: " + path);

  std::size_t offset = header_end;
  for (const auto& b : lc.header["blocks"]) {
    num::Tensor t;
    t.shape = b["shape"].get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (std::size_t d : t.shape) n *= d;
    const std::size_t nbytes = n * sizeof(double);
    if (offset + nbytes > bytes.size())
      fail("parse", "truncated checkpoint payload: " + path);
    t.v.resize(n);
    std::memcpy(t.v.data(), bytes.data() + offset, nbytes);
    offset += nbytes;
    lc.blocks.emplace_back(b["name"].get<std::string>(), std::move(t));
  }
  if (offset != bytes.size())
    fail("parse", "checkpoint has trailing bytes: " + path);
  return lc;
}

num::Tensor take_block(LoadedCheckpoint& lc, const std::string& name,
                       const std::vector<std::size_t>& expect_shape) {
  for (auto& [n, t] : lc.blocks) {
    if (n != name) continue;
    if (t.shape != expect_shape)
      fail("shape", "checkpoint block '" + name + "' has an unexpected shape");
    return std::move(t);
  }
  fail("parse", "checkpoint is missing block '" + name + "'");
}

std::uint64_t header_vocab_hash(const nlohmann::json& header) {
  const std::string hex = header.value("vocab_hash", "");
  std::uint64_t v = 0;
  for (char c : hex) {
    v <<= 4;
    if (c >= '0' && c <= '9')
      v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f')
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else
      fail("parse", "bad vocab hash in checkpoint header");
  }
  return v;
}

void check_vocab(const nlohmann::json& header, std::optional<std::uint64_t> expect,
                 const std::string& path) {
  if (!expect) return;
  if (header_vocab_hash(header) != *expect)
    fail("config", "checkpoint " + path +
                       " was built with a different character vocabulary (hash mismatch)");
}

nlohmann::json ssqe_dims(const SsqeConfig& c) {
  return {{"vocab", c.vocab}, {"embed", c.embed},   {"hidden", c.hidden},
          {"layers", c.layers}, {"out_dim", c.out_dim}};
}

} // namespace

void save_ssqe(const SsqeParams& p, const std::string& path, std::uint64_t vocab_hash) {
  std::vector<Block> blocks;
  auto refs = param_refs(const_cast<SsqeParams&>(p));
  for (const auto& r : refs) blocks.push_back({r.name, r.tensor});
  write_checkpoint(path, "ssqe", ssqe_dims(p.cfg), vocab_hash, blocks);
}

void save_smqe(const SmqeParams& p, const std::string& path, std::uint64_t vocab_hash) {
  std::vector<Block> blocks;
  auto refs = param_refs(const_cast<SmqeParams&>(p));
  for (const auto& r : refs) blocks.push_back({r.name, r.tensor});
  nlohmann::json dims;
  dims["ssqe"] = ssqe_dims(p.ssqe.cfg);
  dims["session_hidden"] = p.cfg.session_hidden;
  dims["session_layers"] = p.cfg.session_layers;
  dims["out_dim"] = p.cfg.out_dim;
  write_checkpoint(path, "smqe", dims, vocab_hash, blocks);
}

namespace {

SsqeParams load_ssqe_blocks(LoadedCheckpoint& lc, const nlohmann::json& dims,
                            const std::string& prefix) {
  SsqeConfig cfg;
  cfg.vocab = dims.at("vocab").get<std::size_t>();
  cfg.embed = dims.at("embed").get<std::size_t>();
  cfg.hidden = dims.at("hidden").get<std::size_t>();
  cfg.layers = dims.at("layers").get<std::size_t>();
  cfg.out_dim = dims.at("out_dim").get<std::size_t>();

  SsqeParams p;
  p.cfg = cfg;
  p.embedding = take_block(lc, prefix + "embedding", {cfg.vocab, cfg.embed});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? cfg.embed : cfg.hidden;
    num::LstmLayerParams lp;
    lp.input_dim = in;
    lp.hidden_dim = cfg.hidden;
    const std::string base = prefix + "lstm" + std::to_string(l);
    lp.w_x = take_block(lc, base + ".w_x", {4 * cfg.hidden, in});
    lp.w_h = take_block(lc, base + ".w_h", {4 * cfg.hidden, cfg.hidden});
    lp.b = take_block(lc, base + ".b", {4 * cfg.hidden});
    p.lstm.layers.push_back(std::move(lp));
  }
  p.head.input_dim = cfg.hidden;
  p.head.output_dim = cfg.out_dim;
  p.head.w = take_block(lc, prefix + "head.w", {cfg.out_dim, cfg.hidden});
  p.head.b = take_block(lc, prefix + "head.b", {cfg.out_dim});
  return p;
}

} // namespace

SsqeParams load_ssqe(const std::string& path, std::optional<std::uint64_t> expect_vocab_hash) {
  auto lc = read_checkpoint(path, "ssqe");
  check_vocab(lc.header, expect_vocab_hash, path);
  return load_ssqe_blocks(lc, lc.header.at("dims"), "");
}

SmqeParams load_smqe(const std::string& path, std::optional<std::uint64_t> expect_vocab_hash) {
  auto lc = read_checkpoint(path, "smqe");
  check_vocab(lc.header, expect_vocab_hash, path);
  const auto& dims = lc.header.at("dims");

  SmqeParams p;
  p.ssqe = load_ssqe_blocks(lc, dims.at("ssqe"), "ssqe.");
  p.cfg.session_hidden = dims.at("session_hidden").get<std::size_t>();
  p.cfg.session_layers = dims.at("session_layers").get<std::size_t>();
  p.cfg.out_dim = dims.at("out_dim").get<std::size_t>();
  for (std::size_t l = 0; l < p.cfg.session_layers; ++l) {
    const std::size_t in = l == 0 ? p.ssqe.cfg.hidden : p.cfg.session_hidden;
    num::LstmLayerParams lp;
    lp.input_dim = in;
    lp.hidden_dim = p.cfg.session_hidden;
    const std::string base = "session_lstm" + std::to_string(l);
    lp.w_x = take_block(lc, base + ".w_x", {4 * p.cfg.session_hidden, in});
    lp.w_h = take_block(lc, base + ".w_h", {4 * p.cfg.session_hidden, p.cfg.session_hidden});
    lp.b = take_block(lc, base + ".b", {4 * p.cfg.session_hidden});
    p.session_lstm.layers.push_back(std::move(lp));
  }
  p.head.input_dim = p.cfg.session_hidden;
  p.head.output_dim = p.cfg.out_dim;
  p.head.w = take_block(lc, "session_head.w", {p.cfg.out_dim, p.cfg.session_hidden});
  p.head.b = take_block(lc, "session_head.b", {p.cfg.out_dim});
  return p;
}

CheckpointInfo inspect_checkpoint(const std::string& path) {
  const std::string bytes = io::read_file(path);
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    fail("parse", "not a checkpoint file: " + path);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof(kMagic), 8);
  if (len == 0 || sizeof(kMagic) + 8 + len > bytes.size())
    fail("parse", "truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(sizeof(kMagic) + 8, len));
  } catch (const nlohmann::json::exception& e) {
    fail("parse", std::string("bad checkpoint header: ") + e.what());
  }
  CheckpointInfo info;
  info.kind = header.value("kind", "");
  info.format_version = header.value("format_version", -1);
  info.vocab_hash = header_vocab_hash(header);
  info.lstm_variant = header.value("lstm_variant", "");
  return info;
}

std::string metrics_jsonl(std::span<const MetricsRow> rows) {
  std::ostringstream ss;
  for (const auto& r : rows) {
    nlohmann::json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    if (r.val_accuracy >= 0.0)
      j["val_accuracy"] = r.val_accuracy;
    else
      j["val_accuracy"] = nullptr;
    ss << j.dump() << "\n";
  }
  return ss.str();
}

} // namespace evaq::enc
