#include <doctest.h>

#include "evaq/encoders.hpp"
#include "evaq/text.hpp"

#include <cmath>
#include <fstream>

#include "helpers.hpp"

using namespace evaq;
using namespace evaq::enc;

namespace {

corpus::CharVocab make_vocab(const std::vector<std::string>& strings, std::size_t size) {
  std::vector<corpus::Session> ss(1);
  ss[0].user = "u";
  for (const auto& s : strings) {
    ss[0].queries.push_back(s);
    ss[0].timestamps.push_back(static_cast<std::int64_t>(ss[0].timestamps.size()));
  }
  return corpus::build_char_vocab(ss, size);
}

SsqeConfig micro_ssqe() { return SsqeConfig{12, 3, 4, 2, 3}; }

// Re-derives ssqe_encode from the documented contract: embedding rows for
// each character plus the end-of-query marker, the LSTM stack, then the
// affine head on the top hidden state of the last step.
std::vector<double> encode_reference(const SsqeParams& p, const std::string& q,
                                     const corpus::CharVocab& vocab) {
  std::vector<char32_t> cps;
  REQUIRE(text::utf8_decode(q, cps));
  std::vector<std::vector<double>> inputs;
  auto push_row = [&](std::size_t idx) {
    const double* row = p.embedding.data() + idx * p.cfg.embed;
    inputs.emplace_back(row, row + p.cfg.embed);
  };
  for (char32_t cp : cps) push_row(vocab.encode(cp));
  push_row(vocab.eoq_index());

  num::LstmTape tape;
  num::lstm_forward(p.lstm, inputs, tape);
  std::vector<double> out(p.cfg.out_dim);
  num::affine_forward(p.head, tape.top_h(inputs.size() - 1), out.data());
  return out;
}

std::vector<corpus::QueryPair> family_pairs() {
  // two families of strings; consecutive pairs stay inside one family
  std::vector<corpus::QueryPair> pairs;
  const std::vector<std::string> fam_a = {"apple one", "apple two", "apple three",
                                          "apple four"};
  const std::vector<std::string> fam_b = {"brick nine", "brick eight", "brick seven",
                                          "brick six"};
  for (const auto& fam : {fam_a, fam_b})
    for (std::size_t i = 0; i + 1 < fam.size(); ++i)
      for (int rep = 0; rep < 6; ++rep) pairs.push_back({fam[i], fam[i + 1]});
  return pairs;
}

} // namespace

TEST_CASE("init_ssqe shapes and scale") {
  auto cfg = SsqeConfig{20, 5, 7, 2, 4};
  auto p = init_ssqe(cfg, 3);
  CHECK(p.embedding.shape == std::vector<std::size_t>{20, 5});
  REQUIRE(p.lstm.layers.size() == 2);
  CHECK(p.lstm.layers[0].input_dim == 5);
  CHECK(p.lstm.layers[0].hidden_dim == 7);
  CHECK(p.lstm.layers[1].input_dim == 7);
  CHECK(p.head.w.shape == std::vector<std::size_t>{4, 7});

  // forget-gate bias 1, everything else 0
  const auto& b = p.lstm.layers[0].b.v;
  for (std::size_t j = 0; j < 7; ++j) {
    CHECK(b[j] == 0.0);
    CHECK(b[7 + j] == 1.0);
    CHECK(b[14 + j] == 0.0);
    CHECK(b[21 + j] == 0.0);
  }
  const double bound = 1.0 / std::sqrt(5.0) + 1e-12;
  for (double w : p.embedding.v) CHECK(std::abs(w) <= bound);

  CHECK(params_hash(p) == params_hash(init_ssqe(cfg, 3)));
  CHECK(params_hash(p) != params_hash(init_ssqe(cfg, 4)));

  CHECK_THROWS_AS(init_ssqe(SsqeConfig{1, 3, 4, 1, 3}, 1), Error);
  CHECK_THROWS_AS(init_ssqe(SsqeConfig{8, 3, 4, 1, 1}, 1), Error);
}

TEST_CASE("init_smqe wires the stages together") {
  auto first = init_ssqe(micro_ssqe(), 1);
  auto p = init_smqe(first, SmqeConfig{5, 1, 3}, 2);
  REQUIRE(p.session_lstm.layers.size() == 1);
  CHECK(p.session_lstm.layers[0].input_dim == first.cfg.hidden);
  CHECK(p.session_lstm.layers[0].hidden_dim == 5);
  CHECK(p.head.w.shape == std::vector<std::size_t>{3, 5});

  // the two stages must agree on the output dimension
  CHECK_THROWS_AS(init_smqe(first, SmqeConfig{5, 1, 8}, 2), Error);
  CHECK_THROWS_AS(init_smqe(first, SmqeConfig{0, 1, 3}, 2), Error);
}

TEST_CASE("ssqe_encode matches the layered reference") {
  auto vocab = make_vocab({"flood warning", "pizza"}, 12);
  auto p = init_ssqe(micro_ssqe(), 7);

  for (const std::string q : {"flood warning", "pizza", "flood pizza"}) {
    CAPTURE(q);
    auto got = ssqe_encode(p, q, vocab);
    auto want = encode_reference(p, q, vocab);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }

  // unknown characters route through the OOV row: any two fully-OOV
  // queries of equal length encode identically
  auto a = ssqe_encode(p, "éé", vocab);
  auto b = ssqe_encode(p, "XX", vocab);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));

  CHECK_THROWS_AS(ssqe_encode(p, "", vocab), Error);
  CHECK_THROWS_AS(ssqe_encode(p, "\xff\xfe", vocab), Error);

  // model dimensioned for a different vocabulary size must refuse
  auto small = make_vocab({"ab"}, 6);
  CHECK_THROWS_AS(ssqe_encode(p, "ab", small), Error);
}

TEST_CASE("smqe_encode matches the layered reference") {
  auto vocab = make_vocab({"flood warning", "pizza near me"}, 12);
  auto first = init_ssqe(micro_ssqe(), 7);
  auto p = init_smqe(first, SmqeConfig{5, 1, 3}, 9);

  std::vector<std::string> queries = {"flood", "pizza near", "warning zone"};
  auto got = smqe_encode(p, queries, vocab);

  // reference: first-stage top hidden state at the last char step of each
  // query feeds the session stack; head reads the final session state
  std::vector<std::vector<double>> session_inputs;
  for (const auto& q : queries) {
    std::vector<char32_t> cps;
    REQUIRE(text::utf8_decode(q, cps));
    std::vector<std::vector<double>> inputs;
    auto push_row = [&](std::size_t idx) {
      const double* row = p.ssqe.embedding.data() + idx * p.ssqe.cfg.embed;
      inputs.emplace_back(row, row + p.ssqe.cfg.embed);
    };
    for (char32_t cp : cps) push_row(vocab.encode(cp));
    push_row(vocab.eoq_index());
    num::LstmTape tape;
    num::lstm_forward(p.ssqe.lstm, inputs, tape);
    const double* h = tape.top_h(inputs.size() - 1);
    session_inputs.emplace_back(h, h + p.ssqe.cfg.hidden);
  }
  num::LstmTape stape;
  num::lstm_forward(p.session_lstm, session_inputs, stape);
  std::vector<double> want(p.cfg.out_dim);
  num::affine_forward(p.head, stape.top_h(queries.size() - 1), want.data());

  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));

  std::vector<std::string> none;
  CHECK_THROWS_AS(smqe_encode(p, none, vocab), Error);
  std::vector<std::string> many(11, "q");
  CHECK_THROWS_AS(smqe_encode(p, many, vocab, 10), Error);
  CHECK_NOTHROW(smqe_encode(p, many, vocab, 11));
}

TEST_CASE("similarity is the cosine of encodings") {
  auto vocab = make_vocab({"abc", "xyz"}, 10);
  auto p = init_ssqe(micro_ssqe(), 4);
  CHECK(similarity(p, "abc", "abc", vocab) == doctest::Approx(1.0));
  const double s = similarity(p, "abc", "xyz", vocab);
  auto za = ssqe_encode(p, "abc", vocab);
  auto zb = ssqe_encode(p, "xyz", vocab);
  CHECK(s == doctest::Approx(num::cosine_similarity(za, zb)));
  CHECK(s < 1.0);
}

TEST_CASE("pair loss starts near ln(negatives+1) and gradchecks") {
  auto pairs = family_pairs();
  std::vector<std::string> strings;
  for (const auto& pr : pairs) {
    strings.push_back(pr.q);
    strings.push_back(pr.d);
  }
  auto vocab = make_vocab(strings, 24);
  auto p = init_ssqe(micro_ssqe(), 5);

  auto res = ssqe_pair_loss(p, std::span(pairs).subspan(0, 12), vocab, 10.0, 4, 77);
  // representations of a freshly seeded micro model are weakly correlated;
  // the 5-way cross entropy sits near ln 5
  CHECK(res.loss == doctest::Approx(std::log(5.0)).epsilon(0.35));

  // deterministic in the negative seed
  auto res2 = ssqe_pair_loss(p, std::span(pairs).subspan(0, 12), vocab, 10.0, 4, 77);
  CHECK(res.loss == res2.loss);
  auto res3 = ssqe_pair_loss(p, std::span(pairs).subspan(0, 12), vocab, 10.0, 4, 78);
  CHECK(res.loss != res3.loss);

  // finite differences over two parameter blocks (the full sweep lives in
  // the gradient acceptance gate)
  auto batch = std::span(pairs).subspan(0, 3);
  auto loss_fn = [&](std::span<const double>) {
    return ssqe_pair_loss(p, batch, vocab, 10.0, 2, 5).loss;
  };
  auto g = ssqe_pair_loss(p, batch, vocab, 10.0, 2, 5).grads;
  auto rep_head = num::grad_check(loss_fn, std::span<double>(p.head.w.v),
                                  std::span<const double>(g.head.w.v));
  CHECK(rep_head.max_rel_err < 1e-4);
  auto rep_emb = num::grad_check(loss_fn, std::span<double>(p.embedding.v),
                                 std::span<const double>(g.embedding.v));
  CHECK(rep_emb.max_rel_err < 1e-4);

  CHECK_THROWS_AS(ssqe_pair_loss(p, {}, vocab, 10.0, 4, 1), Error);
  CHECK_THROWS_AS(ssqe_pair_loss(p, batch, vocab, 10.0, 0, 1), Error);

  // a pool where every next query equals the positive cannot supply negatives
  std::vector<corpus::QueryPair> degenerate = {
      {"apple one", "apple two"}, {"brick six", "apple two"}, {"abc", "apple two"}};
  CHECK_THROWS_AS(ssqe_pair_loss(p, degenerate, vocab, 10.0, 1, 1), Error);
}

TEST_CASE("session loss freezes the first stage on request") {
  std::vector<corpus::Session> sessions(4);
  const std::vector<std::vector<std::string>> qs = {
      {"apple one", "apple two", "apple three"},
      {"brick nine", "brick eight", "brick seven"},
      {"apple two", "apple three", "apple four"},
      {"brick eight", "brick seven", "brick six"},
  };
  std::vector<std::string> strings;
  for (std::size_t i = 0; i < 4; ++i) {
    sessions[i].user = "u";
    sessions[i].queries = qs[i];
    sessions[i].timestamps = {0, 10, 20};
    for (const auto& q : qs[i]) strings.push_back(q);
  }
  auto vocab = make_vocab(strings, 24);
  auto first = init_ssqe(micro_ssqe(), 5);
  auto p = init_smqe(first, SmqeConfig{4, 1, 3}, 6);

  auto frozen = smqe_session_loss(p, sessions, vocab, 10.0, 2, 3, true);
  CHECK(frozen.loss > 0.0);
  for (double v : frozen.grads.ssqe.embedding.v) CHECK(v == 0.0);
  for (double v : frozen.grads.ssqe.head.w.v) CHECK(v == 0.0);

  auto open = smqe_session_loss(p, sessions, vocab, 10.0, 2, 3, false);
  CHECK(open.loss == doctest::Approx(frozen.loss)); // same forward pass
  double ssqe_grad_mass = 0.0;
  for (double v : open.grads.ssqe.embedding.v) ssqe_grad_mass += std::abs(v);
  CHECK(ssqe_grad_mass > 0.0);

  // spot gradient checks through both stages
  auto loss_fn = [&](std::span<const double>) {
    return smqe_session_loss(p, sessions, vocab, 10.0, 2, 3, false).loss;
  };
  auto rep_sess = num::grad_check(loss_fn, std::span<double>(p.session_lstm.layers[0].w_x.v),
                                  std::span<const double>(open.grads.session_lstm.layers[0].w_x.v));
  CHECK(rep_sess.max_rel_err < 1e-4);
  auto rep_first = num::grad_check(loss_fn, std::span<double>(p.ssqe.head.w.v),
                                   std::span<const double>(open.grads.ssqe.head.w.v));
  CHECK(rep_first.max_rel_err < 1e-4);

  std::vector<corpus::Session> short_one(1);
  short_one[0].user = "u";
  short_one[0].queries = {"apple one"};
  short_one[0].timestamps = {0};
  CHECK_THROWS_AS(smqe_session_loss(p, short_one, vocab, 10.0, 2, 3, true), Error);
  CHECK_THROWS_AS(smqe_session_loss(p, {}, vocab, 10.0, 2, 3, true), Error);
}

TEST_CASE("ssqe training learns a tiny corpus deterministically") {
  auto pairs = family_pairs();
  std::vector<std::string> strings;
  for (const auto& pr : pairs) {
    strings.push_back(pr.q);
    strings.push_back(pr.d);
  }
  auto vocab = make_vocab(strings, 24);

  auto cfg = SsqeConfig{24, 4, 8, 1, 4};
  TrainConfig tc;
  tc.batch = 8;
  tc.iterations = 150;
  tc.negatives = 2;
  tc.seed = 11;
  tc.val_every = 50;
  tc.val_items = pairs.size();

  const double before =
      dataset_pair_loss(init_ssqe(cfg, derive_seed(11, "ssqe-model")), pairs, vocab, 10.0, 2, 9);

  auto r1 = train_ssqe(pairs, pairs, vocab, cfg, tc);
  const double after = dataset_pair_loss(r1.params, pairs, vocab, 10.0, 2, 9);
  CHECK(after < before);
  CHECK(r1.best_val > 0.4); // far above the 1/3 chance floor
  CHECK(!r1.metrics.empty());

  auto r2 = train_ssqe(pairs, pairs, vocab, cfg, tc);
  CHECK(params_hash(r1.params) == params_hash(r2.params));
  CHECK(r1.best_val == r2.best_val);

  TrainConfig other = tc;
  other.seed = 12;
  auto r3 = train_ssqe(pairs, pairs, vocab, cfg, other);
  CHECK(params_hash(r1.params) != params_hash(r3.params));

  // warm start from a previous model is accepted and keeps training
  auto r4 = train_ssqe(pairs, pairs, vocab, cfg, tc, &r1.params);
  CHECK(params_hash(r4.params) != 0);

  TrainConfig bad = tc;
  bad.iterations = 0;
  CHECK_THROWS_AS(train_ssqe(pairs, pairs, vocab, cfg, bad), Error);
  bad = tc;
  bad.batch = pairs.size() + 1;
  CHECK_THROWS_AS(train_ssqe(pairs, pairs, vocab, cfg, bad), Error);
  bad = tc;
  bad.batch = 2;
  bad.negatives = 4; // needs 4 distinct other positions in the batch
  CHECK_THROWS_AS(train_ssqe(pairs, pairs, vocab, cfg, bad), Error);

  auto wrong_model = init_ssqe(SsqeConfig{24, 4, 6, 1, 4}, 1);
  CHECK_THROWS_AS(train_ssqe(pairs, pairs, vocab, cfg, tc, &wrong_model), Error);
}

TEST_CASE("smqe training keeps a frozen first stage intact") {
  std::vector<corpus::Session> sessions;
  const std::vector<std::string> fam_a = {"apple one", "apple two", "apple three",
                                          "apple four"};
  const std::vector<std::string> fam_b = {"brick nine", "brick eight", "brick seven",
                                          "brick six"};
  for (int rep = 0; rep < 10; ++rep) {
    for (const auto& fam : {fam_a, fam_b}) {
      corpus::Session s;
      s.user = "u" + std::to_string(rep);
      s.queries = fam;
      s.timestamps = {0, 10, 20, 30};
      sessions.push_back(std::move(s));
    }
  }
  std::vector<std::string> strings(fam_a);
  strings.insert(strings.end(), fam_b.begin(), fam_b.end());
  auto vocab = make_vocab(strings, 24);
  auto first = init_ssqe(SsqeConfig{24, 4, 8, 1, 4}, 3);

  TrainConfig tc;
  tc.batch = 4;
  tc.iterations = 40;
  tc.negatives = 2;
  tc.seed = 21;
  tc.val_every = 0;
  tc.val_items = sessions.size();
  tc.freeze_ssqe = true;

  auto r = train_smqe(sessions, sessions, first, vocab, SmqeConfig{6, 1, 4}, tc);
  CHECK(params_hash(r.params.ssqe) == params_hash(first));
  CHECK(r.best_val >= 0.0);

  auto r2 = train_smqe(sessions, sessions, first, vocab, SmqeConfig{6, 1, 4}, tc);
  CHECK(params_hash(r.params) == params_hash(r2.params));

  // with the first stage open, its parameters move
  TrainConfig open = tc;
  open.freeze_ssqe = false;
  auto r3 = train_smqe(sessions, sessions, first, vocab, SmqeConfig{6, 1, 4}, open);
  CHECK(params_hash(r3.params.ssqe) != params_hash(first));
}

TEST_CASE("next_query_accuracy oracle behaviors") {
  auto p = init_ssqe(micro_ssqe(), 2);

  // pairs whose next query equals the query itself: cosine 1.0 beats any
  // other candidate, so even an untrained model scores perfectly
  std::vector<corpus::QueryPair> echo;
  std::vector<std::string> strings;
  for (int i = 0; i < 30; ++i) {
    std::string s = "query " + std::to_string(i);
    echo.push_back({s, s});
    strings.push_back(s);
  }
  auto vocab = make_vocab(strings, 24);
  CHECK(next_query_accuracy(p, echo, vocab, 5, 3) == doctest::Approx(1.0));

  // unrelated random strings: the positive is exchangeable with the
  // negatives, accuracy sits at 1/n_choices
  Rng rng(99);
  std::vector<corpus::QueryPair> noise;
  std::vector<std::string> noise_strings;
  for (int i = 0; i < 400; ++i) {
    std::string a, b;
    for (int k = 0; k < 6; ++k) a.push_back(static_cast<char>('a' + rng.below(20)));
    for (int k = 0; k < 6; ++k) b.push_back(static_cast<char>('a' + rng.below(20)));
    b += std::to_string(i); // keep positives distinct
    noise.push_back({a, b});
    noise_strings.push_back(a);
    noise_strings.push_back(b);
  }
  auto nvocab = make_vocab(noise_strings, 40);
  const double acc = next_query_accuracy(p, noise, nvocab, 5, 12);
  CHECK(acc == doctest::Approx(0.2).epsilon(0.45)); // 0.11 .. 0.29

  CHECK(next_query_accuracy(p, noise, nvocab, 5, 12) == acc);

  CHECK_THROWS_AS(next_query_accuracy(p, {}, nvocab, 5, 1), Error);
  CHECK_THROWS_AS(next_query_accuracy(p, echo, vocab, 1, 1), Error);
  std::vector<corpus::QueryPair> tiny(echo.begin(), echo.begin() + 3);
  CHECK_THROWS_AS(next_query_accuracy(p, tiny, vocab, 5, 1), Error);
}

TEST_CASE("checkpoints round-trip and validate") {
  TempDir dir("ckpt");
  auto vocab = make_vocab({"abc def", "ghi"}, 12);
  auto p = init_ssqe(micro_ssqe(), 13);
  const auto path = dir.file("model.ckpt");

  save_ssqe(p, path, vocab.hash());
  auto back = load_ssqe(path, vocab.hash());
  CHECK(params_hash(back) == params_hash(p));
  CHECK(back.cfg.hidden == p.cfg.hidden);

  auto info = inspect_checkpoint(path);
  CHECK(info.kind == "ssqe");
  CHECK(info.vocab_hash == vocab.hash());
  CHECK(info.format_version >= 1);

  // a different vocabulary must be rejected, unchecked load must pass
  CHECK_THROWS_AS(load_ssqe(path, vocab.hash() + 1), Error);
  CHECK_NOTHROW(load_ssqe(path));

  // kind confusion
  CHECK_THROWS_AS(load_smqe(path), Error);

  auto smqe = init_smqe(p, SmqeConfig{5, 1, 3}, 14);
  const auto spath = dir.file("session.ckpt");
  save_smqe(smqe, spath, vocab.hash());
  auto sback = load_smqe(spath, vocab.hash());
  CHECK(params_hash(sback) == params_hash(smqe));
  CHECK(inspect_checkpoint(spath).kind == "smqe");

  // corruption: bad magic, truncation, trailing garbage
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::string bad = bytes;
    bad[0] = 'X';
    io::write_file(dir.file("bad_magic.ckpt"), bad);
    io::write_file(dir.file("truncated.ckpt"), bytes.substr(0, bytes.size() / 2));
    io::write_file(dir.file("trailing.ckpt"), bytes + "extra");
  }
  CHECK_THROWS_AS(load_ssqe(dir.file("bad_magic.ckpt")), Error);
  CHECK_THROWS_AS(load_ssqe(dir.file("truncated.ckpt")), Error);
  CHECK_THROWS_AS(load_ssqe(dir.file("trailing.ckpt")), Error);
  CHECK_THROWS_AS(load_ssqe(dir.file("missing.ckpt")), Error);
}

TEST_CASE("metrics serialize as one json object per line") {
  std::vector<MetricsRow> rows = {{200, 1.5, 0.75}, {400, 1.2, -1.0}};
  auto s = metrics_jsonl(rows);
  CHECK(std::count(s.begin(), s.end(), '\n') == 2);
  CHECK(s.find("\"step\":200") != std::string::npos);
  CHECK(s.find("0.75") != std::string::npos);
  CHECK(s.find("null") != std::string::npos); // skipped validation
}
